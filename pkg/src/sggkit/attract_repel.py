"""Reference-bank contrastive loss over relation embeddings.

One running reference vector is kept per predicate category. After every
batch the reference moves toward that batch's positives and away from its
sampled negatives, weighted by how many embeddings it has absorbed so far:

    r_m <- (r_m * count_m + sum(pos) - sum(neg)) / (count_m + n_pos + n_neg)

Negatives are drawn uniformly without replacement from the batch embeddings
of other categories, matched one-to-one to the positive count (capped by
pool size). Reference updates never enter the tape; the loss treats the
references as constants and pulls gradients only through the embeddings:

    loss = sum_pos (1 - cos(r_m, e)) + sum_neg cos(r_m, e)

A `skip_category` (the no-relation label in training) takes no part at all:
it gets no reference and its rows never enter another category's negative
pool, so the dominant background class can neither drag every reference
toward one point nor flood the repel term. Pairs where either side has
exactly zero norm are skipped and counted, so a freshly zero-initialized
bank contributes no loss on its first batch.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Matrix, add, div, gather_rows, mul, pow_const, row_sum, sum_all

Negatives = dict[int, np.ndarray]


class ReferenceBank:
    """Per-category reference vectors with cumulative absorption counts."""

    def __init__(self, n_categories: int, dim: int, seed=0):
        if n_categories < 1 or dim < 1:
            raise ValueError(f"bank needs positive sizes, got {n_categories} x {dim}")
        self.refs = np.zeros((n_categories, dim))
        self.counts = np.zeros(n_categories)
        self.rng = np.random.default_rng(seed)
        self.skipped_pairs = 0

    @property
    def n_categories(self) -> int:
        return self.refs.shape[0]

    @property
    def dim(self) -> int:
        return self.refs.shape[1]

    def state(self) -> dict:
        return {
            "refs": self.refs.tolist(),
            "counts": self.counts.tolist(),
            "rng_state": self.rng.bit_generator.state,
            "skipped_pairs": self.skipped_pairs,
        }

    @classmethod
    def from_state(cls, state: dict) -> "ReferenceBank":
        refs = np.asarray(state["refs"], dtype=np.float64)
        bank = cls(refs.shape[0], refs.shape[1])
        bank.refs = refs
        bank.counts = np.asarray(state["counts"], dtype=np.float64)
        bank.rng.bit_generator.state = state["rng_state"]
        bank.skipped_pairs = int(state["skipped_pairs"])
        return bank


def _as_array(embeddings) -> np.ndarray:
    return embeddings.data if isinstance(embeddings, Matrix) else np.asarray(embeddings, dtype=np.float64)


def _check_labels(bank: ReferenceBank, emb: np.ndarray, labels: np.ndarray) -> None:
    if labels.ndim != 1 or labels.shape[0] != emb.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match {emb.shape[0]} embeddings")
    if emb.shape[1] != bank.dim:
        raise ValueError(f"embedding width {emb.shape[1]} does not match bank width {bank.dim}")
    if labels.size and (labels.min() < 0 or labels.max() >= bank.n_categories):
        raise ValueError(
            f"label out of range: bank has categories 0..{bank.n_categories - 1}, "
            f"got {labels.min()}..{labels.max()}"
        )


def _clustered_categories(labels: np.ndarray, skip_category) -> list[int]:
    present = sorted(set(labels.tolist()))
    return [m for m in present if m != skip_category]


def sample_negatives(bank: ReferenceBank, labels, skip_category=None) -> Negatives:
    """For each clustered category, draw as many negatives as it has positives.

    Sampling is uniform without replacement from the batch rows of the other
    clustered categories (skip-category rows are excluded from every pool,
    not just from having a reference), capped by the pool size, consuming the
    bank's generator in ascending category order so runs are reproducible.
    """
    labels = np.asarray(labels, dtype=np.intp)
    out: Negatives = {}
    for m in _clustered_categories(labels, skip_category):
        pos = np.flatnonzero(labels == m)
        pool = np.flatnonzero((labels != m) & (labels != skip_category))
        k = min(pos.size, pool.size)
        out[m] = bank.rng.choice(pool, size=k, replace=False) if k else np.empty(0, dtype=np.intp)
    return out


def update_references(
    bank: ReferenceBank, embeddings, labels, negatives: Negatives | None = None, skip_category=None
) -> ReferenceBank:
    """Absorb one batch into the bank (off-tape; raw values only)."""
    emb = _as_array(embeddings)
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(bank, emb, labels)
    if negatives is None:
        negatives = sample_negatives(bank, labels, skip_category=skip_category)
    for m in _clustered_categories(labels, skip_category):
        pos = np.flatnonzero(labels == m)
        neg = np.asarray(negatives.get(m, np.empty(0, dtype=np.intp)), dtype=np.intp)
        total = bank.counts[m] + pos.size + neg.size
        moved = bank.refs[m] * bank.counts[m] + emb[pos].sum(axis=0) - emb[neg].sum(axis=0)
        bank.refs[m] = moved / total
        bank.counts[m] = total
    return bank


def attract_repel_loss(
    bank: ReferenceBank, embeddings: Matrix, labels, negatives: Negatives, skip_category=None
) -> Matrix:
    """Differentiable scalar loss; references are constants, zero norms skip."""
    emb = embeddings.data
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(bank, emb, labels)
    ref_norms = np.sqrt((bank.refs ** 2).sum(axis=1))
    emb_norms = np.sqrt((emb ** 2).sum(axis=1))

    rows: list[int] = []
    refs: list[np.ndarray] = []
    signs: list[float] = []  # -1 attract, +1 repel
    n_attract = 0
    for m in _clustered_categories(labels, skip_category):
        neg = np.asarray(negatives.get(m, np.empty(0, dtype=np.intp)), dtype=np.intp)
        for i in np.flatnonzero(labels == m):
            if ref_norms[m] == 0.0 or emb_norms[i] == 0.0:
                bank.skipped_pairs += 1
                continue
            rows.append(int(i))
            refs.append(bank.refs[m])
            signs.append(-1.0)
            n_attract += 1
        for j in neg:
            if ref_norms[m] == 0.0 or emb_norms[j] == 0.0:
                bank.skipped_pairs += 1
                continue
            rows.append(int(j))
            refs.append(bank.refs[m])
            signs.append(1.0)
    if not rows:
        return Matrix([[0.0]])

    e = gather_rows(embeddings, rows)
    r = Matrix(np.stack(refs))
    r_norm = Matrix(np.sqrt((r.data ** 2).sum(axis=1, keepdims=True)))
    dots = row_sum(mul(e, r))
    e_norm = pow_const(row_sum(mul(e, e)), 0.5)
    cosines = div(dots, mul(e_norm, r_norm))
    weighted = mul(cosines, Matrix(np.array(signs).reshape(-1, 1)))
    # sum_pos (1 - cos) + sum_neg cos  =  n_attract - sum_pos cos + sum_neg cos
    return add(sum_all(weighted), Matrix([[float(n_attract)]]))


def cluster_stats(embeddings, labels) -> tuple[float, float]:
    """Mean cosine over same-label pairs and over different-label pairs."""
    emb = _as_array(embeddings)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != emb.shape[0]:
        raise ValueError(f"labels shape {labels.shape} does not match {emb.shape[0]} embeddings")
    if len(set(labels.tolist())) < 2:
        raise ValueError("cluster_stats needs at least two categories")
    norms = np.sqrt((emb ** 2).sum(axis=1, keepdims=True))
    if (norms == 0.0).any():
        raise ValueError("cluster_stats: zero-norm embedding has no cosine")
    unit = emb / norms
    cos = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(cos, dtype=bool), k=1)
    intra_mask = same & upper
    inter_mask = ~same & upper
    if not intra_mask.any():
        raise ValueError("cluster_stats: no same-category pair present")
    return float(cos[intra_mask].mean()), float(cos[inter_mask].mean())
