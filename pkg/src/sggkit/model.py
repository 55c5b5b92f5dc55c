"""End-to-end relation-graph model over detected entity proposals.

Pipeline per scene: proposal features are mapped to node vectors, every
ordered node pair becomes a candidate edge whose representation is built
from the (subject, object, union) instance triple by local attention and
a direction-aware fusion, nodes and edges then exchange messages over the
scene's block adjacency, and two linear heads read off entity and
predicate distributions.

Losses: per-node and per-edge cross-entropy plus the reference-bank
cosine term on post-propagation edge embeddings. Training is plain SGD
with momentum and weight decay, one scene per step, deterministic given
the config seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    Matrix,
    NumericError,
    Tape,
    add,
    gather_rows,
    linear_map,
    log_softmax_rows,
    mul,
    scale,
    softmax_rows,
    sum_all,
    uniform_init,
)
from .attract_repel import (
    Negatives,
    ReferenceBank,
    attract_repel_loss,
    sample_negatives,
    update_references,
)
from .data import PREDICATE_NO_RELATION, FeatureParams, SceneRecord
from .fusion import VARIANTS as FUSION_VARIANTS
from .fusion import encode_edges, init_fusion_params
from .local_attention import LihParams, init_lih_params, lih_forward_batch
from .metrics import (
    GroundTruthGraph,
    corpus_pairwise_recall_at_k,
    corpus_recall_at_k,
    mean_recall_at_k,
    ranked_from_scores,
)
from .propagation import (
    GraphState,
    build_adjacency,
    init_gat_params,
    init_gcn_params,
    init_gih_params,
    propagate,
)

PROPAGATION_VARIANTS = ("gih", "gcn", "gat", "none")

# rng stream tags
_STREAM_PARAMS = 23
_STREAM_BANK = 29


@dataclass
class EntityProposal:
    """One detected entity: appearance vector, unit box, class logits."""

    appearance: np.ndarray
    box: np.ndarray  # x1, y1, x2, y2 in [0, 1]
    class_logits: np.ndarray

    def validate(self) -> None:
        if np.asarray(self.appearance).ndim != 1 or np.asarray(self.class_logits).ndim != 1:
            raise ValueError("appearance and class_logits must be 1-D vectors")
        box = np.asarray(self.box, dtype=float)
        if box.shape != (4,):
            raise ValueError(f"box must have 4 coordinates, got shape {box.shape}")
        x1, y1, x2, y2 = box
        if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
            raise ValueError(f"box {box.tolist()} is not an ordered unit box")


@dataclass
class ModelConfig:
    d_appearance: int = 12
    d_node: int = 32
    d_edge: int = 32
    d_attention: int | None = None
    n_entity_categories: int = 33
    n_predicate_categories: int = 7
    fusion: str = "parallel"
    fusion_hidden: int | None = None
    use_lih: bool = True
    gih_variant: str = "gih"
    gih_layers: int = 4
    w_entity: float = 1.0
    w_predicate: float = 1.0
    w_ar: float = 1.0
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    seed: int = 0

    def validate(self) -> None:
        if min(self.d_appearance, self.d_node, self.d_edge) < 1:
            raise ValueError("widths must be positive")
        if self.n_entity_categories < 2 or self.n_predicate_categories < 2:
            raise ValueError("need at least two categories on both vocabularies")
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}, expected one of {FUSION_VARIANTS}")
        if self.gih_variant not in PROPAGATION_VARIANTS:
            raise ValueError(
                f"unknown propagation variant {self.gih_variant!r}, expected one of {PROPAGATION_VARIANTS}"
            )
        if self.gih_variant == "gih" and self.d_node != self.d_edge:
            raise ValueError(
                f"node/edge message passing stacks both feature sets, widths must match "
                f"(d_node={self.d_node}, d_edge={self.d_edge})"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("learning_rate, weight_decay and epochs must be nonnegative")
        if min(self.w_entity, self.w_predicate, self.w_ar) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PreparedScene:
    """A scene lowered to the dense arrays the model consumes.

    Candidate edges are all ordered node pairs; annotated pairs carry
    their predicate label and everything else the no-relation label 0.
    Union inputs concatenate the two appearances in node-index order with
    the covering box, so both directions of a pair share one union row.
    """

    scene_id: str
    record: SceneRecord
    node_inputs: np.ndarray  # [N, d_appearance + 4 + n_entity_categories]
    union_inputs: np.ndarray  # [M, 2 * d_appearance + 4]
    edge_index: list[tuple[int, int]]
    subject_rows: np.ndarray
    object_rows: np.ndarray
    node_labels: np.ndarray
    edge_labels: np.ndarray
    node_onehot: np.ndarray
    edge_onehot: np.ndarray
    adjacency: object

    @property
    def n_nodes(self) -> int:
        return self.node_inputs.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edge_index)


def proposals_from_record(record: SceneRecord, fp: FeatureParams) -> list[EntityProposal]:
    offset = fp.scene_offset(record.scene_id)
    out = []
    for node in record.nodes:
        prop = EntityProposal(fp.appearance(node) + offset, np.asarray(node.box, dtype=float),
                              fp.class_logits(node))
        prop.validate()
        out.append(prop)
    return out


def prepare_scene(
    record: SceneRecord,
    fp: FeatureParams,
    candidate_edges: list[tuple[int, int]] | None = None,
) -> PreparedScene:
    record.validate()
    for node in record.nodes:
        if node.label >= fp.n_entity_categories:
            raise ValueError(
                f"scene {record.scene_id}: entity label {node.label} outside the "
                f"{fp.n_entity_categories}-category vocabulary"
            )
    for e in record.edges:
        if e.predicate >= fp.n_predicate_categories:
            raise ValueError(
                f"scene {record.scene_id}: predicate label {e.predicate} outside the "
                f"{fp.n_predicate_categories}-category vocabulary"
            )
    proposals = proposals_from_record(record, fp)
    n = len(proposals)
    node_inputs = np.stack([np.concatenate([p.appearance, p.box, p.class_logits]) for p in proposals])
    ids = [node.id for node in record.nodes]
    row_of = {node_id: row for row, node_id in enumerate(ids)}
    if candidate_edges is None:
        edge_index = [(ids[i], ids[j]) for i in range(n) for j in range(n) if i != j]
    else:
        edge_index = [(int(s), int(o)) for s, o in candidate_edges]
        if len(set(edge_index)) != len(edge_index):
            raise ValueError(f"scene {record.scene_id}: duplicate candidate edges")
        for s, o in edge_index:
            if s not in row_of or o not in row_of or s == o:
                raise ValueError(f"scene {record.scene_id}: invalid candidate edge ({s}, {o})")
    annotated = {(e.subject, e.object): e.predicate for e in record.edges}
    union_rows = []
    for s, o in edge_index:
        a, b = proposals[row_of[s]], proposals[row_of[o]]
        if o < s:
            a, b = b, a
        cover = np.array([
            min(a.box[0], b.box[0]), min(a.box[1], b.box[1]),
            max(a.box[2], b.box[2]), max(a.box[3], b.box[3]),
        ])
        union_rows.append(np.concatenate([a.appearance, b.appearance, cover]))
    union_inputs = np.stack(union_rows) if union_rows else np.zeros((0, 2 * fp.d_appearance + 4))
    node_labels = np.array([node.label for node in record.nodes], dtype=np.int64)
    edge_labels = np.array([annotated.get(pair, 0) for pair in edge_index], dtype=np.int64)
    node_onehot = np.zeros((n, fp.n_entity_categories))
    node_onehot[np.arange(n), node_labels] = 1.0
    edge_onehot = np.zeros((len(edge_index), fp.n_predicate_categories))
    if edge_index:
        edge_onehot[np.arange(len(edge_index)), edge_labels] = 1.0
    adjacency = build_adjacency(n, [(row_of[s], row_of[o]) for s, o in edge_index])
    return PreparedScene(
        scene_id=record.scene_id,
        record=record,
        node_inputs=node_inputs,
        union_inputs=union_inputs,
        edge_index=edge_index,
        subject_rows=np.array([row_of[s] for s, _ in edge_index], dtype=np.int64),
        object_rows=np.array([row_of[o] for _, o in edge_index], dtype=np.int64),
        node_labels=node_labels,
        edge_labels=edge_labels,
        node_onehot=node_onehot,
        edge_onehot=edge_onehot,
        adjacency=adjacency,
    )


@dataclass
class ForwardResult:
    node_logits: Matrix
    edge_logits: Matrix
    node_probs: Matrix
    edge_probs: Matrix
    edge_embeddings: Matrix  # post-propagation edge features, pre-head
    edge_index: list[tuple[int, int]]


class Model:
    """Holds all learnable matrices in a flat named dictionary."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng([_STREAM_PARAMS, config.seed])
        d, d_e = config.d_node, config.d_edge
        in_node = config.d_appearance + 4 + config.n_entity_categories
        in_union = 2 * config.d_appearance + 4
        self.node_map = (uniform_init(rng, in_node, d), uniform_init(rng, 1, d, fan_in=in_node))
        self.union_map = (uniform_init(rng, in_union, d), uniform_init(rng, 1, d, fan_in=in_union))
        self.lih: LihParams | None = None
        if config.use_lih:
            self.lih = init_lih_params(rng, d, config.d_attention)
        self.fusion = init_fusion_params(rng, config.fusion, d, d_e, hidden=config.fusion_hidden)
        self.prop = None
        if config.gih_variant == "gih":
            self.prop = init_gih_params(rng, d, config.gih_layers)
        elif config.gih_variant == "gcn":
            self.prop = init_gcn_params(rng, d, config.gih_layers)
        elif config.gih_variant == "gat":
            self.prop = init_gat_params(rng, d, config.gih_layers)
        self.entity_head = (uniform_init(rng, d, config.n_entity_categories), uniform_init(rng, 1, config.n_entity_categories, fan_in=d))
        self.predicate_head = (uniform_init(rng, d_e, config.n_predicate_categories), uniform_init(rng, 1, config.n_predicate_categories, fan_in=d_e))
        self.params = self._collect_params()

    def _collect_params(self) -> dict[str, Matrix]:
        params: dict[str, Matrix] = {
            "node_map.w": self.node_map[0],
            "node_map.b": self.node_map[1],
            "union_map.w": self.union_map[0],
            "union_map.b": self.union_map[1],
        }
        if self.lih is not None:
            params.update({
                "lih.w_q": self.lih.w_q, "lih.w_k": self.lih.w_k,
                "lih.w_v": self.lih.w_v, "lih.w_f": self.lih.w_f,
            })
        params.update(self.fusion.psi.named("fusion.psi"))
        if self.fusion.pre is not None:
            params.update(self.fusion.pre.named("fusion.pre"))
        if self.config.gih_variant in ("gih", "gcn"):
            for i, w in enumerate(self.prop.weights):
                params[f"prop.w{i}"] = w
        elif self.config.gih_variant == "gat":
            for i, (w, a_src, a_dst) in enumerate(self.prop.layers):
                params[f"prop.w{i}"] = w
                params[f"prop.a_src{i}"] = a_src
                params[f"prop.a_dst{i}"] = a_dst
        params.update({
            "entity_head.w": self.entity_head[0], "entity_head.b": self.entity_head[1],
            "predicate_head.w": self.predicate_head[0], "predicate_head.b": self.predicate_head[1],
        })
        return params

    def forward(self, prep: PreparedScene) -> ForwardResult:
        cfg = self.config
        nodes0 = linear_map(Matrix(prep.node_inputs), *self.node_map)
        m = prep.n_edges
        if m > 0:
            union0 = linear_map(Matrix(prep.union_inputs), *self.union_map)
            z_s = gather_rows(nodes0, prep.subject_rows)
            z_o = gather_rows(nodes0, prep.object_rows)
            if self.lih is not None:
                z_s, z_o, z_u = lih_forward_batch(z_s, z_o, union0, self.lih)
            else:
                z_u = union0
            edges0 = encode_edges(cfg.fusion, z_s, z_o, z_u, self.fusion)
        else:
            edges0 = Matrix(np.zeros((0, cfg.d_edge)))
        if cfg.gih_variant != "none":
            state = propagate(cfg.gih_variant, GraphState(nodes0, edges0), prep.adjacency, self.prop)
            nodes1, edges1 = state.node_feats, state.edge_feats
        else:
            nodes1, edges1 = nodes0, edges0
        node_logits = linear_map(nodes1, *self.entity_head)
        node_probs = softmax_rows(node_logits)
        if m > 0:
            edge_logits = linear_map(edges1, *self.predicate_head)
            edge_probs = softmax_rows(edge_logits)
        else:
            edge_logits = Matrix(np.zeros((0, cfg.n_predicate_categories)))
            edge_probs = Matrix(np.zeros((0, cfg.n_predicate_categories)))
        return ForwardResult(node_logits, edge_logits, node_probs, edge_probs, edges1, prep.edge_index)


def _cross_entropy(logits: Matrix, onehot: np.ndarray) -> Matrix:
    lp = log_softmax_rows(logits)
    picked = mul(lp, Matrix(onehot))
    return scale(sum_all(picked), -1.0 / logits.rows)


def total_loss(
    out: ForwardResult,
    prep: PreparedScene,
    bank: ReferenceBank,
    config: ModelConfig,
    negatives: Negatives | None = None,
) -> tuple[Matrix, dict[str, float]]:
    """Weighted sum of both cross-entropies and the attract/repel term.

    The attract/repel term clusters annotated relation edges; no-relation
    rows never get a reference of their own (they only serve as sampled
    negatives), so the background class cannot pull most of the batch toward
    a single reference. The bank is read, never written; callers update it
    after the backward pass. Negatives default to none, which drops the
    repel half.
    """
    if prep.node_labels.min(initial=0) < 0 or prep.node_labels.max(initial=0) >= config.n_entity_categories:
        raise ValueError(f"scene {prep.scene_id}: entity label outside [0, {config.n_entity_categories})")
    if prep.n_edges and prep.edge_labels.max(initial=0) >= config.n_predicate_categories:
        raise ValueError(f"scene {prep.scene_id}: predicate label outside [0, {config.n_predicate_categories})")
    loss_ent = _cross_entropy(out.node_logits, prep.node_onehot)
    total = scale(loss_ent, config.w_entity)
    parts = {"loss_entity": loss_ent.item(), "loss_predicate": 0.0, "loss_attract_repel": 0.0}
    if prep.n_edges:
        loss_pred = _cross_entropy(out.edge_logits, prep.edge_onehot)
        total = add(total, scale(loss_pred, config.w_predicate))
        parts["loss_predicate"] = loss_pred.item()
        if config.w_ar != 0.0 and relation_rows(prep.edge_labels).size:
            loss_ar = attract_repel_loss(
                bank, out.edge_embeddings, prep.edge_labels, negatives or {},
                skip_category=PREDICATE_NO_RELATION,
            )
            total = add(total, scale(loss_ar, config.w_ar))
            parts["loss_attract_repel"] = loss_ar.item()
    return total, parts


def relation_rows(edge_labels: np.ndarray) -> np.ndarray:
    """Indices of candidate edges carrying an annotated relation."""
    return np.flatnonzero(np.asarray(edge_labels) != PREDICATE_NO_RELATION)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    loss_entity: float
    loss_predicate: float
    loss_attract_repel: float
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def loss_total(self) -> float:
        return self.loss_entity + self.loss_predicate + self.loss_attract_repel


@dataclass
class TrainResult:
    model: "Model"
    bank: ReferenceBank
    log: list[EpochLog]


def train(
    config: ModelConfig,
    train_records: list[SceneRecord],
    fp: FeatureParams,
    eval_records: list[SceneRecord] | None = None,
    metrics_every: int = 0,
    ks_recall: tuple[int, ...] = (4,),
    ks_pair: tuple[int, ...] = (2,),
) -> TrainResult:
    """SGD over scenes in corpus order, one scene per step.

    The reference bank absorbs each scene's edge embeddings after that
    scene's backward pass. With metrics_every > 0 and eval records given,
    held-out metrics are logged every that many epochs (and on the last).
    """
    config.validate()
    if not train_records:
        raise ValueError("training needs at least one scene")
    _check_vocabulary(config, fp)
    model = Model(config)
    bank = ReferenceBank(config.n_predicate_categories, config.d_edge, seed=[_STREAM_BANK, config.seed])
    preps = [prepare_scene(r, fp) for r in train_records]
    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    log: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        for prep in preps:
            use_ar = config.w_ar != 0.0 and relation_rows(prep.edge_labels).size > 0
            try:
                with Tape() as tape:
                    out = model.forward(prep)
                    negatives = (
                        sample_negatives(bank, prep.edge_labels, skip_category=PREDICATE_NO_RELATION)
                        if use_ar else None
                    )
                    loss, parts = total_loss(out, prep, bank, config, negatives)
                    tape.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, scene {prep.scene_id}: {exc}") from exc
            if use_ar:
                update_references(bank, out.edge_embeddings.data, prep.edge_labels, negatives,
                                  skip_category=PREDICATE_NO_RELATION)
            for name, p in model.params.items():
                if p.grad is not None:
                    step = p.grad + config.weight_decay * p.data
                    velocity[name] = config.momentum * velocity[name] + step
                    p.data = p.data - config.learning_rate * velocity[name]
                    p.grad = None
            sums += (parts["loss_entity"], parts["loss_predicate"], parts["loss_attract_repel"])
        means = sums / len(preps)
        entry = EpochLog(epoch, means[0], means[1], means[2])
        due = metrics_every > 0 and (epoch % metrics_every == 0 or epoch == config.epochs)
        if due and eval_records:
            entry.metrics = evaluate(model, eval_records, fp, ks_recall, ks_pair)
        log.append(entry)
    return TrainResult(model, bank, log)


def _check_vocabulary(config: ModelConfig, fp: FeatureParams) -> None:
    pairs = (
        ("entity categories", config.n_entity_categories, fp.n_entity_categories),
        ("predicate categories", config.n_predicate_categories, fp.n_predicate_categories),
        ("appearance width", config.d_appearance, fp.d_appearance),
    )
    for what, have, want in pairs:
        if have != want:
            raise ValueError(f"model expects {have} {what} but the corpus provides {want}")


# ---------------------------------------------------------------------------
# evaluation


def predict_scene(model: Model, prep: PreparedScene, graph_constraint: bool = True):
    """Ranked triplets for one scene (no gradients recorded)."""
    out = model.forward(prep)
    return ranked_from_scores(out.edge_index, out.edge_probs.data, graph_constraint)


def evaluate(
    model: Model,
    records: list[SceneRecord],
    fp: FeatureParams,
    ks_recall: tuple[int, ...] = (20, 50, 100),
    ks_pair: tuple[int, ...] = (2, 4, 8, 16),
    graph_constraint: bool = True,
) -> dict[str, float]:
    """Corpus metrics keyed like "R@4", "mR@4", "pR@2"."""
    if not records:
        raise ValueError("evaluation needs at least one scene")
    _check_vocabulary(model.config, fp)
    preds, gts = [], []
    for record in records:
        prep = prepare_scene(record, fp)
        preds.append(predict_scene(model, prep, graph_constraint))
        gts.append(GroundTruthGraph.from_scene(record))
    out: dict[str, float] = {}
    for k in ks_recall:
        out[f"R@{k}"] = corpus_recall_at_k(preds, gts, k)
        out[f"mR@{k}"] = mean_recall_at_k(preds, gts, k)
    for k in ks_pair:
        out[f"pR@{k}"] = corpus_pairwise_recall_at_k(preds, gts, k)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, bank: ReferenceBank) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: p.data.tolist() for name, p in model.params.items()},
        "bank": bank.state(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Model, ReferenceBank]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    model = Model(ModelConfig.from_dict(payload["config"]))
    saved = payload["params"]
    if set(saved) != set(model.params):
        raise ValueError("checkpoint parameter names do not match the configuration")
    for name, p in model.params.items():
        arr = np.asarray(saved[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}, expected {p.data.shape}")
        p.data = arr
    bank = ReferenceBank.from_state(payload["bank"])
    if bank.n_categories != model.config.n_predicate_categories or bank.dim != model.config.d_edge:
        raise ValueError("checkpoint bank size does not match the configuration")
    return model, bank
