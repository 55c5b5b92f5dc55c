"""Direction-sensitive fusion of subject, object and union features into one
edge representation, plus the ablation variants it is compared against.

The full encoder applies one shared MLP to three fixed arrangements of the
inputs and sums the results:

    e = psi([s||o||u]) + psi([s||u||o]) + psi([u||s||o])

Only these three of the six possible orderings are used; they are chosen so
that swapping subject and object always produces a different multiset of
arrangements, which keeps the sum direction sensitive while the shared MLP
keeps the parameter count flat. All functions below operate row-wise, so a
batch of M relations can be encoded by passing M-row matrices.

Variants:
    union       psi_u(u)              direction blind by construction
    concat      psi([s||o||u])        single arrangement
    sequential  psi([pre([s||o])||u]) subject/object fused first
    parallel    the full three-arrangement sum
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .autodiff import Matrix, ShapeError, add, concat_cols, linear_map, relu, uniform_init

VARIANTS = ("union", "concat", "sequential", "parallel")

# Arrangements of (subject, object, union) fed to the shared map, in the
# order their outputs are summed.
CONSTRAINED_ORDERS = (("s", "o", "u"), ("s", "u", "o"), ("u", "s", "o"))


def swap_subject_object(order: tuple[str, str, str]) -> tuple[str, str, str]:
    """Image of an arrangement under exchanging the roles of s and o."""
    flip = {"s": "o", "o": "s", "u": "u"}
    return tuple(flip[x] for x in order)


def all_orders() -> list[tuple[str, str, str]]:
    return [tuple(p) for p in permutations(("s", "o", "u"))]


class Mlp:
    """A stack of affine layers with relu between them (none after the last)."""

    def __init__(self, layers: list[tuple[Matrix, Matrix]]):
        self.layers = layers

    def __call__(self, x: Matrix) -> Matrix:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = linear_map(h, w, b)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].rows

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].cols

    def named(self, prefix: str) -> dict[str, Matrix]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def init_mlp(rng: np.random.Generator, dims: list[int]) -> Mlp:
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append((uniform_init(rng, d_in, d_out), uniform_init(rng, 1, d_out, fan_in=d_in)))
    return Mlp(layers)


@dataclass
class FusionParams:
    """Shared fusion map for one variant; sequential carries an extra stage."""

    variant: str
    psi: Mlp
    pre: Mlp | None = None  # sequential only: fuses [s||o] before the union


def init_fusion_params(
    rng: np.random.Generator,
    variant: str,
    d: int,
    d_e: int,
    hidden: int | None = None,
) -> FusionParams:
    """hidden defaults to 2*d_e; pass hidden=0 for a purely affine map."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}, expected one of {VARIANTS}")
    if hidden is None:
        hidden = 2 * d_e
    mid = [] if hidden == 0 else [hidden]
    if variant == "union":
        return FusionParams(variant, init_mlp(rng, [d] + mid + [d_e]))
    if variant in ("concat", "parallel"):
        return FusionParams(variant, init_mlp(rng, [3 * d] + mid + [d_e]))
    pre = init_mlp(rng, [2 * d] + mid + [d])
    psi = init_mlp(rng, [2 * d] + mid + [d_e])
    return FusionParams(variant, psi, pre)


def _check_widths(z_s: Matrix, z_o: Matrix, z_u: Matrix) -> None:
    if not (z_s.shape == z_o.shape == z_u.shape):
        raise ShapeError(f"fusion inputs differ in shape: {z_s.shape}, {z_o.shape}, {z_u.shape}")


def dse_encode(z_s: Matrix, z_o: Matrix, z_u: Matrix, params: FusionParams) -> Matrix:
    """Sum of the shared map over the three constrained arrangements."""
    _check_widths(z_s, z_o, z_u)
    by_role = {"s": z_s, "o": z_o, "u": z_u}
    total = None
    for order in CONSTRAINED_ORDERS:
        term = params.psi(concat_cols([by_role[r] for r in order]))
        total = term if total is None else add(total, term)
    return total


def encode_edges(variant: str, z_s: Matrix, z_o: Matrix, z_u: Matrix, params: FusionParams) -> Matrix:
    """Dispatch to the requested fusion variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown fusion variant {variant!r}, expected one of {VARIANTS}")
    if params.variant != variant:
        raise ValueError(f"params were built for {params.variant!r}, not {variant!r}")
    _check_widths(z_s, z_o, z_u)
    if variant == "union":
        return params.psi(z_u)
    if variant == "concat":
        return params.psi(concat_cols([z_s, z_o, z_u]))
    if variant == "sequential":
        so = params.pre(concat_cols([z_s, z_o]))
        return params.psi(concat_cols([so, z_u]))
    return dse_encode(z_s, z_o, z_u, params)
