"""Per-image triset construction.

Three discrete distributions describe one image: P1 puts uniform mass on its
patch embeddings, P2 weights candidate composition embeddings after fusing
them with the patches through a shared cross-attention layer (residual
included), and P3 does the same for the state and object primitives, whose
weights come from the adapted CLS features before fusion.

Each construction exists twice: attach_* builds the differentiable graph on
a Tape, and the plain functions run the same graph once on a scratch tape
for callers that only need values. The graph is the single source of the
math; the wrappers never re-derive it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tsca.diffcore import Tape
from tsca.errors import ContractError, EmptyInputError

Array = np.ndarray

SIMPLEX_TOL = 1e-9


def _clean_matrix(x, name: str) -> Array:
    out = np.array(x, dtype=np.float64, order="C")
    if out.ndim != 2:
        raise ContractError(f"{name} must be 2-d, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ContractError(f"{name} contains non-finite values")
    return out


def _clean_vector(x, name: str) -> Array:
    out = np.array(x, dtype=np.float64, order="C")
    if out.ndim != 1:
        raise ContractError(f"{name} must be 1-d, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ContractError(f"{name} contains non-finite values")
    return out


def _check_simplex(w: Array, name: str) -> None:
    if (w < -SIMPLEX_TOL).any():
        raise ContractError(f"{name} has negative entries")
    total = float(w.sum())
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"{name} sums to {total!r}, expected 1")


@dataclass(frozen=True)
class DiscreteDistribution:
    """Weighted point cloud: columns of `points` carry `weights` mass."""

    points: Array  # (d, n)
    weights: Array  # (n,)

    def __post_init__(self):
        points = _clean_matrix(self.points, "points")
        weights = _clean_vector(self.weights, "weights")
        if points.shape[1] < 1:
            raise EmptyInputError("a distribution needs at least one support point")
        if points.shape[1] != weights.shape[0]:
            raise ContractError(
                f"{points.shape[1]} points but {weights.shape[0]} weights"
            )
        _check_simplex(weights, "weights")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.points.shape[1]

    @property
    def dim(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class FusionWeights:
    """One cross-attention layer: query/key/value/output projections."""

    wq: Array
    wk: Array
    wv: Array
    wo: Array
    heads: int = 1

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            m = _clean_matrix(getattr(self, name), name)
            object.__setattr__(self, name, m)
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ContractError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ContractError(f"head count {self.heads} must divide d={d}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass(frozen=True)
class AdapterWeights:
    """Two independent affine maps d -> d for state and object CLS features."""

    state_w: Array
    state_b: Array
    object_w: Array
    object_b: Array

    def __post_init__(self):
        object.__setattr__(self, "state_w", _clean_matrix(self.state_w, "state_w"))
        object.__setattr__(self, "object_w", _clean_matrix(self.object_w, "object_w"))
        object.__setattr__(self, "state_b", _clean_vector(self.state_b, "state_b"))
        object.__setattr__(self, "object_b", _clean_vector(self.object_b, "object_b"))
        d = self.state_w.shape[0]
        if self.state_w.shape != (d, d) or self.object_w.shape != (d, d):
            raise ContractError("adapter weight matrices must be square and equal-sized")
        if self.state_b.shape != (d,) or self.object_b.shape != (d,):
            raise ContractError("adapter bias shapes inconsistent with weights")


@dataclass(frozen=True)
class TriSet:
    """Per-image bundle of the three aligned distributions plus label bookkeeping.

    P3 points are ordered states first, then objects: index k < |S| is state
    k, index k >= |S| is object k - |S|.
    """

    p1: DiscreteDistribution
    p2: DiscreteDistribution
    p3: DiscreteDistribution
    beta_s: Array
    beta_o: Array
    cls_c: Array
    cls_s: Array
    cls_o: Array
    gt_composition: int
    gt_state: int
    gt_object: int

    def __post_init__(self):
        beta_s = _clean_vector(self.beta_s, "beta_s")
        beta_o = _clean_vector(self.beta_o, "beta_o")
        _check_simplex(beta_s, "beta_s")
        _check_simplex(beta_o, "beta_o")
        object.__setattr__(self, "beta_s", beta_s)
        object.__setattr__(self, "beta_o", beta_o)
        for name in ("cls_c", "cls_s", "cls_o"):
            object.__setattr__(self, name, _clean_vector(getattr(self, name), name))
        if self.p3.size != beta_s.shape[0] + beta_o.shape[0]:
            raise ContractError(
                f"P3 has {self.p3.size} points, expected |S|+|O| = "
                f"{beta_s.shape[0] + beta_o.shape[0]}"
            )
        if not 0 <= self.gt_composition < self.p2.size:
            raise ContractError(f"gt_composition {self.gt_composition} out of range")
        if not 0 <= self.gt_state < beta_s.shape[0]:
            raise ContractError(f"gt_state {self.gt_state} out of range")
        if not 0 <= self.gt_object < beta_o.shape[0]:
            raise ContractError(f"gt_object {self.gt_object} out of range")

    @property
    def n_states(self) -> int:
        return self.beta_s.shape[0]

    @property
    def n_objects(self) -> int:
        return self.beta_o.shape[0]


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionNodes:
    wq: int
    wk: int
    wv: int
    wo: int
    heads: int


@dataclass(frozen=True)
class AdapterNodes:
    state_w: int
    state_b: int
    object_w: int
    object_b: int


def declare_fusion(tape: Tape, fusion: FusionWeights, trainable: bool = True) -> FusionNodes:
    kw = {"trainable": trainable}
    return FusionNodes(
        wq=tape.leaf(fusion.wq, name="fusion.wq", **kw),
        wk=tape.leaf(fusion.wk, name="fusion.wk", **kw),
        wv=tape.leaf(fusion.wv, name="fusion.wv", **kw),
        wo=tape.leaf(fusion.wo, name="fusion.wo", **kw),
        heads=fusion.heads,
    )


def declare_adapter(tape: Tape, adapter: AdapterWeights, trainable: bool = True) -> AdapterNodes:
    kw = {"trainable": trainable}
    return AdapterNodes(
        state_w=tape.leaf(adapter.state_w, name="adapter.state_w", **kw),
        state_b=tape.leaf(adapter.state_b, name="adapter.state_b", **kw),
        object_w=tape.leaf(adapter.object_w, name="adapter.object_w", **kw),
        object_b=tape.leaf(adapter.object_b, name="adapter.object_b", **kw),
    )


def attach_cross_attention(tape: Tape, fusion: FusionNodes, queries: int, keys: int, values: int) -> int:
    """Scaled dot-product cross-attention plus the query residual.

    Columns are points: queries (d, M), keys/values (d, N) -> (d, M).
    """
    d = tape.shape(queries)[0]
    if tape.shape(keys)[0] != d or tape.shape(values)[0] != d:
        raise ContractError("queries/keys/values must share the embedding dimension")
    if tape.shape(keys)[1] != tape.shape(values)[1]:
        raise ContractError("keys and values must have the same number of points")
    heads = fusion.heads
    if d % heads != 0:
        raise ContractError(f"head count {heads} must divide d={d}")
    dh = d // heads

    q = tape.matmul(fusion.wq, queries)
    k = tape.matmul(fusion.wk, keys)
    v = tape.matmul(fusion.wv, values)
    mixed = None
    for h in range(heads):
        qh = tape.rows(q, h * dh, (h + 1) * dh)
        kh = tape.rows(k, h * dh, (h + 1) * dh)
        vh = tape.rows(v, h * dh, (h + 1) * dh)
        scores = tape.scale(tape.matmul(tape.transpose(qh), kh), 1.0 / np.sqrt(dh))
        attn = tape.softmax_rows(scores)  # (M, N), rows sum to 1
        out_h = tape.matmul(vh, tape.transpose(attn))  # (dh, M)
        mixed = out_h if mixed is None else tape.concat_rows(mixed, out_h)
    return tape.add(tape.matmul(fusion.wo, mixed), queries)


def attach_composition_set(tape: Tape, fusion: FusionNodes, y_in: int, patches: int, cls_c: int):
    """Fused composition points and their weights: returns (points, alpha)."""
    y = attach_cross_attention(tape, fusion, y_in, patches, patches)
    alpha = tape.softmax_vec(tape.matvec(tape.transpose(y), cls_c))
    return y, alpha


def attach_adapter(tape: Tape, adapter: AdapterNodes, cls_c: int):
    """State/object views of the global visual feature: (cls_s, cls_o)."""
    cls_s = tape.affine_vec(adapter.state_w, cls_c, adapter.state_b)
    cls_o = tape.affine_vec(adapter.object_w, cls_c, adapter.object_b)
    return cls_s, cls_o


def attach_primitive_set(
    tape: Tape,
    fusion: FusionNodes,
    z_s: int,
    z_o: int,
    patches: int,
    cls_s: int,
    cls_o: int,
    renorm: bool = False,
):
    """Fused primitive points and weights: returns (points, beta, beta_s, beta_o).

    beta_s and beta_o are computed from the pre-fusion embeddings. The joint
    weights are by default the softmax of the concatenated per-branch
    softmaxes, taken literally; renorm=True replaces that with a plain
    halving of the concatenation.
    """
    beta_s = tape.softmax_vec(tape.matvec(tape.transpose(z_s), cls_s))
    beta_o = tape.softmax_vec(tape.matvec(tape.transpose(z_o), cls_o))
    z = attach_cross_attention(tape, fusion, tape.concat_cols(z_s, z_o), patches, patches)
    cat = tape.concat_vec(beta_s, beta_o)
    beta = tape.scale(cat, 0.5) if renorm else tape.softmax_vec(cat)
    return z, beta, beta_s, beta_o


# ---------------------------------------------------------------------------
# value-level wrappers (scratch tape around the same graph)
# ---------------------------------------------------------------------------


def build_patch_set(patch_embeddings) -> DiscreteDistribution:
    """Uniform distribution over patch embedding columns."""
    points = _clean_matrix(patch_embeddings, "patch_embeddings")
    n = points.shape[1]
    if n < 1:
        raise EmptyInputError("patch set is empty")
    return DiscreteDistribution(points, np.full(n, 1.0 / n))


def cross_attention(fusion: FusionWeights, queries, keys, values) -> Array:
    queries = _clean_matrix(queries, "queries")
    keys = _clean_matrix(keys, "keys")
    values = _clean_matrix(values, "values")
    t = Tape()
    fn = declare_fusion(t, fusion, trainable=False)
    out = attach_cross_attention(
        t, fn, t.const(queries, "queries"), t.const(keys, "keys"), t.const(values, "values")
    )
    return t.forward(out)


def build_composition_set(y_in, patches: DiscreteDistribution, cls_c, fusion: FusionWeights):
    """Returns (P2 distribution, alpha) for candidate composition embeddings y_in."""
    y_in = _clean_matrix(y_in, "y_in")
    if y_in.shape[1] < 1:
        raise EmptyInputError("composition candidate set is empty")
    t = Tape()
    fn = declare_fusion(t, fusion, trainable=False)
    y, alpha = attach_composition_set(
        t, fn, t.const(y_in, "y_in"), t.const(patches.points, "patches"), t.const(cls_c, "cls_c")
    )
    t.forward(alpha)
    return DiscreteDistribution(t.value(y), t.value(alpha)), t.value(alpha)


def adapt_visual(adapter: AdapterWeights, cls_c):
    """Apply the two adapter maps to the global feature: (cls_s, cls_o)."""
    cls_c = _clean_vector(cls_c, "cls_c")
    return adapter.state_w @ cls_c + adapter.state_b, adapter.object_w @ cls_c + adapter.object_b


def build_primitive_set(
    z_s_in,
    z_o_in,
    patches: DiscreteDistribution,
    cls_s,
    cls_o,
    fusion: FusionWeights,
    renorm: bool = False,
):
    """Returns (P3 distribution, beta, beta_s, beta_o); states precede objects."""
    z_s_in = _clean_matrix(z_s_in, "z_s_in")
    z_o_in = _clean_matrix(z_o_in, "z_o_in")
    if z_s_in.shape[1] < 1:
        raise EmptyInputError("state embedding set is empty")
    if z_o_in.shape[1] < 1:
        raise EmptyInputError("object embedding set is empty")
    t = Tape()
    fn = declare_fusion(t, fusion, trainable=False)
    z, beta, beta_s, beta_o = attach_primitive_set(
        t,
        fn,
        t.const(z_s_in, "z_s"),
        t.const(z_o_in, "z_o"),
        t.const(patches.points, "patches"),
        t.const(cls_s, "cls_s"),
        t.const(cls_o, "cls_o"),
        renorm=renorm,
    )
    t.forward(beta)
    return (
        DiscreteDistribution(t.value(z), t.value(beta)),
        t.value(beta),
        t.value(beta_s),
        t.value(beta_o),
    )
