"""Conditional transport between weighted point sets, and what is built on it.

Given two discrete distributions with L2-normalized support points, the
forward plan moves each source point to the targets through a row-wise
softmax of the temperature-scaled similarity matrix, weighted by the target
marginal; the backward plan is the same construction with the roles
swapped. Transport cost is 1 - cosine, so the distance of a pair is the sum
of both directions' expected costs and is always in [0, 4].

On top of the pairwise machinery this module provides the three-way total
over a TriSet (patches, compositions, primitives, all three pairs both
directions), the cycle matrix chaining compositions -> patches ->
primitives -> compositions with its L1 consistency loss, feasibility
scoring of composition labels from the label-only plans, and the quantile
filter that prunes implausible compositions for open-world evaluation.

Every function here has a plain-array value path (used for inference,
evaluation and plan export) and, where gradients are needed, a graph
builder that assembles the same computation on a Tape. The value path and
the graph path share the backend kernels, so the two agree to float
precision; tests pin that equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tsca.backend import kernels
from tsca.diffcore import NORM_EPS, Tape
from tsca.errors import ConfigError, ContractError
from tsca.sets import DiscreteDistribution, TriSet, _check_simplex

Array = np.ndarray

MARGINAL_TOL = 1e-9


def _as_matrix(name: str, x) -> Array:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Temperature:
    """Log-scale temperature: similarities are divided by exp(psi)."""

    psi: float = math.log(0.07)

    def __post_init__(self):
        psi = float(self.psi)
        if not math.isfinite(psi):
            raise ContractError(f"psi must be finite, got {psi}")
        object.__setattr__(self, "psi", psi)

    @property
    def value(self) -> float:
        return math.exp(self.psi)


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs 1 - cosine, clipped to [0, 2]."""

    values: Array

    def __post_init__(self):
        values = _as_matrix("cost values", self.values)
        if (values < 0).any() or (values > 2).any():
            raise ContractError("costs must lie in [0, 2]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TransportPlan:
    """A joint over source x target whose rows sum to the source marginal.

    conditional[n] is the row-stochastic distribution of targets given
    source point n; joint = diag(source_marginal) @ conditional.
    """

    joint: Array
    source_marginal: Array
    conditional: Array

    def __post_init__(self):
        joint = _as_matrix("joint", self.joint)
        cond = _as_matrix("conditional", self.conditional)
        marginal = np.ascontiguousarray(self.source_marginal, dtype=np.float64)
        if marginal.ndim != 1 or marginal.shape[0] != joint.shape[0]:
            raise ContractError("source_marginal must have one entry per joint row")
        if cond.shape != joint.shape:
            raise ContractError("conditional and joint shapes must match")
        if (joint < 0).any() or (cond < 0).any():
            raise ContractError("plan entries must be nonnegative")
        _check_simplex(marginal, "source_marginal")
        rows = joint.sum(axis=1)
        if np.abs(rows - marginal).max() > MARGINAL_TOL:
            raise ContractError(
                f"joint row sums deviate from the source marginal by "
                f"{np.abs(rows - marginal).max():.3e} (tol {MARGINAL_TOL})"
            )
        cond_rows = cond.sum(axis=1)
        if np.abs(cond_rows - 1.0).max() > MARGINAL_TOL:
            raise ContractError("conditional rows must sum to 1")
        object.__setattr__(self, "joint", joint)
        object.__setattr__(self, "source_marginal", marginal)
        object.__setattr__(self, "conditional", cond)

    @property
    def shape(self):
        return self.joint.shape

    def target_marginal(self) -> Array:
        """Column sums of the joint; not constrained by construction."""
        return self.joint.sum(axis=0)


@dataclass(frozen=True)
class PlanSet:
    """The six plans of one TriSet: both directions of all three pairs."""

    patches_to_compositions: TransportPlan
    compositions_to_patches: TransportPlan
    patches_to_primitives: TransportPlan
    primitives_to_patches: TransportPlan
    compositions_to_primitives: TransportPlan
    primitives_to_compositions: TransportPlan


# ---------------------------------------------------------------------------
# value path
# ---------------------------------------------------------------------------


def _normalize_cols(x: Array) -> Array:
    y, _ = kernels.l2norm_cols(np.ascontiguousarray(x, dtype=np.float64), NORM_EPS)
    return y


def cost_matrix(x: Array, y: Array) -> CostMatrix:
    """1 - cosine between every column of x and every column of y."""
    x = _as_matrix("x", x)
    y = _as_matrix("y", y)
    if x.shape[0] != y.shape[0]:
        raise ContractError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    xn = _normalize_cols(x)
    yn = _normalize_cols(y)
    values = 1.0 - xn.T @ yn
    return CostMatrix(values=np.clip(values, 0.0, 2.0))


def similarity_matrix(x: Array, y: Array, temp: Temperature) -> Array:
    """Temperature-scaled Gram matrix x^T y / exp(psi); no normalization."""
    x = _as_matrix("x", x)
    y = _as_matrix("y", y)
    if x.shape[0] != y.shape[0]:
        raise ContractError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return (x.T @ y) / temp.value


def forward_plan(theta: Array, alpha: Array, similarities: Array) -> TransportPlan:
    """Plan rows: theta_n times the alpha-weighted softmax of row n."""
    s = _as_matrix("similarities", similarities)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    _check_simplex(theta, "theta")
    _check_simplex(alpha, "alpha")
    if s.shape != (theta.shape[0], alpha.shape[0]):
        raise ContractError(
            f"similarities shape {s.shape} does not match marginals "
            f"({theta.shape[0]}, {alpha.shape[0]})"
        )
    cond, _ = kernels.cond_plan(s, alpha)
    joint = theta[:, None] * cond
    return TransportPlan(joint=joint, source_marginal=theta, conditional=cond)


def backward_plan(theta: Array, alpha: Array, similarities: Array) -> TransportPlan:
    """The mirrored plan: targets become sources on the transposed scores."""
    s = _as_matrix("similarities", similarities)
    return forward_plan(alpha, theta, np.ascontiguousarray(s.T))


def ct_distance(p: DiscreteDistribution, q: DiscreteDistribution, temp: Temperature):
    """Both-direction transport cost between two distributions.

    Returns (value, forward_plan, backward_plan). Points are L2-normalized
    before similarities and costs, so the value lies in [0, 4].
    """
    if p.dim != q.dim:
        raise ContractError(f"dimension mismatch: {p.dim} vs {q.dim}")
    xn = _normalize_cols(p.points)
    yn = _normalize_cols(q.points)
    gram = xn.T @ yn
    s = gram / temp.value
    cost = np.clip(1.0 - gram, 0.0, 2.0)
    fwd = forward_plan(p.weights, q.weights, s)
    bwd = backward_plan(p.weights, q.weights, s)
    value = float(np.sum(fwd.joint * cost) + np.sum(bwd.joint * cost.T))
    return value, fwd, bwd


def total_ct(tri: TriSet, temp) -> tuple:
    """Sum of the three pairwise distances; returns (value, PlanSet).

    temp is one Temperature shared by all pairs, or a sequence of three
    (patches/compositions, patches/primitives, compositions/primitives).
    """
    if isinstance(temp, Temperature):
        temps = (temp, temp, temp)
    else:
        temps = tuple(temp)
        if len(temps) != 3 or not all(isinstance(t, Temperature) for t in temps):
            raise ContractError("temp must be a Temperature or a sequence of three")
    v12, f12, b12 = ct_distance(tri.p1, tri.p2, temps[0])
    v13, f13, b13 = ct_distance(tri.p1, tri.p3, temps[1])
    v23, f23, b23 = ct_distance(tri.p2, tri.p3, temps[2])
    plans = PlanSet(
        patches_to_compositions=f12,
        compositions_to_patches=b12,
        patches_to_primitives=f13,
        primitives_to_patches=b13,
        compositions_to_primitives=f23,
        primitives_to_compositions=b23,
    )
    return v12 + v13 + v23, plans


def cycle_matrix(
    comp_to_patch: TransportPlan,
    patch_to_prim: TransportPlan,
    prim_to_comp: TransportPlan,
) -> Array:
    """Row-stochastic composition-to-composition chain of three conditionals."""
    a = comp_to_patch.conditional
    b = patch_to_prim.conditional
    c = prim_to_comp.conditional
    if a.shape[1] != b.shape[0] or b.shape[1] != c.shape[0] or c.shape[1] != a.shape[0]:
        raise ContractError(
            f"chain shapes do not compose: {a.shape} -> {b.shape} -> {c.shape}"
        )
    return a @ b @ c


def cycle_loss(cycle: Array, gt_composition: int) -> float:
    """L1 gap between the ground-truth row and the identity row; in [0, 2]."""
    cycle = _as_matrix("cycle", cycle)
    if cycle.shape[0] != cycle.shape[1]:
        raise ContractError(f"cycle matrix must be square, got {cycle.shape}")
    m = cycle.shape[0]
    if not 0 <= gt_composition < m:
        raise ContractError(f"gt_composition {gt_composition} out of range for {m} rows")
    target = np.zeros(m)
    target[gt_composition] = 1.0
    return float(np.abs(cycle[gt_composition] - target).sum())


# ---------------------------------------------------------------------------
# open-world feasibility
# ---------------------------------------------------------------------------


def feasibility_scores(comp_to_prim: TransportPlan, prim_to_comp: TransportPlan, space) -> Array:
    """Per-composition plausibility from the label-only plans.

    For composition c = (s, o): how much of c's conditional mass lands on
    its own primitives, plus how much of those primitives' conditional mass
    returns to c. Plans must cover space.pairs as sources/targets against
    the states-then-objects primitive axis.
    """
    m = len(space.pairs)
    k = space.n_states + space.n_objects
    tf = comp_to_prim.conditional
    tb = prim_to_comp.conditional
    if tf.shape != (m, k) or tb.shape != (k, m):
        raise ContractError(
            f"plans cover {tf.shape}/{tb.shape}, expected ({m}, {k}) and ({k}, {m})"
        )
    s_idx = np.array([s for s, _ in space.pairs], dtype=np.intp)
    o_idx = np.array([o for _, o in space.pairs], dtype=np.intp) + space.n_states
    j = np.arange(m)
    return tf[j, s_idx] * tf[j, o_idx] + tb[s_idx, j] * tb[o_idx, j]


def filter_compositions(
    scores: Array,
    space,
    threshold: float = None,
    quantile: float = None,
    keep_seen: bool = True,
    exclude_mode: bool = False,
) -> Array:
    """Indices of compositions that survive the feasibility cut, ascending.

    Exactly one of threshold (absolute) and quantile (in [0, 1], resolved by
    linear interpolation over the scores) must be given; quantile 1.0 means
    +inf, so only the seen set can survive. The default keeps scores >= the
    cut; exclude_mode flips the rule to keep scores strictly below it.
    keep_seen forces seen compositions through regardless of score.
    An empty survivor set is an error suggesting a lower threshold.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != len(space.pairs):
        raise ContractError("scores must have one entry per composition")
    if (threshold is None) == (quantile is None):
        raise ConfigError("give exactly one of threshold and quantile")
    if quantile is not None:
        q = float(quantile)
        if not 0.0 <= q <= 1.0:
            raise ConfigError(f"quantile must lie in [0, 1], got {q}")
        cut = math.inf if q == 1.0 else float(np.quantile(scores, q))
    else:
        cut = float(threshold)
        if not math.isfinite(cut):
            raise ConfigError(f"threshold must be finite, got {cut}")
    if exclude_mode:
        keep = scores < cut
    else:
        keep = scores >= cut
    if keep_seen:
        keep = keep | space.seen_mask
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise ConfigError(
            "feasibility filter removed every composition; lower the threshold "
            "or quantile (or enable keep_seen)"
        )
    return kept


# ---------------------------------------------------------------------------
# graph path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CtPairNodes:
    """Node ids for one pair's transport subgraph."""

    distance: int
    cost: int
    cond_fwd: int
    joint_fwd: int
    cond_bwd: int
    joint_bwd: int


def attach_ct_pair(tape: Tape, x: int, y: int, wx: int, wy: int, psi: int) -> CtPairNodes:
    """Both-direction transport cost between point nodes x (d,n) and y (d,m).

    wx and wy are the weight vector nodes, psi a scalar log-temperature
    node. Normalization happens inside; the cost node is the raw 1 - cosine
    (clipping would zero gradients exactly at the clip boundary, and
    normalized points cannot leave [0, 2] anyway).
    """
    xn = tape.l2norm_cols(x)
    yn = tape.l2norm_cols(y)
    gram = tape.matmul(tape.transpose(xn), yn)
    cost = tape.cadd(tape.scale(gram, -1.0), 1.0)
    inv_temp = tape.exp(tape.scale(psi, -1.0))
    s = tape.smul(gram, inv_temp)
    cond_f = tape.cond_plan(s, wy)
    joint_f = tape.rowscale(cond_f, wx)
    cond_b = tape.cond_plan(tape.transpose(s), wx)
    joint_b = tape.rowscale(cond_b, wy)
    fwd_cost = tape.sum_all(tape.mul(joint_f, cost))
    bwd_cost = tape.sum_all(tape.mul(joint_b, tape.transpose(cost)))
    return CtPairNodes(
        distance=tape.add(fwd_cost, bwd_cost),
        cost=cost,
        cond_fwd=cond_f,
        joint_fwd=joint_f,
        cond_bwd=cond_b,
        joint_bwd=joint_b,
    )


def attach_cycle_loss(tape: Tape, comp_to_patch: int, patch_to_prim: int,
                      prim_to_comp: int, gt_onehot: int) -> int:
    """L1 cycle-consistency loss node from three conditional plan nodes.

    gt_onehot is a constant one-hot vector node selecting the ground-truth
    composition row of the chained matrix.
    """
    chain = tape.matmul(tape.matmul(comp_to_patch, patch_to_prim), prim_to_comp)
    row = tape.matvec(tape.transpose(chain), gt_onehot)
    return tape.sum_all(tape.absval(tape.sub(row, gt_onehot)))


# ---------------------------------------------------------------------------
# plan export
# ---------------------------------------------------------------------------


def export_plan_csv(path, matrix: Array) -> None:
    """Dimensions on the first line, then one comma-separated row per line."""
    matrix = _as_matrix("matrix", matrix)
    rows, cols = matrix.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{rows},{cols}\n")
        for row in matrix:
            fh.write(",".join(repr(v) for v in row.tolist()) + "\n")


def read_plan_csv(path) -> Array:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        parts = header.split(",")
        if len(parts) != 2:
            raise ContractError(f"bad plan header {header!r}")
        rows, cols = int(parts[0]), int(parts[1])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ContractError(f"plan body {data.shape} does not match header ({rows}, {cols})")
    return np.ascontiguousarray(data)


def export_plan_pgm(path, matrix: Array) -> None:
    """Binary PGM heatmap, min-max normalized to 0..255; flat matrices render black."""
    matrix = _as_matrix("matrix", matrix)
    lo = float(matrix.min())
    hi = float(matrix.max())
    span = hi - lo
    if span <= 0:
        pixels = np.zeros(matrix.shape, dtype=np.uint8)
    else:
        pixels = np.round((matrix - lo) / span * 255.0).astype(np.uint8)
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
