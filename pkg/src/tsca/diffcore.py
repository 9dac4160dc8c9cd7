"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape is a lazily evaluated computation graph. Op methods record structure
and static attributes at build time and return integer node ids; nothing is
computed until forward_eval walks the nodes in creation order. backward_grad
then accumulates adjoints in reverse over the stored values. Leaves may be
declared with a shape only and bound later, so one graph can be rebound and
reused across many inputs; shapes are fixed at construction time, which is
what makes that reuse safe.

Only 0-d (scalar), 1-d and 2-d arrays are supported. Every op checks the
result for NaN/Inf and raises NumericError naming the op, so a diverging
computation fails at its source instead of three modules later. The row
softmax, column L2 normalization and conditional-plan kernels come from
tsca.backend; everything else is plain numpy.
"""

from __future__ import annotations

import warnings

import numpy as np

from tsca.backend import kernels
from tsca.errors import ContractError, NumericError, NumericWarning

Array = np.ndarray

NORM_EPS = 1e-12


def _as_value(value) -> Array:
    out = np.array(value, dtype=np.float64, order="C")
    if out.ndim > 2:
        raise ContractError(f"only scalars, vectors and matrices are supported, got shape {out.shape}")
    return out


# ---------------------------------------------------------------------------
# forward and vjp rules
#
# forward: fn(vals, aux) -> (value, stash)
# vjp:     fn(g, value, stash, vals, aux) -> per-parent gradients
# ---------------------------------------------------------------------------


def _fw_add(vals, aux):
    return vals[0] + vals[1], None


def _bw_add(g, value, stash, vals, aux):
    return g, g


def _fw_sub(vals, aux):
    return vals[0] - vals[1], None


def _bw_sub(g, value, stash, vals, aux):
    return g, -g


def _fw_mul(vals, aux):
    return vals[0] * vals[1], None


def _bw_mul(g, value, stash, vals, aux):
    return g * vals[1], g * vals[0]


def _fw_scale(vals, aux):
    return vals[0] * aux[0], None


def _bw_scale(g, value, stash, vals, aux):
    return (g * aux[0],)


def _fw_cadd(vals, aux):
    return vals[0] + aux[0], None


def _bw_cadd(g, value, stash, vals, aux):
    return (g,)


def _fw_smul(vals, aux):
    return vals[0] * vals[1], None


def _bw_smul(g, value, stash, vals, aux):
    return g * vals[1], np.asarray((g * vals[0]).sum())


def _fw_matmul(vals, aux):
    return vals[0] @ vals[1], None


def _bw_matmul(g, value, stash, vals, aux):
    return g @ vals[1].T, vals[0].T @ g


def _fw_matvec(vals, aux):
    return vals[0] @ vals[1], None


def _bw_matvec(g, value, stash, vals, aux):
    return np.outer(g, vals[1]), vals[0].T @ g


def _fw_dot(vals, aux):
    return np.asarray(vals[0] @ vals[1]), None


def _bw_dot(g, value, stash, vals, aux):
    return g * vals[1], g * vals[0]


def _fw_transpose(vals, aux):
    return vals[0].T, None


def _bw_transpose(g, value, stash, vals, aux):
    return (np.ascontiguousarray(g.T),)


def _fw_concat_cols(vals, aux):
    return np.concatenate([vals[0], vals[1]], axis=1), None


def _bw_concat_cols(g, value, stash, vals, aux):
    n = vals[0].shape[1]
    return np.ascontiguousarray(g[:, :n]), np.ascontiguousarray(g[:, n:])


def _fw_concat_rows(vals, aux):
    return np.concatenate([vals[0], vals[1]], axis=0), None


def _bw_concat_rows(g, value, stash, vals, aux):
    n = vals[0].shape[0]
    return np.ascontiguousarray(g[:n]), np.ascontiguousarray(g[n:])


def _fw_concat_vec(vals, aux):
    return np.concatenate([vals[0], vals[1]]), None


def _bw_concat_vec(g, value, stash, vals, aux):
    n = vals[0].shape[0]
    return g[:n].copy(), g[n:].copy()


def _fw_rows(vals, aux):
    i0, i1 = aux
    return vals[0][i0:i1], None


def _bw_rows(g, value, stash, vals, aux):
    i0, i1 = aux
    out = np.zeros_like(vals[0])
    out[i0:i1] = g
    return (out,)


def _fw_softmax_rows(vals, aux):
    return kernels.softmax_rows(vals[0]), None


def _bw_softmax_rows(g, value, stash, vals, aux):
    return (kernels.softmax_rows_vjp(value, np.ascontiguousarray(g)),)


def _fw_softmax_cols(vals, aux):
    return kernels.softmax_rows(np.ascontiguousarray(vals[0].T)).T, None


def _bw_softmax_cols(g, value, stash, vals, aux):
    yt = np.ascontiguousarray(value.T)
    gt = np.ascontiguousarray(g.T)
    return (np.ascontiguousarray(kernels.softmax_rows_vjp(yt, gt).T),)


def _fw_softmax_vec(vals, aux):
    return kernels.softmax_rows(vals[0][None, :])[0], None


def _bw_softmax_vec(g, value, stash, vals, aux):
    out = kernels.softmax_rows_vjp(
        np.ascontiguousarray(value[None, :]), np.ascontiguousarray(g[None, :])
    )
    return (out[0],)


def _fw_exp(vals, aux):
    return np.exp(vals[0]), None


def _bw_exp(g, value, stash, vals, aux):
    return (g * value,)


def _fw_log(vals, aux):
    (floor,) = aux
    x = vals[0]
    if floor is None:
        return np.log(x), None
    clamped = x < floor
    if clamped.any():
        warnings.warn(
            f"log clamped {int(clamped.sum())} value(s) below {floor:g}", NumericWarning, stacklevel=2
        )
    return np.log(np.maximum(x, floor)), clamped


def _bw_log(g, value, stash, vals, aux):
    (floor,) = aux
    x = vals[0]
    if floor is None:
        return (g / x,)
    gx = g / np.maximum(x, floor)
    return (np.where(stash, 0.0, gx),)


def _fw_absval(vals, aux):
    return np.abs(vals[0]), None


def _bw_absval(g, value, stash, vals, aux):
    return (g * np.sign(vals[0]),)


def _fw_l2norm_cols(vals, aux):
    y, norms = kernels.l2norm_cols(vals[0], NORM_EPS)
    if (norms == 0.0).any():
        warnings.warn("L2 normalization of zero column(s); mapped to zero", NumericWarning, stacklevel=2)
    return y, norms


def _bw_l2norm_cols(g, value, stash, vals, aux):
    return (kernels.l2norm_cols_vjp(value, stash, np.ascontiguousarray(g), NORM_EPS),)


def _fw_l2norm_vec(vals, aux):
    y, norms = kernels.l2norm_cols(np.ascontiguousarray(vals[0][:, None]), NORM_EPS)
    if norms[0] == 0.0:
        warnings.warn("L2 normalization of a zero vector; mapped to zero", NumericWarning, stacklevel=2)
    return y[:, 0], norms


def _bw_l2norm_vec(g, value, stash, vals, aux):
    gx = kernels.l2norm_cols_vjp(
        np.ascontiguousarray(value[:, None]), stash, np.ascontiguousarray(g[:, None]), NORM_EPS
    )
    return (gx[:, 0],)


def _fw_mean_cols(vals, aux):
    return vals[0].mean(axis=1), None


def _bw_mean_cols(g, value, stash, vals, aux):
    n = vals[0].shape[1]
    return (np.repeat((g / n)[:, None], n, axis=1),)


def _fw_sum_all(vals, aux):
    return np.asarray(vals[0].sum()), None


def _bw_sum_all(g, value, stash, vals, aux):
    return (np.full(vals[0].shape, float(g)),)


def _fw_rowscale(vals, aux):
    return vals[0] * vals[1][:, None], None


def _bw_rowscale(g, value, stash, vals, aux):
    return g * vals[1][:, None], (g * vals[0]).sum(axis=1)


def _fw_bias_cols(vals, aux):
    return vals[0] + vals[1][:, None], None


def _bw_bias_cols(g, value, stash, vals, aux):
    return g, g.sum(axis=1)


def _fw_pick(vals, aux):
    return np.asarray(vals[0][aux[0]]), None


def _bw_pick(g, value, stash, vals, aux):
    out = np.zeros_like(vals[0])
    out[aux[0]] = g
    return (out,)


def _fw_cond_plan(vals, aux):
    p, u = kernels.cond_plan(vals[0], vals[1])
    return p, u


def _bw_cond_plan(g, value, stash, vals, aux):
    gs, galpha = kernels.cond_plan_vjp(value, stash, np.ascontiguousarray(g))
    return gs, galpha


_FWD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "scale": _fw_scale,
    "cadd": _fw_cadd,
    "smul": _fw_smul,
    "matmul": _fw_matmul,
    "matvec": _fw_matvec,
    "dot": _fw_dot,
    "transpose": _fw_transpose,
    "concat_cols": _fw_concat_cols,
    "concat_rows": _fw_concat_rows,
    "concat_vec": _fw_concat_vec,
    "rows": _fw_rows,
    "softmax_rows": _fw_softmax_rows,
    "softmax_cols": _fw_softmax_cols,
    "softmax_vec": _fw_softmax_vec,
    "exp": _fw_exp,
    "log": _fw_log,
    "absval": _fw_absval,
    "l2norm_cols": _fw_l2norm_cols,
    "l2norm_vec": _fw_l2norm_vec,
    "mean_cols": _fw_mean_cols,
    "sum_all": _fw_sum_all,
    "rowscale": _fw_rowscale,
    "bias_cols": _fw_bias_cols,
    "pick": _fw_pick,
    "cond_plan": _fw_cond_plan,
}

_VJP = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "cadd": _bw_cadd,
    "smul": _bw_smul,
    "matmul": _bw_matmul,
    "matvec": _bw_matvec,
    "dot": _bw_dot,
    "transpose": _bw_transpose,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "concat_vec": _bw_concat_vec,
    "rows": _bw_rows,
    "softmax_rows": _bw_softmax_rows,
    "softmax_cols": _bw_softmax_cols,
    "softmax_vec": _bw_softmax_vec,
    "exp": _bw_exp,
    "log": _bw_log,
    "absval": _bw_absval,
    "l2norm_cols": _bw_l2norm_cols,
    "l2norm_vec": _bw_l2norm_vec,
    "mean_cols": _bw_mean_cols,
    "sum_all": _bw_sum_all,
    "rowscale": _bw_rowscale,
    "bias_cols": _bw_bias_cols,
    "pick": _bw_pick,
    "cond_plan": _bw_cond_plan,
}


class Tape:
    """Lazy computation graph with integer node handles."""

    def __init__(self):
        self._op: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._aux: list[tuple] = []
        self._shape: list[tuple[int, ...]] = []
        self._value: list[Array | None] = []
        self._stash: list = []
        self._name: list[str | None] = []
        self._trainable: list[bool] = []
        self._bind_serial = 0
        self._value_serial = -1
        self._value_root = -1

    def __len__(self) -> int:
        return len(self._op)

    # ---- node bookkeeping ----

    def _append(self, op, parents, aux, shape, value=None, name=None, trainable=False) -> int:
        self._op.append(op)
        self._parents.append(parents)
        self._aux.append(aux)
        self._shape.append(shape)
        self._value.append(value)
        self._stash.append(None)
        self._name.append(name)
        self._trainable.append(trainable)
        return len(self._op) - 1

    def _check(self, i: int) -> None:
        if not 0 <= i < len(self._op):
            raise ContractError(f"node id {i} is not on this tape")

    def shape(self, i: int) -> tuple[int, ...]:
        self._check(i)
        return self._shape[i]

    def value(self, i: int) -> Array:
        """Value of node i: the binding for leaves, else the last forward result."""
        self._check(i)
        v = self._value[i]
        if self._op[i] == "leaf":
            if v is None:
                raise ContractError(f"leaf {self._label(i)} is unbound")
            return v
        if v is None or self._value_serial != self._bind_serial or i > self._value_root:
            raise ContractError(f"node {i} has no current value; run forward_eval first")
        return v

    def is_leaf(self, i: int) -> bool:
        self._check(i)
        return self._op[i] == "leaf"

    # ---- leaves ----

    def leaf(self, value=None, *, shape=None, name=None, trainable=True) -> int:
        """Declare a leaf. Either an initial value or a shape must be given."""
        if value is None and shape is None:
            raise ContractError("leaf needs a value or a shape")
        if value is not None:
            value = _as_value(value)
            if shape is not None and tuple(shape) != value.shape:
                raise ContractError(f"leaf value shape {value.shape} != declared {tuple(shape)}")
            shape = value.shape
        i = self._append("leaf", (), (), tuple(shape), value=value, name=name, trainable=trainable)
        if value is not None:
            self._bind_serial += 1
        return i

    def const(self, value, name=None) -> int:
        """Leaf that backward_grad does not differentiate."""
        return self.leaf(value, name=name, trainable=False)

    def bind(self, i: int, value) -> None:
        """Assign a leaf's value; shape must match the declaration."""
        self._check(i)
        if self._op[i] != "leaf":
            raise ContractError(f"node {i} ({self._op[i]}) is not a leaf")
        value = _as_value(value)
        if value.shape != self._shape[i]:
            raise ContractError(
                f"bind shape {value.shape} != declared {self._shape[i]} for leaf {self._label(i)}"
            )
        if not np.isfinite(value).all():
            raise ContractError(f"non-finite bind for leaf {self._label(i)}")
        self._value[i] = value
        self._bind_serial += 1

    def _label(self, i: int) -> str:
        name = self._name[i]
        return f"{i}" if name is None else f"{i} ({name})"

    # ---- shape helpers ----

    def _need_ndim(self, i: int, ndim: int, op: str) -> tuple[int, ...]:
        s = self.shape(i)
        if len(s) != ndim:
            raise ContractError(f"{op}: node {self._label(i)} has shape {s}, expected {ndim}-d")
        return s

    def _need_same(self, a: int, b: int, op: str) -> tuple[int, ...]:
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb:
            raise ContractError(f"{op}: shape mismatch {sa} vs {sb}")
        return sa

    # ---- elementwise and scalar ops ----

    def add(self, a: int, b: int) -> int:
        s = self._need_same(a, b, "add")
        return self._append("add", (a, b), (), s)

    def sub(self, a: int, b: int) -> int:
        s = self._need_same(a, b, "sub")
        return self._append("sub", (a, b), (), s)

    def mul(self, a: int, b: int) -> int:
        s = self._need_same(a, b, "mul")
        return self._append("mul", (a, b), (), s)

    def scale(self, a: int, c: float) -> int:
        return self._append("scale", (a,), (float(c),), self.shape(a))

    def cadd(self, a: int, c: float) -> int:
        return self._append("cadd", (a,), (float(c),), self.shape(a))

    def smul(self, a: int, s: int) -> int:
        """Multiply node a elementwise by scalar node s."""
        self._need_ndim(s, 0, "smul")
        return self._append("smul", (a, s), (), self.shape(a))

    def exp(self, a: int) -> int:
        return self._append("exp", (a,), (), self.shape(a))

    def log(self, a: int, floor: float | None = None) -> int:
        """Natural log; with a floor, inputs below it are clamped (warning emitted)."""
        if floor is not None and floor <= 0:
            raise ContractError("log floor must be positive")
        return self._append("log", (a,), (floor,), self.shape(a))

    def absval(self, a: int) -> int:
        return self._append("absval", (a,), (), self.shape(a))

    # ---- linear algebra ----

    def matmul(self, a: int, b: int) -> int:
        sa = self._need_ndim(a, 2, "matmul")
        sb = self._need_ndim(b, 2, "matmul")
        if sa[1] != sb[0]:
            raise ContractError(f"matmul: inner dims differ, {sa} @ {sb}")
        return self._append("matmul", (a, b), (), (sa[0], sb[1]))

    def matvec(self, a: int, v: int) -> int:
        sa = self._need_ndim(a, 2, "matvec")
        sv = self._need_ndim(v, 1, "matvec")
        if sa[1] != sv[0]:
            raise ContractError(f"matvec: inner dims differ, {sa} @ {sv}")
        return self._append("matvec", (a, v), (), (sa[0],))

    def dot(self, u: int, v: int) -> int:
        self._need_ndim(u, 1, "dot")
        self._need_same(u, v, "dot")
        return self._append("dot", (u, v), (), ())

    def transpose(self, a: int) -> int:
        s = self._need_ndim(a, 2, "transpose")
        return self._append("transpose", (a,), (), (s[1], s[0]))

    def concat_cols(self, a: int, b: int) -> int:
        sa = self._need_ndim(a, 2, "concat_cols")
        sb = self._need_ndim(b, 2, "concat_cols")
        if sa[0] != sb[0]:
            raise ContractError(f"concat_cols: row counts differ, {sa} vs {sb}")
        return self._append("concat_cols", (a, b), (), (sa[0], sa[1] + sb[1]))

    def concat_rows(self, a: int, b: int) -> int:
        sa = self._need_ndim(a, 2, "concat_rows")
        sb = self._need_ndim(b, 2, "concat_rows")
        if sa[1] != sb[1]:
            raise ContractError(f"concat_rows: column counts differ, {sa} vs {sb}")
        return self._append("concat_rows", (a, b), (), (sa[0] + sb[0], sa[1]))

    def concat_vec(self, u: int, v: int) -> int:
        su = self._need_ndim(u, 1, "concat_vec")
        sv = self._need_ndim(v, 1, "concat_vec")
        return self._append("concat_vec", (u, v), (), (su[0] + sv[0],))

    def rows(self, a: int, i0: int, i1: int) -> int:
        s = self._need_ndim(a, 2, "rows")
        if not 0 <= i0 < i1 <= s[0]:
            raise ContractError(f"rows: slice [{i0}:{i1}] out of range for shape {s}")
        return self._append("rows", (a,), (i0, i1), (i1 - i0, s[1]))

    def pick(self, v: int, i: int) -> int:
        s = self._need_ndim(v, 1, "pick")
        if not 0 <= i < s[0]:
            raise ContractError(f"pick: index {i} out of range for shape {s}")
        return self._append("pick", (v,), (int(i),), ())

    # ---- reductions and normalizations ----

    def softmax_rows(self, a: int) -> int:
        s = self._need_ndim(a, 2, "softmax_rows")
        return self._append("softmax_rows", (a,), (), s)

    def softmax_cols(self, a: int) -> int:
        s = self._need_ndim(a, 2, "softmax_cols")
        return self._append("softmax_cols", (a,), (), s)

    def softmax_vec(self, v: int) -> int:
        s = self._need_ndim(v, 1, "softmax_vec")
        return self._append("softmax_vec", (v,), (), s)

    def l2norm_cols(self, a: int) -> int:
        s = self._need_ndim(a, 2, "l2norm_cols")
        return self._append("l2norm_cols", (a,), (), s)

    def l2norm_vec(self, v: int) -> int:
        s = self._need_ndim(v, 1, "l2norm_vec")
        return self._append("l2norm_vec", (v,), (), s)

    def mean_cols(self, a: int) -> int:
        s = self._need_ndim(a, 2, "mean_cols")
        return self._append("mean_cols", (a,), (), (s[0],))

    def sum_all(self, a: int) -> int:
        return self._append("sum_all", (a,), (), ())

    def rowscale(self, a: int, v: int) -> int:
        sa = self._need_ndim(a, 2, "rowscale")
        sv = self._need_ndim(v, 1, "rowscale")
        if sa[0] != sv[0]:
            raise ContractError(f"rowscale: {sa} rows vs {sv} entries")
        return self._append("rowscale", (a, v), (), sa)

    def bias_cols(self, a: int, b: int) -> int:
        sa = self._need_ndim(a, 2, "bias_cols")
        sb = self._need_ndim(b, 1, "bias_cols")
        if sa[0] != sb[0]:
            raise ContractError(f"bias_cols: {sa} rows vs {sb} entries")
        return self._append("bias_cols", (a, b), (), sa)

    def cond_plan(self, s: int, alpha: int) -> int:
        """Row-stochastic plan: row i is softmax of s[i] reweighted by alpha.

        alpha must be elementwise nonnegative with a positive sum; softmax
        outputs always qualify. Columns with zero weight get zero mass.
        """
        ss = self._need_ndim(s, 2, "cond_plan")
        sa = self._need_ndim(alpha, 1, "cond_plan")
        if ss[1] != sa[0]:
            raise ContractError(f"cond_plan: {ss} columns vs {sa} weights")
        return self._append("cond_plan", (s, alpha), (), ss)

    # ---- composites ----

    def cosine(self, u: int, v: int) -> int:
        """Cosine similarity with guarded norms (zero vectors give 0)."""
        return self.dot(self.l2norm_vec(u), self.l2norm_vec(v))

    def affine_vec(self, w: int, x: int, b: int) -> int:
        return self.add(self.matvec(w, x), b)

    def affine_cols(self, w: int, x: int, b: int) -> int:
        return self.bias_cols(self.matmul(w, x), b)

    def weighted_sum(self, points: int, weights: int) -> int:
        """Barycenter of columns: points (d, n) times weights (n,)."""
        return self.matvec(points, weights)

    def lincomb(self, terms) -> int:
        """Sum of (coefficient, node) pairs."""
        terms = list(terms)
        if not terms:
            raise ContractError("lincomb needs at least one term")
        acc = self.scale(terms[0][1], terms[0][0])
        for c, node in terms[1:]:
            acc = self.add(acc, self.scale(node, c))
        return acc

    # ---- execution ----

    def forward(self, root: int) -> Array:
        """Evaluate nodes 0..root with current bindings; return root's value."""
        self._check(root)
        ops, parents, aux, values = self._op, self._parents, self._aux, self._value
        stash = self._stash
        # non-finite results raise below, so numpy's own fp warnings are noise
        with np.errstate(all="ignore"):
            for i in range(root + 1):
                op = ops[i]
                if op == "leaf":
                    if values[i] is None:
                        raise ContractError(f"leaf {self._label(i)} is unbound")
                    continue
                vals = [values[p] for p in parents[i]]
                v, st = _FWD[op](vals, aux[i])
                # ascontiguousarray would promote 0-d to 1-d, so guard on ndim
                v = np.asarray(v, dtype=np.float64)
                if v.ndim and not v.flags["C_CONTIGUOUS"]:
                    v = np.ascontiguousarray(v)
                if v.shape != self._shape[i]:
                    raise ContractError(
                        f"op {op} (node {self._label(i)}) produced shape {v.shape}, declared {self._shape[i]}"
                    )
                if not np.isfinite(v).all():
                    err = NumericError(
                        f"op {op} (node {self._label(i)}) produced non-finite values"
                    )
                    err.node = i
                    raise err
                values[i] = v
                stash[i] = st
        self._value_serial = self._bind_serial
        self._value_root = root
        return values[root]

    def backward(self, loss: int) -> dict[int, Array]:
        """Gradient of scalar node `loss` wrt every trainable leaf.

        Leaves the loss does not depend on get zero gradients.
        """
        self._check(loss)
        if self._shape[loss] != ():
            raise ContractError(f"backward target must be scalar, got shape {self._shape[loss]}")
        if self._value_serial != self._bind_serial or self._value_root < loss:
            self.forward(loss)
        adj: list[Array | None] = [None] * (loss + 1)
        adj[loss] = np.ones(())
        ops, parents, values, stash, aux = self._op, self._parents, self._value, self._stash, self._aux
        with np.errstate(all="ignore"):
            for i in range(loss, -1, -1):
                g = adj[i]
                if g is None or ops[i] == "leaf":
                    continue
                vals = [values[p] for p in parents[i]]
                grads = _VJP[ops[i]](g, values[i], stash[i], vals, aux[i])
                for p, gp in zip(parents[i], grads):
                    if gp is None:
                        continue
                    if adj[p] is None:
                        adj[p] = np.array(gp, dtype=np.float64, order="C")
                    else:
                        adj[p] = adj[p] + gp
        out: dict[int, Array] = {}
        for i, trainable in enumerate(self._trainable):
            if not trainable:
                continue
            g = adj[i] if i <= loss else None
            out[i] = np.zeros(self._shape[i]) if g is None else g
        return out


def forward_eval(tape: Tape, root: int) -> Array:
    """Evaluate the graph up to `root` and return its value."""
    return tape.forward(root)


def backward_grad(tape: Tape, loss: int) -> dict[int, Array]:
    """Reverse pass from scalar node `loss`; see Tape.backward."""
    return tape.backward(loss)


def finite_diff_check(fn, params, step: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    fn is a graph program: fn(tape, leaf_ids) -> scalar root id. params is the
    list of arrays bound to those leaves. The analytic side is one backward
    pass; the numeric side rebinds one perturbed entry at a time on the same
    graph, so both sides evaluate the same computation. Per-entry error is
    |analytic - central| / max(1e-8, |central|).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = [_as_value(p) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p, name=f"param{k}") for k, p in enumerate(params)]
    root = fn(tape, leaves)
    if tape.shape(root) != ():
        raise ContractError(f"fn must build a scalar, got shape {tape.shape(root)}")
    tape.forward(root)
    grads = tape.backward(root)
    analytic = [np.array(grads[leaf]) for leaf in leaves]

    worst = 0.0
    for leaf, base, grad in zip(leaves, params, analytic):
        work = base.copy()
        flat = work.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            tape.bind(leaf, work)
            hi = float(tape.forward(root))
            flat[j] = orig - step
            tape.bind(leaf, work)
            lo = float(tape.forward(root))
            flat[j] = orig
            central = (hi - lo) / (2.0 * step)
            err = abs(float(gflat[j]) - central) / max(1e-8, abs(central))
            worst = max(worst, err)
        tape.bind(leaf, base)
    return worst
