"""Dense-tensor numeric core with tape-based reverse-mode differentiation.

Everything runs on float64 numpy arrays. A Graph records every primitive
application in order; backward() walks the tape once in reverse. The tape
can also be re-executed from the current leaf values, which is what the
central-difference gradient checker relies on.

The primitive set is deliberately small: matmul, broadcasting add/multiply,
tanh, sigmoid, row softmax, non-overlapping 1-D sum pooling, signed square
root, global l2 normalization, concat/slice/transpose/reshape, reduce-sum,
scalar scaling, embedding lookup, per-row cross entropy with logits, and
mask-based dropout.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operands do not conform to a primitive's shape rule."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"op '{op}': {message}")


class NumericError(ArithmeticError):
    """Raised when a primitive produces NaN or Inf."""


class GraphError(ValueError):
    """Raised on invalid backward/replay requests (bad loss, stochastic tape)."""


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients.

    Leaves (parameters, constants) have graph=None; op outputs point at the
    graph that produced them. grad appears after backward() and always has
    the same shape as data.
    """

    __slots__ = ("data", "grad", "requires_grad", "graph")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Record:
    __slots__ = ("op", "inputs", "out", "attrs", "ctx", "datas")

    def __init__(self, op, inputs, out, attrs, ctx, datas):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.attrs = attrs
        self.ctx = ctx
        # input arrays captured at apply time; backward reads these, replay
        # re-reads the tensors (leaf data may have been swapped since)
        self.datas = datas


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive definitions. Forward: f(datas, attrs) -> (out_array, ctx).
# Backward: b(grad_out, datas, out_array, ctx, attrs) -> tuple of grads
# aligned with the inputs (entries may be None).
# ---------------------------------------------------------------------------

def _chk_matmul(d, attrs):
    a, b = d
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")


def _f_matmul(d, attrs):
    return d[0] @ d[1], None


def _b_matmul(g, d, out, ctx, attrs):
    return g @ d[1].T, d[0].T @ g


def _chk_broadcast(name):
    def chk(d, attrs):
        a, b = d
        sa, sb = a.shape, b.shape
        if sa == sb:
            return
        # common case: column or row vector against a matrix
        if (len(sa) == 2 and len(sb) == 2
                and (sa[0] == sb[0] or sa[0] == 1 or sb[0] == 1)
                and (sa[1] == sb[1] or sa[1] == 1 or sb[1] == 1)):
            return
        try:
            np.broadcast_shapes(sa, sb)
        except ValueError:
            raise ShapeError(name, f"cannot broadcast {sa} with {sb}") from None
    return chk


def _f_add(d, attrs):
    return d[0] + d[1], None


def _b_add(g, d, out, ctx, attrs):
    return _unbroadcast(g, d[0].shape), _unbroadcast(g, d[1].shape)


def _f_mul(d, attrs):
    return d[0] * d[1], None


def _b_mul(g, d, out, ctx, attrs):
    return _unbroadcast(g * d[1], d[0].shape), _unbroadcast(g * d[0], d[1].shape)


def _f_scale(d, attrs):
    return d[0] * attrs["alpha"], None


def _b_scale(g, d, out, ctx, attrs):
    return (g * attrs["alpha"],)


def _f_tanh(d, attrs):
    return np.tanh(d[0]), None


def _b_tanh(g, d, out, ctx, attrs):
    return (g * (1.0 - out * out),)


def _f_sigmoid(d, attrs):
    # tanh form is overflow-free for all finite inputs
    out = np.tanh(0.5 * d[0])
    out += 1.0
    out *= 0.5
    return out, None


def _b_sigmoid(g, d, out, ctx, attrs):
    return (g * out * (1.0 - out),)


def _chk_softmax(d, attrs):
    if d[0].ndim != 2:
        raise ShapeError("softmax_rows", f"expected 2-D logits, got {d[0].shape}")


def _f_softmax(d, attrs):
    x = d[0]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True), None


def _b_softmax(g, d, out, ctx, attrs):
    dot = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - dot),)


def _chk_sum_pool(d, attrs):
    x = d[0]
    k = attrs["k"]
    axis = attrs.get("axis", 0)
    if k < 1:
        raise ShapeError("sum_pool", f"window k={k} must be positive")
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum_pool", f"expected 2-D input, got {x.shape}")
    if x.shape[axis] % k != 0:
        raise ShapeError("sum_pool", f"window k={k} does not divide length {x.shape[axis]}")


def _f_sum_pool(d, attrs):
    x = d[0]
    k = attrs["k"]
    axis = attrs.get("axis", 0)
    if axis == 0:
        out = x.reshape(x.shape[0] // k, k, x.shape[1]).sum(axis=1)
    else:
        out = x.reshape(x.shape[0], x.shape[1] // k, k).sum(axis=2)
    return out, None


def _b_sum_pool(g, d, out, ctx, attrs):
    return (np.repeat(g, attrs["k"], axis=attrs.get("axis", 0)),)


def _f_signed_sqrt(d, attrs):
    x = d[0]
    return np.sign(x) * np.sqrt(np.abs(x)), None


def _b_signed_sqrt(g, d, out, ctx, attrs):
    # |x|^0.5 has infinite slope at 0; the 1e-12 clamp keeps gradients finite.
    return (g * 0.5 / np.sqrt(np.abs(d[0]) + 1e-12),)


def _f_l2_normalize(d, attrs):
    x = d[0]
    n = np.sqrt((x * x).sum())  # keep the input dtype: float() would quantize
    if n < 1e-12:
        return np.zeros_like(x), 0.0
    return x / n, n


def _b_l2_normalize(g, d, out, ctx, attrs):
    n = ctx
    if n == 0.0:
        return (np.zeros_like(d[0]),)
    return ((g - out * (g * out).sum()) / n,)


def _chk_concat(d, attrs):
    axis = attrs["axis"]
    first = d[0]
    for x in d[1:]:
        if x.ndim != first.ndim:
            raise ShapeError("concat", f"rank mismatch {first.shape} vs {x.shape}")
        for ax in range(first.ndim):
            if ax != axis and x.shape[ax] != first.shape[ax]:
                raise ShapeError("concat", f"shape mismatch {first.shape} vs {x.shape} on axis {ax}")


def _f_concat(d, attrs):
    return np.concatenate(d, axis=attrs["axis"]), None


def _b_concat(g, d, out, ctx, attrs):
    axis = attrs["axis"]
    grads = []
    off = 0
    if axis == 0:
        for x in d:
            n = x.shape[0]
            grads.append(g[off:off + n])
            off += n
    elif axis == 1:
        for x in d:
            n = x.shape[1]
            grads.append(g[:, off:off + n])
            off += n
    else:
        sizes = [x.shape[axis] for x in d]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))
    return tuple(grads)


def _chk_slice(d, attrs):
    x = d[0]
    axis = attrs["axis"]
    start, stop = attrs["start"], attrs["stop"]
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError("slice", f"expected 2-D input, got {x.shape}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError("slice", f"range [{start}:{stop}] invalid for {x.shape} on axis {axis}")


def _f_slice(d, attrs):
    x = d[0]
    if attrs["axis"] == 0:
        return x[attrs["start"]:attrs["stop"], :], None
    return x[:, attrs["start"]:attrs["stop"]], None


def _b_slice(g, d, out, ctx, attrs):
    gx = np.zeros_like(d[0])
    if attrs["axis"] == 0:
        gx[attrs["start"]:attrs["stop"], :] = g
    else:
        gx[:, attrs["start"]:attrs["stop"]] = g
    return (gx,)


def _f_transpose(d, attrs):
    return d[0].T, None


def _b_transpose(g, d, out, ctx, attrs):
    return (g.T,)


def _f_reshape(d, attrs):
    return d[0].reshape(attrs["shape"]), None


def _b_reshape(g, d, out, ctx, attrs):
    return (g.reshape(d[0].shape),)


def _f_reduce_sum(d, attrs):
    axis = attrs.get("axis")
    if axis is None:
        return np.asarray(d[0].sum()).reshape(1, 1), None
    return d[0].sum(axis=axis, keepdims=attrs.get("keepdims", False)), None


def _b_reduce_sum(g, d, out, ctx, attrs):
    x = d[0]
    axis = attrs.get("axis")
    if axis is None:
        return (np.full_like(x, g.reshape(-1)[0]),)
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _chk_embedding(d, attrs):
    table = d[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be 2-D, got {table.shape}")
    if len(ids) == 0:
        raise ShapeError("embedding_lookup", "empty id sequence")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError("embedding_lookup",
                         f"id out of range [0, {table.shape[0]}): {int(ids.min())}..{int(ids.max())}")


def _f_embedding(d, attrs):
    # columns are token embeddings: out[:, i] = table[ids[i]]
    return d[0][attrs["ids"]].T, None


def _b_embedding(g, d, out, ctx, attrs):
    gt = np.zeros_like(d[0])
    np.add.at(gt, attrs["ids"], g.T)
    return (gt,)


def _chk_cross_entropy(d, attrs):
    x = d[0]
    t = attrs["targets"]
    if x.ndim != 2:
        raise ShapeError("cross_entropy_with_logits", f"logits must be 2-D, got {x.shape}")
    if len(t) != x.shape[0]:
        raise ShapeError("cross_entropy_with_logits",
                         f"{len(t)} targets for {x.shape[0]} rows")
    if t.min() < 0 or t.max() >= x.shape[1]:
        raise ShapeError("cross_entropy_with_logits", f"target out of range for {x.shape[1]} classes")


def _f_cross_entropy(d, attrs):
    x = d[0]
    t = attrs["targets"]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    ce = lse - x[np.arange(x.shape[0]), t]
    return ce.reshape(-1, 1), p


def _b_cross_entropy(g, d, out, ctx, attrs):
    p = ctx
    gx = p.copy()
    gx[np.arange(p.shape[0]), attrs["targets"]] -= 1.0
    return (gx * g,)


def _chk_dropout(d, attrs):
    if attrs["mask"].shape != d[0].shape:
        raise ShapeError("dropout", f"mask {attrs['mask'].shape} vs input {d[0].shape}")


def _f_dropout(d, attrs):
    return d[0] * attrs["mask"], None


def _b_dropout(g, d, out, ctx, attrs):
    return (g * attrs["mask"],)


class OpDef:
    __slots__ = ("name", "fwd", "bwd", "check")

    def __init__(self, name, fwd, bwd, check=None):
        self.name = name
        self.fwd = fwd
        self.bwd = bwd
        self.check = check


OPS = {
    "matmul": OpDef("matmul", _f_matmul, _b_matmul, _chk_matmul),
    "add": OpDef("add", _f_add, _b_add, _chk_broadcast("add")),
    "mul": OpDef("mul", _f_mul, _b_mul, _chk_broadcast("mul")),
    "scale": OpDef("scale", _f_scale, _b_scale),
    "tanh": OpDef("tanh", _f_tanh, _b_tanh),
    "sigmoid": OpDef("sigmoid", _f_sigmoid, _b_sigmoid),
    "softmax_rows": OpDef("softmax_rows", _f_softmax, _b_softmax, _chk_softmax),
    "sum_pool": OpDef("sum_pool", _f_sum_pool, _b_sum_pool, _chk_sum_pool),
    "signed_sqrt": OpDef("signed_sqrt", _f_signed_sqrt, _b_signed_sqrt),
    "l2_normalize": OpDef("l2_normalize", _f_l2_normalize, _b_l2_normalize),
    "concat": OpDef("concat", _f_concat, _b_concat, _chk_concat),
    "slice": OpDef("slice", _f_slice, _b_slice, _chk_slice),
    "transpose": OpDef("transpose", _f_transpose, _b_transpose),
    "reshape": OpDef("reshape", _f_reshape, _b_reshape),
    "reduce_sum": OpDef("reduce_sum", _f_reduce_sum, _b_reduce_sum),
    "embedding_lookup": OpDef("embedding_lookup", _f_embedding, _b_embedding, _chk_embedding),
    "cross_entropy_with_logits": OpDef("cross_entropy_with_logits", _f_cross_entropy,
                                       _b_cross_entropy, _chk_cross_entropy),
    "dropout": OpDef("dropout", _f_dropout, _b_dropout, _chk_dropout),
}


class Graph:
    """Ordered tape of primitive applications.

    Record order is the topological order; backward visits it exactly once
    in reverse. check_finite=False skips the per-op NaN/Inf scan (training
    loops validate the loss and gradients instead).
    """

    def __init__(self, check_finite=True):
        self.records = []
        self.stochastic = False
        self.check_finite = check_finite
        self._replay = None

    # -- construction -------------------------------------------------

    def const(self, data):
        return Tensor(data, requires_grad=False)

    def apply(self, op, inputs, attrs=None):
        """Apply the primitive named `op` to `inputs` and record it."""
        opdef = OPS.get(op)
        if opdef is None:
            raise KeyError(f"unknown primitive op '{op}'")
        return self._apply(opdef, list(inputs), attrs or {})

    def _apply(self, opdef, inputs, attrs):
        datas = []
        rg = False
        for t in inputs:
            datas.append(t.data)
            if t.requires_grad:
                rg = True
        if opdef.check is not None:
            opdef.check(datas, attrs)
        out_data, ctx = opdef.fwd(datas, attrs)
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise NumericError(f"op '{opdef.name}' produced non-finite values")
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        out.requires_grad = rg
        out.graph = self
        self.records.append(Record(opdef, inputs, out, attrs, ctx, datas))
        self._replay = None
        return out

    # -- convenience wrappers ------------------------------------------

    def matmul(self, a, b):
        return self._apply(OPS["matmul"], [a, b], {})

    def add(self, a, b):
        return self._apply(OPS["add"], [a, b], {})

    def mul(self, a, b):
        return self._apply(OPS["mul"], [a, b], {})

    def scale(self, a, alpha):
        return self._apply(OPS["scale"], [a], {"alpha": float(alpha)})

    def tanh(self, a):
        return self._apply(OPS["tanh"], [a], {})

    def sigmoid(self, a):
        return self._apply(OPS["sigmoid"], [a], {})

    def softmax_rows(self, a):
        return self._apply(OPS["softmax_rows"], [a], {})

    def sum_pool(self, a, k, axis=0):
        return self._apply(OPS["sum_pool"], [a], {"k": int(k), "axis": axis})

    def signed_sqrt(self, a):
        return self._apply(OPS["signed_sqrt"], [a], {})

    def l2_normalize(self, a):
        return self._apply(OPS["l2_normalize"], [a], {})

    def concat(self, tensors, axis):
        return self._apply(OPS["concat"], list(tensors), {"axis": axis})

    def slice(self, a, axis, start, stop):
        return self._apply(OPS["slice"], [a], {"axis": axis, "start": start, "stop": stop})

    def transpose(self, a):
        return self._apply(OPS["transpose"], [a], {})

    def reshape(self, a, shape):
        return self._apply(OPS["reshape"], [a], {"shape": tuple(shape)})

    def reduce_sum(self, a, axis=None, keepdims=False):
        return self._apply(OPS["reduce_sum"], [a], {"axis": axis, "keepdims": keepdims})

    def embedding(self, table, ids):
        ids = np.asarray(ids, dtype=np.intp)
        return self._apply(OPS["embedding_lookup"], [table], {"ids": ids})

    def cross_entropy(self, logits, targets):
        targets = np.asarray(targets, dtype=np.intp)
        return self._apply(OPS["cross_entropy_with_logits"], [logits], {"targets": targets})

    def dropout(self, a, mask, frozen=False):
        if not frozen:
            self.stochastic = True
        return self._apply(OPS["dropout"], [a], {"mask": np.asarray(mask, dtype=np.float64),
                                                 "frozen": bool(frozen)})

    # -- tape services --------------------------------------------------

    def tensors(self):
        """Every tensor touched by this tape (inputs and outputs)."""
        seen = {}
        for rec in self.records:
            for t in rec.inputs:
                seen[id(t)] = t
            seen[id(rec.out)] = rec.out
        return list(seen.values())

    def leaves(self, requires_grad_only=True):
        """Input tensors that were never produced by this tape."""
        produced = {id(rec.out) for rec in self.records}
        out, seen = [], set()
        for rec in self.records:
            for t in rec.inputs:
                if id(t) in produced or id(t) in seen:
                    continue
                seen.add(id(t))
                if not requires_grad_only or t.requires_grad:
                    out.append(t)
        return out

    def compile_replay(self):
        """Closures that recompute each record's output from current inputs."""
        if self._replay is None:
            runs = []
            for rec in self.records:
                runs.append(_make_replayer(rec))
            self._replay = runs
        return self._replay

    def replay(self, subset=None):
        runs = self.compile_replay()
        if subset is None:
            for run in runs:
                run()
        else:
            for i in subset:
                runs[i]()

    def dependent_records(self, leaf):
        """Indices of records downstream of `leaf`, in tape order."""
        touched = {id(leaf)}
        out = []
        for i, rec in enumerate(self.records):
            if any(id(t) in touched for t in rec.inputs):
                touched.add(id(rec.out))
                out.append(i)
        return out


def _make_replayer(rec):
    fwd = rec.op.fwd
    inputs = rec.inputs
    attrs = rec.attrs
    out = rec.out

    def run():
        datas = [t.data for t in inputs]
        rec.datas = datas
        out.data, rec.ctx = fwd(datas, attrs)

    return run


def backward(graph, loss):
    """Populate grad = d(loss)/d(tensor) for every requires_grad tensor.

    Gradients accumulate additively across fan-out within the tape. Each
    call starts from scratch: previous grads on tensors of this graph are
    discarded.
    """
    if loss.graph is not graph:
        raise GraphError("loss tensor was not produced by this graph")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")

    tensors = graph.tensors()
    for t in tensors:
        t.grad = None
    loss.grad = np.ones_like(loss.data)

    for rec in reversed(graph.records):
        g = rec.out.grad
        if g is None or not rec.out.requires_grad:
            continue
        grads = rec.op.bwd(g, rec.datas, rec.out.data, rec.ctx, rec.attrs)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi

    for t in tensors:
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


def finite_difference_check(graph, loss, eps, params=None, refine=True):
    """Max relative error between backward() and central differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). Entries whose float64 central difference is dominated
    by roundoff (tiny analytic gradients) are re-measured in extended
    precision when refine=True, so the returned number reflects genuine
    disagreement rather than cancellation noise.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if graph.stochastic:
        raise GraphError("graph is stochastic; freeze dropout masks for checking")
    if loss.graph is not graph:
        raise GraphError("loss tensor was not produced by this graph")
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")

    backward(graph, loss)
    leaves = list(params) if params is not None else graph.leaves()
    analytic = {id(t): t.grad.copy() for t in leaves}

    graph.compile_replay()
    clean_max = 0.0
    suspects = []

    for leaf in leaves:
        subset = graph.dependent_records(leaf)
        flat = leaf.data.reshape(-1)
        a_flat = analytic[id(leaf)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            graph.replay(subset)
            lp = float(loss.data.reshape(-1)[0])
            flat[i] = orig - eps
            graph.replay(subset)
            lm = float(loss.data.reshape(-1)[0])
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if refine and err > 1e-5:
                suspects.append((leaf, i, a))
            elif err > clean_max:
                clean_max = err
        graph.replay(subset)

    if suspects:
        return max(clean_max, _refine_suspects(graph, loss, eps, suspects))
    return clean_max


def _refine_suspects(graph, loss, eps, suspects):
    """Re-measure flagged entries with longdouble central differences.

    The subtraction lp - lm happens in extended precision; converting the
    individual losses to float64 first would reintroduce the cancellation
    this pass exists to remove.
    """
    all_leaves = graph.leaves(requires_grad_only=False)
    saved = [(t, t.data) for t in all_leaves]
    eps_ld = np.longdouble(eps)
    try:
        for t, d in saved:
            t.data = d.astype(np.longdouble)
        graph.replay()
        max_err = 0.0
        subsets = {}
        for leaf, i, a in suspects:
            if id(leaf) not in subsets:
                subsets[id(leaf)] = graph.dependent_records(leaf)
            subset = subsets[id(leaf)]
            flat = leaf.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps_ld
            graph.replay(subset)
            lp = loss.data.reshape(-1)[0]
            flat[i] = orig - eps_ld
            graph.replay(subset)
            lm = loss.data.reshape(-1)[0]
            flat[i] = orig
            graph.replay(subset)
            num = float((lp - lm) / (2.0 * eps_ld))
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > max_err:
                max_err = err
        return max_err
    finally:
        for t, d in saved:
            t.data = d
        graph.replay()
