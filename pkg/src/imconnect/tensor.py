"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op's vector-Jacobian product is written in terms of other ops, so a
backward pass run with ``create_graph=True`` is itself recorded on the tape
and can be differentiated again. The implicit connection relies on this: its
inner gradient-descent steps become part of the graph that outer training
differentiates.

No broadcasting: operands must share a shape, except Python scalars. Use
:func:`expand` / :func:`reduce_to` to change shapes explicitly.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeUsageError(RuntimeError):
    """Backward was called on something it cannot differentiate."""


class Tensor:
    """A float64 array, optionally recorded as a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 1000

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: add(neg(self), o)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


def _not_scalar(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "vjp")

    def __init__(self, kind, inputs, vjp):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of operations on watched tensors.

    Node ids are list indices, so inputs always precede the nodes that use
    them. A tape is a single-threaded unit of work.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def watch(self, x) -> Tensor:
        """Record ``x`` as a leaf. Returns a new tensor sharing the data."""
        x = as_tensor(x)
        self.nodes.append(_Node("leaf", (), None))
        return Tensor(x.data, self, len(self.nodes) - 1)

    def _record(self, kind, data, inputs, vjp) -> Tensor:
        self.nodes.append(_Node(kind, inputs, vjp))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> Gradients:
        """Populate ``self.gradients`` with d(root)/d(node) for every node
        reachable from ``root`` and return them."""
        self._check_root(root)
        grads = self._sweep(root, None, create_graph=False)
        self.gradients = grads
        return Gradients(grads)

    def grad(self, root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
        """Gradients of ``root`` with respect to each tensor in ``wrt``.

        Only paths leading from ``wrt`` to ``root`` are traversed; everything
        else is held constant. With ``create_graph`` the returned gradients
        are recorded on this tape. ``self.gradients`` is left untouched.
        """
        self._check_root(root)
        for w in wrt:
            if w.tape is not self:
                raise TapeUsageError("wrt tensor is not recorded on this tape")
        grads = self._sweep(root, [w.node_id for w in wrt], create_graph)
        return [grads.get(w.node_id) if w.node_id in grads else Tensor(np.zeros(w.shape)) for w in wrt]

    def _check_root(self, root):
        if not isinstance(root, Tensor) or root.tape is not self:
            raise TapeUsageError("root is not recorded on this tape")
        if root.size != 1 or root.ndim > 1:
            raise TapeUsageError(f"root must be a scalar of shape () or (1,), got {root.shape}")

    def _sweep(self, root, wrt_ids, create_graph):
        nodes = self.nodes
        rid = root.node_id
        if wrt_ids is None:
            lo = 0
            depends = None
        else:
            lo = min(wrt_ids)
            depends = set(wrt_ids)
            for i in range(lo, rid + 1):
                if any(j in depends for j in nodes[i].inputs if j is not None):
                    depends.add(i)
            if rid not in depends:
                return {}

        prev = self.recording
        self.recording = create_graph
        try:
            seed = np.ones(root.shape)
            grads = {rid: self._record("const", seed, (), None) if create_graph else Tensor(seed)}
            for i in range(rid, lo - 1, -1):
                g = grads.get(i)
                if g is None:
                    continue
                node = nodes[i]
                if not node.inputs:
                    continue
                if depends is None:
                    needs = tuple(j is not None for j in node.inputs)
                else:
                    needs = tuple(j is not None and j in depends for j in node.inputs)
                if not any(needs):
                    continue
                in_grads = node.vjp(g, needs)
                for j, need, gj in zip(node.inputs, needs, in_grads):
                    if not need or gj is None:
                        continue
                    prior = grads.get(j)
                    grads[j] = gj if prior is None else add(prior, gj)
        finally:
            self.recording = prev
        if depends is not None:
            return {j: grads[j] for j in wrt_ids if j in grads}
        return grads


class Gradients:
    """Read-only view of a gradient map; missing entries read as zeros."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def __getitem__(self, x: Tensor) -> np.ndarray:
        g = self._grads.get(x.node_id) if x.node_id is not None else None
        return np.zeros(x.shape) if g is None else g.data

    def __contains__(self, x: Tensor):
        return x.node_id in self._grads

    def __len__(self):
        return len(self._grads)

    def ids(self):
        return self._grads.keys()


# -- recording helper -----------------------------------------------------------


def _active_tape(inputs):
    tape = None
    for x in inputs:
        t = x.tape
        if t is not None and t.recording:
            if tape is None:
                tape = t
            elif t is not tape:
                raise TapeUsageError("operands are recorded on different tapes")
    return tape


def _emit(kind, data, inputs, vjp):
    tape = _active_tape(inputs)
    if tape is None:
        return Tensor(data)
    ids = tuple(x.node_id if x.tape is tape else None for x in inputs)
    return tape._record(kind, data, ids, vjp)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _emit("add_scalar", a.data + c, (a,), lambda g, needs: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, needs: (g, neg(g) if needs[1] else None))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a Python scalar."""
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _emit("scale", a.data * c, (a,), lambda g, needs: (mul(g, c),))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same("mul", a, b)

    def vjp(g, needs):
        return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)

    return _emit("mul", a.data * b.data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, power(b, -1.0))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = np.power(a.data, p)

    def vjp(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _emit("pow", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    res = _emit("exp", out, (a,), None)
    if res.tape is not None:
        res.tape.nodes[res.node_id].vjp = lambda g, needs: (mul(g, res),)
    return res


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,), lambda g, needs: (mul(g, power(a, -1.0)),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    res = _emit("tanh", out, (a,), None)
    if res.tape is not None:
        res.tape.nodes[res.node_id].vjp = lambda g, needs: (mul(g, add(neg(mul(res, res)), 1.0)),)
    return res


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _emit("relu", a.data * mask, (a,), lambda g, needs: (mul(g, Tensor(mask)),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    return _emit("gelu", kernels.gelu(a.data), (a,), lambda g, needs: (mul(g, _gelu_grad(a)),))


def _gelu_grad(a: Tensor) -> Tensor:
    return _emit("gelu_grad", kernels.gelu_grad(a.data), (a,), lambda g, needs: (mul(g, _gelu_grad2(a)),))


def _gelu_grad2(a: Tensor) -> Tensor:
    def vjp(g, needs):
        raise TapeUsageError("third derivative of gelu is not implemented")

    return _emit("gelu_grad2", kernels.gelu_grad2(a.data), (a,), vjp)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"gelu": gelu, "relu": relu}


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g, needs: (transpose(g, inv),))


def _expand_axes(src, shape):
    lead = len(shape) - len(src)
    if lead < 0:
        return None
    axes = list(range(lead))
    for k, (s, t) in enumerate(zip(src, shape[lead:])):
        if s == t:
            continue
        if s != 1:
            return None
        axes.append(lead + k)
    return tuple(axes)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast: add leading axes and/or stretch size-1 axes."""
    shape = tuple(shape)
    if _expand_axes(a.shape, shape) is None:
        raise DimensionError(f"expand: cannot expand {a.shape} to {shape}")
    src = a.shape
    out = np.broadcast_to(a.data, shape)  # read-only view; tensors are never written in place
    return _emit("expand", out, (a,), lambda g, needs: (reduce_to(g, src),))


def reduce_to(a: Tensor, shape) -> Tensor:
    """Sum ``a`` down to ``shape``; the adjoint of :func:`expand`."""
    shape = tuple(shape)
    axes = _expand_axes(shape, a.shape)
    if axes is None:
        raise DimensionError(f"reduce_to: cannot reduce {a.shape} to {shape}")
    src = a.shape
    out = a.data.sum(axis=axes).reshape(shape) if axes else a.data.copy()
    return _emit("reduce_to", out, (a,), lambda g, needs: (expand(g, src),))


def sum_all(a: Tensor) -> Tensor:
    return reduce_to(reshape(a, (a.size,)), (1,)) if a.ndim else a


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it with size 1."""
    return reduce_to(a, a.shape[:-1] + (1,))


def mean_last(a: Tensor) -> Tensor:
    return mul(sum_last(a), 1.0 / a.shape[-1])


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` for any numpy index; gradient scatter-adds."""
    src = a.shape
    return _emit("take", a.data[index], (a,), lambda g, needs: (put_add(g, index, src),))


def put_add(g: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index`` (repeats accumulate)."""
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _emit("put_add", out, (g,), lambda h, needs: (take(h, index),))


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or has the same
    leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if shared:
        # one BLAS call over the flattened leading axes
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def vjp(g, needs):
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = None
        if needs[1]:
            if shared:
                k, n = b.shape
                gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, n)))
            else:
                gb = matmul(transpose(a), g)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


# -- composites ------------------------------------------------------------------


def sum_of_squares(a: Tensor) -> Tensor:
    return sum_all(mul(a, a))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    res = _emit("softmax", out, (a,), None)
    if res.tape is not None:

        def vjp(g, needs):
            gy = mul(g, res)
            return (sub(gy, mul(res, expand(sum_last(gy), res.shape))),)

        res.tape.nodes[res.node_id].vjp = vjp
    return res


def log_softmax(a: Tensor) -> Tensor:
    shift = Tensor(a.data.max(axis=-1, keepdims=True))
    z = sub(a, expand(shift, a.shape))
    lse = log(sum_last(exp(z)))
    return sub(z, expand(lse, a.shape))


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis with variance guard ``eps``, then apply
    the optional affine ``weight``/``bias`` of shape ``(d,)``."""
    shape = a.shape
    centered = sub(a, expand(mean_last(a), shape))
    var = mean_last(mul(centered, centered))
    y = mul(centered, expand(power(add(var, eps), -0.5), shape))
    if weight is not None:
        y = mul(y, expand(weight, shape))
    if bias is not None:
        y = add(y, expand(bias, shape))
    return y


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, expand(b, y.shape))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but labels shape {labels.shape}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = -1.0 / n
    return sum_all(mul(log_softmax(logits), Tensor(onehot)))


# -- gradient checking ---------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor and must build its result from the
    ops in this module.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    x0 = as_tensor(x).data.astype(np.float64, copy=True)
    tape = Tape()
    xt = tape.watch(x0)
    out = f(xt)
    if out.tape is tape:
        analytic = tape.backward(out)[xt]
    else:
        analytic = np.zeros_like(x0)
    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0.copy())).item()
        flat[i] = orig - step
        fm = f(Tensor(x0.copy())).item()
        flat[i] = orig
        central = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    if not math.isfinite(worst):
        return math.inf
    return worst
