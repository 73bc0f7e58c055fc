"""A small reverse-mode autodiff tape over numpy arrays.

Every operation works on whole batches, so a training step records a few
dozen nodes rather than one per scalar. Broadcasting follows numpy; gradients
are summed back to each operand's shape.
"""

from __future__ import annotations

import numpy as np


class StaleTapeError(RuntimeError):
    """Raised when a tape is replayed after its parameters were mutated."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "tape", "parents", "backward_fn", "requires_grad")

    __array_priority__ = 100

    def __init__(self, data, tape, parents=(), backward_fn=None, requires_grad=False):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, self.tape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Records operations so a later :meth:`backward` can replay them in reverse."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._watched: list[tuple] = []  # (tree, {name: Tensor}, version)
        self.output: Tensor | None = None
        self._grads: dict | None = None

    # leaves -----------------------------------------------------------------
    def const(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=np.float64), self)

    def variable(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=np.float64), self, requires_grad=True)

    def watch(self, tree) -> dict:
        """Register every leaf of a :class:`ParamTree` as a differentiable input."""
        leaves = {k: Tensor(v, self, requires_grad=True) for k, v in tree.items()}
        self._watched.append((tree, leaves, getattr(tree, "version", 0)))
        return leaves

    def constants(self, tree) -> dict:
        return {k: Tensor(v, self) for k, v in tree.items()}

    def record(self, data, parents, backward_fn) -> Tensor:
        req = any(p.requires_grad for p in parents)
        t = Tensor(data, self, parents if req else (), backward_fn if req else None, req)
        if req:
            self.nodes.append(t)
        return t

    # reverse pass ------------------------------------------------------------
    def backward(self, out: Tensor, upstream=None, leaves=()) -> None:
        """Accumulate d(out . upstream)/d(leaf) for all watched leaves.

        Extra ``leaves`` (e.g. from :meth:`variable`) are also kept; read them with
        :meth:`grad`.
        """
        for tree, _, version in self._watched:
            if getattr(tree, "version", 0) != version:
                raise StaleTapeError("parameters changed after this tape was recorded")
        if upstream is None:
            upstream = np.ones_like(out.data)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(out.data.shape)
        grads = {id(out): upstream}
        keep = {id(t) for _, lv, _ in self._watched for t in lv.values()}
        keep.update(id(t) for t in leaves)
        final = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key in keep:
            if key in grads:
                final[key] = grads[key]
        # leaves used directly as the output
        if id(out) in keep and id(out) not in final:
            final[id(out)] = upstream
        self._grads = final

    def grad(self, t: Tensor) -> np.ndarray:
        if self._grads is None:
            raise RuntimeError("call backward() first")
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def grads_for(self, tree):
        """Gradient ParamTree (same class and keys as ``tree``)."""
        for tr, leaves, _ in self._watched:
            if tr is tree:
                out = tree.__class__({k: self.grad(t) for k, t in leaves.items()})
                return out
        raise KeyError("tree was not watched on this tape")


def _t(x, tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _t(a, tape), _t(b, tape)
    sa, sb = a.data.shape, b.data.shape
    return tape.record(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _t(a, tape), _t(b, tape)
    sa, sb = a.data.shape, b.data.shape
    return tape.record(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _t(a, tape), _t(b, tape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return tape.record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _t(a, tape), _t(b, tape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return tape.record(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return a.tape.record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape.record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape.record(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return a.tape.record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return a.tape.record(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    y = np.logaddexp(0.0, ad)
    return a.tape.record(y, (a,), lambda g: (g / (1.0 + np.exp(-ad)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return a.tape.record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return a.tape.record(np.abs(a.data), (a,), lambda g: (g * s,))


# --- reductions and shape ops --------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return a.tape.record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return a.tape.record(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def min_over(a: Tensor, axis: int = 0) -> Tensor:
    """Minimum along ``axis``; the gradient flows to the (first) argmin."""
    idx = np.expand_dims(a.data.argmin(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return a.tape.record(out, (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return a.tape.record(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(a.data[idx], (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return a.tape.record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swap_last(a: Tensor) -> Tensor:
    return a.tape.record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(xs, axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_t(x, tape) for x in xs]
    datas = [x.data for x in xs]
    # broadcast leading dims so e.g. (B, d) and (E, B, k) can be joined
    lead = np.broadcast_shapes(*[d.shape[:-1] for d in datas])
    datas = [np.broadcast_to(d, lead + d.shape[-1:]) for d in datas]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    shapes = [x.data.shape for x in xs]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))

    return tape.record(np.concatenate(datas, axis=axis), tuple(xs), bw)


# --- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _t(a, tape), _t(b, tape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(ad @ bd, (a, b), bw)


def linear(x, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` as one node. ``W`` may carry a leading ensemble axis."""
    tape = _tape_of(x, W, b)
    x = _t(x, tape)
    xd, Wd, bd = x.data, W.data, b.data
    out = xd @ Wd + bd

    def bw(g):
        gx = _unbroadcast(g @ np.swapaxes(Wd, -1, -2), xd.shape) if x.requires_grad else None
        gW = (_unbroadcast(np.swapaxes(xd, -1, -2) @ g, Wd.shape)
              if W.requires_grad else None)
        gb = _unbroadcast(g, bd.shape) if b.requires_grad else None
        return gx, gW, gb

    return tape.record(out, (x, W, b), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    tape = _tape_of(x, gain, bias)
    x, gain, bias = _t(x, tape), _t(gain, tape), _t(bias, tape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.data.shape) if bias.requires_grad else None
        return gx, gg, gb

    return tape.record(out, (x, gain, bias), bw)


def layernorm_composed(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Same as :func:`layernorm` built from primitive nodes (twice differentiable)."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    inv = power(mean(square(xc), axis=-1, keepdims=True) + eps, -0.5)
    return xc * inv * gain + bias
