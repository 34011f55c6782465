"""Dense float64 tensors with reverse-mode differentiation.

A small numpy-backed engine: every primitive records its parents and a
closure that pushes gradients backward. `Tape.trace` linearizes the graph
in topological order and `backward` walks it in reverse, visiting each node
exactly once. There is no implicit broadcasting except in `broadcast_add`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / finite-difference probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        Tape.trace(self).run_backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run_backward(self):
        root = self.nodes[-1]
        _accumulate(root, np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(a, c * g)

    return _make(c * a.data, (a,), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("hadamard", a, b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """x (..., in) @ w (in, out). The weight must be 2D."""
    if w.data.ndim != 2:
        raise ValueError(f"matmul: weight must be 2D, got {w.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"matmul: shape mismatch {x.data.shape} vs {w.data.shape}")
    in_dim, out_dim = w.data.shape

    def backward(g):
        _accumulate(x, g @ w.data.T)
        xf = x.data.reshape(-1, in_dim)
        gf = g.reshape(-1, out_dim)
        _accumulate(w, xf.T @ gf)

    return _make(x.data @ w.data, (x, w), backward)


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting; gradients are summed back."""
    out_data = a.data + b.data

    def unbroadcast(g, shape):
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        for ax, size in enumerate(shape):
            if size == 1 and g.shape[ax] != 1:
                g = g.sum(axis=ax, keepdims=True)
        return g

    def backward(g):
        _accumulate(a, unbroadcast(g, a.data.shape))
        _accumulate(b, unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data**2))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, g * s)

    return _make(out_data, (a,), backward)


def huber(a: Tensor) -> Tensor:
    """Elementwise smooth-L1: x^2/2 for |x| < 1, |x| - 1/2 otherwise."""
    x = a.data
    small = np.abs(x) < 1.0
    out_data = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)

    def backward(g):
        _accumulate(a, g * np.clip(x, -1.0, 1.0))

    return _make(out_data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None:
        axis = axis % a.data.ndim
    out_data = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g / n))
        else:
            _accumulate(a, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)

    return _make(out_data, (a,), backward)


def sumt(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is not None:
        axis = axis % a.data.ndim
    out_data = a.data.sum(axis=axis)
    n = a.data.shape[axis] if axis is not None else None

    def backward(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g))
        else:
            _accumulate(a, np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return _make(out_data, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(sl)])
            offset += size

    return _make(out_data, tuple(tensors), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Gather along axis 0; `indices` may be any integer array shape."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    return _make(a.data[idx], (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the last axis."""

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accumulate(a, ga)

    return _make(a.data[..., start:stop], (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def apply_transform(t: Tensor, rel: Tensor) -> Tensor:
    """Apply per-row 3x3 transforms t (m,3,3) to offset stacks rel (m,k,3)."""
    if t.data.ndim != 3 or t.data.shape[1:] != (3, 3):
        raise ValueError(f"apply_transform: transforms must be (m,3,3), got {t.data.shape}")
    if rel.data.ndim != 3 or rel.data.shape[2] != 3 or rel.data.shape[0] != t.data.shape[0]:
        raise ValueError(f"apply_transform: shape mismatch {t.data.shape} vs {rel.data.shape}")
    out_data = np.einsum("mij,mkj->mki", t.data, rel.data)

    def backward(g):
        _accumulate(t, np.einsum("mki,mkj->mij", g, rel.data))
        _accumulate(rel, np.einsum("mij,mki->mkj", t.data, g))

    return _make(out_data, (t, rel), backward)


def _rot_stacks(angles: np.ndarray):
    m = angles.shape[0]
    ca, sa = np.cos(angles[:, 0]), np.sin(angles[:, 0])
    cb, sb = np.cos(angles[:, 1]), np.sin(angles[:, 1])
    cc, sc = np.cos(angles[:, 2]), np.sin(angles[:, 2])
    z = np.zeros(m)
    o = np.ones(m)
    rx = np.stack([o, z, z, z, ca, -sa, z, sa, ca], axis=1).reshape(m, 3, 3)
    ry = np.stack([cb, z, -sb, z, o, z, sb, z, cb], axis=1).reshape(m, 3, 3)
    rz = np.stack([cc, -sc, z, sc, cc, z, z, z, o], axis=1).reshape(m, 3, 3)
    drx = np.stack([z, z, z, z, -sa, -ca, z, ca, -sa], axis=1).reshape(m, 3, 3)
    dry = np.stack([-sb, z, -cb, z, z, z, cb, z, -sb], axis=1).reshape(m, 3, 3)
    drz = np.stack([-sc, -cc, z, cc, -sc, z, z, z, z], axis=1).reshape(m, 3, 3)
    return rx, ry, rz, drx, dry, drz


def deform_transform(scales: Tensor, angles: Tensor) -> Tensor:
    """Compose diag(scales) @ Rx @ Ry @ Rz per row: (m,3) x (m,3) -> (m,3,3).

    The rotation factors follow the fixed matrix layout used by the grouping
    transform (Ry carries -sin in its first row).
    """
    if scales.data.shape != angles.data.shape or scales.data.ndim != 2 or scales.data.shape[1] != 3:
        raise ValueError(
            f"deform_transform: need matching (m,3) inputs, got {scales.data.shape} vs {angles.data.shape}"
        )
    rx, ry, rz, drx, dry, drz = _rot_stacks(angles.data)
    ryz = np.einsum("mij,mjk->mik", ry, rz)
    rot = np.einsum("mij,mjk->mik", rx, ryz)
    out_data = scales.data[:, :, None] * rot

    def backward(g):
        _accumulate(scales, np.einsum("mij,mij->mi", g, rot))
        g_rot = scales.data[:, :, None] * g
        d_ax = np.einsum("mij,mjk->mik", drx, ryz)
        d_ay = np.einsum("mij,mjk,mkl->mil", rx, dry, rz)
        d_az = np.einsum("mij,mjk,mkl->mil", rx, ry, drz)
        ga = np.stack(
            [
                np.einsum("mij,mij->m", g_rot, d_ax),
                np.einsum("mij,mij->m", g_rot, d_ay),
                np.einsum("mij,mij->m", g_rot, d_az),
            ],
            axis=1,
        )
        _accumulate(angles, ga)

    return _make(out_data, (scales, angles), backward)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer y = x @ W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_dim:
            raise ValueError(f"linear: input last dim {x.data.shape[-1]} != {self.in_dim}")
        return broadcast_add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MLP:
    """Stacked Linear layers with ReLU between them (none after the last)."""

    def __init__(
        self,
        dims: list[int],
        rng: np.random.Generator,
        name: str,
        zero_last: bool = False,
    ):
        if len(dims) < 2:
            raise ValueError(f"mlp needs at least [in, out] dims, got {dims}")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, f"{name}.{i}", zero_init=zero_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def gradcheck(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar objective, got shape {y.data.shape}")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(x).data)
            flat[i] = orig - step
            lo = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
