"""Derivative engine: reverse-mode tape over numpy arrays and second-order
forward jets.

Two mechanisms cooperate:

* ``Jet2`` / ``JetBatch`` carry a field value together with its first and
  second derivatives along the three input axes (x, y, t).  Jets are pushed
  forward through network layers with exact chain rules (``jet_affine``,
  ``jet_sin``, ``jet_gate``), which is how the wave operator terms
  (Laplacian, second time derivative) are obtained.
* ``Tape`` / ``Tensor`` record every primitive array operation of a forward
  pass so that one reverse sweep yields the gradient of a scalar loss with
  respect to all parameters -- including losses that contain second
  derivatives from jets (reverse-over-forward).

All jet arithmetic is written against a tiny operator set (`+`, `-`, `*`,
`@`, ``sin``/``cos``/``absolute``/...) that dispatches on type, so the same
code runs on raw ``numpy`` arrays (fast inference, test oracles) and on
``Tensor`` (training).

Only the diagonal of the input Hessian is propagated: the wave residual
needs ∂²/∂x², ∂²/∂y², ∂²/∂t² and no mixed terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class TapeError(RuntimeError):
    """Backward requested on a tape that cannot provide it."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """Array node recorded on a :class:`Tape`.

    Arithmetic with plain numbers/arrays is supported; the non-Tensor side is
    captured as a constant (it never receives an adjoint).
    """

    __slots__ = ("value", "tape", "requires_grad", "grad", "_parents", "name")

    # keep numpy from absorbing us into object arrays; mixed expressions go
    # through the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, tape, requires_grad=False, parents=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents          # tuple of (Tensor, vjp) pairs
        self.name = name
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- graph construction helpers -----------------------------------------

    def _make(self, value, parents):
        live = tuple((p, f) for p, f in parents if p.requires_grad)
        return Tensor(value, self.tape, requires_grad=bool(live), parents=live)

    def __add__(self, other):
        if isinstance(other, Tensor):
            v = self.value + other.value
            return self._make(v, ((self, lambda g: _unbroadcast(g, self.value.shape)),
                                  (other, lambda g: _unbroadcast(g, other.value.shape))))
        other = np.asarray(other, dtype=np.float64)
        v = self.value + other
        return self._make(v, ((self, lambda g: _unbroadcast(g, self.value.shape)),))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            v = self.value - other.value
            return self._make(v, ((self, lambda g: _unbroadcast(g, self.value.shape)),
                                  (other, lambda g: _unbroadcast(-g, other.value.shape))))
        other = np.asarray(other, dtype=np.float64)
        return self._make(self.value - other,
                          ((self, lambda g: _unbroadcast(g, self.value.shape)),))

    def __rsub__(self, other):
        other = np.asarray(other, dtype=np.float64)
        return self._make(other - self.value,
                          ((self, lambda g: _unbroadcast(-g, self.value.shape)),))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self.value, other.value
            return self._make(a * b, ((self, lambda g: _unbroadcast(g * b, a.shape)),
                                      (other, lambda g: _unbroadcast(g * a, b.shape))))
        other = np.asarray(other, dtype=np.float64)
        a = self.value
        return self._make(a * other,
                          ((self, lambda g: _unbroadcast(g * other, a.shape)),))

    __rmul__ = __mul__

    def __neg__(self):
        return self._make(-self.value, ((self, lambda g: -g),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _matmul_value(a, b):
    # (..., k) x (k, m) contractions are routed through one 2D BLAS call;
    # broadcast batched matmul in numpy is several times slower.
    if a.ndim > 2 and b.ndim == 2:
        lead = a.shape[:-1]
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[-1])
    return a @ b


def matmul(a, b):
    """Matrix product; either side may be a Tensor."""
    av = a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.value if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul {av.shape} @ {bv.shape}")
    v = _matmul_value(av, bv)
    parents = []
    if isinstance(a, Tensor):
        parents.append((a, lambda g: _unbroadcast(_matmul_value(g, bv.swapaxes(-1, -2)), av.shape)))
    if isinstance(b, Tensor):
        def _db(g):
            if av.ndim > 2 and bv.ndim == 2:
                n = g.ndim - 2
                return np.tensordot(av, g, axes=(tuple(range(n + 1)), tuple(range(n + 1))))
            return _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        parents.append((b, _db))
    holder = a if isinstance(a, Tensor) else b
    return holder._make(v, tuple(parents))


def sin(x):
    if isinstance(x, Tensor):
        c = np.cos(x.value)
        return x._make(np.sin(x.value), ((x, lambda g: g * c),))
    return np.sin(x)


def cos(x):
    if isinstance(x, Tensor):
        s = np.sin(x.value)
        return x._make(np.cos(x.value), ((x, lambda g: -g * s),))
    return np.cos(x)


def square(x):
    if isinstance(x, Tensor):
        v = x.value
        return x._make(v * v, ((x, lambda g: 2.0 * g * v),))
    return x * x


def absolute(x):
    """|x| with the subgradient convention sign(0) = 0."""
    if isinstance(x, Tensor):
        s = np.sign(x.value)
        return x._make(np.abs(x.value), ((x, lambda g: g * s),))
    return np.abs(x)


def mean(x):
    if isinstance(x, Tensor):
        n = x.value.size
        return x._make(np.mean(x.value),
                       ((x, lambda g: np.broadcast_to(g / n, x.value.shape)),))
    return np.mean(x)


def total(x):
    if isinstance(x, Tensor):
        return x._make(np.sum(x.value),
                       ((x, lambda g: np.broadcast_to(g, x.value.shape)),))
    return np.sum(x)


def axis_sum(x, axis: int):
    if isinstance(x, Tensor):
        v = x.value.sum(axis=axis)
        return x._make(v, ((x, lambda g: np.broadcast_to(np.expand_dims(g, axis),
                                                         x.value.shape)),))
    return x.sum(axis=axis)


def expand_axis(x, axis):
    """Insert a length-1 axis (numpy ``expand_dims``)."""
    if isinstance(x, Tensor):
        v = np.expand_dims(x.value, axis)
        return x._make(v, ((x, lambda g: g.reshape(x.value.shape)),))
    return np.expand_dims(x, axis)


class Tape:
    """Ordered record of primitive operations of one forward pass.

    Leaves are registered with :meth:`param` (trainable, receives a gradient)
    or :meth:`constant`.  After the forward pass ends in a scalar,
    :meth:`backward` replays adjoints over the recorded nodes in reverse
    creation order, which is a reverse topological order of the graph.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._params: dict[str, Tensor] = {}

    def param(self, value, name=None) -> Tensor:
        t = Tensor(value, self, requires_grad=True, name=name)
        if name is not None:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value, self, requires_grad=False)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, adjoint: float = 1.0) -> dict[str, np.ndarray]:
        """One reverse sweep from ``loss``; returns gradients of named params.

        Gradients are also left on each reachable node's ``.grad``. A second
        call re-runs the sweep from scratch.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise TapeError("loss is not a node of this tape")
        if loss.value.ndim != 0:
            raise TapeError("backward requires the forward pass to end in a scalar")
        for t in self._nodes:
            t.grad = None
        loss.grad = np.asarray(float(adjoint))
        for t in reversed(self._nodes):
            g = t.grad
            if g is None:
                continue
            for parent, vjp in t._parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib
        out = {}
        for name, p in self._params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
        return out


# ---------------------------------------------------------------------------
# second-order jets
# ---------------------------------------------------------------------------

N_AXES = 3  # input axes carrying derivatives: x, y, t


@dataclass
class Jet2:
    """Value, gradient and Hessian diagonal of a scalar field at one point.

    ``grad``/``hdiag`` are ordered (x, y, t) and expressed in physical units
    of the field per meter / second (and per m², s²).
    """

    value: float
    grad: np.ndarray
    hdiag: np.ndarray

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64).reshape(N_AXES)
        self.hdiag = np.asarray(self.hdiag, dtype=np.float64).reshape(N_AXES)

    @classmethod
    def constant(cls, value: float) -> "Jet2":
        return cls(float(value), np.zeros(N_AXES), np.zeros(N_AXES))


class JetBatch:
    """A vector of jets for a batch of points.

    ``value``: (B, n) array/Tensor; ``grad`` and ``hdiag``: (B, 3, n), axis 1
    indexing the input axes (x, y, t).
    """

    __slots__ = ("value", "grad", "hdiag")

    def __init__(self, value, grad, hdiag):
        self.value = value
        self.grad = grad
        self.hdiag = hdiag

    @staticmethod
    def seed(x_norm: np.ndarray, axis_scale: np.ndarray, tape: Tape | None = None) -> "JetBatch":
        """Input-layer jets for normalized coordinates ``x_norm`` (B, 3).

        ``axis_scale[a]`` is d(normalized)/d(physical) for axis ``a``, so the
        propagated derivatives come out in physical units.
        """
        x_norm = np.asarray(x_norm, dtype=np.float64)
        b = x_norm.shape[0]
        grad = np.zeros((b, N_AXES, N_AXES))
        grad[:, np.arange(N_AXES), np.arange(N_AXES)] = np.asarray(axis_scale, dtype=np.float64)
        hdiag = np.zeros((b, N_AXES, N_AXES))
        if tape is not None:
            return JetBatch(tape.constant(x_norm), tape.constant(grad), tape.constant(hdiag))
        return JetBatch(x_norm, grad, hdiag)

    def to_jets(self) -> list[Jet2]:
        v, g, h = [np.asarray(getattr(c, "value", c)) for c in (self.value, self.grad, self.hdiag)]
        return [Jet2(float(v[i, j]), g[i, :, j], h[i, :, j])
                for i in range(v.shape[0]) for j in range(v.shape[1])]


def _width(x):
    v = x.value if isinstance(x, Tensor) else x
    return v.shape[-1]


def jet_affine(w, b, jet: JetBatch) -> JetBatch:
    """Push jets through x -> x·W + b, with W of shape (n_in, n_out).

    Exact for affine maps: the bias touches the value channel only, and
    derivative channels transform linearly.
    """
    wv = w.value if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if _width(jet.value) != wv.shape[0]:
        raise ShapeError(f"affine: input width {_width(jet.value)} vs W {wv.shape}")
    value = matmul(jet.value, w) if isinstance(jet.value, Tensor) or isinstance(w, Tensor) \
        else _matmul_value(jet.value, wv)
    if b is not None:
        bv = b.value if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
        if bv.shape[-1] != wv.shape[1]:
            raise ShapeError(f"affine: bias {bv.shape} vs W {wv.shape}")
        value = value + b
    if isinstance(jet.grad, Tensor) or isinstance(w, Tensor):
        grad = matmul(jet.grad, w)
        hdiag = matmul(jet.hdiag, w)
    else:
        grad = _matmul_value(jet.grad, wv)
        hdiag = _matmul_value(jet.hdiag, wv)
    return JetBatch(value, grad, hdiag)


def jet_sin(omega0: float, jet: JetBatch) -> JetBatch:
    """Elementwise u -> sin(omega0·u) with first/second-order chain rule."""
    s = sin(omega0 * jet.value)
    c = cos(omega0 * jet.value)
    oc = expand_axis(omega0 * c, 1)            # (B, 1, n)
    grad = oc * jet.grad
    curv = expand_axis((-omega0 * omega0) * s, 1)
    hdiag = curv * square(jet.grad) + oc * jet.hdiag
    return JetBatch(s, grad, hdiag)


def jet_gate(z: JetBatch, u: JetBatch, v: JetBatch) -> JetBatch:
    """Convex gate (1−z)⊙u + z⊙v, i.e. u + z⊙(v−u), with the second-order
    product rule h(ab) = h(a)b + 2∇a⊙∇b + a h(b) applied to z⊙(v−u)."""
    if not (_width(z.value) == _width(u.value) == _width(v.value)):
        raise ShapeError("gate operands must have equal width")
    sv = v.value - u.value
    sg = v.grad - u.grad
    sh = v.hdiag - u.hdiag
    zv = expand_axis(z.value, 1)               # (B, 1, n)
    svx = expand_axis(sv, 1)
    value = u.value + z.value * sv
    grad = u.grad + z.grad * svx + zv * sg
    hdiag = u.hdiag + z.hdiag * svx + 2.0 * (z.grad * sg) + zv * sh
    return JetBatch(value, grad, hdiag)


def jet_scale(scale: float, jet: JetBatch) -> JetBatch:
    return JetBatch(scale * jet.value, scale * jet.grad, scale * jet.hdiag)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class FdEstimate:
    grad: np.ndarray
    hdiag: np.ndarray


def finite_diff_probe(f, x, h: float = 1e-5, h2: float | None = None) -> FdEstimate:
    """Central-difference gradient and second-derivative estimates of a scalar
    map ``f`` at point ``x``.

    ``h`` is the first-order step; ``h2`` the second-order step (defaults to
    a larger step, second differences lose more bits to roundoff).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if h2 is None:
        h2 = max(h, 3e-4)
    x = np.asarray(x, dtype=np.float64)
    k = x.size
    grad = np.zeros(k)
    hdiag = np.zeros(k)
    f0 = float(f(x))
    for i in range(k):
        e = np.zeros(k)
        e[i] = 1.0
        grad[i] = (float(f(x + h * e)) - float(f(x - h * e))) / (2.0 * h)
        hdiag[i] = (float(f(x + h2 * e)) - 2.0 * f0 + float(f(x - h2 * e))) / (h2 * h2)
    return FdEstimate(grad=grad, hdiag=hdiag)
