"""Wave-equation objective: residual, misfit terms, adaptive weighting, and
the samplers that feed them.

The trained field is pulled toward the measurements by a mean-absolute data
term and toward physics by the homogeneous 2D wave equation

    r = ∂²p/∂x² + ∂²p/∂y² − (1/c²)·∂²p/∂t²

evaluated at freshly drawn collocation points.  The two terms are balanced
by learned noise scales ε_d, ε_f, kept positive through the
reparameterization s = log ε: the combined objective

    L = L_data/(2 e^{2 s_d}) + L_PDE/(2 e^{2 s_f}) + s_d + s_f

is minimized jointly in the network weights and in s, and its stationary
points satisfy ε² = loss (the maximum-likelihood scale estimate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor, axis_sum
from .gridio import FieldGrid


@dataclass(frozen=True)
class Medium:
    """Homogeneous propagation medium (defaults: air at 20 °C)."""

    c: float = 343.0
    rho: float = 1.204

    def __post_init__(self):
        if not (self.c > 0 and self.rho > 0):
            raise ValueError("medium requires c > 0 and rho > 0")


@dataclass
class AdaptiveWeights:
    """Log noise scales s = log ε of the data and PDE terms."""

    s_d: float = 0.0                 # eps_d = 1
    s_f: float = math.log(10.0)      # eps_f = 10

    def __post_init__(self):
        if not (np.isfinite(self.s_d) and np.isfinite(self.s_f)):
            raise ValueError("log-scales must be finite")

    @classmethod
    def from_eps(cls, eps_d: float, eps_f: float) -> "AdaptiveWeights":
        if not (eps_d > 0 and eps_f > 0):
            raise ValueError("noise scales must be positive")
        return cls(math.log(eps_d), math.log(eps_f))

    @property
    def eps_d(self) -> float:
        return math.exp(self.s_d)

    @property
    def eps_f(self) -> float:
        return math.exp(self.s_f)

    def coeff_data(self) -> float:
        """Multiplier of L_data in the combined objective: 1/(2 ε_d²)."""
        return 0.5 * math.exp(-2.0 * self.s_d)

    def coeff_pde(self) -> float:
        return 0.5 * math.exp(-2.0 * self.s_f)


@dataclass
class CollocationBatch:
    """Unlabeled (x, y, t) points where the residual is enforced."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if self.points.shape[1] != 3:
            raise ValueError("collocation points must be (N, 3)")

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass
class DataBatch:
    """Labeled (x, y, t) points with measured pressure targets."""

    points: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.targets.shape[0]:
            raise ValueError("points and targets must have equal length")
        if self.points.shape[1] != 3:
            raise ValueError("data points must be (N, 3)")

    @property
    def count(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# residual and losses (field-level, inference path)
# ---------------------------------------------------------------------------

def residual_mask(medium: Medium) -> np.ndarray:
    """(1, 3, 1) contraction weights turning a Hessian diagonal into the
    wave residual: [1, 1, -1/c²] over the (x, y, t) axis."""
    return np.array([1.0, 1.0, -1.0 / medium.c ** 2]).reshape(1, 3, 1)


def residual_from_hdiag(hdiag, medium: Medium):
    """Residual from Hessian-diagonal channels of shape (B, 3, k)."""
    return axis_sum(residual_mask(medium) * hdiag, 1)


def pde_residual(field, medium: Medium, points: np.ndarray) -> np.ndarray:
    """Homogeneous 2D wave-equation residual of ``field`` at ``points``.

    ``field`` must expose ``hessian_diag(points) -> (B, 3)`` (the network
    adapter and all analytic fields do).  Units: Pa/m².
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.isfinite(points).all():
        raise ValueError("points must be finite")
    h = np.asarray(field.hessian_diag(points), dtype=np.float64)
    r = h[:, 0] + h[:, 1] - h[:, 2] / medium.c ** 2
    if not np.isfinite(r).all():
        raise NumericError("non-finite wave residual")
    return r


def loss_data(field, batch: DataBatch) -> float:
    """Mean absolute misfit between the field and measured targets."""
    if batch.count == 0:
        raise ValueError("empty data batch")
    pred = np.asarray(field(batch.points), dtype=np.float64).reshape(-1)
    return float(np.mean(np.abs(pred - batch.targets)))


def loss_pde(field, medium: Medium, batch: CollocationBatch) -> float:
    """Mean absolute wave residual over a collocation batch."""
    if batch.count == 0:
        raise ValueError("empty collocation batch")
    return float(np.mean(np.abs(pde_residual(field, medium, batch.points))))


def total_loss(l_data: float, l_pde: float, w: AdaptiveWeights) -> float:
    """Adaptively weighted objective; exact in s = log ε."""
    if not (np.isfinite(l_data) and np.isfinite(l_pde)):
        raise NumericError("non-finite loss term")
    return float(l_data * w.coeff_data() + l_pde * w.coeff_pde() + w.s_d + w.s_f)


def weight_grads(l_data: float, l_pde: float, w: AdaptiveWeights) -> tuple[float, float]:
    """Analytic ∂L/∂s_d, ∂L/∂s_f of :func:`total_loss`: −l·e^{−2s} + 1."""
    return (-l_data * math.exp(-2.0 * w.s_d) + 1.0,
            -l_pde * math.exp(-2.0 * w.s_f) + 1.0)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_lhs(bounds, n: int, seed) -> CollocationBatch:
    """Latin hypercube over a 3D box: per axis, exactly one point falls in
    each of the n equal strata; strata pairings are random per axis."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _as_rng(seed)
    pts = np.empty((n, 3))
    for a, (lo, hi) in enumerate(bounds):
        strata = rng.permutation(n)
        u = rng.uniform(size=n)
        pts[:, a] = lo + (strata + u) / n * (hi - lo)
    return CollocationBatch(pts)


def sample_data(grid: FieldGrid, n: int, seed) -> DataBatch:
    """Uniform draws (with replacement) of (position, time) samples from a
    measured grid, with pressure targets attached."""
    if grid.n_time == 0 or grid.n_pos == 0:
        raise ValueError("empty grid")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _as_rng(seed)
    it = rng.integers(0, grid.n_time, size=n)
    im = rng.integers(0, grid.n_pos, size=n)
    pts = np.empty((n, 3))
    pts[:, :2] = grid.positions[im]
    pts[:, 2] = grid.t0 + it / grid.fs
    return DataBatch(pts, grid.pressure[it, im])
