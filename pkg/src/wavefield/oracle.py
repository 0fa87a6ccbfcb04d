"""Ground-truth acoustic fields and derived quantities.

Two generators with distinct jobs:

* Plane-wave pulse superpositions are exact solutions of the homogeneous 2D
  wave equation with closed-form derivatives, so they serve as the reference
  the network-based solver is judged against.
* The mirror-image room model produces realistic 3D room impulse responses
  (sampled on a horizontal receiver plane), the stand-in for a measured
  dataset.

Particle velocity and instantaneous intensity are derived from any field
that can report its pressure gradient, via the momentum-conservation
integral u = -(1/ρ)∫∇p dt.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .autodiff import Jet2
from .baselines import frac_delay_kernel
from .gridio import FieldGrid
from .physics import Medium


class DifferentiableField(Protocol):
    """Anything that can report value + derivatives at a space-time point."""

    def query(self, t: float, r) -> Jet2: ...


# ---------------------------------------------------------------------------
# plane-wave pulses (exact 2D solutions)
# ---------------------------------------------------------------------------

@dataclass
class GaussianPulse:
    """Gaussian-modulated sinusoid s(t), smooth and twice differentiable.

    ``sigma`` defaults to 3/(2π f_c): a few carrier cycles under the
    envelope, band-limited well below typical sample rates.
    """

    f_c: float = 500.0
    t_peak: float = 0.0
    sigma: Optional[float] = None
    phase: float = 0.0

    def __post_init__(self):
        if self.f_c <= 0:
            raise ValueError("center frequency must be positive")
        if self.sigma is None:
            self.sigma = 3.0 / (2 * np.pi * self.f_c)
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def _parts(self, t):
        tau = np.asarray(t, dtype=np.float64) - self.t_peak
        env = np.exp(-0.5 * (tau / self.sigma) ** 2)
        ph = 2 * np.pi * self.f_c * tau + self.phase
        return tau, env, ph

    def __call__(self, t):
        _, env, ph = self._parts(t)
        return env * np.cos(ph)

    def d1(self, t):
        tau, env, ph = self._parts(t)
        g = -tau / self.sigma ** 2
        w = 2 * np.pi * self.f_c
        return env * (g * np.cos(ph) - w * np.sin(ph))

    def d2(self, t):
        tau, env, ph = self._parts(t)
        g = -tau / self.sigma ** 2
        w = 2 * np.pi * self.f_c
        return env * ((g * g - 1.0 / self.sigma ** 2 - w * w) * np.cos(ph)
                      - 2.0 * g * w * np.sin(ph))


@dataclass
class PlaneWaveComponent:
    theta: float                 # propagation direction, radians in [0, 2π)
    pulse: GaussianPulse
    amplitude: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.theta < 2 * np.pi):
            raise ValueError("direction must lie in [0, 2π)")

    @property
    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])


@dataclass
class PlaneWavePulseSpec:
    components: list

    def __post_init__(self):
        if not self.components:
            raise ValueError("at least one component required")


class PlaneWavePulseField:
    """p(x, y, t) = Σ_l A_l s_l(t − r·k̂_l / c): an exact homogeneous
    solution whose jets are available in closed form."""

    def __init__(self, spec: PlaneWavePulseSpec, medium: Medium):
        self.spec = spec
        self.medium = medium

    def _retarded(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        out = []
        for comp in self.spec.components:
            proj = pts[:, :2] @ comp.direction
            out.append((comp, pts[:, 2] - proj / self.medium.c))
        return out

    def __call__(self, pts):
        return sum(c.amplitude * c.pulse(tau) for c, tau in self._retarded(pts))

    def gradient(self, pts):
        g = np.zeros((np.atleast_2d(pts).shape[0], 3))
        for c, tau in self._retarded(pts):
            d1 = c.amplitude * c.pulse.d1(tau)
            kx, ky = c.direction
            g[:, 0] += -kx / self.medium.c * d1
            g[:, 1] += -ky / self.medium.c * d1
            g[:, 2] += d1
        return g

    def hessian_diag(self, pts):
        h = np.zeros((np.atleast_2d(pts).shape[0], 3))
        for c, tau in self._retarded(pts):
            d2 = c.amplitude * c.pulse.d2(tau)
            kx, ky = c.direction
            h[:, 0] += (kx / self.medium.c) ** 2 * d2
            h[:, 1] += (ky / self.medium.c) ** 2 * d2
            h[:, 2] += d2
        return h

    def query(self, t: float, r) -> Jet2:
        pt = np.array([[r[0], r[1], t]])
        return Jet2(float(self(pt)[0]), self.gradient(pt)[0], self.hessian_diag(pt)[0])


@dataclass
class GridRequest:
    """Where and when to sample a synthesized field."""

    positions: np.ndarray        # (M, 2)
    fs: float
    duration: float
    t0: float = 0.0
    z: float = 0.0

    def times(self) -> np.ndarray:
        n = int(round(self.duration * self.fs))
        return self.t0 + np.arange(n) / self.fs


def planewave_pulse_field(spec: PlaneWavePulseSpec, medium: Medium,
                          request: GridRequest):
    """Sample an exact pulse field on a grid; returns (FieldGrid, field)."""
    fld = PlaneWavePulseField(spec, medium)
    positions = np.atleast_2d(np.asarray(request.positions, dtype=np.float64))
    t = request.times()
    pts = np.empty((t.size * positions.shape[0], 3))
    pts[:, :2] = np.tile(positions, (t.size, 1))
    pts[:, 2] = np.repeat(t, positions.shape[0])
    pressure = fld(pts).reshape(t.size, positions.shape[0])
    return FieldGrid(positions, pressure, request.fs, request.t0, request.z), fld


# ---------------------------------------------------------------------------
# mirror-image room model
# ---------------------------------------------------------------------------

@dataclass
class RoomSpec:
    """Rectangular room with per-surface reflection coefficients.

    ``beta`` is ((βx0, βxL), (βy0, βyL), (βz0, βzL)): the coefficient of the
    wall at coordinate 0 and at coordinate L along each axis.
    """

    dimensions: tuple = (6.12, 5.77, 3.07)
    beta: tuple = ((0.35, 0.35), (0.35, 0.35), (0.35, 0.35))
    source: tuple = (1.0, 1.0, 1.0)
    max_order: int = 3

    def __post_init__(self):
        dims = np.asarray(self.dimensions, dtype=np.float64)
        if dims.shape != (3,) or not (dims > 0).all():
            raise ValueError("dimensions must be 3 positive lengths")
        b = np.asarray(self.beta, dtype=np.float64)
        if b.shape != (3, 2) or (np.abs(b) > 1).any():
            raise ValueError("beta must be 3 pairs in [-1, 1]")
        if not self.contains(self.source):
            raise ValueError("source must lie inside the room")
        if self.max_order < 0:
            raise ValueError("max_order must be >= 0")

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        dims = np.asarray(self.dimensions)
        return p.shape == (3,) and (p > 0).all() and (p < dims).all()


@dataclass
class SourceSpec:
    """Excitation of the room: optional discrete waveform χ (Pa·m at the
    synthesis rate); None means an ideal impulse (pure RIR)."""

    waveform: Optional[np.ndarray] = None
    position: Optional[tuple] = None

    def __post_init__(self):
        if self.waveform is not None:
            self.waveform = np.asarray(self.waveform, dtype=np.float64)
            if self.waveform.ndim != 1 or not np.isfinite(self.waveform).all():
                raise ValueError("waveform must be a finite 1D signal")


def image_source_arrivals(room: RoomSpec, source, receiver,
                          max_order: Optional[int] = None, c: float = 343.0):
    """Enumerate mirror images up to the reflection order.

    Returns (delays s, amplitudes 1/m weighted by wall coefficients, orders,
    image positions), sorted by delay.  The image along each axis is
    2nL + (1−2p)·s with p∈{0,1}, n∈Z; the wall at 0 is hit |n−p| times and
    the wall at L is hit |n| times.
    """
    order = room.max_order if max_order is None else max_order
    src = np.asarray(source, dtype=np.float64)
    rcv = np.asarray(receiver, dtype=np.float64)
    dims = np.asarray(room.dimensions)
    beta = np.asarray(room.beta, dtype=np.float64)
    nmax = order // 2 + 1
    delays, amps, orders, images = [], [], [], []
    rng_n = range(-nmax, nmax + 1)
    for nx in rng_n:
        for ny in rng_n:
            for nz in rng_n:
                for px in (0, 1):
                    for py in (0, 1):
                        for pz in (0, 1):
                            n = (nx, ny, nz)
                            p = (px, py, pz)
                            refl = sum(abs(n[i] - p[i]) + abs(n[i]) for i in range(3))
                            if refl > order:
                                continue
                            img = np.array([2 * n[i] * dims[i] + (1 - 2 * p[i]) * src[i]
                                            for i in range(3)])
                            d = np.linalg.norm(img - rcv)
                            gain = 1.0
                            for i in range(3):
                                gain *= beta[i, 0] ** abs(n[i] - p[i]) * beta[i, 1] ** abs(n[i])
                            delays.append(d / c)
                            amps.append(gain / (4 * np.pi * d))
                            orders.append(refl)
                            images.append(img)
    idx = np.argsort(delays)
    return (np.asarray(delays)[idx], np.asarray(amps)[idx],
            np.asarray(orders, dtype=int)[idx], np.asarray(images)[idx])


def image_source_rir(room: RoomSpec, src: SourceSpec, receiver, fs: float,
                     duration: float, medium: Medium = Medium()) -> np.ndarray:
    """Room impulse response at one receiver: every mirror image contributes
    a fractional-delay kernel scaled by its wall-weighted 1/(4πd) amplitude;
    a source waveform, if given, is convolved in afterwards."""
    rcv = np.asarray(receiver, dtype=np.float64)
    if not room.contains(rcv):
        raise ValueError("receiver must lie inside the room")
    if duration <= 0:
        raise ValueError("duration must be positive")
    source = np.asarray(src.position if src.position is not None else room.source)
    n = int(round(duration * fs))
    delays, amps, _, _ = image_source_arrivals(room, source, rcv, c=medium.c)
    rir = np.zeros(n)
    for delay, amp in zip(delays, amps):
        taps, start = frac_delay_kernel(delay * fs)
        lo, hi = max(start, 0), min(start + taps.size, n)
        if hi > lo:
            rir[lo:hi] += amp * taps[lo - start:hi - start]
    if src.waveform is not None:
        rir = np.convolve(rir, src.waveform)[:n]
    return rir


def rir_grid(room: RoomSpec, src: SourceSpec, positions, z: float, fs: float,
             duration: float, medium: Medium = Medium()) -> FieldGrid:
    """RIRs on a horizontal receiver plane, packed as a FieldGrid."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = int(round(duration * fs))
    pressure = np.empty((n, positions.shape[0]))
    for m, (x, y) in enumerate(positions):
        pressure[:, m] = image_source_rir(room, src, (x, y, z), fs, duration, medium)
    return FieldGrid(positions, pressure, fs, 0.0, z)


# ---------------------------------------------------------------------------
# derived quantities
# ---------------------------------------------------------------------------

def particle_velocity(fld, medium: Medium, r, t_grid) -> np.ndarray:
    """In-plane particle velocity u(t) at position r from the momentum
    integral u = −(1/ρ)∫∇p dt over a uniform time grid (quiescent start).

    ``fld`` must expose ``gradient(points) -> (B, 3)``; returns (T, 2) m/s.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("t_grid must be a 1D grid of at least 2 samples")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0.0):
        raise ValueError("t_grid must be uniform")
    r = np.asarray(r, dtype=np.float64)
    pts = np.column_stack([np.broadcast_to(r[:2], (t.size, 2)), t])
    grad = np.asarray(fld.gradient(pts))[:, :2]
    return -cumulative_trapezoid(grad, dx=dt[0], axis=0, initial=0.0) / medium.rho


def intensity(p, u) -> np.ndarray:
    """Instantaneous intensity I = p·u (componentwise)."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == p.ndim + 1:
        return p[..., None] * u
    return p * u
