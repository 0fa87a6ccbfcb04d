"""Classical sound-field regression baselines.

Two dictionaries, two solvers:

* Time domain: spherical waves from virtual sources outside the aperture,
  each (source, receiver) pair a windowed-sinc fractional-delay filter with
  1/(4πd) amplitude.  A Laplace (sparsity) prior on the coefficient trains
  makes the MAP estimate a LASSO problem, solved with monotone FISTA; the
  forward/adjoint pair is evaluated exactly via FFT so proximal gradient
  converges on the true objective.
* Frequency domain: per-DFT-bin plane-wave expansion with unit-modulus
  steering entries, solved by Tikhonov ridge or complex LASSO (optionally
  debiased by a least-squares refit on the recovered support).  Only
  positive-frequency bins are solved; reconstructions go through the real
  inverse FFT, so time signals are real by construction.

Reconstruction at unseen positions is the same synthesis with a dictionary
rebuilt for the target geometry.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft, rfftfreq

from .gridio import FieldGrid
from .physics import Medium


class ConditioningError(ValueError):
    """Normal equations too ill-conditioned to solve unregularized."""


# ---------------------------------------------------------------------------
# fractional delay
# ---------------------------------------------------------------------------

FILTER_LEN = 81  # odd; windowed-sinc support of +-40 samples


def frac_delay_kernel(delay_samples: float, length: int = FILTER_LEN):
    """Hann-windowed sinc realizing a (possibly fractional) sample delay.

    Returns ``(taps, start)``: the filter contributes ``taps[k]`` at output
    sample ``start + k`` for a unit impulse at sample 0.  Taps are normalized
    to unit sum (0 dB at DC); an integer delay yields an exact unit impulse.
    """
    if delay_samples < 0:
        raise ValueError("delay must be nonnegative")
    if length % 2 == 0:
        raise ValueError("length must be odd")
    half = (length - 1) // 2
    d_int = int(np.floor(delay_samples))
    frac = delay_samples - d_int
    x = np.arange(length) - half - frac       # tap positions relative to delay
    taps = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * x / (half + 1)))
    taps /= taps.sum()
    return taps, d_int - half


@dataclass
class SphericalDictionary:
    """Fractional-delay filter bank between virtual sources and receivers.

    ``kernels[l, m]`` are the taps of the (source l, receiver m) atom,
    starting at output sample ``starts[l, m]``; amplitude 1/(4π d_lm) is
    folded in.
    """

    sources: np.ndarray          # (L, 3)
    receivers: np.ndarray        # (M, 3)
    kernels: np.ndarray          # (L, M, K)
    starts: np.ndarray           # (L, M) ints
    fs: float
    filter_len: int

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_receivers(self) -> int:
        return self.receivers.shape[0]


def build_spherical_dictionary(sources, receivers, fs: float,
                               filter_len: int = FILTER_LEN,
                               medium: Medium = Medium()) -> SphericalDictionary:
    """Windowed-sinc delay atoms for every (virtual source, receiver) pair."""
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    receivers = np.atleast_2d(np.asarray(receivers, dtype=np.float64))
    if sources.shape[1] != 3 or receivers.shape[1] != 3:
        raise ValueError("sources and receivers must be (n, 3) meters")
    d = np.linalg.norm(sources[:, None, :] - receivers[None, :, :], axis=2)
    if not (d > 1e-9).all():
        raise ValueError("coincident source/receiver pair")
    ll, mm = sources.shape[0], receivers.shape[0]
    kernels = np.empty((ll, mm, filter_len))
    starts = np.empty((ll, mm), dtype=np.int64)
    for l in range(ll):
        for m in range(mm):
            taps, start = frac_delay_kernel(d[l, m] / medium.c * fs, filter_len)
            kernels[l, m] = taps / (4.0 * np.pi * d[l, m])
            starts[l, m] = start
    return SphericalDictionary(sources, receivers, kernels, starts, float(fs), filter_len)


def _dict_spectra(dictionary: SphericalDictionary, nfft: int) -> np.ndarray:
    """(L, M, F) one-sided spectra of the zero-placed atom filters.

    Taps that would land before output sample 0 (very close pairs with
    delay < half the filter) are clipped: atoms stay causal.
    """
    ll, mm, k = dictionary.kernels.shape
    dense = np.zeros((ll, mm, nfft))
    for l in range(ll):
        for m in range(mm):
            s = int(dictionary.starts[l, m])
            lo, hi = max(s, 0), min(s + k, nfft)
            if hi > lo:
                dense[l, m, lo:hi] = dictionary.kernels[l, m, lo - s:hi - s]
    return rfft(dense, axis=2)


def _td_nfft(dictionary: SphericalDictionary, n_time: int) -> int:
    k_full = int(dictionary.starts.max()) + dictionary.filter_len
    return next_fast_len(n_time + max(k_full, 1))


def td_forward(dictionary: SphericalDictionary, alpha: np.ndarray, n_time: int,
               spectra: np.ndarray | None = None, nfft: int | None = None) -> np.ndarray:
    """Synthesize pressure (N, M) from coefficient trains ``alpha`` (L, N)."""
    nfft = nfft or _td_nfft(dictionary, n_time)
    spectra = _dict_spectra(dictionary, nfft) if spectra is None else spectra
    a_hat = rfft(alpha, n=nfft, axis=1)
    y_hat = np.einsum("lf,lmf->mf", a_hat, spectra)
    return irfft(y_hat, n=nfft, axis=1)[:, :n_time].T


def td_adjoint(dictionary: SphericalDictionary, resid: np.ndarray, n_alpha: int,
               spectra: np.ndarray | None = None, nfft: int | None = None) -> np.ndarray:
    """Exact adjoint of :func:`td_forward` (correlation with the atoms)."""
    nfft = nfft or _td_nfft(dictionary, resid.shape[0])
    spectra = _dict_spectra(dictionary, nfft) if spectra is None else spectra
    r_hat = rfft(resid.T, n=nfft, axis=1)
    x_hat = np.einsum("mf,lmf->lf", r_hat, spectra.conj())
    return irfft(x_hat, n=nfft, axis=1)[:, :n_alpha]


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

@dataclass
class SparseSolverConfig:
    """Settings shared by the sparse and ridge inverse solvers.

    ``lam`` is the regularization weight.  The time-domain solver applies it
    as given; the per-bin plane-wave LASSO scales it by that bin's peak
    correlation ``||H^H b||_inf``, so values in (0, 1) select how aggressively
    each bin is pruned independent of its energy.  ``debias`` refits the
    selected support by least squares after a LASSO solve.
    """

    lam: float = 1e-3
    max_iter: int = 500
    tol: float = 1e-9
    kind: str = "fista-lasso"
    debias: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.kind not in ("fista-lasso", "tikhonov"):
            raise ValueError(f"unknown solver kind {self.kind!r}")


@dataclass
class TdFit:
    """LASSO fit of spherical-wave coefficient trains to a measured grid."""

    dictionary: SphericalDictionary
    alpha: np.ndarray            # (L, N)
    objective: list
    converged: bool
    n_iter: int
    t0: float = 0.0
    z: float = 0.0


def _soft(x, tau):
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _power_lipschitz(apply_ata, shape, seed=0, iters=40):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    x /= np.linalg.norm(x)
    lam = 1.0
    for _ in range(iters):
        y = apply_ata(x)
        lam = np.linalg.norm(y)
        if lam == 0:
            return 1.0
        x = y / lam
    return lam * 1.05  # small safety margin over the power-iteration estimate


def _fista(x0, grad_step, prox, objective, max_iter, tol):
    """Accelerated proximal gradient with adaptive restart.

    Whenever the momentum sequence would raise the objective, the momentum is
    reset and a plain proximal step is taken from the incumbent, so the
    recorded objective values never increase and the iteration cannot stall
    away from the optimum.
    """
    x = x0
    fx = objective(x)
    history = [fx]
    y, tk = x, 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cand = prox(grad_step(y))
        f_cand = objective(cand)
        if f_cand > fx:
            y, tk = x, 1.0
            cand = prox(grad_step(x))
            f_cand = objective(cand)
            if f_cand >= fx:
                # x is a fixed point of the proximal map
                converged = True
                break
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = cand + ((tk - 1.0) / t_new) * (cand - x)
        x, fx, tk = cand, f_cand, t_new
        history.append(fx)
        if abs(history[-2] - fx) <= tol * max(1.0, abs(fx)):
            converged = True
            break
    return x, history, converged, it


def td_sparse_solve(dictionary: SphericalDictionary, measured: FieldGrid,
                    cfg: SparseSolverConfig) -> TdFit:
    """MAP estimate under a Laplace prior: LASSO on the convolutional system,
    minimized with restarted FISTA (recorded objective never increases)."""
    mz = np.column_stack([measured.positions, np.full(measured.n_pos, measured.z)])
    if measured.n_pos != dictionary.n_receivers or \
            not np.allclose(mz, dictionary.receivers, atol=1e-9):
        raise ValueError("measured grid does not match dictionary receivers")
    y = measured.pressure
    n = measured.n_time
    nfft = _td_nfft(dictionary, n)
    spectra = _dict_spectra(dictionary, nfft)
    ll = dictionary.n_sources

    def fwd(a):
        return td_forward(dictionary, a, n, spectra, nfft)

    def adj(r):
        return td_adjoint(dictionary, r, n, spectra, nfft)

    lip = _power_lipschitz(lambda x: adj(fwd(x)), (ll, n))
    lam = cfg.lam

    def objective(a):
        r = fwd(a) - y
        return 0.5 * np.sum(r * r) + lam * np.sum(np.abs(a))

    x, history, converged, it = _fista(
        np.zeros((ll, n)),
        lambda v: v - adj(fwd(v) - y) / lip,
        lambda v: _soft(v, lam / lip),
        objective, cfg.max_iter, cfg.tol)
    if not converged:
        warnings.warn(f"FISTA stopped at max_iter={cfg.max_iter} without meeting tol",
                      RuntimeWarning)
    return TdFit(dictionary, x, history, converged, it,
                 t0=measured.t0, z=measured.z)


def default_spherical_sources(positions: np.ndarray, z: float = 0.0,
                              count: int = 512, radius_factor: float = 2.0) -> np.ndarray:
    """Virtual sources on a Fibonacci sphere around the aperture, radius
    ``radius_factor`` x the aperture diagonal."""
    positions = np.atleast_2d(positions)
    center = np.array([*positions.mean(axis=0), z])
    diag = np.linalg.norm(positions.max(axis=0) - positions.min(axis=0))
    radius = radius_factor * max(diag, 1e-3)
    i = np.arange(count)
    golden = (1 + 5 ** 0.5) / 2
    theta = 2 * np.pi * i / golden
    phi = np.arccos(1 - 2 * (i + 0.5) / count)
    pts = np.stack([np.cos(theta) * np.sin(phi),
                    np.sin(theta) * np.sin(phi),
                    np.cos(phi)], axis=1)
    return center + radius * pts


# ---------------------------------------------------------------------------
# plane-wave expansion
# ---------------------------------------------------------------------------

def planewave_directions(count: int = 64) -> np.ndarray:
    """(count, 2) unit propagation vectors, uniformly spaced in angle."""
    ang = 2 * np.pi * np.arange(count) / count
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def steering_matrix(positions: np.ndarray, directions: np.ndarray,
                    omega: float, c: float) -> np.ndarray:
    """(M, D) unit-modulus entries exp(-j (ω/c) r·k̂)."""
    proj = positions @ directions.T
    return np.exp(-1j * (omega / c) * proj)


@dataclass
class PwFit:
    """Per-frequency plane-wave coefficients fitted to a measured grid."""

    directions: np.ndarray       # (D, 2)
    bins: np.ndarray             # selected rfft bin indices
    freqs: np.ndarray            # Hz, per selected bin
    beta: np.ndarray             # (n_bins, D) complex
    fs: float
    n_time: int
    t0: float
    z: float
    c: float


def _complex_soft(x, tau):
    mag = np.abs(x)
    scale = np.maximum(mag - tau, 0.0) / np.where(mag > 0, mag, 1.0)
    return x * scale


def _pw_solve_bin(h, b, cfg: SparseSolverConfig):
    if cfg.kind == "tikhonov":
        if cfg.lam == 0.0:
            s = np.linalg.svd(h, compute_uv=False)
            if h.shape[0] < h.shape[1] or s[-1] < 1e-10 * s[0]:
                raise ConditioningError(
                    "steering matrix is rank deficient for an unregularized "
                    "solve; set lambda > 0")
            beta, *_ = np.linalg.lstsq(h, b, rcond=None)
            return beta
        hh = h.conj().T @ h + cfg.lam * np.eye(h.shape[1])
        return np.linalg.solve(hh, h.conj().T @ b)
    # complex LASSO.  lambda is relative to ||H^H b||_inf so one setting
    # shrinks every frequency bin proportionally regardless of its energy.
    lip = np.linalg.svd(h, compute_uv=False)[0] ** 2
    peak = np.abs(h.conj().T @ b).max()
    if peak == 0.0:
        return np.zeros(h.shape[1], dtype=complex)
    lam = cfg.lam * peak

    def obj(v):
        r = h @ v - b
        return 0.5 * np.real(r.conj() @ r) + lam * np.abs(v).sum()

    x, _, _, _ = _fista(
        np.zeros(h.shape[1], dtype=complex),
        lambda v: v - h.conj().T @ (h @ v - b) / lip,
        lambda v: _complex_soft(v, lam / lip),
        obj, cfg.max_iter, cfg.tol)
    if cfg.debias:
        support = np.abs(x) > 1e-10 * max(np.abs(x).max(), 1e-300)
        if support.any():
            # truncated pseudo-inverse: nearly collinear atoms (low-frequency
            # bins, small apertures) must not amplify residual noise
            refit, *_ = np.linalg.lstsq(h[:, support], b, rcond=1e-6)
            x = np.zeros_like(x)
            x[support] = refit
    return x


def pw_solve(measured: FieldGrid, directions: np.ndarray = None,
             freq_range: tuple = (30.0, 1000.0),
             cfg: SparseSolverConfig = None,
             medium: Medium = Medium()) -> PwFit:
    """Fit plane-wave coefficients per DFT bin inside ``freq_range``.

    Bins outside the range (and DC/Nyquist) are left zero; the fit stores
    everything needed to synthesize real time signals anywhere.
    """
    if directions is None:
        directions = planewave_directions()
    cfg = cfg or SparseSolverConfig(kind="tikhonov", lam=1e-8)
    freqs = rfftfreq(measured.n_time, 1.0 / measured.fs)
    lo, hi = freq_range
    if hi <= lo:
        raise ValueError("empty frequency range")
    sel = np.nonzero((freqs >= lo) & (freqs <= hi) & (freqs > 0)
                     & (freqs < measured.fs / 2))[0]
    if sel.size == 0:
        raise ValueError("no DFT bins inside the requested range; "
                         "signal too short for this resolution")
    spectrum = rfft(measured.pressure, axis=0)
    beta = np.zeros((sel.size, directions.shape[0]), dtype=complex)
    for i, k in enumerate(sel):
        h = steering_matrix(measured.positions, directions,
                            2 * np.pi * freqs[k], medium.c)
        beta[i] = _pw_solve_bin(h, spectrum[k], cfg)
    return PwFit(directions, sel, freqs[sel], beta, measured.fs,
                 measured.n_time, measured.t0, measured.z, medium.c)


# ---------------------------------------------------------------------------
# synthesis at arbitrary positions
# ---------------------------------------------------------------------------

def reconstruct_baseline(fit, positions: np.ndarray, n_time: int = None,
                         medium: Medium = Medium()) -> FieldGrid:
    """Evaluate a fitted baseline model at new plane positions.

    TD fits re-run the delay-and-sum synthesis with a dictionary rebuilt for
    the target geometry; PW fits assemble the one-sided spectrum from the
    steering model and invert it (real output by construction).
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if isinstance(fit, TdFit):
        n = n_time or fit.alpha.shape[1]
        targets3 = np.column_stack([positions, np.full(len(positions), fit.z)])
        d2 = build_spherical_dictionary(fit.dictionary.sources, targets3,
                                        fit.dictionary.fs,
                                        fit.dictionary.filter_len, medium)
        pressure = td_forward(d2, fit.alpha, n)
        return FieldGrid(positions, pressure, fit.dictionary.fs, fit.t0, fit.z)
    if isinstance(fit, PwFit):
        n = n_time or fit.n_time
        spec = np.zeros((len(rfftfreq(n, 1.0 / fit.fs)), len(positions)), dtype=complex)
        for i, k in enumerate(fit.bins):
            h = steering_matrix(positions, fit.directions,
                                2 * np.pi * fit.freqs[i], fit.c)
            spec[k] = h @ fit.beta[i]
        pressure = irfft(spec, n=n, axis=0)
        return FieldGrid(positions, pressure, fit.fs, fit.t0, fit.z)
    raise TypeError(f"cannot reconstruct from {type(fit).__name__}")


def dump_td_coefficients(path, fit: TdFit, threshold: float = 0.0) -> None:
    """CSV dump: source index, sample index, coefficient value."""
    with open(path, "w") as fh:
        fh.write("source,sample,value\n")
        ll, nn = np.nonzero(np.abs(fit.alpha) > threshold)
        for l, i in zip(ll, nn):
            fh.write(f"{l},{i},{fit.alpha[l, i]!r}\n")


def dump_pw_coefficients(path, fit: PwFit) -> None:
    """CSV dump: frequency, direction index, angle, Re, Im."""
    ang = np.arctan2(fit.directions[:, 1], fit.directions[:, 0])
    with open(path, "w") as fh:
        fh.write("freq_hz,direction,angle_rad,re,im\n")
        for i, f in enumerate(fit.freqs):
            for l in range(fit.directions.shape[0]):
                v = fit.beta[i, l]
                fh.write(f"{f!r},{l},{ang[l]!r},{v.real!r},{v.imag!r}\n")
