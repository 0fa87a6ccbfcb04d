"""Baseline dictionaries and solvers: kernel accuracy, exact adjoints,
LASSO optimality, and synthesize-then-solve round trips."""
import numpy as np
import pytest

from wavefield.baselines import (
    ConditioningError,
    PwFit,
    SparseSolverConfig,
    TdFit,
    build_spherical_dictionary,
    default_spherical_sources,
    dump_pw_coefficients,
    dump_td_coefficients,
    frac_delay_kernel,
    planewave_directions,
    pw_solve,
    reconstruct_baseline,
    steering_matrix,
    td_adjoint,
    td_forward,
    td_sparse_solve,
)
from wavefield.gridio import FieldGrid
from wavefield.oracle import GaussianPulse, PlaneWaveComponent, PlaneWavePulseSpec, \
    GridRequest, planewave_pulse_field
from wavefield.physics import Medium

MEDIUM = Medium()


class TestFracDelay:
    def test_integer_delay_is_unit_impulse(self):
        for d in (0.0, 3.0, 40.0, 77.0):
            taps, start = frac_delay_kernel(d)
            peak = int(d) - start
            assert taps[peak] == pytest.approx(1.0, abs=1e-12)
            rest = np.delete(taps, peak)
            assert np.abs(rest).max() < 1e-12

    def test_unit_sum(self):
        for d in (0.25, 10.5, 33.9):
            taps, _ = frac_delay_kernel(d)
            assert taps.sum() == pytest.approx(1.0, abs=1e-14)

    def test_half_sample_group_delay_by_cross_correlation(self):
        fs = 1.0
        sig = np.exp(-0.5 * ((np.arange(400) - 200.0) / 12.0) ** 2)
        delay = 50.5
        taps, start = frac_delay_kernel(delay)
        out = np.zeros(sig.size + start + taps.size)
        full = np.convolve(sig, taps)
        out[start:start + full.size] += full
        corr = np.correlate(out[:sig.size + 120], sig, mode="full")
        k = np.argmax(corr)
        # log-parabolic interpolation is exact for Gaussian correlations
        lm, l0, lp = np.log(corr[k - 1]), np.log(corr[k]), np.log(corr[k + 1])
        frac = 0.5 * (lm - lp) / (lm - 2 * l0 + lp)
        measured = k - (sig.size - 1) + frac
        assert abs(measured - delay) < 0.01

    def test_validation(self):
        with pytest.raises(ValueError):
            frac_delay_kernel(-1.0)
        with pytest.raises(ValueError):
            frac_delay_kernel(2.0, length=10)


def small_dictionary(n_src=6, n_rcv=4, fs=8000.0, seed=0):
    rng = np.random.default_rng(seed)
    ang = np.linspace(0, 2 * np.pi, n_src, endpoint=False)
    sources = np.stack([2.0 * np.cos(ang), 2.0 * np.sin(ang), np.zeros(n_src)], axis=1)
    receivers = np.column_stack([rng.uniform(-0.3, 0.3, (n_rcv, 2)), np.zeros(n_rcv)])
    return build_spherical_dictionary(sources, receivers, fs, medium=MEDIUM)


class TestSphericalDictionary:
    def test_amplitude_inverse_distance(self):
        d1, d2 = 1.0, 2.0
        dic = build_spherical_dictionary(
            [[d1, 0, 0], [d2, 0, 0]], [[0, 0, 0]], 8000.0, medium=MEDIUM)
        s1 = dic.kernels[0, 0].sum()
        s2 = dic.kernels[1, 0].sum()
        assert s1 / s2 == pytest.approx(2.0, rel=1e-12)
        assert s1 == pytest.approx(1 / (4 * np.pi * d1), rel=1e-12)

    def test_coincident_pair_rejected(self):
        with pytest.raises(ValueError):
            build_spherical_dictionary([[0, 0, 0]], [[0, 0, 0]], 8000.0)

    def test_adjoint_dot_product(self):
        dic = small_dictionary()
        rng = np.random.default_rng(1)
        n = 120
        x = rng.normal(size=(dic.n_sources, n))
        y = rng.normal(size=(n, dic.n_receivers))
        ax = td_forward(dic, x, n)
        aty = td_adjoint(dic, y, n)
        lhs = np.sum(ax * y)
        rhs = np.sum(x * aty)
        assert abs(lhs - rhs) < 1e-10 * max(abs(lhs), 1.0)

    def test_forward_places_scaled_kernel(self):
        dic = small_dictionary(n_src=2, n_rcv=1)
        n = 160
        alpha = np.zeros((2, n))
        alpha[1, 30] = 2.0
        y = td_forward(dic, alpha, n)
        d = np.linalg.norm(dic.sources[1] - dic.receivers[0])
        delay = d / MEDIUM.c * dic.fs
        want = np.zeros(n)
        start = int(dic.starts[1, 0]) + 30
        taps = dic.kernels[1, 0]
        lo, hi = max(start, 0), min(start + taps.size, n)
        want[lo:hi] = 2.0 * taps[lo - start:hi - start]
        np.testing.assert_allclose(y[:, 0], want, atol=1e-12)
        assert abs(np.argmax(np.abs(y[:, 0])) - (30 + round(delay))) <= 1

    def test_default_sources_sit_outside(self):
        pos = np.random.default_rng(2).uniform(-0.4, 0.4, (30, 2))
        src = default_spherical_sources(pos, z=1.0, count=128)
        assert src.shape == (128, 3)
        center = np.array([*pos.mean(axis=0), 1.0])
        radii = np.linalg.norm(src - center, axis=1)
        diag = np.linalg.norm(pos.max(0) - pos.min(0))
        np.testing.assert_allclose(radii, 2.0 * diag, rtol=1e-9)


def atom_measurement(dic, l0, i0, n, scale=1.0):
    alpha = np.zeros((dic.n_sources, n))
    alpha[l0, i0] = scale
    y = td_forward(dic, alpha, n)
    receivers2 = dic.receivers[:, :2]
    return alpha, FieldGrid(receivers2, y, dic.fs, 0.0, float(dic.receivers[0, 2]))


class TestTdSolve:
    def test_zero_measurement_zero_coefficients(self):
        dic = small_dictionary()
        n = 100
        grid = FieldGrid(dic.receivers[:, :2], np.zeros((n, dic.n_receivers)), dic.fs)
        fit = td_sparse_solve(dic, grid, SparseSolverConfig(lam=1e-3, max_iter=50))
        assert not fit.alpha.any()

    def test_single_atom_round_trip(self):
        dic = small_dictionary(n_src=8, n_rcv=6, seed=3)
        n = 160
        l0, i0 = 5, 40
        _, grid = atom_measurement(dic, l0, i0, n)
        peak = np.abs(td_adjoint(dic, grid.pressure, n)).max()
        cfg = SparseSolverConfig(lam=1e-5 * peak, max_iter=2000, tol=0.0)
        fit = td_sparse_solve(dic, grid, cfg)
        assert fit.converged
        total = np.sum(fit.alpha ** 2)
        on = fit.alpha[l0, i0] ** 2
        assert (total - on) / total < 1e-6
        assert fit.alpha[l0, i0] == pytest.approx(1.0, rel=1e-3)

    def test_objective_monotone(self):
        dic = small_dictionary(seed=4)
        rng = np.random.default_rng(5)
        n = 80
        grid = FieldGrid(dic.receivers[:, :2],
                         rng.normal(size=(n, dic.n_receivers)) * 1e-2, dic.fs)
        fit = td_sparse_solve(dic, grid, SparseSolverConfig(lam=1e-4, max_iter=120))
        diffs = np.diff(fit.objective)
        assert (diffs <= 1e-12 * max(1.0, fit.objective[0])).all()

    def test_optimality_against_coordinate_descent(self):
        dic = small_dictionary(n_src=3, n_rcv=4, seed=6)
        n = 48
        rng = np.random.default_rng(7)
        alpha_true = np.zeros((3, n))
        alpha_true[0, 10] = 1.0
        alpha_true[2, 30] = -0.7
        y = td_forward(dic, alpha_true, n) + 1e-4 * rng.normal(size=(n, 4))
        grid = FieldGrid(dic.receivers[:, :2], y, dic.fs)
        peak = np.abs(td_adjoint(dic, y, n)).max()
        lam = 0.05 * peak
        fit = td_sparse_solve(dic, grid, SparseSolverConfig(lam=lam, max_iter=2000, tol=0.0))

        # dense design matrix, one column per (source, sample)
        cols = []
        for l in range(3):
            for i in range(n):
                a = np.zeros((3, n))
                a[l, i] = 1.0
                cols.append(td_forward(dic, a, n).ravel())
        amat = np.stack(cols, axis=1)
        yv = y.ravel()

        # coordinate-descent oracle
        x = np.zeros(amat.shape[1])
        col_sq = (amat ** 2).sum(axis=0)
        r = yv - amat @ x
        for _ in range(400):
            for j in range(amat.shape[1]):
                old = x[j]
                rho = amat[:, j] @ r + col_sq[j] * old
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
                if new != old:
                    r -= amat[:, j] * (new - old)
                    x[j] = new

        def objective(v):
            return 0.5 * np.sum((amat @ v - yv) ** 2) + lam * np.abs(v).sum()

        f_fista = objective(fit.alpha.ravel())
        f_cd = objective(x)
        assert abs(f_fista - f_cd) <= 1e-6 * max(1.0, f_cd)
        # subgradient optimality of the FISTA iterate
        g = -amat.T @ (yv - amat @ fit.alpha.ravel())
        on = fit.alpha.ravel() != 0
        assert np.abs(g[on] + lam * np.sign(fit.alpha.ravel()[on])).max() < 1e-5 * lam + 1e-8
        assert np.abs(g[~on]).max() <= lam * (1 + 1e-6)

    def test_receiver_mismatch_rejected(self):
        dic = small_dictionary()
        grid = FieldGrid(dic.receivers[:, :2] + 0.05, np.zeros((50, dic.n_receivers)), dic.fs)
        with pytest.raises(ValueError):
            td_sparse_solve(dic, grid, SparseSolverConfig())

    def test_nonconvergence_warns(self):
        dic = small_dictionary()
        rng = np.random.default_rng(8)
        grid = FieldGrid(dic.receivers[:, :2], rng.normal(size=(60, dic.n_receivers)), dic.fs)
        with pytest.warns(RuntimeWarning):
            td_sparse_solve(dic, grid, SparseSolverConfig(lam=1e-6, max_iter=3))

    def test_reconstruct_consistency_and_new_position(self):
        dic = small_dictionary(n_src=5, n_rcv=3, seed=9)
        n = 140
        l0, i0 = 2, 25
        alpha, _ = atom_measurement(dic, l0, i0, n, scale=1.5)
        fit = TdFit(dic, alpha, [], True, 0, t0=0.0, z=0.0)
        # at the fitted receivers: identical to the forward synthesis
        rec = reconstruct_baseline(fit, dic.receivers[:, :2], medium=MEDIUM)
        np.testing.assert_allclose(rec.pressure, td_forward(dic, alpha, n), atol=1e-14)
        # at a new position: the same atom with the new geometry's delay
        target = np.array([[0.8, -0.2]])
        rec2 = reconstruct_baseline(fit, target, medium=MEDIUM)
        d = np.linalg.norm(dic.sources[l0] - np.array([0.8, -0.2, 0.0]))
        taps, start = frac_delay_kernel(d / MEDIUM.c * dic.fs)
        want = np.zeros(n)
        s = start + i0
        lo, hi = max(s, 0), min(s + taps.size, n)
        want[lo:hi] = 1.5 / (4 * np.pi * d) * taps[lo - s:hi - s]
        np.testing.assert_allclose(rec2.pressure[:, 0], want, atol=1e-12)


def five_wave_setup(n_mics=12, aperture=2.0, fs=4000.0, duration=0.064):
    directions = planewave_directions(64)
    true_idx = [3, 17, 30, 44, 58]
    # wide pulse: its spectrum decays inside the 100-800 Hz analysis band, so
    # the field is fully representable by the bins the solver sees
    sig = 6.0 / (2 * np.pi * 400.0)
    comps = [PlaneWaveComponent(2 * np.pi * i / 64,
                                GaussianPulse(400.0, t_peak=0.02 + 0.002 * j,
                                              sigma=sig), 1.0)
             for j, i in enumerate(true_idx)]
    spec = PlaneWavePulseSpec(comps)
    g = np.linspace(-aperture / 2, aperture / 2, n_mics)
    xx, yy = np.meshgrid(g, g)
    mics = np.column_stack([xx.ravel(), yy.ravel()])
    held = np.column_stack([np.linspace(-0.8, 0.8, 15),
                            np.linspace(0.7, -0.6, 15)])
    measured, fld = planewave_pulse_field(spec, MEDIUM, GridRequest(mics, fs, duration))
    truth_held, _ = planewave_pulse_field(spec, MEDIUM, GridRequest(held, fs, duration))
    return measured, truth_held, held, directions, true_idx


def nmse_db(truth, est):
    return 10 * np.log10(np.mean((truth - est) ** 2) / np.mean(truth ** 2))


class TestPwSolve:
    def test_single_wave_tikhonov_heldout(self):
        directions = planewave_directions(64)
        comp = PlaneWaveComponent(2 * np.pi * 9 / 64, GaussianPulse(400.0, t_peak=0.02))
        spec = PlaneWavePulseSpec([comp])
        g = np.linspace(-1, 1, 10)
        xx, yy = np.meshgrid(g, g)
        mics = np.column_stack([xx.ravel(), yy.ravel()])
        held = np.array([[0.33, -0.41], [-0.72, 0.15], [0.05, 0.88]])
        measured, _ = planewave_pulse_field(spec, MEDIUM, GridRequest(mics, 4000.0, 0.064))
        truth, _ = planewave_pulse_field(spec, MEDIUM, GridRequest(held, 4000.0, 0.064))
        fit = pw_solve(measured, directions, (100.0, 800.0),
                       SparseSolverConfig(kind="tikhonov", lam=1e-10), MEDIUM)
        rec = reconstruct_baseline(fit, held)
        assert nmse_db(truth.pressure, rec.pressure) < -30.0

    def test_five_wave_lasso_support_and_heldout(self):
        measured, truth_held, held, directions, true_idx = five_wave_setup()
        cfg = SparseSolverConfig(kind="fista-lasso", lam=0.05, max_iter=600,
                                 tol=1e-14, debias=True)
        fit = pw_solve(measured, directions, (100.0, 800.0), cfg, MEDIUM)
        energy = np.sum(np.abs(fit.beta) ** 2, axis=0)
        support = set(np.nonzero(energy > 1e-8 * energy.max())[0])
        assert support == set(true_idx)
        rec = reconstruct_baseline(fit, held)
        assert nmse_db(truth_held.pressure, rec.pressure) < -30.0

    def test_ridge_limit_kills_coefficients(self):
        measured, *_ = five_wave_setup(n_mics=6, duration=0.032)
        fit = pw_solve(measured, planewave_directions(16), (100.0, 800.0),
                       SparseSolverConfig(kind="tikhonov", lam=1e12), MEDIUM)
        assert np.abs(fit.beta).max() < 1e-6

    def test_unregularized_underdetermined_raises(self):
        rng = np.random.default_rng(10)
        mics = rng.uniform(-0.5, 0.5, (4, 2))  # 4 mics, 64 directions
        grid = FieldGrid(mics, rng.normal(size=(64, 4)), 4000.0)
        with pytest.raises(ConditioningError, match="lambda"):
            pw_solve(grid, planewave_directions(64), (100.0, 800.0),
                     SparseSolverConfig(kind="tikhonov", lam=0.0), MEDIUM)

    def test_reconstruction_is_real_with_hermitian_extension(self):
        measured, _, held, directions, _ = five_wave_setup(n_mics=6, duration=0.032)
        fit = pw_solve(measured, directions, (100.0, 800.0),
                       SparseSolverConfig(kind="tikhonov", lam=1e-8), MEDIUM)
        # assemble the two-sided spectrum explicitly and invert with the full
        # complex FFT: imaginary residue must vanish
        n = fit.n_time
        spec = np.zeros((n, held.shape[0]), dtype=complex)
        for i, k in enumerate(fit.bins):
            h = steering_matrix(held, fit.directions, 2 * np.pi * fit.freqs[i], fit.c)
            spec[k] = h @ fit.beta[i]
            spec[n - k] = np.conj(spec[k])
        time_sig = np.fft.ifft(spec, axis=0)
        assert np.abs(time_sig.imag).max() < 1e-10
        rec = reconstruct_baseline(fit, held)
        np.testing.assert_allclose(rec.pressure, time_sig.real, atol=1e-10)

    def test_empty_band_rejected(self):
        grid = FieldGrid(np.array([[0.0, 0.0], [0.1, 0.0]]),
                         np.zeros((8, 2)), fs=1000.0)
        with pytest.raises(ValueError, match="range|bins"):
            pw_solve(grid, planewave_directions(8), (1.0, 2.0),
                     SparseSolverConfig(kind="tikhonov", lam=1e-6), MEDIUM)

    def test_steering_entries_unit_modulus(self):
        rng = np.random.default_rng(11)
        h = steering_matrix(rng.normal(size=(7, 2)), planewave_directions(12),
                            2 * np.pi * 311.0, MEDIUM.c)
        np.testing.assert_allclose(np.abs(h), 1.0, rtol=1e-13)


class TestConfigAndDumps:
    def test_solver_config_validation(self):
        with pytest.raises(ValueError):
            SparseSolverConfig(lam=-1.0)
        with pytest.raises(ValueError):
            SparseSolverConfig(kind="vi")

    def test_unknown_fit_type(self):
        with pytest.raises(TypeError):
            reconstruct_baseline(object(), np.zeros((1, 2)))

    def test_coefficient_dumps(self, tmp_path):
        dic = small_dictionary(n_src=3, n_rcv=2)
        alpha = np.zeros((3, 20))
        alpha[1, 5] = 0.25
        fit = TdFit(dic, alpha, [], True, 0)
        p1 = tmp_path / "td.csv"
        dump_td_coefficients(p1, fit)
        lines = p1.read_text().strip().splitlines()
        assert lines[0] == "source,sample,value"
        assert lines[1].startswith("1,5,")

        pw = PwFit(planewave_directions(4), np.array([2]), np.array([125.0]),
                   np.array([[1 + 2j, 0, 0, 0]]), 1000.0, 16, 0.0, 0.0, MEDIUM.c)
        p2 = tmp_path / "pw.csv"
        dump_pw_coefficients(p2, pw)
        rows = p2.read_text().strip().splitlines()
        assert rows[0] == "freq_hz,direction,angle_rad,re,im"
        assert len(rows) == 5
