"""Derivative engine checks against central finite differences.

First-order jet channels must match FD to 1e-6 relative, second-order to
1e-4, parameter gradients from the tape to 1e-5 (FD of second differences
loses more bits, hence the looser bars).
"""
import numpy as np
import pytest

from wavefield.autodiff import (
    FdEstimate,
    Jet2,
    JetBatch,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    absolute,
    cos,
    finite_diff_probe,
    jet_affine,
    jet_gate,
    jet_scale,
    jet_sin,
    matmul,
    mean,
    sin,
    square,
)

RNG = np.random.default_rng


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / (1e-8 + np.abs(b)))


def tiny_stack(rng, n_in=3, width=8):
    """A hand-rolled two-layer gated stack used as a common fixture."""
    w1 = rng.normal(0, 0.4, (n_in, width))
    b1 = rng.normal(0, 0.1, width)
    wu = rng.normal(0, 0.4, (n_in, width))
    bu = rng.normal(0, 0.1, width)
    wv = rng.normal(0, 0.4, (n_in, width))
    bv = rng.normal(0, 0.1, width)
    w2 = rng.normal(0, 0.4, (width, 1))
    b2 = rng.normal(0, 0.1, 1)
    om = 2.3

    def value(q):
        q = np.atleast_2d(q)
        u = np.sin(om * (q @ wu + bu))
        v = np.sin(om * (q @ wv + bv))
        z = np.sin(om * (q @ w1 + b1))
        h = u + z * (v - u)
        return (h @ w2 + b2)[:, 0]

    def jets(q, scale=None, tape=None):
        q = np.atleast_2d(q)
        if scale is None:
            scale = np.ones(3)
        params = {"w1": w1, "b1": b1, "wu": wu, "bu": bu, "wv": wv, "bv": bv,
                  "w2": w2, "b2": b2}
        if tape is not None:
            params = {k: tape.param(v, name=k) for k, v in params.items()}
        jet = JetBatch.seed(q, scale, tape=tape)
        u = jet_sin(om, jet_affine(params["wu"], params["bu"], jet))
        v = jet_sin(om, jet_affine(params["wv"], params["bv"], jet))
        z = jet_sin(om, jet_affine(params["w1"], params["b1"], jet))
        h = jet_gate(z, u, v)
        return jet_affine(params["w2"], params["b2"], h), params

    return value, jets


class TestJetsAgainstFiniteDifferences:
    def test_affine_sine_chain(self):
        rng = RNG(0)
        w = rng.normal(0, 0.5, (3, 5))
        b = rng.normal(0, 0.2, 5)
        c = rng.normal(0, 0.5, (5, 1))
        om = 3.0
        q = rng.normal(0, 0.7, 3)

        def f(q):
            return float((np.sin(om * (q @ w + b)) @ c)[0])

        jet = jet_affine(c, None, jet_sin(om, jet_affine(w, b, JetBatch.seed(q[None], np.ones(3)))))
        est = finite_diff_probe(f, q, h=1e-5, h2=5e-4)
        assert rel_err(np.asarray(jet.grad)[0, :, 0], est.grad) < 1e-6
        assert rel_err(np.asarray(jet.hdiag)[0, :, 0], est.hdiag) < 1e-4

    def test_gated_stack(self):
        rng = RNG(1)
        value, jets = tiny_stack(rng)
        q = rng.normal(0, 0.6, 3)
        jet, _ = jets(q)
        est = finite_diff_probe(lambda p: float(value(p)[0]), q, h=1e-5, h2=5e-4)
        assert rel_err(np.asarray(jet.grad)[0, :, 0], est.grad) < 1e-6
        assert rel_err(np.asarray(jet.hdiag)[0, :, 0], est.hdiag) < 1e-4

    def test_axis_scale_carries_units(self):
        # seeding with d(normalized)/d(physical) must equal probing in
        # physical coordinates directly
        rng = RNG(2)
        value, jets = tiny_stack(rng)
        scale = np.array([2.0, 0.5, 40.0])
        q_phys = rng.normal(0, 0.3, 3)

        def f(qp):
            return float(value((scale * qp)[None])[0])

        jet, _ = jets(scale * q_phys, scale=scale)
        est = finite_diff_probe(f, q_phys, h=1e-6, h2=2e-4)
        assert rel_err(np.asarray(jet.grad)[0, :, 0], est.grad) < 1e-5
        assert rel_err(np.asarray(jet.hdiag)[0, :, 0], est.hdiag) < 1e-3

    def test_batch_matches_single_point(self):
        rng = RNG(3)
        _, jets = tiny_stack(rng)
        pts = rng.normal(0, 0.5, (7, 3))
        batch, _ = jets(pts)
        for i, q in enumerate(pts):
            one, _ = jets(q)
            np.testing.assert_allclose(np.asarray(batch.value)[i], np.asarray(one.value)[0], rtol=1e-12)
            np.testing.assert_allclose(np.asarray(batch.grad)[i], np.asarray(one.grad)[0], rtol=1e-12)
            np.testing.assert_allclose(np.asarray(batch.hdiag)[i], np.asarray(one.hdiag)[0], rtol=1e-12)

    def test_jet_scale(self):
        rng = RNG(4)
        _, jets = tiny_stack(rng)
        jet, _ = jets(rng.normal(0, 0.5, (2, 3)))
        scaled = jet_scale(-2.5, jet)
        np.testing.assert_allclose(np.asarray(scaled.hdiag), -2.5 * np.asarray(jet.hdiag))

    def test_constant_jet(self):
        j = Jet2.constant(4.0)
        assert j.value == 4.0
        assert not j.grad.any() and not j.hdiag.any()

    def test_to_jets_roundtrip(self):
        rng = RNG(5)
        _, jets = tiny_stack(rng)
        batch, _ = jets(rng.normal(0, 0.5, (3, 3)))
        flat = batch.to_jets()
        assert len(flat) == 3
        assert flat[1].value == pytest.approx(float(np.asarray(batch.value)[1, 0]))


class TestTape:
    def test_param_grads_match_fd(self):
        rng = RNG(10)
        value, jets = tiny_stack(rng)
        pts = rng.normal(0, 0.5, (6, 3))

        tape = Tape()
        jet, params = jets(pts, tape=tape)
        # second derivatives enter the loss, so the sweep runs
        # reverse-over-forward
        loss = mean(square(jet.value)) + mean(square(jet.hdiag))
        grads = tape.backward(loss)

        _, jets_plain = tiny_stack(RNG(10))

        def loss_of(name, flat):
            _, params2 = jets_plain(pts)  # fresh plain params, same seed
            base = {k: np.array(v) for k, v in params2.items()}
            base[name] = flat.reshape(base[name].shape)
            om = 2.3
            seed = JetBatch.seed(pts, np.ones(3))
            u = jet_sin(om, jet_affine(base["wu"], base["bu"], seed))
            v = jet_sin(om, jet_affine(base["wv"], base["bv"], seed))
            z = jet_sin(om, jet_affine(base["w1"], base["b1"], seed))
            h = jet_gate(z, u, v)
            jet2 = jet_affine(base["w2"], base["b2"], h)
            return float(np.mean(jet2.value ** 2) + np.mean(jet2.hdiag ** 2))

        for name in ("w1", "wu", "w2", "b1", "bv"):
            flat0 = np.asarray(params[name].value).ravel().copy()
            idx = rng.choice(flat0.size, size=min(5, flat0.size), replace=False)
            for i in idx:
                h = 1e-4
                fp = flat0.copy(); fp[i] += h
                fm = flat0.copy(); fm[i] -= h
                fd = (loss_of(name, fp) - loss_of(name, fm)) / (2 * h)
                got = grads[name].ravel()[i]
                assert abs(got - fd) < 1e-5 * max(1.0, abs(fd)), (name, i)

    def test_unreached_param_gets_zeros(self):
        tape = Tape()
        a = tape.param(np.ones(3), name="a")
        b = tape.param(np.ones(3), name="b")
        loss = mean(square(a))
        grads = tape.backward(loss)
        assert grads["b"].shape == (3,)
        assert not grads["b"].any()

    def test_broadcast_add_unbroadcasts(self):
        tape = Tape()
        w = tape.param(np.zeros((4, 3)), name="w")
        b = tape.param(np.zeros(3), name="b")
        loss = mean(square(w + b + 1.0))
        grads = tape.backward(loss)
        assert grads["b"].shape == (3,)
        np.testing.assert_allclose(grads["b"], 4 * 2.0 / 12.0)

    def test_matmul_grads(self):
        rng = RNG(11)
        a0 = rng.normal(size=(5, 4))
        w0 = rng.normal(size=(4, 2))
        tape = Tape()
        w = tape.param(w0, name="w")
        loss = mean(square(matmul(a0, w)))
        grads = tape.backward(loss)
        manual = 2.0 * a0.T @ (a0 @ w0) / (5 * 2)
        np.testing.assert_allclose(grads["w"], manual, rtol=1e-12)

    def test_batched_matmul_weight_grad(self):
        # (B, 3, n) @ (n, m) path used by the jet channels
        rng = RNG(12)
        a0 = rng.normal(size=(4, 3, 5))
        w0 = rng.normal(size=(5, 2))
        tape = Tape()
        w = tape.param(w0, name="w")
        loss = mean(square(matmul(a0, w)))
        grads = tape.backward(loss)
        y = np.einsum("bij,jk->bik", a0, w0)
        manual = np.einsum("bij,bik->jk", a0, 2.0 * y / y.size)
        np.testing.assert_allclose(grads["w"], manual, rtol=1e-10)

    def test_abs_subgradient_zero_at_zero(self):
        tape = Tape()
        x = tape.param(np.array([-2.0, 0.0, 3.0]), name="x")
        loss = mean(absolute(x))
        g = tape.backward(loss)["x"]
        np.testing.assert_allclose(g, np.array([-1.0, 0.0, 1.0]) / 3.0)

    def test_trig_grads(self):
        tape = Tape()
        x = tape.param(np.array([0.3, -1.1]), name="x")
        loss = mean(sin(x) + cos(x))
        g = tape.backward(loss)["x"]
        np.testing.assert_allclose(g, (np.cos([0.3, -1.1]) - np.sin([0.3, -1.1])) / 2)

    def test_backward_requires_scalar(self):
        tape = Tape()
        x = tape.param(np.ones(3), name="x")
        with pytest.raises(TapeError):
            tape.backward(square(x))

    def test_backward_rejects_foreign_node(self):
        t1, t2 = Tape(), Tape()
        x = t1.param(np.ones(()), name="x")
        with pytest.raises(TapeError):
            t2.backward(x)

    def test_duplicate_param_name(self):
        tape = Tape()
        tape.param(np.ones(2), name="w")
        with pytest.raises(ValueError):
            tape.param(np.ones(2), name="w")

    def test_matmul_shape_mismatch(self):
        tape = Tape()
        a = tape.param(np.ones((2, 3)), name="a")
        with pytest.raises(ShapeError):
            matmul(a, np.ones((4, 2)))

    def test_numpy_defers_to_tensor(self):
        tape = Tape()
        x = tape.param(np.ones(3), name="x")
        y = np.ones(3) + x          # must hit Tensor.__radd__, not object array
        assert isinstance(y, Tensor)
        loss = mean(y)
        np.testing.assert_allclose(tape.backward(loss)["x"], 1.0 / 3.0)

    def test_backward_twice_is_stable(self):
        tape = Tape()
        x = tape.param(np.array([1.0, 2.0]), name="x")
        loss = mean(square(x))
        g1 = tape.backward(loss).copy()
        g2 = tape.backward(loss)
        np.testing.assert_array_equal(g1["x"], g2["x"])


class TestFiniteDiffProbe:
    def test_quadratic_is_exact(self):
        a = np.array([2.0, -1.0, 0.5])
        f = lambda q: float(q @ (a * q))
        est = finite_diff_probe(f, np.array([0.3, 0.7, -0.2]), h=1e-5)
        np.testing.assert_allclose(est.hdiag, 2 * a, rtol=1e-6)

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            finite_diff_probe(lambda q: 0.0, np.zeros(2), h=0.0)


def test_shape_errors_in_jets():
    rng = RNG(20)
    jet = JetBatch.seed(rng.normal(size=(2, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        jet_affine(np.ones((4, 5)), None, jet)
    other = JetBatch.seed(rng.normal(size=(2, 3)), np.ones(3))
    w = jet_affine(np.ones((3, 6)), None, jet)
    with pytest.raises(ShapeError):
        jet_gate(other, w, w)
