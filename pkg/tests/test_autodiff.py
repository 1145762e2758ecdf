"""Autodiff engine tests.

The oracle throughout is central finite differences on float64 (h = 1e-5),
plus an independent re-evaluation of the forward chain for the MLP.
"""

import numpy as np
import pytest

from evfields import autodiff as ad


def _finite_diff(f, param: ad.ParamTensor, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. every entry of param."""
    base = param.values.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = base.copy()
        bumped[idx] = base[idx] + h
        param.assign(bumped)
        hi = f()
        bumped[idx] = base[idx] - h
        param.assign(bumped)
        lo = f()
        grad[idx] = (hi - lo) / (2 * h)
        it.iternext()
    param.assign(base)
    return grad


def _check_param_grads(build_loss, params, rel_tol=1e-5, probes=None, rng=None):
    """Compare backward grads against finite differences on sampled entries."""
    for p in params:
        p.zero_grad()
    loss = build_loss()
    ad.backward(loss)
    for p in params:
        analytic = p.grad.copy()
        flat = analytic.reshape(-1)
        if probes is None:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        base = p.values.copy()
        for i in idxs:
            h = 1e-5
            vals = base.copy().reshape(-1)
            vals[i] += h
            p.assign(vals.reshape(base.shape))
            hi = float(build_loss().value)
            vals[i] -= 2 * h
            p.assign(vals.reshape(base.shape))
            lo = float(build_loss().value)
            fd = (hi - lo) / (2 * h)
            denom = max(abs(fd), abs(flat[i]), 1e-8)
            assert abs(fd - flat[i]) / denom < rel_tol, (p.name, i, fd, flat[i])
        p.assign(base)


class TestPrimitives:
    def test_elementwise_ops_fd(self):
        rng = np.random.default_rng(0)
        x = ad.ParamTensor("x", rng.uniform(0.2, 1.5, (4, 3)))

        cases = {
            "exp": lambda v: ad.exp(v),
            "log": lambda v: ad.log(v),
            "sin": lambda v: ad.sin(v),
            "cos": lambda v: ad.cos(v),
            "sqrt": lambda v: ad.sqrt(v),
            "square": lambda v: ad.square(v),
            "softplus": lambda v: ad.softplus(v),
            "sigmoid": lambda v: ad.sigmoid(v),
            "relu": lambda v: ad.relu(v),
        }
        for name, op in cases.items():
            def loss():
                return ad.vsum(ad.mul(op(ad.leaf(x)), np.arange(12).reshape(4, 3) + 0.5))

            x.zero_grad()
            out = loss()
            ad.backward(out)
            fd = _finite_diff(lambda: float(loss().value), x)
            np.testing.assert_allclose(x.grad, fd, rtol=1e-6, atol=1e-8, err_msg=name)

    def test_broadcasting_backward(self):
        rng = np.random.default_rng(1)
        a = ad.ParamTensor("a", rng.standard_normal((5, 4)))
        b = ad.ParamTensor("b", rng.standard_normal(4))

        def loss():
            return ad.vsum(ad.square(ad.add(ad.leaf(a), ad.leaf(b))))

        a.zero_grad()
        b.zero_grad()
        ad.backward(loss())
        np.testing.assert_allclose(b.grad, _finite_diff(lambda: float(loss().value), b),
                                   rtol=1e-6, atol=1e-9)

    def test_matmul_closed_form(self):
        # y = W x, upstream g: dL/dW = g x^T
        rng = np.random.default_rng(2)
        W = ad.ParamTensor("W", rng.standard_normal((3, 4)))
        x = rng.standard_normal((4, 1))
        g = rng.standard_normal((3, 1))
        out = ad.matmul(ad.leaf(W), x)
        ad.backward(out, g)
        np.testing.assert_allclose(W.grad, g @ x.T, atol=1e-12)

    def test_cumsum_concat_getitem_repeat(self):
        rng = np.random.default_rng(3)
        x = ad.ParamTensor("x", rng.standard_normal((3, 5)))
        w = rng.standard_normal((3, 13))

        def loss():
            v = ad.leaf(x)
            c = ad.cumsum(v, axis=1)
            cat = ad.concat([c, v[:, 1:4]], axis=1)          # (3, 8)
            rep = ad.repeat(cat[:, :4], 2, axis=1)           # (3, 8)
            full = ad.concat([cat, rep[:, ::1][:, 3:8]], axis=1)  # (3, 13)
            return ad.vsum(ad.mul(full, w))

        x.zero_grad()
        ad.backward(loss())
        fd = _finite_diff(lambda: float(loss().value), x)
        np.testing.assert_allclose(x.grad, fd, rtol=1e-6, atol=1e-9)

    def test_rodrigues_coefficients_values_and_grads(self):
        # high-precision oracle: direct f64 evaluation of (1-cos t)/t^2 etc.
        # cancels catastrophically near zero, so the reference uses mpmath
        import mpmath

        mpmath.mp.dps = 40
        u = np.array([0.0, 1e-12, 1e-7, 0.3, 2.0, 9.5])
        uv = ad.ParamTensor("u", u)
        a, b, c = ad.rodrigues_coefficients(ad.leaf(uv))

        def refs(ui):
            if ui == 0.0:
                return 1.0, 0.5, 1.0 / 6.0
            t = mpmath.sqrt(mpmath.mpf(ui))
            return (float(mpmath.sin(t) / t),
                    float((1 - mpmath.cos(t)) / (t * t)),
                    float((t - mpmath.sin(t)) / (t ** 3)))

        ref = np.array([refs(ui) for ui in u])
        np.testing.assert_allclose(a.value, ref[:, 0], rtol=1e-12)
        np.testing.assert_allclose(b.value, ref[:, 1], rtol=1e-12)
        np.testing.assert_allclose(c.value, ref[:, 2], rtol=1e-12)

        for which in range(3):
            def loss():
                trio = ad.rodrigues_coefficients(ad.leaf(uv))
                return ad.vsum(trio[which])

            uv.zero_grad()
            ad.backward(loss())
            # probe only entries where fd is reliable (u > h)
            base = uv.values.copy()
            for i in (3, 4, 5):
                h = 1e-6
                vals = base.copy()
                vals[i] += h
                uv.assign(vals)
                hi = float(loss().value)
                vals[i] -= 2 * h
                uv.assign(vals)
                lo = float(loss().value)
                uv.assign(base)
                fd = (hi - lo) / (2 * h)
                assert abs(fd - uv.grad[i]) / max(abs(fd), 1e-8) < 1e-4


class TestPosenc:
    def test_full_window_matches_plain_encoding(self):
        cfg = ad.PosEncConfig(L=3, alpha=3.0)
        x = np.array([[0.3, -0.1]])
        out = ad.posenc(x, cfg)
        expect = [0.3, -0.1]
        for j in range(3):
            f = (2.0 ** j) * np.pi
            expect += list(np.sin(f * x[0])) + list(np.cos(f * x[0]))
        np.testing.assert_allclose(out[0], expect, atol=1e-15)

    def test_alpha_zero_kills_frequencies(self):
        cfg = ad.PosEncConfig(L=4, alpha=0.0)
        x = np.array([[0.5]])
        out = ad.posenc(x, cfg)
        np.testing.assert_allclose(out[0, 0], 0.5)
        np.testing.assert_allclose(out[0, 1:], 0.0, atol=1e-15)

    def test_half_open_window_is_exactly_half(self):
        for j in range(3):
            cfg = ad.PosEncConfig(L=3, alpha=j + 0.5)
            assert cfg.window()[j] == pytest.approx(0.5, abs=1e-15)

    def test_window_monotone_in_alpha(self):
        cfgs = [ad.PosEncConfig(L=5, alpha=a) for a in np.linspace(0, 5, 41)]
        wins = np.stack([c.window() for c in cfgs])
        assert np.all(np.diff(wins, axis=0) >= -1e-15)

    def test_posenc_gradient(self):
        rng = np.random.default_rng(5)
        x = ad.ParamTensor("x", rng.uniform(-1, 1, (3, 2)))
        cfg = ad.PosEncConfig(L=4, alpha=2.3)
        w = rng.standard_normal((3, cfg.out_dim(2)))

        def loss():
            return ad.vsum(ad.mul(ad.posenc(ad.leaf(x), cfg), w))

        x.zero_grad()
        ad.backward(loss())
        fd = _finite_diff(lambda: float(loss().value), x)
        np.testing.assert_allclose(x.grad, fd, rtol=1e-5, atol=1e-8)


class TestMlp:
    def test_zero_net_zero_output(self):
        rng = np.random.default_rng(6)
        net = ad.Mlp([4, 8, 3], rng)
        for p in net.params():
            p.assign(np.zeros_like(p.values))
        out = ad.forward(net, rng.standard_normal((5, 4)))
        np.testing.assert_allclose(out.value, 0.0, atol=1e-15)

    def test_single_linear_identity(self):
        rng = np.random.default_rng(7)
        net = ad.Mlp([3, 3], rng)
        net.weights[0].assign(np.eye(3))
        net.biases[0].assign(np.zeros(3))
        x = rng.standard_normal((4, 3))
        np.testing.assert_allclose(ad.forward(net, x).value, x, atol=1e-15)

    def test_forward_matches_reference_reimplementation(self):
        rng = np.random.default_rng(8)
        net = ad.Mlp([5, 16, 16, 2], rng)
        x = rng.standard_normal((7, 5))
        out = ad.forward(net, x).value

        h = x
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ w.values + b.values
            if i < len(net.weights) - 1:
                h = np.maximum(h, 0.0)
        np.testing.assert_allclose(out, h, atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(9)
        net = ad.Mlp([5, 4], rng)
        with pytest.raises(ValueError):
            ad.forward(net, rng.standard_normal((3, 6)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(10)
        net = ad.Mlp([4, 10, 10, 10, 2], rng)
        x = rng.standard_normal((6, 4))
        target = rng.standard_normal((6, 2))

        def loss():
            return ad.vsum(ad.square(ad.sub(ad.forward(net, x), target)))

        _check_param_grads(loss, net.params(), rel_tol=1e-5, probes=6, rng=rng)

    def test_input_gradient_chainable(self):
        rng = np.random.default_rng(11)
        net = ad.Mlp([3, 8, 2], rng)
        xp = ad.ParamTensor("input", rng.standard_normal((4, 3)))

        def loss():
            return ad.vsum(ad.square(ad.forward(net, ad.leaf(xp))))

        xp.zero_grad()
        out = loss()
        ad.backward(out)
        fd = _finite_diff(lambda: float(loss().value), xp)
        np.testing.assert_allclose(xp.grad, fd, rtol=1e-5, atol=1e-8)

    def test_double_backward_doubles_grads(self):
        rng = np.random.default_rng(12)
        net = ad.Mlp([3, 6, 1], rng)
        x = rng.standard_normal((2, 3))
        out = ad.vsum(ad.forward(net, x))
        ad.backward(out)
        once = [p.grad.copy() for p in net.params()]
        out2 = ad.vsum(ad.forward(net, x))
        ad.backward(out2)
        for p, g in zip(net.params(), once):
            np.testing.assert_allclose(p.grad, 2 * g, atol=1e-14)

    def test_stale_trace_rejected(self):
        rng = np.random.default_rng(13)
        net = ad.Mlp([3, 4], rng)
        out = ad.vsum(ad.forward(net, rng.standard_normal((2, 3))))
        net.weights[0].assign(net.weights[0].values * 1.1)
        with pytest.raises(ad.StaleTraceError):
            ad.backward(out)

    def test_determinism(self):
        a = ad.Mlp([4, 9, 3], np.random.default_rng(99))
        b = ad.Mlp([4, 9, 3], np.random.default_rng(99))
        x = np.random.default_rng(1).standard_normal((5, 4))
        ya = ad.forward(a, x).value
        yb = ad.forward(b, x).value
        assert np.array_equal(ya, yb)


class TestAdam:
    def test_zero_grad_no_change(self):
        rng = np.random.default_rng(14)
        p = ad.ParamTensor("p", rng.standard_normal(4))
        before = p.values.copy()
        opt = ad.Adam([p])
        opt.step(lr=0.1, step_index=1)
        np.testing.assert_allclose(p.values, before, atol=1e-15)

    def test_first_step_magnitude(self):
        # bias-corrected first step moves each coordinate by ~lr for any constant grad
        p = ad.ParamTensor("p", np.array([1.0, -2.0]))
        p.grad[...] = np.array([0.3, -0.7])
        before = p.values.copy()
        ad.adam_step([p], [np.zeros(2)], [np.zeros(2)], lr=0.05, step_index=1)
        np.testing.assert_allclose(np.abs(p.values - before), 0.05, rtol=1e-6)

    def test_quadratic_convergence_matches_scalar_reference(self):
        # reference: same update rule written for a single scalar
        def reference(w0, lr, steps):
            w = w0
            m = v = 0.0
            for k in range(1, steps + 1):
                g = 2 * w
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                w -= lr * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
            return w

        p = ad.ParamTensor("w", np.array([1.0, 1.0]))
        opt = ad.Adam([p])
        for k in range(1, 201):
            p.zero_grad()
            out = ad.vsum(ad.square(ad.leaf(p)))
            ad.backward(out)
            opt.step(lr=0.1, step_index=k)
        assert np.linalg.norm(p.values) < 1e-2
        np.testing.assert_allclose(p.values, reference(1.0, 0.1, 200), rtol=1e-10)

    def test_non_finite_grad_names_parameter(self):
        p = ad.ParamTensor("offender", np.zeros(2))
        p.grad[...] = [np.inf, 0.0]
        with pytest.raises(FloatingPointError, match="offender"):
            ad.adam_step([p], [np.zeros(2)], [np.zeros(2)], lr=0.1, step_index=1)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        tensors = {
            "net.w0": rng.standard_normal((3, 4)),
            "net.b0": rng.standard_normal(4),
            "scalar": np.array(3.14159),
            "deep/nested name with spaces": rng.standard_normal((2, 2, 2)),
        }
        path = tmp_path / "ckpt.dnck"
        ad.save_checkpoint(path, tensors)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(np.asarray(tensors[k], dtype=np.float64), loaded[k])
            assert tensors[k].tobytes() == np.ascontiguousarray(loaded[k]).tobytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
