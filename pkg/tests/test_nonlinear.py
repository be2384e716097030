import itertools
import math

import numpy as np
import pytest

from zipq import (
    ApproximationError,
    RefetchPolicy,
    Regularizer,
    StreamReuseError,
    TrainConfig,
    chebyshev_fit,
    load_poly,
    new_rng,
    poly_gradient_estimate,
    quantize_stochastic,
    refetch_l1_decide,
    refetch_l2_decide,
    save_poly,
    synth,
    train_nonlinear,
    uniform_scheme,
)
from zipq.nonlinear import (
    PolyApprox,
    _hinge_compose,
    hinge_loss,
    jl_projection,
    jl_projection_dim,
    logistic_loss,
    sigmoid_deriv,
)

GRID01 = uniform_scheme(1, signed=False)


class TestChebyshevFit:
    def test_constant_target(self):
        p = chebyshev_fit("constant", radius=1.0, degree=1)
        assert p.coeffs[0] == pytest.approx(1.0, abs=1e-14)
        assert p.sup_error <= 1e-13

    def test_sigmoid_derivative_high_accuracy(self):
        p = chebyshev_fit("sigmoid_deriv", radius=1.0, degree=15)
        assert p.sup_error < 1e-3
        zs = np.linspace(-1, 1, 4001)
        assert np.abs(p(zs) - sigmoid_deriv(zs)).max() < 1e-3

    def test_step_bounded_and_certified(self):
        p = chebyshev_fit("step", radius=1.0, delta=0.1, degree=15)
        zs = np.linspace(-1.0, 1.0, 20_001)
        assert np.abs(p(zs)).max() <= 1.0 + 1e-9
        # the certificate is the measured sup on the module's grid
        from zipq.nonlinear import certificate_sup_error, step_function

        measured = certificate_sup_error(p.coeffs, step_function, 1.0, 0.1)
        assert p.sup_error == measured

    def test_infeasible_eps_raises(self):
        with pytest.raises(ApproximationError):
            chebyshev_fit("step", radius=4.0, delta=0.05, degree=8, eps=1e-3)

    def test_step_needs_delta(self):
        with pytest.raises(ValueError):
            chebyshev_fit("step", radius=1.0, delta=0.0, degree=5)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            chebyshev_fit("relu", radius=1.0, degree=3)

    def test_serialization_roundtrip(self, tmp_path):
        p = chebyshev_fit("sigmoid_deriv", radius=2.0, degree=7)
        path = tmp_path / "poly.txt"
        save_poly(p, path)
        back = load_poly(path)
        assert np.array_equal(back.coeffs, p.coeffs)
        assert (back.degree, back.radius, back.delta, back.target) == (7, 2.0, 0.0, "sigmoid_deriv")
        assert back.sup_error == p.sup_error


def enum_poly_expectation(coeffs, a, x, b):
    """Exact expectation of the product-form estimator for scalar ``a`` on
    {0,1}: enumerate every joint outcome of the d+1 independent draws."""
    d = len(coeffs) - 1
    p_up = a
    total = 0.0
    for outcome in itertools.product((0.0, 1.0), repeat=d + 1):
        w = 1.0
        for q in outcome:
            w *= p_up if q == 1.0 else 1 - p_up
        value = coeffs[0]
        running = 1.0
        for i in range(1, d + 1):
            running *= b * outcome[i - 1] * x
            value += coeffs[i] * running
        total += w * b * value * outcome[d]
    return total


class TestPolyGradient:
    def _draws(self, a, count, rng):
        return [quantize_stochastic(np.array([a]), GRID01, 1.0, rng) for _ in range(count)]

    def test_degree_zero(self):
        rng = new_rng(80)
        p = PolyApprox(np.array([0.7]), radius=1.0)
        outs = [poly_gradient_estimate(p, self._draws(0.5, 1, rng), 1.0, np.array([1.0]))[0] for _ in range(4000)]
        # E = m0 * b * a
        assert np.mean(outs) == pytest.approx(0.7 * 0.5, abs=4 * np.std(outs) / math.sqrt(len(outs)))

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_exact_expectation_by_enumeration(self, d):
        rng = new_rng(81 + d)
        coeffs = np.array([0.4, -0.3, 0.2, 0.1])[: d + 1]
        a, x, b = 0.6, 0.9, -1.0
        p = PolyApprox(coeffs, radius=2.0)
        expect = enum_poly_expectation(coeffs, a, x, b)
        # the enumeration oracle itself must equal b * P(b a x) * a
        analytic = b * np.polynomial.polynomial.polyval(b * a * x, coeffs) * a
        assert expect == pytest.approx(analytic, abs=1e-12)
        outs = [
            poly_gradient_estimate(p, self._draws(a, d + 1, rng), b, np.array([x]))[0]
            for _ in range(6000)
        ]
        se = np.std(outs) / math.sqrt(len(outs))
        assert abs(np.mean(outs) - expect) <= 4 * se

    def test_needs_enough_draws(self):
        rng = new_rng(85)
        p = PolyApprox(np.array([0.5, 0.5]), radius=1.0)
        with pytest.raises(ValueError):
            poly_gradient_estimate(p, self._draws(0.5, 1, rng), 1.0, np.array([1.0]))

    def test_rejects_repeated_draw(self):
        rng = new_rng(86)
        p = PolyApprox(np.array([0.5, 0.5]), radius=1.0)
        q = quantize_stochastic(np.array([0.5]), GRID01, 1.0, rng)
        with pytest.raises(StreamReuseError):
            poly_gradient_estimate(p, [q, q], 1.0, np.array([1.0]))

    def test_second_moment_guard(self):
        # qualitative ceiling with nonnegative coefficients and margin
        rng = new_rng(87)
        n, s = 5, 2
        a = np.abs(rng.uniform(0.1, 0.4, n))
        x = np.abs(rng.uniform(0.1, 0.4, n))
        coeffs = np.array([0.5, 0.3, 0.2])
        sch = uniform_scheme(s, signed=True, scaling="row")
        scale = float(np.linalg.norm(a))
        margin = float(a @ x)
        r = 1 + min(n / s**2, math.sqrt(n) / s)
        bound = (coeffs[0] + coeffs[1] * r * margin + coeffs[2] * r**2 * margin**2) ** 2
        p = PolyApprox(coeffs, radius=2.0)
        vals = []
        for _ in range(4000):
            quants = [quantize_stochastic(a, sch, scale, rng) for _ in range(3)]
            v = coeffs[0]
            run = 1.0
            for i in (1, 2):
                run *= float(quants[i - 1].dequantize() @ x)
                v += coeffs[i] * run
            vals.append(v * v)
        assert np.mean(vals) <= bound * 1.1


class TestHingeCompose:
    def test_composition_values(self):
        p = chebyshev_fit("step", radius=3.0, delta=0.3, degree=9)
        c = _hinge_compose(p)
        zs = np.linspace(-1.5, 1.5, 101)
        got = np.polynomial.polynomial.polyval(zs, c)
        want = -p(1.0 - zs)
        assert np.allclose(got, want, atol=1e-9)


class TestRefetchL1:
    def _exact_quant(self, a, scheme=GRID01):
        # values on grid points quantize deterministically
        return quantize_stochastic(np.asarray(a, dtype=float), scheme, 1.0, new_rng(0))

    def test_certain_interval(self):
        # margin estimate 0.5, slack 0.1 -> [0.4, 0.6], no refetch
        qa = self._exact_quant([1.0])  # dequant = 1.0
        dec = refetch_l1_decide(qa, np.array([0.5]), 1.0)
        # u_hat = 1 - 0.5 = 0.5; slack = |x| * max_gap = 0.5
        assert dec.lower == pytest.approx(0.0) and dec.upper == pytest.approx(1.0)
        sch = uniform_scheme(5, signed=False)
        qa = self._exact_quant([1.0], sch)  # gap 0.2 -> slack 0.1
        dec = refetch_l1_decide(qa, np.array([0.5]), 1.0)
        assert (dec.lower, dec.upper) == (pytest.approx(0.4), pytest.approx(0.6))
        assert not dec.refetch

    def test_zero_model_never_refetches(self):
        qa = self._exact_quant([1.0])
        dec = refetch_l1_decide(qa, np.zeros(1), -1.0)
        assert not dec.refetch and dec.lower == dec.upper == 1.0

    def test_straddling_zero_refetches(self):
        sch = uniform_scheme(20, signed=False)  # gap 0.05
        qa = self._exact_quant([1.0], sch)
        dec = refetch_l1_decide(qa, np.array([1.0]), 1.0)  # u_hat = 0, slack 0.05
        assert dec.refetch
        assert dec.lower <= 0.0 <= dec.upper

    def test_bounds_always_contain_true_margin(self):
        rng = new_rng(88)
        sch = uniform_scheme(8, signed=True)
        a = rng.uniform(-1, 1, 12)
        x = rng.normal(size=12)
        b = -1.0
        true_u = 1.0 - b * float(a @ x)
        for _ in range(3000):
            qa = quantize_stochastic(a, sch, 1.0, rng)
            dec = refetch_l1_decide(qa, x, b)
            assert dec.lower - 1e-12 <= true_u <= dec.upper + 1e-12

    def test_no_flip_when_certain(self):
        rng = new_rng(89)
        sch = uniform_scheme(8, signed=True)
        for _ in range(300):
            a = rng.uniform(-1, 1, 6)
            x = rng.normal(size=6)
            b = 1.0 if rng.random() < 0.5 else -1.0
            qa = quantize_stochastic(a, sch, 1.0, rng)
            dec = refetch_l1_decide(qa, x, b)
            if not dec.refetch:
                u_hat = 1.0 - b * float(qa.dequantize() @ x)
                true_u = 1.0 - b * float(a @ x)
                assert (u_hat > 0) == (true_u > 0)


class TestRefetchL2:
    def test_deterministic_given_seed(self):
        rng = new_rng(90)
        a, x = rng.uniform(-0.3, 0.3, 50), rng.normal(size=50)
        pol = RefetchPolicy("l2jl", r=64, delta=0.05)
        d1 = refetch_l2_decide(a, x, 1.0, pol, seed=123)
        d2 = refetch_l2_decide(a, x, 1.0, pol, seed=123)
        assert d1.c == d2.c and d1.refetch == d2.refetch

    def test_clear_margin_no_refetch(self):
        rng = new_rng(91)
        n = 64
        a = rng.uniform(-1, 1, n)
        a /= np.linalg.norm(a)
        x = np.zeros(n)  # margin exactly 1
        pol = RefetchPolicy("l2jl", r=256, delta=0.05)
        dec = refetch_l2_decide(a, x, 1.0, pol, seed=7)
        assert not dec.refetch
        assert dec.c == pytest.approx(1.0, abs=1e-9)

    def test_exact_margin_refetches_whp(self):
        rng = new_rng(92)
        n = 32
        a = rng.uniform(-1, 1, n)
        a /= np.linalg.norm(a)
        x = a.copy()  # b a'x = 1 -> margin 0
        pol = RefetchPolicy("l2jl", r=jl_projection_dim(1.0, 0.05, 0.05), delta=0.05, tau=0.05)
        hits = sum(refetch_l2_decide(a, x, 1.0, pol, seed=s).refetch for s in range(200))
        assert hits >= 0.95 * 200 * 0.9

    def test_estimate_concentrates(self):
        rng = new_rng(93)
        n = 48
        a = rng.uniform(-1, 1, n)
        a /= np.linalg.norm(a)
        x = rng.normal(size=n)
        x *= 2.0 / np.linalg.norm(x)
        delta, tau = 0.2, 0.1
        pol = RefetchPolicy("l2jl", r=jl_projection_dim(2.0, delta, tau), delta=delta, tau=tau)
        margin = 1.0 - float(a @ x)
        bad = sum(
            abs(refetch_l2_decide(a, x, 1.0, pol, seed=s).c - margin) > delta for s in range(300)
        )
        assert bad / 300 <= tau

    def test_projection_shared_and_scaled(self):
        M1 = jl_projection(10, 16, seed=5)
        M2 = jl_projection(10, 16, seed=5)
        assert np.array_equal(M1, M2)
        assert set(np.unique(np.abs(M1 * np.sqrt(16)))) == {1.0}

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            RefetchPolicy("l3")
        with pytest.raises(ValueError):
            RefetchPolicy("l2jl", r=0)


class TestTrainNonlinear:
    def _logistic_baseline(self, ds, alpha, epochs, bs, seed, radius):
        from zipq.linear import prox
        from zipq.rng import new_rng as _rng

        X, y = ds.X, ds.y
        x = np.zeros(X.shape[1])
        rng = _rng(seed)
        reg = Regularizer.ball(radius)
        for ep in range(1, epochs + 1):
            step = alpha / ep
            order = rng.permutation(len(y))
            for s in range(0, len(y), bs):
                sel = order[s : s + bs]
                A, yy = X[sel], y[sel]
                G = (yy * sigmoid_deriv(yy * (A @ x)))[:, None] * A
                x = prox(reg, step, x - step * G.mean(axis=0))
        return logistic_loss(X, y, x)

    def test_logistic_poly_matches_baseline(self):
        ds = synth("classification", 15, 1200, 0, seed=94, noise=0.05)
        R = 1.5
        approx = chebyshev_fit("sigmoid_deriv", radius=R, degree=15)
        base = self._logistic_baseline(ds, 2.0, 8, 32, 11, R)
        cfg = TrainConfig(alpha0=2.0, epochs=8, batch_size=32, seed=11, sample_bits=4, reg=Regularizer.ball(R))
        tr = train_nonlinear(ds, "logistic", cfg, approx=approx)
        assert not tr.diverged
        assert abs(tr.train_loss[-1] - base) / base <= 0.05

    def test_hinge_l1_no_flips(self):
        ds = synth("classification", 15, 800, 0, seed=95, noise=0.0)
        cfg = TrainConfig(alpha0=0.5, epochs=6, batch_size=32, seed=12, sample_bits=8, reg=Regularizer.ball(3.0))
        tr = train_nonlinear(ds, "hinge", cfg, refetch=RefetchPolicy("l1"))
        assert tr.flips == 0
        assert max(tr.refetch_fraction) <= 0.25
        assert tr.train_loss[-1] < tr.train_loss[0]

    def test_hinge_l2jl_runs(self):
        ds = synth("classification", 10, 400, 0, seed=96, noise=0.0)
        approx = chebyshev_fit("step", radius=4.0, delta=0.4, degree=9)
        cfg = TrainConfig(alpha0=0.5, epochs=4, batch_size=32, seed=13, sample_bits=8, reg=Regularizer.ball(2.0))
        tr = train_nonlinear(
            ds, "hinge", cfg, approx=approx, refetch=RefetchPolicy("l2jl", r=128, delta=0.1)
        )
        assert not tr.diverged
        assert all(0.0 <= f <= 1.0 for f in tr.refetch_fraction)

    def test_refetch_requires_hinge(self):
        ds = synth("classification", 5, 100, 0, seed=97)
        cfg = TrainConfig(sample_bits=8)
        with pytest.raises(ValueError):
            train_nonlinear(ds, "logistic", cfg, refetch=RefetchPolicy("l1"))

    def test_target_mismatch_rejected(self):
        ds = synth("classification", 5, 100, 0, seed=98)
        cfg = TrainConfig(sample_bits=8)
        approx = chebyshev_fit("step", radius=2.0, delta=0.3, degree=5)
        with pytest.raises(ValueError):
            train_nonlinear(ds, "logistic", cfg, approx=approx)

    def test_full_precision_path(self):
        # no quantization settings: plain SGD with the exact derivative
        ds = synth("classification", 8, 400, 0, seed=99, noise=0.05)
        cfg = TrainConfig(alpha0=1.5, epochs=6, batch_size=16, seed=15, reg=Regularizer.ball(1.5))
        tr = train_nonlinear(ds, "logistic", cfg)
        assert not tr.diverged
        assert tr.train_loss[-1] < tr.train_loss[0]
        assert all(v == 0.0 for v in tr.grad_variance)

    def test_refetch_needs_quantization(self):
        ds = synth("classification", 5, 100, 0, seed=101)
        with pytest.raises(ValueError):
            train_nonlinear(ds, "hinge", TrainConfig(), refetch=RefetchPolicy("l1"))

    def test_deterministic(self):
        ds = synth("classification", 8, 300, 100, seed=100, noise=0.05)
        approx = chebyshev_fit("sigmoid_deriv", radius=1.0, degree=7)
        cfg = TrainConfig(alpha0=1.0, epochs=3, batch_size=16, seed=14, sample_bits=5, reg=Regularizer.ball(1.0))
        t1 = train_nonlinear(ds, "logistic", cfg, approx=approx)
        t2 = train_nonlinear(ds, "logistic", cfg, approx=approx)
        assert t1.train_loss == t2.train_loss
        assert np.array_equal(t1.model, t2.model)


def test_loss_helpers():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([1.0, -1.0])
    x = np.array([2.0, 2.0])
    assert hinge_loss(X, y, x) == pytest.approx(1.5)  # margins 2, -2 -> hinge 0, 3
    expect = 0.5 * (np.log1p(np.exp(-2.0)) + np.log1p(np.exp(2.0)))
    assert logistic_loss(X, y, x) == pytest.approx(expect)
