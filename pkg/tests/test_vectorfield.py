import numpy as np
import pytest

from roughmfg import controlled as ct
from roughmfg import measureflow as mf
from roughmfg import models
from roughmfg import roughpath as rp
from roughmfg import vectorfield as vf
from roughmfg.rng import substream


def brownian_lift(seed, n=16, k=1):
    grid = rp.TimeGrid(1.0, n)
    dw = substream(seed, "vf", "bm").normal(0.0, np.sqrt(grid.dt), size=(n, k))
    return rp.ito_lift(dw, grid)


def random_flow(seed, grid, particles=32, d=1, k=1):
    rng = substream(seed, "vf", "flow")
    y = rng.normal(size=(particles, grid.steps + 1, d)) * 0.5
    yp = rng.normal(size=(particles, grid.steps + 1, d, k)) * 0.3
    return mf.MeasureFlow(grid, y, yp)


class TestBuildFromFlow:
    def test_mu_independent_coefficient_has_zero_derivative_field(self):
        grid = rp.TimeGrid(1.0, 8)
        flow = random_flow(0, grid)
        cvf = vf.build_cvf_from_flow(models.make_model("lq"), flow)
        x = np.array([[0.3], [-1.0]])
        np.testing.assert_array_equal(cvf.fp(3, x), np.zeros((2, 1, 1, 1)))

    def test_linear_mean_functional(self):
        # sigma0 = c * mean(mu): measure derivative is the constant c, so the
        # derivative field is c times the mean derivative particle
        c = 0.7
        grid = rp.TimeGrid(1.0, 4)
        flow = random_flow(1, grid)
        model = models.make_model("lq")
        model.sigma0 = lambda t, x, mu: np.full(
            np.asarray(x).shape[:-1] + (1, 1), c * mu.mean(axis=0)[0]
        )
        model.lions_sigma0 = lambda t, x, mu, y: np.full(
            np.asarray(x).shape[:-1] + (np.atleast_2d(y).shape[0], 1, 1, 1), c
        )
        cvf = vf.build_cvf_from_flow(model, flow)
        x = np.zeros((1, 1))
        got = cvf.fp(2, x)[0, 0, 0, 0]
        assert got == pytest.approx(c * flow.Yp[:, 2, 0, 0].mean(), rel=1e-12)

    def test_tanh_interaction_symbolic_oracle(self):
        # sigma0 = tanh(x) tanh(mean): derivative field equals
        # tanh(x) sech^2(mean) mean(Y') analytically
        grid = rp.TimeGrid(1.0, 6)
        flow = random_flow(2, grid, particles=64)
        model = models.make_model("tanh-interaction", s_base=0.0, s_int=1.0)
        cvf = vf.build_cvf_from_flow(model, flow)
        n = 4
        x = np.array([[0.4], [-0.9], [2.0]])
        m = flow.cloud(n).mean()
        expect = (
            np.tanh(x[:, 0]) / np.cosh(m) ** 2 * flow.Yp[:, n, 0, 0].mean()
        )
        np.testing.assert_allclose(cvf.fp(n, x)[:, 0, 0, 0], expect, atol=1e-10)

    def test_mass_shift_fallback_matches_analytic(self):
        grid = rp.TimeGrid(1.0, 4)
        flow = random_flow(3, grid, particles=16)
        model = models.make_model("tanh-interaction")
        analytic = vf.build_cvf_from_flow(model, flow)
        model_fd = models.make_model("tanh-interaction")
        model_fd.lions_sigma0 = None
        fallback = vf.build_cvf_from_flow(model_fd, flow)
        x = np.array([[0.5], [-0.2]])
        np.testing.assert_allclose(
            fallback.fp(1, x), analytic.fp(1, x), rtol=0, atol=1e-4
        )

    def test_permutation_invariance(self):
        grid = rp.TimeGrid(1.0, 5)
        flow = random_flow(4, grid, particles=20)
        perm = substream(5, "vf", "perm").permutation(20)
        flow_p = mf.MeasureFlow(grid, flow.Y[perm], flow.Yp[perm])
        model = models.make_model("tanh-interaction")
        a = vf.build_cvf_from_flow(model, flow)
        b = vf.build_cvf_from_flow(model, flow_p)
        x = np.array([[0.1], [1.4]])
        np.testing.assert_allclose(a.f(2, x), b.f(2, x), rtol=1e-12)
        np.testing.assert_allclose(a.fp(2, x), b.fp(2, x), rtol=1e-12)

    def test_missing_derivative_particles_rejected(self):
        grid = rp.TimeGrid(1.0, 4)
        flow = mf.MeasureFlow(grid, np.zeros((4, 5, 1)))
        with pytest.raises(vf.ConfigurationError):
            vf.build_cvf_from_flow(models.make_model("lq"), flow)


class TestCompose:
    def ensemble(self, seed, grid, d=1, k=1, particles=8):
        rng = substream(seed, "vf", "ce")
        return ct.ControlledEnsemble(
            grid,
            rng.normal(size=(particles, grid.steps + 1, d)),
            rng.normal(size=(particles, grid.steps + 1, d, k)),
        )

    def test_linear_field(self):
        grid = rp.TimeGrid(1.0, 6)
        a = np.array([[2.0], [-1.0]])
        cvf = vf.from_callables(
            grid,
            d=1,
            k=1,
            out_shape=(2,),
            f_t=lambda t, x: x @ a.T,
            fp_t=lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (2, 1)),
            grad_t=lambda t, x: np.broadcast_to(
                a, np.asarray(x).shape[:-1] + (2, 1)
            ).copy(),
        )
        ce = self.ensemble(0, grid)
        out = vf.compose(cvf, ce)
        np.testing.assert_allclose(out.Z, ce.Z @ a.T)
        np.testing.assert_allclose(
            out.Zp, np.einsum("fd,pndk->pnfk", a, ce.Zp), atol=1e-14
        )

    def test_constant_field(self):
        grid = rp.TimeGrid(1.0, 3)
        c = np.array([1.5, -0.5])
        cvf = vf.from_callables(
            grid,
            d=1,
            k=1,
            out_shape=(2,),
            f_t=lambda t, x: np.broadcast_to(c, np.asarray(x).shape[:-1] + (2,)).copy(),
            fp_t=lambda t, x: np.full(np.asarray(x).shape[:-1] + (2, 1), 0.3),
            grad_t=lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (2, 1)),
        )
        ce = self.ensemble(1, grid)
        out = vf.compose(cvf, ce)
        assert np.all(out.Z == c)
        assert np.all(out.Zp == 0.3)

    def test_sine_field_against_finite_differences(self):
        grid = rp.TimeGrid(1.0, 5)
        cvf = vf.from_callables(
            grid,
            d=1,
            k=1,
            out_shape=(1,),
            f_t=lambda t, x: np.sin(x),
            fp_t=lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1)),
            grad_t=lambda t, x: np.cos(x)[..., None],
        )
        ce = self.ensemble(2, grid)
        out = vf.compose(cvf, ce)
        h = 1e-5
        fd = (
            np.sin(ce.Z + h * ce.Zp[..., 0]) - np.sin(ce.Z - h * ce.Zp[..., 0])
        ) / (2 * h)
        np.testing.assert_allclose(out.Zp[..., 0], fd, atol=1e-6)
        np.testing.assert_allclose(out.Zp[..., 0], np.cos(ce.Z) * ce.Zp[..., 0])

    def test_left_linear_associativity(self):
        grid = rp.TimeGrid(1.0, 4)
        ell = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]])  # (3, 2)

        def base_f(t, x):
            return np.stack([np.sin(x[..., 0]), x[..., 0] ** 2], axis=-1)

        def base_grad(t, x):
            return np.stack([np.cos(x[..., 0]), 2 * x[..., 0]], axis=-1)[..., None]

        def base_fp(t, x):
            return np.stack(
                [0.2 * np.ones_like(x[..., 0]), 0.1 * x[..., 0]], axis=-1
            )[..., None]

        inner = vf.from_callables(
            grid, 1, 1, (2,), base_f, base_fp, base_grad
        )
        outer = vf.from_callables(
            grid,
            1,
            1,
            (3,),
            lambda t, x: base_f(t, x) @ ell.T,
            lambda t, x: np.einsum("fg,...gk->...fk", ell, base_fp(t, x)),
            lambda t, x: np.einsum("fg,...gd->...fd", ell, base_grad(t, x)),
        )
        ce = self.ensemble(3, grid)
        via_outer = vf.compose(outer, ce)
        via_inner = vf.compose(inner, ce)
        np.testing.assert_allclose(via_outer.Z, via_inner.Z @ ell.T, atol=1e-12)
        np.testing.assert_allclose(
            via_outer.Zp, np.einsum("fg,pngk->pnfk", ell, via_inner.Zp), atol=1e-12
        )

    def test_gradient_fallback_requires_step(self):
        grid = rp.TimeGrid(1.0, 2)
        cvf = vf.from_callables(
            grid, 1, 1, (1,), lambda t, x: np.sin(x), lambda t, x: np.zeros(x.shape + (1,))
        )
        cvf.fd_step = None
        with pytest.raises(vf.ConfigurationError):
            cvf.gradient(0, np.zeros((1, 1)))


class TestCvfNorm:
    def test_time_constant_field(self):
        grid = rp.TimeGrid(1.0, 8)
        p = brownian_lift(0, n=8)
        cvf = vf.from_callables(
            grid,
            1,
            1,
            (1, 1),
            lambda t, x: np.tanh(x)[..., None],
            lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1, 1)),
            lambda t, x: (1 / np.cosh(x) ** 2)[..., None, None],
        )
        probes = np.linspace(-2, 2, 9)[:, None]
        est = vf.cvf_norm(cvf, p, ct.IndexPair(), probes)
        assert est.delta_f == 0.0
        assert est.delta_fp == 0.0
        assert est.remainder == 0.0
        assert est.sup_part > 0.0

    def test_linear_time_ramp(self):
        grid = rp.TimeGrid(2.0, 8)
        p = rp.smooth_lift(np.zeros(9), grid)
        cvf = vf.from_callables(
            grid,
            1,
            1,
            (1, 1),
            lambda t, x: np.full(np.asarray(x).shape[:-1] + (1, 1), t),
            lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1, 1)),
            lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1, 1)),
        )
        idx = ct.IndexPair()
        est = vf.cvf_norm(cvf, p, idx, np.zeros((1, 1)))
        assert est.delta_f == pytest.approx(2.0 ** (1 - idx.beta), rel=1e-12)

    def test_flow_built_bound_inequality(self):
        # field norm controlled by 1 + |(Y,Y')| + |(Y,Y')|^2 with a constant
        # fitted once on this reference configuration and frozen
        grid = rp.TimeGrid(1.0, 16)
        p = brownian_lift(1, n=16)
        flow = random_flow(6, grid, particles=64)
        model = models.make_model("tanh-interaction")
        cvf = vf.build_cvf_from_flow(model, flow)
        idx = ct.IndexPair()
        probes = np.linspace(-2.5, 2.5, 11)[:, None]
        lhs = vf.cvf_norm(cvf, p, idx, probes).total
        rep = ct.estimate_norm(flow.ensemble(), p, idx, m=4)
        y_norm = rep.combined
        assert lhs <= 4.0 * (1.0 + y_norm + y_norm**2)

    def test_lipschitz_in_flow(self):
        grid = rp.TimeGrid(1.0, 8)
        p = brownian_lift(2, n=8)
        flow = random_flow(7, grid, particles=32)
        eps = 0.05
        flow2 = mf.MeasureFlow(grid, flow.Y + eps, flow.Yp.copy())
        model = models.make_model("tanh-interaction")
        idx = ct.IndexPair()
        probes = np.linspace(-2, 2, 9)[:, None]
        n1 = vf.cvf_norm(vf.build_cvf_from_flow(model, flow), p, idx, probes).total
        n2 = vf.cvf_norm(vf.build_cvf_from_flow(model, flow2), p, idx, probes).total
        assert abs(n1 - n2) <= 10.0 * eps

    def test_remainder_identity_exact(self):
        grid = rp.TimeGrid(1.0, 6)
        p = brownian_lift(3, n=6)
        model = models.make_model("tanh-interaction")
        flow = random_flow(8, grid)
        cvf = vf.build_cvf_from_flow(model, flow)
        x = np.array([[0.3], [-0.7]])
        s, t = 1, 4
        r = cvf.f(t, x) - cvf.f(s, x) - cvf.fp(s, x) @ p.increment(s, t)
        lhs = cvf.f(t, x) - cvf.f(s, x) - cvf.fp(s, x) @ p.increment(s, t) - r
        assert np.all(lhs == 0.0)

    def test_empty_probes_rejected(self):
        grid = rp.TimeGrid(1.0, 2)
        p = brownian_lift(4, n=2)
        cvf = vf.from_callables(
            grid, 1, 1, (1, 1),
            lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1)),
            lambda t, x: np.zeros(np.asarray(x).shape[:-1] + (1, 1, 1)),
        )
        with pytest.raises(rp.InputError):
            vf.cvf_norm(cvf, p, ct.IndexPair(), np.zeros((0, 1)))


class TestSpotCheck:
    def test_registry_models_bounded_on_probes(self):
        probes = np.linspace(-3, 3, 9)[:, None]
        cloud = substream(10, "vf", "spot").normal(size=(8, 1))
        for name in ("lq", "no-interaction", "tanh-interaction"):
            worst = models.make_model(name).spot_check(probes, cloud)
            assert np.isfinite(worst) and worst < 10.0


class TestGubinelliCorrection:
    def test_matches_hand_formula(self):
        grid = rp.TimeGrid(1.0, 4)
        flow = random_flow(9, grid)
        model = models.make_model("tanh-interaction")
        cvf = vf.build_cvf_from_flow(model, flow)
        corr = vf.gubinelli_correction(cvf)
        x = np.array([[0.2], [1.1]])
        n = 2
        expect = (
            np.einsum("...abc,...cj->...abj", cvf.gradient(n, x), cvf.f(n, x))
            + cvf.fp(n, x)
        )
        np.testing.assert_allclose(corr(n, x), expect, rtol=1e-12)
