import itertools

import numpy as np
import pytest

from roughmfg import measureflow as mf
from roughmfg import mfg
from roughmfg import models
from roughmfg import roughpath as rp
from roughmfg import rsde
from roughmfg.rng import substream


def brownian_lift(seed, n=16, horizon=1.0):
    grid = rp.TimeGrid(horizon, n)
    dw = substream(seed, "mg", "bm").normal(0.0, np.sqrt(grid.dt), size=(n, 1))
    return rp.ito_lift(dw, grid)


def still_flow(grid, particles=16, seed=0):
    cloud = substream(seed, "mg", "cloud").normal(size=(particles, 1))
    return mf.constant_flow(grid, cloud, k=1)


class TestRelaxedPolicy:
    def test_row_sums_validated(self):
        table = np.full((4, 3, 2), 0.4)
        with pytest.raises(rp.InputError):
            mfg.RelaxedPolicy(np.array([[0.0], [1.0]]), lattice=np.arange(3.0), table=table)

    def test_negative_probabilities_rejected(self):
        table = np.zeros((2, 2, 2))
        table[:, :, 0] = 1.5
        table[:, :, 1] = -0.5
        with pytest.raises(rp.InputError):
            mfg.RelaxedPolicy(np.array([[0.0], [1.0]]), lattice=np.arange(2.0), table=table)

    def test_nearest_node_lookup(self):
        lattice = np.array([-1.0, 0.0, 1.0])
        table = np.zeros((1, 3, 2))
        table[0, :, 0] = [1.0, 0.0, 1.0]
        table[0, :, 1] = [0.0, 1.0, 0.0]
        pol = mfg.RelaxedPolicy(np.array([[0.0], [1.0]]), lattice=lattice, table=table)
        x = np.array([[-0.8], [0.1], [2.0]])
        np.testing.assert_array_equal(
            pol.mixture(0, x), [[1, 0], [0, 1], [1, 0]]
        )


class TestCost:
    def setup_inputs(self, seed=0, n=64):
        model = models.make_model("lq", mean_coupling=0.0)
        p = brownian_lift(seed, n=n)
        flow = still_flow(p.grid, seed=seed + 1)
        return model, p, flow

    def test_zero_costs(self):
        model, p, flow = self.setup_inputs()
        model.f = lambda t, x, mu, u: np.zeros(np.asarray(x).shape[:-1])
        model.g = lambda x, mu: np.zeros(np.asarray(x).shape[:-1])
        policy = mfg.RelaxedPolicy.constant(model.actions, 64, action_index=1)
        est = mfg.cost(model, flow, p, policy, 32, 0)
        assert est.value == 0.0 and est.error_bar == 0.0

    def test_unit_running_cost_gives_horizon(self):
        # T = 1, N = 64: the left sum of dt is exact in binary
        model, p, flow = self.setup_inputs()
        model.f = lambda t, x, mu, u: np.ones(np.asarray(x).shape[:-1])
        model.g = lambda x, mu: np.zeros(np.asarray(x).shape[:-1])
        policy = mfg.RelaxedPolicy.constant(model.actions, 64, action_index=1)
        est = mfg.cost(model, flow, p, policy, 16, 0)
        assert est.value == 1.0

    def test_pure_action_cost_zero_at_null_action(self):
        model, p, flow = self.setup_inputs()
        model.f = lambda t, x, mu, u: np.full(
            np.asarray(x).shape[:-1], float(np.asarray(u).reshape(-1)[0] ** 2)
        )
        model.g = lambda x, mu: np.zeros(np.asarray(x).shape[:-1])
        policy = mfg.RelaxedPolicy.constant(model.actions, 64, action_index=1)
        est = mfg.cost(model, flow, p, policy, 16, 0)
        assert est.value == 0.0


class TestBestResponse:
    def test_drift_free_cost_minimizer(self):
        # b does not depend on u and f = u^2 + ...: mass sits on u = 0
        model = models.make_model("lq", mean_coupling=0.0)
        model.b = lambda t, x, mu, u: np.zeros_like(np.asarray(x, dtype=float))
        p = brownian_lift(3, n=8)
        flow = still_flow(p.grid, seed=4)
        br = mfg.best_response(
            model, flow, p, mfg.DpSettings(-3.0, 3.0, 31), rsde.InitialLaw(), 0
        )
        null_idx = int(np.abs(model.actions[:, 0]).argmin())
        assert np.all(br.policy.table[:, :, null_idx] == 1.0)

    def toy_inputs(self):
        # integer lattice, unit steps: transitions stay exactly on nodes
        model = models.make_model(
            "lq", sigma=0.0, sigma0=None, mean_coupling=0.0,
            cost_u=0.0, cost_x=0.0, cost_g=1.0,
        )
        grid = rp.TimeGrid(3.0, 3)
        p = rp.smooth_lift(np.zeros(4), grid)
        flow = still_flow(grid, seed=5)
        return model, p, flow

    def test_toy_against_exhaustive_enumeration(self):
        model, p, flow = self.toy_inputs()
        lo, hi, count = -5.0, 5.0, 11
        br = mfg.best_response(
            model, flow, p,
            mfg.DpSettings(lo, hi, count, escape_tolerance=0.2),
            rsde.InitialLaw(), 0,
        )
        lattice = br.lattice
        actions = model.actions[:, 0]
        # oracle: minimize terminal x^2 over all open-loop action sequences,
        # scanning actions in index order so ties resolve like the sweep
        for i, x0 in enumerate(lattice):
            if abs(x0) > 2.0:
                continue  # all three-step paths from here stay on the lattice
            best_val, best_first = np.inf, None
            for seq in itertools.product(range(3), repeat=3):
                x = x0
                for a in seq:
                    x = x + actions[a]
                val = x**2
                if val < best_val - 1e-12:
                    best_val, best_first = val, seq[0]
            assert br.values[0, i] == pytest.approx(best_val, abs=1e-10)
            chosen = br.policy.table[0, i].argmax()
            assert chosen == best_first
        # far from zero the drive is forced toward the origin
        for i, x0 in enumerate(lattice):
            if abs(x0) >= 3.0:
                chosen = br.policy.table[0, i].argmax()
                assert np.sign(actions[chosen]) == -np.sign(x0)

    def test_small_noise_close_to_deterministic_limit(self):
        # small sigma perturbs values by O(sigma^2) and can only re-break
        # exact ties; where the drive is forced it matches the sigma = 0 case
        model, p, flow = self.toy_inputs()
        model_noisy = models.make_model(
            "lq", sigma=0.01, sigma0=None, mean_coupling=0.0,
            cost_u=0.0, cost_x=0.0, cost_g=1.0,
        )
        settings = mfg.DpSettings(-5.0, 5.0, 11, escape_tolerance=0.2)
        a = mfg.best_response(model, flow, p, settings, rsde.InitialLaw(), 0)
        b = mfg.best_response(model_noisy, flow, p, settings, rsde.InitialLaw(), 0)
        assert np.abs(a.values - b.values).max() <= 0.05
        forced = np.abs(a.lattice) >= 3.0
        np.testing.assert_array_equal(
            a.policy.table[0, forced], b.policy.table[0, forced]
        )

    def test_static_state_closed_form_value(self):
        # b = sigma = 0, no rough term, g = 0: V(t, x) = f(x, u*) (T - t)
        model = models.make_model(
            "lq", sigma=0.0, sigma0=None, mean_coupling=0.0, cost_g=0.0,
            cost_u=1.0, cost_x=0.7,
        )
        model.b = lambda t, x, mu, u: np.zeros_like(np.asarray(x, dtype=float))
        grid = rp.TimeGrid(2.0, 16)
        p = rp.smooth_lift(np.zeros(17), grid)
        flow = still_flow(grid, seed=6)
        br = mfg.best_response(
            model, flow, p, mfg.DpSettings(-2.0, 2.0, 21), rsde.InitialLaw(), 0
        )
        lattice = br.lattice
        for n in (0, 5, 12):
            expect = 0.7 * lattice**2 * (2.0 - grid.nodes[n])
            np.testing.assert_allclose(br.values[n], expect, atol=1e-8)

    def test_affine_cost_invariance(self):
        model = models.make_model("tanh-interaction")
        p = brownian_lift(7, n=12)
        flow = still_flow(p.grid, seed=8)
        base = mfg.best_response(
            model, flow, p, mfg.DpSettings(-3.0, 3.0, 41), rsde.InitialLaw(), 0
        )
        scaled = models.make_model("tanh-interaction")
        a, c1, c2 = 2.5, 0.7, -0.3
        f0, g0 = model.f, model.g
        scaled.f = lambda t, x, mu, u: a * f0(t, x, mu, u) + c1
        scaled.g = lambda x, mu: a * g0(x, mu) + c2
        other = mfg.best_response(
            scaled, flow, p, mfg.DpSettings(-3.0, 3.0, 41), rsde.InitialLaw(), 0
        )
        np.testing.assert_array_equal(base.policy.table, other.policy.table)

    def test_lattice_escape_strict(self):
        model = models.make_model("lq", mean_coupling=0.0)
        p = brownian_lift(9, n=8)
        flow = still_flow(p.grid, seed=9)
        tiny = mfg.DpSettings(-0.05, 0.05, 5, strict=True)
        with pytest.raises(mfg.LatticeEscapeError):
            mfg.best_response(model, flow, p, tiny, rsde.InitialLaw(), 0)


class TestExploitability:
    def test_best_response_self_gap_zero(self):
        model = models.make_model("lq", mean_coupling=0.0)
        p = brownian_lift(10, n=16)
        flow = still_flow(p.grid, seed=11)
        settings = mfg.DpSettings(-4.0, 4.0, 41)
        br = mfg.best_response(model, flow, p, settings, rsde.InitialLaw(), 5)
        rep = mfg.exploitability(model, flow, p, br.policy, 64, 5, settings)
        assert rep.raw == 0.0  # identical policy, shared draws
        assert rep.value <= 2.0 * rep.error_bar

    def test_zero_cost_model_exact_zero(self):
        model = models.make_model("lq", mean_coupling=0.0)
        model.f = lambda t, x, mu, u: np.zeros(np.asarray(x).shape[:-1])
        model.g = lambda x, mu: np.zeros(np.asarray(x).shape[:-1])
        p = brownian_lift(12, n=8)
        flow = still_flow(p.grid, seed=13)
        pol = mfg.RelaxedPolicy.constant(model.actions, 8, action_index=0)
        rep = mfg.exploitability(
            model, flow, p, pol, 32, 1,
            mfg.DpSettings(-3.0, 3.0, 21, escape_tolerance=0.2),
        )
        assert rep.raw == 0.0 and rep.value == 0.0

    def test_second_best_swap_detected(self):
        # toy with g = x^2: swapping every argmin to the runner-up must cost
        model = models.make_model(
            "lq", sigma=0.05, sigma0=None, mean_coupling=0.0,
            cost_u=0.0, cost_x=0.0, cost_g=1.0,
        )
        grid = rp.TimeGrid(3.0, 3)
        p = rp.smooth_lift(np.zeros(4), grid)
        flow = still_flow(grid, seed=14)
        settings = mfg.DpSettings(-6.0, 6.0, 25, escape_tolerance=0.2)
        br = mfg.best_response(model, flow, p, settings, rsde.InitialLaw(), 2)
        table = br.policy.table.copy()
        swapped = np.zeros_like(table)
        for n in range(table.shape[0]):
            for i in range(table.shape[1]):
                order = table[n, i].argmax()
                runner = 0 if order != 0 else 1
                swapped[n, i, runner] = 1.0
        bad = mfg.RelaxedPolicy(model.actions, lattice=br.lattice, table=swapped)
        rep = mfg.exploitability(
            model, flow, p, bad, 512, 2, settings,
            init=rsde.InitialLaw("normal", 0.0, 2.0),
        )
        assert rep.raw > 2.0 * rep.error_bar


class TestFixedPoint:
    def test_measure_independent_converges_first_sweep(self):
        model = models.make_model("no-interaction")
        p = brownian_lift(15, n=16)
        res = mfg.fixed_point(
            model, p, rsde.InitialLaw(), particles=128, seed=3,
            max_iters=5, tol_w2=1e-9, tol_exp=1e-2,
            settings=mfg.DpSettings(-4.0, 4.0, 41),
        )
        assert res.report.converged
        assert res.report.converged_at == 1
        assert res.report.iterations[0].w2_update == 0.0
        assert res.report.iterations[0].exploitability == 0.0

    def test_weak_coupling_contracts(self):
        model = models.make_model("lq")  # mean coupling 0.1
        p = brownian_lift(16, n=32)
        res = mfg.fixed_point(
            model, p, rsde.InitialLaw(), particles=256, seed=4,
            max_iters=4, tol_w2=0.0, tol_exp=0.0,
            settings=mfg.DpSettings(-4.0, 4.0, 41),
        )
        d = [it.w2_update for it in res.report.iterations]
        nonzero = [v for v in d if v > 1e-14]
        for a, b in zip(nonzero, nonzero[1:]):
            assert b < 0.5 * a

    def test_nonconvergence_reported_cleanly(self):
        model = models.make_model("lq", mean_coupling=5.0)
        p = brownian_lift(17, n=16)
        res = mfg.fixed_point(
            model, p, rsde.InitialLaw(), particles=64, seed=5,
            max_iters=2, tol_w2=1e-12, tol_exp=1e-12,
            settings=mfg.DpSettings(-8.0, 8.0, 41),
        )
        assert not res.report.converged
        assert res.report.converged_at is None
        assert len(res.report.iterations) == 2

    def test_final_flow_is_consistent_with_solution(self):
        model = models.make_model("lq")
        p = brownian_lift(18, n=16)
        res = mfg.fixed_point(
            model, p, rsde.InitialLaw(), particles=64, seed=6,
            max_iters=3, tol_w2=1e-3, tol_exp=5e-2,
            settings=mfg.DpSettings(-4.0, 4.0, 41),
        )
        np.testing.assert_array_equal(res.flow.Y, res.solution.ensemble.Z)

    def test_domain_certificates_recorded(self):
        model = models.make_model("lq")
        p = brownian_lift(19, n=16)
        res = mfg.fixed_point(
            model, p, rsde.InitialLaw(), particles=64, seed=7,
            max_iters=2, tol_w2=0.0, tol_exp=0.0,
            settings=mfg.DpSettings(-4.0, 4.0, 41),
            domain_bound=50.0, domain_epsilon=0.5, domain_windows=4,
        )
        assert all(it.domain_member for it in res.report.iterations)
        assert all(np.isfinite(it.domain_worst) for it in res.report.iterations)

    def test_undamped_equals_lambda_one(self):
        model = models.make_model("lq")
        p = brownian_lift(20, n=8)
        kw = dict(
            particles=32, seed=8, max_iters=2, tol_w2=0.0, tol_exp=0.0,
            settings=mfg.DpSettings(-5.0, 5.0, 26),
        )
        a = mfg.fixed_point(model, p, rsde.InitialLaw(), lambda_mix=1.0, **kw)
        b = mfg.fixed_point(model, p, rsde.InitialLaw(), lambda_mix=1.0, **kw)
        np.testing.assert_array_equal(a.flow.Y, b.flow.Y)
        for x, y in zip(a.report.iterations, b.report.iterations):
            assert x.w2_update == y.w2_update
