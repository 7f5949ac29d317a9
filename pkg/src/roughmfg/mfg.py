"""Best response, cost, exploitability, and the equilibrium fixed point.

The best response against a frozen flow and frozen lift is a classical
finite-horizon control problem: backward induction on a state lattice with
Gauss-Hermite quadrature for the idiosyncratic noise, the rough increments
entering as deterministic per-step forcing (first and second level).  The
fixed point is searched by damped iteration of

    flow  ->  best response  ->  solved ensemble  ->  its empirical flow

with three certificates per sweep: the sup-over-time W2 update distance, a
Monte Carlo exploitability bound, and the windowed-norm domain membership.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import controlled as ct
from . import measureflow as mf
from . import rsde
from . import vectorfield as vf
from .roughpath import InputError, RoughPath

FEEDBACK = "feedback"
OPEN_LOOP_CAUSAL = "open_loop_causal"


class LatticeEscapeError(RuntimeError):
    pass


class RelaxedPolicy:
    """Probability mixtures over a finite action set.

    Feedback mode stores a table pi(t_n, lattice node) -> K-vector; lookup at
    an off-lattice state uses the nearest node, which keeps the mixture an
    exact probability vector.  Open-loop causal mode wraps a sampler that is
    handed only the realized idiosyncratic prefix plus an exogenous stream.
    """

    def __init__(self, actions, mode=FEEDBACK, lattice=None, table=None,
                 sampler=None):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=float).T).T
        if self.actions.ndim == 1:
            self.actions = self.actions[:, None]
        self.mode = mode
        self.lattice = None if lattice is None else np.asarray(lattice, dtype=float)
        self.table = None if table is None else np.asarray(table, dtype=float)
        self.sampler = sampler
        if mode == FEEDBACK:
            if self.table is None or self.lattice is None:
                raise InputError("feedback policy needs a lattice and a table")
            if self.table.ndim != 3 or self.table.shape[2] != self.n_actions:
                raise InputError(f"bad policy table shape {self.table.shape}")
            if self.table.min() < 0:
                raise InputError("negative policy probabilities")
            rowsum = self.table.sum(axis=2)
            if np.abs(rowsum - 1.0).max() > 1e-12:
                raise InputError("policy rows must sum to one within 1e-12")
        elif mode == OPEN_LOOP_CAUSAL:
            if sampler is None:
                raise InputError("causal policy needs a sampler")
        else:
            raise InputError(f"unknown policy mode {mode!r}")

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    def _node_index(self, x) -> np.ndarray:
        x = np.asarray(x)[..., 0]
        return np.abs(x[..., None] - self.lattice[None, :]).argmin(axis=-1)

    def mixture(self, n: int, x: np.ndarray) -> np.ndarray:
        """Action mixture at step n for a batch of states, shape (P, K)."""
        if self.mode != FEEDBACK:
            raise InputError("mixture lookup needs a feedback policy")
        n = min(n, self.table.shape[0] - 1)
        return self.table[n, self._node_index(x)]

    def sample_causal(self, n: int, w_view, rng) -> np.ndarray:
        if self.mode != OPEN_LOOP_CAUSAL:
            raise InputError("causal sampling needs an open-loop causal policy")
        return np.asarray(self.sampler(n, w_view, rng), dtype=int)

    @classmethod
    def constant(cls, actions, steps, action_index=0, lattice=None):
        """Feedback policy putting mass one on a single action everywhere."""
        actions = np.asarray(actions, dtype=float)
        k = actions.shape[0]
        lattice = np.array([0.0]) if lattice is None else lattice
        table = np.zeros((steps, len(lattice), k))
        table[:, :, action_index] = 1.0
        return cls(actions, FEEDBACK, lattice, table)

    @classmethod
    def causal(cls, actions, sampler):
        return cls(actions, OPEN_LOOP_CAUSAL, sampler=sampler)


@dataclass
class CostEstimate:
    value: float
    error_bar: float
    particles: int


def cost(coeffs, flow, p: RoughPath, policy, particles: int, seed: int,
         init: rsde.InitialLaw | None = None,
         solution: rsde.RsdeSolution | None = None) -> CostEstimate:
    """Monte Carlo cost: running mixture cost plus terminal cost, with the
    sample standard error of the particle mean."""
    init = init or rsde.InitialLaw()
    sol = solution or rsde.solve(coeffs, flow, p, policy, init, particles, seed)
    grid = sol.grid
    x = sol.ensemble.Z
    totals = np.zeros(x.shape[0])
    for n in range(grid.steps):
        weights = policy.mixture(n, x[:, n])
        cloud = flow.cloud(n)
        for a in range(coeffs.n_actions):
            w = weights[:, a]
            if np.any(w):
                totals += w * coeffs.f(
                    grid.nodes[n], x[:, n], cloud, coeffs.actions[a]
                ) * grid.dt
    totals += coeffs.g(x[:, grid.steps], flow.cloud(grid.steps))
    n_p = len(totals)
    return CostEstimate(float(totals.mean()),
                        float(totals.std(ddof=1) / math.sqrt(n_p)), n_p)


@dataclass
class DpSettings:
    lattice_lo: float | None = None
    lattice_hi: float | None = None
    lattice_nodes: int = 101
    gh_order: int = 5
    strict: bool = False
    escape_tolerance: float = 0.05
    pilot_particles: int = 128


@dataclass
class BestResponse:
    policy: RelaxedPolicy
    values: np.ndarray  # (N+1, nodes)
    lattice: np.ndarray
    escape_mass: float
    warned: bool


def _auto_bounds(coeffs, flow, p, init, seed, settings) -> tuple:
    """Pilot run under the uniform mixture; bounds cover the initial law and
    the pilot range by six standard deviations."""
    k = coeffs.n_actions
    lattice = np.array([0.0])
    table = np.full((p.grid.steps, 1, k), 1.0 / k)
    pilot_policy = RelaxedPolicy(coeffs.actions, FEEDBACK, lattice, table)
    sol = rsde.solve(coeffs, flow, p, pilot_policy, init,
                     settings.pilot_particles, seed)
    x = sol.ensemble.Z[..., 0]
    sd = max(float(x.std(axis=0).max()), 1e-3)
    lo = min(float(x.mean(axis=0).min()), init.mean) - 6.0 * sd
    hi = max(float(x.mean(axis=0).max()), init.mean) + 6.0 * sd
    return lo, hi


def best_response(coeffs, flow, p: RoughPath, settings: DpSettings | None = None,
                  init: rsde.InitialLaw | None = None, seed: int = 0) -> BestResponse:
    """Backward induction on the lattice against the frozen flow and lift.

    Pure argmin policies: pointwise minimization over a finite action set
    always admits a pure minimizer; ties break to the lowest action index.
    """
    if coeffs.d != 1 or coeffs.l != 1:
        raise InputError("the lattice solver handles scalar state and noise")
    settings = settings or DpSettings()
    init = init or rsde.InitialLaw()
    if settings.lattice_lo is None or settings.lattice_hi is None:
        lo, hi = _auto_bounds(coeffs, flow, p, init, seed, settings)
    else:
        lo, hi = settings.lattice_lo, settings.lattice_hi
    lattice = np.linspace(lo, hi, settings.lattice_nodes)
    grid = p.grid
    nodes_t = grid.nodes
    dt = grid.dt

    cvf = correction = None
    if coeffs.sigma0 is not None:
        cvf = vf.build_cvf_from_flow(coeffs, flow)
        correction = vf.gubinelli_correction(cvf)
        db = np.diff(p.first_level[:, 0])
        bb = p.step_second()[:, 0, 0]

    gh_x, gh_w = np.polynomial.hermite_e.hermegauss(settings.gh_order)
    gh_w = gh_w / gh_w.sum()

    n_lat = len(lattice)
    values = np.empty((grid.steps + 1, n_lat))
    values[grid.steps] = coeffs.g(lattice[:, None], flow.cloud(grid.steps))
    table = np.zeros((grid.steps, n_lat, coeffs.n_actions))
    escaped = 0.0
    total_mass = 0.0
    xcol = lattice[:, None]
    for n in range(grid.steps - 1, -1, -1):
        cloud = flow.cloud(n)
        t = nodes_t[n]
        sig = coeffs.sigma(t, xcol, cloud)[:, 0, 0]
        forcing = np.zeros(n_lat)
        if cvf is not None:
            forcing = cvf.f(n, xcol)[:, 0, 0] * db[n]
            forcing += correction(n, xcol)[:, 0, 0, 0] * bb[n]
        q = np.empty((coeffs.n_actions, n_lat))
        for a in range(coeffs.n_actions):
            drift = coeffs.b(t, xcol, cloud, coeffs.actions[a])[:, 0]
            base = lattice + drift * dt + forcing
            nxt = base[:, None] + np.sqrt(dt) * sig[:, None] * gh_x[None, :]
            escaped += float((((nxt < lo) | (nxt > hi)) @ gh_w).sum())
            total_mass += n_lat
            ev = np.interp(nxt, lattice, values[n + 1]) @ gh_w
            q[a] = coeffs.f(t, xcol, cloud, coeffs.actions[a]) * dt + ev
        best = q.argmin(axis=0)
        values[n] = q[best, np.arange(n_lat)]
        table[n, np.arange(n_lat), best] = 1.0

    escape_rate = escaped / max(total_mass, 1.0)
    warned = escape_rate > settings.escape_tolerance
    if warned:
        msg = (
            f"quadrature mass escaped the lattice at rate {escape_rate:.2%}"
            f" (tolerance {settings.escape_tolerance:.0%}); widen the bounds"
        )
        if settings.strict:
            raise LatticeEscapeError(msg)
        warnings.warn(msg)
    policy = RelaxedPolicy(coeffs.actions, FEEDBACK, lattice, table)
    return BestResponse(policy, values, lattice, escape_rate, warned)


@dataclass
class ExploitabilityReport:
    value: float        # clipped at zero for reporting
    raw: float
    error_bar: float
    policy_cost: CostEstimate
    response_cost: CostEstimate


def exploitability(coeffs, flow, p: RoughPath, policy, particles: int,
                   seed: int, settings: DpSettings | None = None,
                   init: rsde.InitialLaw | None = None) -> ExploitabilityReport:
    """Cost of the policy minus cost of the best response against the same
    frozen flow, on common random numbers."""
    init = init or rsde.InitialLaw()
    c_pol = cost(coeffs, flow, p, policy, particles, seed, init)
    br = best_response(coeffs, flow, p, settings, init, seed)
    c_br = cost(coeffs, flow, p, br.policy, particles, seed, init)
    raw = c_pol.value - c_br.value
    err = math.hypot(c_pol.error_bar, c_br.error_bar)
    return ExploitabilityReport(max(raw, 0.0), raw, err, c_pol, c_br)


@dataclass
class IterationRecord:
    index: int
    w2_update: float
    exploitability: float
    exploitability_raw: float
    exploitability_err: float
    domain_member: bool
    domain_worst: float
    offending_window: tuple | None


@dataclass
class EquilibriumReport:
    iterations: list
    converged: bool
    converged_at: int | None
    tol_w2: float
    tol_exp: float
    seed: int

    @property
    def update_distances(self):
        return [it.w2_update for it in self.iterations]

    @property
    def final_exploitability(self):
        return self.iterations[-1].exploitability if self.iterations else math.nan


@dataclass
class FixedPointResult:
    report: EquilibriumReport
    flow: mf.MeasureFlow
    policy: RelaxedPolicy
    solution: rsde.RsdeSolution
    values: np.ndarray


def _phi_step(coeffs, flow, p, init, particles, seed, settings):
    """One application of the equilibrium map: best response then simulate."""
    br = best_response(coeffs, flow, p, settings, init, seed)
    sol = rsde.solve(coeffs, flow, p, br.policy, init, particles, seed)
    return br, sol, mf.from_solution(sol)


def fixed_point(
    coeffs,
    p: RoughPath,
    init: rsde.InitialLaw,
    particles: int,
    seed: int,
    lambda_mix: float = 1.0,
    max_iters: int = 20,
    tol_w2: float = 1e-3,
    tol_exp: float = 1e-2,
    settings: DpSettings | None = None,
    idx: ct.IndexPair | None = None,
    m: int = 4,
    domain_bound: float | None = None,
    domain_epsilon: float | None = None,
    domain_inner: int = 2,
    domain_windows: int = 8,
    domain_anchor_stride: int = 4,
    exploit_particles: int | None = None,
) -> FixedPointResult:
    """Damped iteration of the equilibrium map with per-sweep certificates.

    The starting flow is the image of a frozen initial cloud under the map,
    so measure-independent models converge at the first sweep with bitwise
    equal flows.  Convergence requires both the W2 update below tol_w2 and
    the exploitability below tol_exp; non-convergence is reported, not
    raised.  The returned flow is always the undamped image of the last
    sweep, so its marginals equal the final solution's marginals exactly.
    """
    settings = settings or DpSettings()
    idx = idx or ct.IndexPair()
    exploit_particles = exploit_particles or particles
    grid = p.grid
    boot = mf.constant_flow(
        grid, rsde.draw_initial(seed, init, particles, coeffs.d), coeffs.k
    )
    if settings.lattice_lo is None or settings.lattice_hi is None:
        lo, hi = _auto_bounds(coeffs, boot, p, init, seed, settings)
        settings = replace(settings, lattice_lo=lo, lattice_hi=hi)
    _, _, flow_prev = _phi_step(coeffs, boot, p, init, particles, seed, settings)

    records = []
    converged = False
    converged_at = None
    br = sol = flow_cand = None
    for it in range(1, max_iters + 1):
        br, sol, flow_cand = _phi_step(
            coeffs, flow_prev, p, init, particles, seed, settings
        )
        dist = mf.flow_distance(flow_cand, flow_prev)
        exp_rep = exploitability(
            coeffs, flow_cand, p, br.policy, exploit_particles, seed, settings, init
        )
        if domain_bound is not None:
            eps = domain_epsilon if domain_epsilon is not None else grid.horizon / 4
            cert = mf.check_domain(
                flow_cand, p, idx, m, domain_bound, eps,
                resampler=sol.make_resampler("state"),
                inner_samples=domain_inner, max_windows=domain_windows,
                anchor_stride=domain_anchor_stride,
            )
            member, worst, offend = cert.member, cert.worst, cert.offending_window
            if not member:
                warnings.warn(
                    f"iteration {it}: flow left the norm domain"
                    f" (worst window {offend}, norm {worst:.3g})"
                )
        else:
            member, worst, offend = True, math.nan, None
        records.append(
            IterationRecord(it, dist, exp_rep.value, exp_rep.raw,
                            exp_rep.error_bar, member, worst, offend)
        )
        if dist < tol_w2 and exp_rep.value < tol_exp:
            converged = True
            converged_at = it
            break
        flow_prev = mf.mix(flow_cand, flow_prev, lambda_mix, seed=seed + it)

    report = EquilibriumReport(records, converged, converged_at, tol_w2,
                               tol_exp, seed)
    return FixedPointResult(report, flow_cand, br.policy, sol, br.values)
