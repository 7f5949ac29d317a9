"""Bridge between the fixed-lift simulation and the two-Brownian model.

One direction samples common-noise paths, enhances each with left-point
iterated sums, solves the fixed-lift dynamics per sample, and aggregates the
conditional statistics.  The other simulates the state directly with two
independent Brownian drivers (idiosyncratic per particle, common per
sample).  Both consume the same common increments per sample, so their
conditional laws are comparable sample by sample; agreement is judged by
moment gaps and an energy-distance permutation test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import measureflow as mf
from . import rsde
from .rng import derive_seed, substream
from .roughpath import InputError, RoughPath, TimeGrid, ito_lift

FROZEN_FLOW = "frozen-flow"
PER_SAMPLE_FIXEDPOINT = "per-sample-fixedpoint"


def common_increments(grid: TimeGrid, k: int, seed, sample: int) -> np.ndarray:
    """Common-noise increments for one sample, shape (N, k); both pipelines
    key off the same stream so their conditional laws share the driver."""
    rng = substream(seed, "randomize", "B0", sample)
    return rng.normal(0.0, math.sqrt(grid.dt), size=(grid.steps, k))


def sample_lift(grid: TimeGrid, k: int, seed, sample: int = 0,
                inner_refine: int = 1) -> RoughPath:
    """Draw Brownian increments and enhance them with left-point sums; every
    second-level entry consumes only increments inside its own window.

    inner_refine > 1 (a power of two) computes the second level from a
    bridge-refined copy of the same path and restricts back to the solver
    grid: the first level stays coupled to the plain draw up to round-off,
    so the difference isolates the second-level discretization bias.
    """
    dw = common_increments(grid, k, seed, sample)
    if inner_refine == 1:
        return ito_lift(dw, grid)
    if inner_refine < 1 or inner_refine & (inner_refine - 1):
        raise InputError(f"inner refinement must be a power of two, got {inner_refine}")
    fine = dw[None]
    dt = grid.dt
    level = 0
    while 2**level < inner_refine:
        fine = rsde.bridge_refine(fine, dt, seed, "lift", sample, level)
        dt /= 2.0
        level += 1
    fine_grid = TimeGrid(grid.horizon, grid.steps * inner_refine)
    return ito_lift(fine[0], fine_grid).restrict(inner_refine)


@dataclass
class JointSummary:
    """Two-driver simulation output: per-sample conditional moments of the
    terminal state plus the pooled ones."""

    cond_means: np.ndarray        # (S, d)
    cond_second: np.ndarray       # (S, d, d) raw second moments
    pooled_mean: np.ndarray
    pooled_second: np.ndarray
    terminal: np.ndarray | None   # (S, P, d) when kept
    mode: str

    @property
    def samples(self) -> int:
        return self.cond_means.shape[0]


def joint_simulate(coeffs, policy, init: rsde.InitialLaw, grid: TimeGrid,
                   particles: int, samples: int, seed, flow=None,
                   keep_terminal: bool = True) -> JointSummary:
    """Euler recursion with two independent Brownian drivers.

    The interaction measure is the within-sample empirical cloud (the
    conditional particle system) unless an external flow is supplied.
    """
    d, l, k = coeffs.d, coeffs.l, coeffs.k
    nodes = grid.nodes
    x = rsde.draw_initial(seed, init, samples * particles, d).reshape(
        samples, particles, d
    )
    dw = substream(seed, "randomize", "joint-W").normal(
        0.0, math.sqrt(grid.dt), size=(samples, particles, grid.steps, l)
    )
    db0 = np.stack(
        [common_increments(grid, k, seed, s) for s in range(samples)]
    )  # (S, N, k)
    external = flow is not None
    for n in range(grid.steps):
        t = nodes[n]
        dtn = nodes[n + 1] - nodes[n]
        for s in range(samples):
            xs = x[s]
            cloud = flow.cloud(n) if external else xs
            weights = policy.mixture(n, xs)
            drift = np.zeros_like(xs)
            for a in range(coeffs.n_actions):
                w = weights[:, a]
                if np.any(w):
                    drift += w[:, None] * coeffs.b(t, xs, cloud, coeffs.actions[a])
            nxt = xs + drift * dtn
            nxt = nxt + np.einsum("pdl,pl->pd", coeffs.sigma(t, xs, cloud), dw[s, :, n])
            if coeffs.sigma0 is not None:
                nxt = nxt + coeffs.sigma0(t, xs, cloud) @ db0[s, n]
            worst = float(np.abs(nxt).max())
            if worst > rsde.BLOWUP_THRESHOLD:
                raise rsde.DivergedError(n, worst)
            x[s] = nxt
    cond_means = x.mean(axis=1)
    cond_second = np.einsum("spa,spb->sab", x, x) / particles
    return JointSummary(
        cond_means=cond_means,
        cond_second=cond_second,
        pooled_mean=cond_means.mean(axis=0),
        pooled_second=cond_second.mean(axis=0),
        terminal=x if keep_terminal else None,
        mode="external" if external else "conditional",
    )


def pathwise_terminals(coeffs, policy, init: rsde.InitialLaw, grid: TimeGrid,
                       particles: int, samples: int, seed, mode: str = FROZEN_FLOW,
                       flow=None, w_salt: int = 0, consistency_sweeps: int = 3,
                       inner_refine: int = 1):
    """Terminal states of the per-sample fixed-lift solves, shape (S, P, d).

    frozen-flow keeps the supplied (or initial-cloud) flow for every sample;
    per-sample-fixedpoint iterates the consistency map flow -> law(solution)
    at the given policy a few sweeps per sample before the recorded solve.
    """
    if mode not in (FROZEN_FLOW, PER_SAMPLE_FIXEDPOINT):
        raise InputError(f"unknown comparison mode {mode!r}")
    base_flow = flow
    if base_flow is None:
        cloud = rsde.draw_initial(seed, init, particles, coeffs.d)
        base_flow = mf.constant_flow(grid, cloud, coeffs.k)
    out = np.empty((samples, particles, coeffs.d))
    for s in range(samples):
        lift = sample_lift(grid, coeffs.k, seed, s, inner_refine)
        sample_seed = derive_seed(seed, "randomize", "pathwise", s, w_salt)
        flow_s = base_flow
        if mode == PER_SAMPLE_FIXEDPOINT:
            inner = max(32, particles // 4)
            for sweep in range(consistency_sweeps):
                sol = rsde.solve(
                    coeffs, flow_s, lift, policy, init, inner,
                    derive_seed(sample_seed, "inner", sweep),
                )
                flow_s = mf.from_solution(sol)
        sol = rsde.solve(coeffs, flow_s, lift, policy, init, particles, sample_seed)
        out[s] = sol.ensemble.Z[:, grid.steps]
    return out


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Two-sample energy statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'|."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    dxy = cdist(x, y).mean()
    dxx = cdist(x, x).mean()
    dyy = cdist(y, y).mean()
    return 2.0 * dxy - dxx - dyy


def energy_permutation_test(x: np.ndarray, y: np.ndarray, n_perm: int = 500,
                            seed: int = 0) -> tuple:
    """Permutation p-value of the energy statistic (label shuffles)."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    n = x.shape[0]
    pooled = np.vstack([x, y])
    dist = cdist(pooled, pooled)
    total = pooled.shape[0]

    def stat(idx_x):
        mask = np.zeros(total, dtype=bool)
        mask[idx_x] = True
        dxy = dist[mask][:, ~mask].mean()
        dxx = dist[mask][:, mask].mean()
        dyy = dist[~mask][:, ~mask].mean()
        return 2.0 * dxy - dxx - dyy

    observed = stat(np.arange(n))
    rng = substream(seed, "randomize", "energy-perm")
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(total)
        if stat(perm[:n]) >= observed:
            hits += 1
    return observed, (hits + 1.0) / (n_perm + 1.0)


@dataclass
class SampleVerdict:
    index: int
    pathwise_mean: np.ndarray
    joint_mean: np.ndarray
    combined_se: float
    within: bool


@dataclass
class BridgeReport:
    mode: str
    samples: int
    particles: int
    per_sample: list
    sample_pass_rate: float
    pooled_mean_gap: float
    pooled_mean_se: float
    mean_ok: bool
    pooled_second_gap: float
    pooled_second_se: float
    second_ok: bool
    energy_stat: float
    energy_p: float
    energy_ok: bool
    level: float

    @property
    def all_ok(self) -> bool:
        return self.mean_ok and self.second_ok and self.energy_ok


def compare_pathwise_vs_randomized(
    coeffs, policy, init: rsde.InitialLaw, grid: TimeGrid, particles: int,
    samples: int, seed, mode: str = FROZEN_FLOW, flow=None, level: float = 0.01,
    sigma_band: float = 3.0, test_subsample: int = 400, n_perm: int = 500,
    inner_refine: int = 1,
) -> BridgeReport:
    """Statistical comparison of the two formulations of the same model.

    Per sample: both pipelines consume the same common increments, and the
    conditional means must agree within the band.  Pooled: first and second
    moments within the band (standard errors from the between-sample spread,
    which respects the within-sample correlation), and an energy-distance
    permutation test on subsampled terminals at the given level.
    """
    pw = pathwise_terminals(
        coeffs, policy, init, grid, particles, samples, seed, mode, flow,
        inner_refine=inner_refine,
    )
    joint = joint_simulate(
        coeffs, policy, init, grid, particles, samples, seed, flow=flow
    )
    jt = joint.terminal

    per_sample = []
    for s in range(samples):
        se = math.hypot(
            float(pw[s, :, 0].std(ddof=1)) / math.sqrt(particles),
            float(jt[s, :, 0].std(ddof=1)) / math.sqrt(particles),
        )
        gap = float(abs(pw[s, :, 0].mean() - jt[s, :, 0].mean()))
        per_sample.append(
            SampleVerdict(s, pw[s].mean(axis=0), jt[s].mean(axis=0), se,
                          gap <= 4.0 * se + 1e-12)
        )
    pass_rate = float(np.mean([v.within for v in per_sample]))

    pw_means = pw[..., 0].mean(axis=1)
    jt_means = jt[..., 0].mean(axis=1)
    mean_gap = float(abs(pw_means.mean() - jt_means.mean()))
    mean_se = math.hypot(
        float(pw_means.std(ddof=1)) / math.sqrt(samples),
        float(jt_means.std(ddof=1)) / math.sqrt(samples),
    )
    pw_second = (pw[..., 0] ** 2).mean(axis=1)
    jt_second = (jt[..., 0] ** 2).mean(axis=1)
    second_gap = float(abs(pw_second.mean() - jt_second.mean()))
    second_se = math.hypot(
        float(pw_second.std(ddof=1)) / math.sqrt(samples),
        float(jt_second.std(ddof=1)) / math.sqrt(samples),
    )

    pick = substream(seed, "randomize", "energy-pick")
    flat_pw = pw.reshape(-1, coeffs.d)
    flat_jt = jt.reshape(-1, coeffs.d)
    n_test = min(test_subsample, flat_pw.shape[0])
    sel_pw = pick.choice(flat_pw.shape[0], size=n_test, replace=False)
    sel_jt = pick.choice(flat_jt.shape[0], size=n_test, replace=False)
    stat, p_val = energy_permutation_test(
        flat_pw[sel_pw], flat_jt[sel_jt], n_perm=n_perm, seed=seed
    )

    return BridgeReport(
        mode=mode,
        samples=samples,
        particles=particles,
        per_sample=per_sample,
        sample_pass_rate=pass_rate,
        pooled_mean_gap=mean_gap,
        pooled_mean_se=mean_se,
        mean_ok=mean_gap <= sigma_band * mean_se + 1e-12,
        pooled_second_gap=second_gap,
        pooled_second_se=second_se,
        second_ok=second_gap <= sigma_band * second_se + 1e-12,
        energy_stat=stat,
        energy_p=p_val,
        energy_ok=p_val >= level,
        level=level,
    )
