"""Forward solver for the controlled rough state dynamics, with monitors.

The state recursion per particle is

    X_{n+1} = X_n + b_bar dt + sigma dW_n + f(X_n) dB_n + fhat(X_n) BB_n

where (f, f') is the interaction coefficient built from the frozen measure
flow, fhat = grad(f) f + f' is the second-level correction, and b_bar
averages the drift over the policy's action mixture.  The same recursion,
restarted from a frozen node with fresh idiosyncratic draws, provides the
conditional continuations that feed the norm estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import controlled as ct
from . import vectorfield as vf
from .rng import substream
from .roughpath import InputError, RoughPath

BLOWUP_THRESHOLD = 1e6


class DivergedError(RuntimeError):
    def __init__(self, step, worst):
        super().__init__(f"state blew up at step {step} (|X| = {worst:.3g})")
        self.step = step


class CausalityViolationError(RuntimeError):
    pass


@dataclass(frozen=True)
class InitialLaw:
    """Initial sample spec: i.i.d. draws, independent of controls and noise."""

    kind: str = "normal"
    mean: float = 0.0
    spread: float = 1.0

    def sample(self, rng, count, dim) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.mean, self.spread, size=(count, dim))
        if self.kind == "constant":
            return np.full((count, dim), self.mean)
        if self.kind == "uniform":
            half = self.spread / 2.0
            return rng.uniform(self.mean - half, self.mean + half, size=(count, dim))
        raise InputError(f"unknown initial law {self.kind!r}")


def draw_wiener(seed, count, steps, dim, dt, *extra) -> np.ndarray:
    """Idiosyncratic increments, one row per particle; keyed so that any
    consumer can regenerate the identical block."""
    rng = substream(seed, "rsde", "W", *extra)
    return rng.normal(0.0, math.sqrt(dt), size=(count, steps, dim))


def draw_initial(seed, init: InitialLaw, count, dim, *extra) -> np.ndarray:
    return init.sample(substream(seed, "rsde", "X0", *extra), count, dim)


class WPrefixView:
    """Read guard handed to causal policies: exposes the idiosyncratic path
    only up to the current step and logs the deepest node accessed."""

    def __init__(self, increments: np.ndarray, limit: int):
        self._increments = increments
        self.limit = limit
        self.max_accessed = -1

    def increments(self, upto: int | None = None) -> np.ndarray:
        upto = self.limit if upto is None else upto
        if upto > self.limit:
            raise CausalityViolationError(
                f"policy requested increments up to step {upto},"
                f" only {self.limit} realized"
            )
        self.max_accessed = max(self.max_accessed, upto)
        return self._increments[:, :upto]

    def path(self, node: int) -> np.ndarray:
        """W at a grid node (cumulative from zero)."""
        if node > self.limit:
            raise CausalityViolationError(
                f"policy requested W at node {node}, only {self.limit} realized"
            )
        self.max_accessed = max(self.max_accessed, node)
        if node == 0:
            return np.zeros_like(self._increments[:, 0])
        return self._increments[:, :node].sum(axis=1)


@dataclass
class RsdeSolution:
    """Solved ensemble plus the inputs needed to replay or continue it."""

    ensemble: ct.ControlledEnsemble
    coeffs: object
    flow: object
    rough: RoughPath
    policy: object
    init: InitialLaw
    seed: int
    W_increments: np.ndarray
    control_record: dict
    cvf: vf.ControlledVectorField | None
    correction: object | None
    audit_log: list | None = None
    monitors: list = field(default_factory=list)

    @property
    def grid(self):
        return self.ensemble.grid

    def state_paths(self) -> np.ndarray:
        return self.ensemble.Z

    def sigma0_ensemble(self) -> ct.ControlledEnsemble:
        """(coefficient along the path, its correction along the path)."""
        if self.cvf is None:
            raise InputError("solution has no rough coefficient")
        x = self.ensemble.Z
        n1 = self.grid.steps + 1
        p_count = x.shape[0]
        d, k = self.coeffs.d, self.coeffs.k
        z = np.empty((p_count, n1, d, k))
        zp = np.empty((p_count, n1, d, k, k))
        for n in range(n1):
            z[:, n] = self.cvf.f(n, x[:, n])
            zp[:, n] = self.correction(n, x[:, n])
        return ct.ControlledEnsemble(self.grid, z, zp)

    def make_resampler(self, which: str = "state", inner_seed_salt: int = 1):
        """Two-level Monte Carlo continuations for the norm estimators.

        which="state" yields futures of (X, f(X)); which="sigma0" yields
        futures of (f(X), fhat(X)).  Continuations freeze each particle at
        the anchor node and redraw the idiosyncratic noise; flow, lift and
        policy stay frozen.  Feedback/mixture policies only.
        """
        if self.policy is not None and getattr(self.policy, "mode", "feedback") != "feedback":
            raise InputError("conditional resampling needs a feedback policy")

        def resample(s_idx, n_inner):
            x0 = self.ensemble.Z[:, s_idx]
            p_count, d = x0.shape
            flat0 = np.repeat(x0, n_inner, axis=0)
            steps = self.grid.steps - s_idx
            dw = draw_wiener(
                self.seed,
                p_count * n_inner,
                steps,
                self.coeffs.l,
                self.grid.dt,
                "inner",
                inner_seed_salt,
                s_idx,
            )
            xc = _evolve(
                self.coeffs,
                self.flow,
                self.rough,
                self.policy,
                flat0,
                dw,
                self.cvf,
                self.correction,
                start=s_idx,
            )
            xc = xc.reshape(p_count, n_inner, steps + 1, d)
            full = np.empty((p_count, n_inner, self.grid.steps + 1, d))
            full[:, :, : s_idx + 1] = self.ensemble.Z[:, None, : s_idx + 1]
            full[:, :, s_idx:] = xc
            k = self.ensemble.Zp.shape[-1]
            if which == "state":
                z = full
                zp = np.zeros((p_count, n_inner, self.grid.steps + 1, d, k))
                if self.cvf is not None:
                    for n in range(s_idx, self.grid.steps + 1):
                        zp[:, :, n] = self.cvf.f(n, full[:, :, n])
                zp[:, :, :s_idx] = self.ensemble.Zp[:, None, :s_idx]
                return z, zp
            if which == "sigma0":
                if self.cvf is None:
                    raise InputError("solution has no rough coefficient")
                z = np.zeros(
                    (p_count, n_inner, self.grid.steps + 1, d, k)
                )
                zp = np.zeros(z.shape + (k,))
                for n in range(self.grid.steps + 1):
                    z[:, :, n] = self.cvf.f(n, full[:, :, n])
                    zp[:, :, n] = self.correction(n, full[:, :, n])
                return z, zp
            raise InputError(f"unknown resampler target {which!r}")

        return resample


def _mixture_weights(policy, n, x, n_actions) -> np.ndarray:
    if policy is None:
        raise InputError("a policy is required (use a constant policy)")
    weights = policy.mixture(n, x)
    if weights.shape[-1] != n_actions:
        raise InputError(
            f"policy mixes {weights.shape[-1]} actions, model has {n_actions}"
        )
    return weights


def _drift_mixture(coeffs, t, x, cloud, weights) -> np.ndarray:
    out = np.zeros_like(x)
    for a in range(coeffs.n_actions):
        w = weights[:, a]
        if not np.any(w):
            continue
        out += w[:, None] * coeffs.b(t, x, cloud, coeffs.actions[a])
    return out


def _evolve(coeffs, flow, rough, policy, x0, dW, cvf, correction, start=0,
            record=None, causal=None):
    """Run the recursion from node `start`; returns (P, steps+1, d) states.

    record, when a dict, receives mixture weights or sampled actions.
    causal, when set, is (exo_rng, audit_list) and switches to sampled
    open-loop actions fed only the W prefix.
    """
    nodes = flow.grid.nodes if flow is not None else rough.grid.nodes
    steps = dW.shape[1]
    p_count, d = x0.shape
    x = np.empty((p_count, steps + 1, d))
    x[:, 0] = x0
    db = None if cvf is None else np.diff(rough.first_level, axis=0)
    bb = None if cvf is None else rough.step_second()
    for i in range(steps):
        n = start + i
        xn = x[:, i]
        cloud = flow.cloud(n) if flow is not None else xn
        t = nodes[n]
        if causal is not None:
            exo_rng, audit = causal
            view = WPrefixView(dW, limit=n)
            actions = policy.sample_causal(n, view, exo_rng)
            audit.append({"step": n, "max_node_accessed": view.max_accessed})
            if record is not None:
                record.setdefault("sampled_actions", []).append(actions)
            drift = np.zeros_like(xn)
            for a in range(coeffs.n_actions):
                mask = actions == a
                if np.any(mask):
                    drift[mask] = coeffs.b(t, xn[mask], cloud, coeffs.actions[a])
        else:
            weights = _mixture_weights(policy, n, xn, coeffs.n_actions)
            if record is not None:
                record.setdefault("mixture_weights", []).append(weights)
            drift = _drift_mixture(coeffs, t, xn, cloud, weights)
        nxt = xn + drift * (nodes[n + 1] - nodes[n])
        nxt = nxt + np.einsum(
            "pdl,pl->pd", coeffs.sigma(t, xn, cloud), dW[:, i]
        )
        if cvf is not None:
            nxt = nxt + cvf.f(n, xn) @ db[n]
            nxt = nxt + np.einsum("pdij,ij->pd", correction(n, xn), bb[n])
        worst = float(np.abs(nxt).max())
        if worst > BLOWUP_THRESHOLD:
            raise DivergedError(n, worst)
        x[:, i + 1] = nxt
    return x


def solve(coeffs, flow, p: RoughPath, policy, init: InitialLaw, particles: int,
          seed: int) -> RsdeSolution:
    """Simulate the state ensemble under a frozen flow, lift and policy."""
    if flow.grid != p.grid:
        raise InputError("flow and rough path live on different grids")
    cvf = correction = None
    if coeffs.sigma0 is not None:
        cvf = vf.build_cvf_from_flow(coeffs, flow)
        correction = vf.gubinelli_correction(cvf)
    x0 = draw_initial(seed, init, particles, coeffs.d)
    dw = draw_wiener(seed, particles, p.grid.steps, coeffs.l, p.grid.dt)
    record = {}
    x = _evolve(coeffs, flow, p, policy, x0, dw, cvf, correction, record=record)
    n1 = p.grid.steps + 1
    zp = np.zeros((particles, n1, coeffs.d, p.dim))
    if cvf is not None:
        for n in range(n1):
            zp[:, n] = cvf.f(n, x[:, n])
    ensemble = ct.ControlledEnsemble(
        p.grid,
        x,
        zp,
        generation_record={"seed": seed, "path": ("rsde", "W"), "branch": None},
    )
    if "mixture_weights" in record:
        record["mixture_weights"] = np.stack(record["mixture_weights"], axis=1)
    return RsdeSolution(
        ensemble=ensemble,
        coeffs=coeffs,
        flow=flow,
        rough=p,
        policy=policy,
        init=init,
        seed=seed,
        W_increments=dw,
        control_record=record,
        cvf=cvf,
        correction=correction,
    )


def realize_from_measure(coeffs, flow, p, policy, init: InitialLaw,
                         particles: int, seed: int) -> RsdeSolution:
    """Solve under an open-loop causal policy; every control draw consumes
    only the realized W prefix plus an exogenous stream, and the audit log
    records the deepest node each draw touched."""
    if getattr(policy, "mode", None) != "open_loop_causal":
        raise InputError("causal realization needs an open-loop causal policy")
    if flow.grid != p.grid:
        raise InputError("flow and rough path live on different grids")
    cvf = correction = None
    if coeffs.sigma0 is not None:
        cvf = vf.build_cvf_from_flow(coeffs, flow)
        correction = vf.gubinelli_correction(cvf)
    x0 = draw_initial(seed, init, particles, coeffs.d)
    dw = draw_wiener(seed, particles, p.grid.steps, coeffs.l, p.grid.dt)
    exo = substream(seed, "rsde", "exo")
    audit = []
    record = {}
    x = _evolve(
        coeffs, flow, p, policy, x0, dw, cvf, correction,
        record=record, causal=(exo, audit),
    )
    n1 = p.grid.steps + 1
    zp = np.zeros((particles, n1, coeffs.d, p.dim))
    if cvf is not None:
        for n in range(n1):
            zp[:, n] = cvf.f(n, x[:, n])
    if "sampled_actions" in record:
        record["sampled_actions"] = np.stack(record["sampled_actions"], axis=1)
    ensemble = ct.ControlledEnsemble(p.grid, x, zp)
    for entry in audit:
        if entry["max_node_accessed"] > entry["step"]:
            raise CausalityViolationError(
                f"draw at step {entry['step']} touched node"
                f" {entry['max_node_accessed']}"
            )
    return RsdeSolution(
        ensemble=ensemble,
        coeffs=coeffs,
        flow=flow,
        rough=p,
        policy=policy,
        init=init,
        seed=seed,
        W_increments=dw,
        control_record=record,
        cvf=cvf,
        correction=correction,
        audit_log=audit,
    )


def bridge_refine(dw: np.ndarray, dt: float, seed, *salt) -> np.ndarray:
    """Split each increment in two by a Brownian-bridge midpoint: the halves
    sum to the parent exactly, each carries half its variance, and they are
    conditionally independent given the parent."""
    p_count, steps, dim = dw.shape
    rng = substream(seed, "bridge", *salt)
    xi = rng.normal(0.0, math.sqrt(dt / 4.0), size=(p_count, steps, dim))
    out = np.empty((p_count, 2 * steps, dim))
    out[:, 0::2] = 0.5 * dw + xi
    out[:, 1::2] = 0.5 * dw - xi
    return out


# -- martingale diagnostics ---------------------------------------------------


def _bump3(u):
    """Compactly supported C^2 bump (1-u^2)^3 on |u|<1 with two derivatives."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1.0
    s = np.where(inside, 1.0 - u**2, 0.0)
    val = s**3
    d1 = np.where(inside, -6.0 * u * s**2, 0.0)
    d2 = np.where(inside, -6.0 * s**2 + 24.0 * u**2 * s, 0.0)
    return val, d1, d2


@dataclass
class TestFunction:
    """Scalar test function of (x, w) for d = l = 1, with derivatives."""

    name: str
    value: object
    grad_x: object
    grad_w: object
    hess_xx: object
    hess_xw: object
    hess_ww: object
    depends_x: bool
    depends_w: bool


def _fn_constant():
    zero = lambda x, w: np.zeros(np.shape(x))
    return TestFunction(
        "constant", lambda x, w: np.ones(np.shape(x)), zero, zero, zero, zero,
        zero, False, False,
    )


def _fn_x_bump(radius):
    def parts(x):
        return _bump3(x / radius)

    def value(x, w):
        c, _, _ = parts(x)
        return c * x

    def grad_x(x, w):
        c, c1, _ = parts(x)
        return c + x * c1 / radius

    def hess_xx(x, w):
        _, c1, c2 = parts(x)
        return 2.0 * c1 / radius + x * c2 / radius**2

    zero = lambda x, w: np.zeros(np.shape(x))
    return TestFunction("x_bump", value, grad_x, zero, hess_xx, zero, zero, True, False)


def _fn_x_quad(radius, center=-2.0):
    # the quadratic is offset so its curvature-to-slope ratio stays small on
    # the bulk of the state distribution; otherwise the O(dt) discretization
    # bias of the realized quadratic variation dominates the Monte Carlo
    # error at large particle counts and the level-0.01 test loses its size
    def value(x, w):
        c, _, _ = _bump3(x / radius)
        return c * (x - center) ** 2

    def grad_x(x, w):
        c, c1, _ = _bump3(x / radius)
        return 2.0 * (x - center) * c + (x - center) ** 2 * c1 / radius

    def hess_xx(x, w):
        c, c1, c2 = _bump3(x / radius)
        return (
            2.0 * c
            + 4.0 * (x - center) * c1 / radius
            + (x - center) ** 2 * c2 / radius**2
        )

    zero = lambda x, w: np.zeros(np.shape(x))
    return TestFunction("x_quad", value, grad_x, zero, hess_xx, zero, zero, True, False)


def _fn_w_bump(radius):
    # bump times w, so the loading is order one near the origin
    def value(x, w):
        c, _, _ = _bump3(w / radius)
        return c * w

    def grad_w(x, w):
        c, c1, _ = _bump3(w / radius)
        return c + w * c1 / radius

    def hess_ww(x, w):
        _, c1, c2 = _bump3(w / radius)
        return 2.0 * c1 / radius + w * c2 / radius**2

    zero = lambda x, w: np.zeros(np.shape(x))
    return TestFunction("w_bump", value, zero, grad_w, zero, zero, hess_ww, False, True)


def pure_w_bump(radius=3.0):
    """Plain compact bump in w alone (no polynomial): the refinement rate
    check of the Brownian characterization uses this one."""

    def value(x, w):
        c, _, _ = _bump3(w / radius)
        return c

    def grad_w(x, w):
        _, c1, _ = _bump3(w / radius)
        return c1 / radius

    def hess_ww(x, w):
        _, _, c2 = _bump3(w / radius)
        return c2 / radius**2

    zero = lambda x, w: np.zeros(np.shape(x))
    return TestFunction("pure_w_bump", value, zero, grad_w, zero, zero,
                        hess_ww, False, True)


def _fn_xw(radius_x, radius_w, cx=-2.0, cw=-2.0):
    def value(x, w):
        bx, _, _ = _bump3(x / radius_x)
        bw, _, _ = _bump3(w / radius_w)
        return bx * (x - cx) * bw * (w - cw)

    def _gx(x):
        bx, bx1, bx2 = _bump3(x / radius_x)
        g = bx + (x - cx) * bx1 / radius_x
        h = 2.0 * bx1 / radius_x + (x - cx) * bx2 / radius_x**2
        return bx * (x - cx), g, h

    def _gw(w):
        bw, bw1, bw2 = _bump3(w / radius_w)
        g = bw + (w - cw) * bw1 / radius_w
        h = 2.0 * bw1 / radius_w + (w - cw) * bw2 / radius_w**2
        return bw * (w - cw), g, h

    def grad_x(x, w):
        _, gx, _ = _gx(x)
        vw, _, _ = _gw(w)
        return gx * vw

    def grad_w(x, w):
        vx, _, _ = _gx(x)
        _, gw, _ = _gw(w)
        return vx * gw

    def hess_xx(x, w):
        _, _, hx = _gx(x)
        vw, _, _ = _gw(w)
        return hx * vw

    def hess_xw(x, w):
        _, gx, _ = _gx(x)
        _, gw, _ = _gw(w)
        return gx * gw

    def hess_ww(x, w):
        vx, _, _ = _gx(x)
        _, _, hw = _gw(w)
        return vx * hw

    return TestFunction("xw_mixed", value, grad_x, grad_w, hess_xx, hess_xw,
                        hess_ww, True, True)


def default_battery(radius_x=6.0, radius_w=14.0):
    """Constant, coordinate bump, offset quadratic bump, W coordinate bump,
    mixed X-W bump (all compact bumps times polynomials).

    The radii are wide relative to the diffusive range: the bump's third
    derivative enters the quadratic-variation bias of the discretized
    process with the noise loading, and tight bumps push the level-0.01
    tests off size once the Monte Carlo error drops below that bias
    (bias/error grows like sqrt(particles * dt)).
    """
    return [
        _fn_constant(),
        _fn_x_bump(radius_x),
        _fn_x_quad(radius_x),
        _fn_w_bump(radius_w),
        _fn_xw(radius_x, radius_w),
    ]


@dataclass
class PhiDiagnostics:
    name: str
    exact_zero: bool
    residual_tstats: list
    residual_pass: bool
    qv_tstat: float
    qv_pass: bool


@dataclass
class MartingaleDiagnostics:
    level: float
    particles: int
    low_power: bool
    per_phi: list
    cross: list  # (name_x, name_w, tstat, passed)

    @property
    def all_pass(self) -> bool:
        return all(e.residual_pass and e.qv_pass for e in self.per_phi) and all(
            c[3] for c in self.cross
        )


def _increments_of_martingale(sol, phi, cloud_at):
    """Per-step increments of the compensated process for one test function."""
    coeffs = sol.coeffs
    grid = sol.grid
    nodes = grid.nodes
    dt = grid.dt
    x = sol.ensemble.Z[..., 0]  # (P, N+1), d = 1
    wpath = np.concatenate(
        [
            np.zeros((x.shape[0], 1)),
            np.cumsum(sol.W_increments[..., 0], axis=1),
        ],
        axis=1,
    )
    weights = sol.control_record.get("mixture_weights")
    n_steps = grid.steps
    db = np.diff(sol.rough.first_level[:, 0]) if sol.cvf is not None else None
    bb = sol.rough.step_second()[:, 0, 0] if sol.cvf is not None else None
    brackets = sol.rough.step_brackets()[:, 0, 0] if sol.cvf is not None else None

    if weights is None and phi.depends_x:
        raise InputError("diagnostics need the mixture control record")
    vals = phi.value(x, wpath)
    dm = np.empty((x.shape[0], n_steps))
    for n in range(n_steps):
        xn, wn = x[:, n], wpath[:, n]
        cloud = cloud_at(n)
        gx = phi.grad_x(xn, wn)
        gw = phi.grad_w(xn, wn)
        hxx = phi.hess_xx(xn, wn)
        hxw = phi.hess_xw(xn, wn)
        hww = phi.hess_ww(xn, wn)
        sig = coeffs.sigma(nodes[n], xn[:, None], cloud)[:, 0, 0]
        drift = np.zeros_like(xn)
        if phi.depends_x:
            for a in range(coeffs.n_actions):
                w_a = weights[:, n, a]
                if np.any(w_a):
                    drift += w_a * coeffs.b(
                        nodes[n], xn[:, None], cloud, coeffs.actions[a]
                    )[:, 0]
        gen = drift * gx + 0.5 * (sig**2 * hxx + hww) + sig * hxw
        comp = gen * dt
        if sol.cvf is not None and phi.depends_x:
            s0 = sol.cvf.f(n, xn[:, None])[:, 0, 0]
            shat = sol.correction(n, xn[:, None])[:, 0, 0, 0]
            t_phi = gx * s0
            tp_phi = hxx * s0**2 + gx * shat
            comp += t_phi * db[n] + tp_phi * bb[n]
            # second-order bracket correction of the rough term
            comp += 0.5 * hxx * s0**2 * brackets[n]
        dm[:, n] = vals[:, n + 1] - vals[:, n] - comp
    return dm, x, wpath


def _qv_target(sol, phi, cloud_at):
    coeffs = sol.coeffs
    grid = sol.grid
    x = sol.ensemble.Z[..., 0]
    wpath = np.concatenate(
        [np.zeros((x.shape[0], 1)), np.cumsum(sol.W_increments[..., 0], axis=1)],
        axis=1,
    )
    out = np.zeros((x.shape[0], grid.steps))
    for n in range(grid.steps):
        xn, wn = x[:, n], wpath[:, n]
        sig = coeffs.sigma(grid.nodes[n], xn[:, None], cloud_at(n))[:, 0, 0]
        load = phi.grad_x(xn, wn) * sig + phi.grad_w(xn, wn)
        out[:, n] = load**2 * grid.dt
    return out


def qv_gap(sol: RsdeSolution, phi: TestFunction) -> np.ndarray:
    """Per-particle gap between the realized quadratic variation of the
    compensated process and the integrated squared loading.  Under grid
    refinement its spread shrinks like sqrt(dt)."""
    cloud_at = (lambda n: sol.flow.cloud(n)) if sol.flow is not None else (
        lambda n: sol.ensemble.Z[:, n]
    )
    dm, _, _ = _increments_of_martingale(sol, phi, cloud_at)
    return (dm**2).sum(axis=1) - _qv_target(sol, phi, cloud_at).sum(axis=1)


def martingale_diagnostics(sol: RsdeSolution, phis=None, level: float = 0.01,
                           n_anchor_pairs: int = 4) -> MartingaleDiagnostics:
    """Statistical checks of the compensated-process structure.

    (a) conditional-mean residuals: increments of the compensated process
    regressed on frozen-time features must have zero mean; (b) realized
    quadratic variation against the integrated squared noise loading; (c)
    realized cross variation between state and noise test functions against
    the integrated product of loadings.  Pass flags compare |t| to the
    two-sided critical value at `level` (Bonferroni within each family).
    """
    if sol.coeffs.d != 1 or sol.coeffs.l != 1:
        raise InputError("the default diagnostics battery needs d = l = 1")
    if phis is None:
        phis = default_battery()
    grid = sol.grid
    p_count = sol.ensemble.particles
    low_power = p_count < 100
    cloud_at = (lambda n: sol.flow.cloud(n)) if sol.flow is not None else (
        lambda n: sol.ensemble.Z[:, n]
    )

    anchors = sorted({int(a) for a in np.linspace(0, grid.steps // 2, n_anchor_pairs)})
    spans = [max(1, grid.steps // 4), max(1, grid.steps // 2)]

    per_phi = []
    dms = {}
    for phi in phis:
        dm, x, wpath = _increments_of_martingale(sol, phi, cloud_at)
        dms[phi.name] = dm
        if np.all(dm == 0.0):
            per_phi.append(
                PhiDiagnostics(phi.name, True, [0.0], True, 0.0, True)
            )
            continue
        m_cum = np.concatenate(
            [np.zeros((p_count, 1)), np.cumsum(dm, axis=1)], axis=1
        )
        # (a) orthogonality to frozen-time features
        tstats = []
        for s in anchors:
            for span in spans:
                t_end = min(grid.steps, s + span)
                if t_end <= s:
                    continue
                window = m_cum[:, t_end] - m_cum[:, s]
                bump_s, _, _ = _bump3(x[:, s] / 3.0)
                for feat in (np.ones(p_count), x[:, s], wpath[:, s], bump_s):
                    prod = window * feat
                    sd = prod.std(ddof=1)
                    if sd == 0.0:
                        continue
                    tstats.append(float(prod.mean() / (sd / math.sqrt(p_count))))
        n_tests = max(1, len(tstats))
        crit = stats.norm.ppf(1.0 - 0.5 * level / n_tests)
        residual_pass = all(abs(t) < crit for t in tstats)
        # (b) realized quadratic variation vs integrated loading
        gap = (dm**2).sum(axis=1) - _qv_target(sol, phi, cloud_at).sum(axis=1)
        sd = gap.std(ddof=1)
        qv_t = 0.0 if sd == 0.0 else float(gap.mean() / (sd / math.sqrt(p_count)))
        qv_crit = stats.t.ppf(1.0 - 0.5 * level, df=p_count - 1)
        per_phi.append(
            PhiDiagnostics(
                phi.name, False, tstats, residual_pass, qv_t, abs(qv_t) < qv_crit
            )
        )

    # (c) cross variation between x-only and w-only test functions
    cross = []
    x = sol.ensemble.Z[..., 0]
    wpath = np.concatenate(
        [np.zeros((p_count, 1)), np.cumsum(sol.W_increments[..., 0], axis=1)], axis=1
    )
    x_phis = [f for f in phis if f.depends_x and not f.depends_w]
    w_phis = [f for f in phis if f.depends_w and not f.depends_x]
    for fx in x_phis:
        for fw in w_phis:
            realized = (dms[fx.name] * dms[fw.name]).sum(axis=1)
            target = np.zeros(p_count)
            for n in range(grid.steps):
                sig = sol.coeffs.sigma(
                    grid.nodes[n], x[:, n][:, None], cloud_at(n)
                )[:, 0, 0]
                target += (
                    fx.grad_x(x[:, n], wpath[:, n])
                    * sig
                    * fw.grad_w(x[:, n], wpath[:, n])
                    * grid.dt
                )
            gap = realized - target
            sd = gap.std(ddof=1)
            t = 0.0 if sd == 0.0 else float(gap.mean() / (sd / math.sqrt(p_count)))
            crit = stats.t.ppf(1.0 - 0.5 * level, df=p_count - 1)
            cross.append((fx.name, fw.name, t, bool(abs(t) < crit)))

    return MartingaleDiagnostics(level, p_count, low_power, per_phi, cross)


# -- a priori monitor ---------------------------------------------------------


@dataclass
class AprioriSnapshot:
    """Norm estimates of the solved pair against the coefficient-norm
    envelope const * max(1, field_norm)^exponent."""

    state_norm: ct.NormEstimate
    coeff_norm: ct.NormEstimate
    field_norm: float
    envelope: float
    const: float
    exponent: float
    flagged: bool


def apriori_monitor(sol: RsdeSolution, idx: ct.IndexPair, m: int = 4,
                    const: float = 20.0, exponent: float = 3.0,
                    probes: np.ndarray | None = None,
                    inner_samples: int = 4,
                    anchor_stride: int | None = None) -> AprioriSnapshot:
    """Estimate the solved-pair norms and compare them to the envelope."""
    if sol.cvf is None:
        raise InputError("monitor needs a rough coefficient")
    if probes is None:
        xs = sol.ensemble.Z[..., 0]
        lo, hi = float(xs.min()), float(xs.max())
        probes = np.linspace(lo - 0.5, hi + 0.5, 17)[:, None]
    field = vf.cvf_norm(sol.cvf, sol.rough, idx, probes).total
    state = ct.estimate_norm(
        sol.ensemble,
        sol.rough,
        idx,
        m=m,
        resampler=sol.make_resampler("state"),
        inner_samples=inner_samples,
        anchor_stride=anchor_stride,
    )
    coeff = ct.estimate_norm(
        sol.sigma0_ensemble(),
        sol.rough,
        idx,
        m=m,
        resampler=sol.make_resampler("sigma0"),
        inner_samples=inner_samples,
        anchor_stride=anchor_stride,
    )
    envelope = const * max(1.0, field) ** exponent
    flagged = state.combined > envelope or coeff.combined > envelope
    snap = AprioriSnapshot(state, coeff, field, envelope, const, exponent, flagged)
    sol.monitors.append(snap)
    return snap
