"""Particle measure flows, transport distances, and domain certificates."""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import controlled as ct
from .rng import substream
from .roughpath import InputError, RoughPath, TimeGrid

EXACT_ASSIGNMENT_MAX = 64
_MAGIC = b"MFLW"
_FORMAT_VERSION = 1


@dataclass
class MeasureFlow:
    """t -> mu_t as P particle trajectories Y with derivative particles Y'.

    Y: (P, N+1, d); Yp: (P, N+1, d, k) or None when the flow never feeds a
    coefficient construction.  Weights are uniform 1/P.
    """

    grid: TimeGrid
    Y: np.ndarray
    Yp: np.ndarray | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim != 3 or self.Y.shape[1] != self.grid.steps + 1:
            raise InputError(f"flow shape {self.Y.shape} does not match grid")
        if not np.isfinite(self.Y).all():
            raise InputError("non-finite flow particles")
        if self.Yp is not None:
            self.Yp = np.asarray(self.Yp, dtype=float)
            if self.Yp.shape[:3] != self.Y.shape or self.Yp.ndim != 4:
                raise InputError("derivative particles do not match flow shape")
            if not np.isfinite(self.Yp).all():
                raise InputError("non-finite derivative particles")

    @property
    def particles(self) -> int:
        return self.Y.shape[0]

    @property
    def dim(self) -> int:
        return self.Y.shape[2]

    def cloud(self, n: int) -> np.ndarray:
        """Empirical cloud at node n, shape (P, d)."""
        return self.Y[:, n]

    def ensemble(self) -> ct.ControlledEnsemble:
        if self.Yp is None:
            raise InputError("flow has no derivative particles")
        return ct.ControlledEnsemble(self.grid, self.Y, self.Yp)


def constant_flow(grid: TimeGrid, cloud: np.ndarray, k: int) -> MeasureFlow:
    """Flow frozen at an initial cloud, derivative particles zero."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    p, d = cloud.shape
    y = np.repeat(cloud[:, None, :], grid.steps + 1, axis=1)
    yp = np.zeros((p, grid.steps + 1, d, k))
    return MeasureFlow(grid, y, yp)


def from_solution(sol) -> MeasureFlow:
    """Measure flow of a solved state ensemble: the particles themselves,
    with the coefficient slot as derivative particles."""
    ens = sol.ensemble
    return MeasureFlow(ens.grid, ens.Z.copy(), ens.Zp.copy())


def wasserstein2(a: np.ndarray, b: np.ndarray, projections: int = 32, seed: int = 0) -> float:
    """W2 between point clouds.  Exact in one dimension (sorted coupling) and
    for small equal clouds (assignment); sliced estimate otherwise."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("empty cloud")
    if a.shape[1] != b.shape[1]:
        raise InputError("clouds have different dimensions")
    d = a.shape[1]
    if d == 1:
        return _w2_sorted(a[:, 0], b[:, 0])
    if a.shape[0] == b.shape[0] and a.shape[0] <= EXACT_ASSIGNMENT_MAX:
        cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        rows, cols = linear_sum_assignment(cost)
        return math.sqrt(cost[rows, cols].mean())
    rng = substream(seed, "w2", "slices")
    dirs = rng.normal(size=(projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    acc = 0.0
    for v in dirs:
        acc += _w2_sorted(a @ v, b @ v) ** 2
    return math.sqrt(d * acc / projections)


def _w2_sorted(x: np.ndarray, y: np.ndarray) -> float:
    x = np.sort(x)
    y = np.sort(y)
    if len(x) == len(y):
        return math.sqrt(np.mean((x - y) ** 2))
    # quantile coupling on a common grid
    q = np.linspace(0.0, 1.0, 2 * max(len(x), len(y)) + 1)[1::2]
    xi = np.quantile(x, q)
    yi = np.quantile(y, q)
    return math.sqrt(np.mean((xi - yi) ** 2))


def flow_distance(a: MeasureFlow, b: MeasureFlow, **kw) -> float:
    """sup over nodes of the marginal W2 distance."""
    if a.grid != b.grid:
        raise InputError("flows on different grids")
    return max(
        wasserstein2(a.cloud(n), b.cloud(n), **kw) for n in range(a.grid.steps + 1)
    )


def mix(a: MeasureFlow, b: MeasureFlow, lam: float, seed: int = 0) -> MeasureFlow:
    """Bernoulli(lam) trajectory-coupled mixture: each particle keeps either
    its a-trajectory (probability lam) or its b-trajectory, whole path and
    derivative together."""
    if a.grid != b.grid:
        raise InputError("flows on different grids")
    if not (0.0 <= lam <= 1.0):
        raise InputError(f"mixture weight must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return a
    if lam == 0.0:
        return b
    rng = substream(seed, "flowmix")
    if b.particles != a.particles:
        sel = rng.integers(0, b.particles, size=a.particles)
        b = MeasureFlow(b.grid, b.Y[sel], None if b.Yp is None else b.Yp[sel])
    keep = rng.random(a.particles) < lam
    y = np.where(keep[:, None, None], a.Y, b.Y)
    yp = None
    if a.Yp is not None and b.Yp is not None:
        yp = np.where(keep[:, None, None, None], a.Yp, b.Yp)
    return MeasureFlow(a.grid, y, yp)


@dataclass
class DomainCertificate:
    """Windowed-norm membership check for the fixed-point domain.

    member is true when every checked window of width below epsilon_window
    has power-mean norm at most M_bound.  One-sided: a failure is definite,
    success certifies the canonical representation on the checked windows.
    """

    M_bound: float
    epsilon_window: float
    m: int
    worst: float
    member: bool
    offending_window: tuple | None
    windows_checked: int
    window_norms: list


def check_domain(
    flow: MeasureFlow,
    p: RoughPath,
    idx: ct.IndexPair,
    m: int,
    M_bound: float,
    epsilon: float,
    resampler=None,
    inner_samples: int = 4,
    max_windows: int = 16,
    anchor_stride: int | None = None,
) -> DomainCertificate:
    """Evaluate the windowed controlled-path norm of the flow representation
    on windows of width < epsilon and compare against M_bound."""
    ens = flow.ensemble()
    grid = flow.grid
    span = max(1, min(grid.steps, int(math.ceil(epsilon / grid.dt)) - 1))
    starts = list(range(0, grid.steps - span + 1))
    if len(starts) > max_windows:
        step = max(1, len(starts) // max_windows)
        starts = starts[::step]
    if not starts:
        starts = [0]
    worst = -1.0
    offender = None
    norms = []
    for s in starts:
        window = (grid.nodes[s], grid.nodes[s + span])
        est = ct.estimate_norm(
            ens,
            p,
            idx,
            m=m,
            n_mode=ct.N_INFTY,
            window=window,
            inner_samples=inner_samples,
            resampler=resampler,
            anchor_stride=anchor_stride,
            combine="power_mean",
        )
        norms.append((window, est.combined))
        if est.combined > worst:
            worst = est.combined
            offender = window
    member = worst <= M_bound
    return DomainCertificate(
        M_bound=M_bound,
        epsilon_window=epsilon,
        m=m,
        worst=float(worst),
        member=bool(member),
        offending_window=None if member else offender,
        windows_checked=len(starts),
        window_norms=norms,
    )


def dump(flow: MeasureFlow, fp) -> None:
    """Binary container, same conventions as the rough-path one: magic,
    version u32, dims, T as f64, then row-major little-endian f64 payload."""
    k = 0 if flow.Yp is None else flow.Yp.shape[-1]
    fp.write(_MAGIC)
    fp.write(struct.pack("<I", _FORMAT_VERSION))
    fp.write(struct.pack("<IIII", flow.particles, flow.grid.steps, flow.dim, k))
    fp.write(struct.pack("<d", flow.grid.horizon))
    fp.write(np.ascontiguousarray(flow.Y, dtype="<f8").tobytes())
    if k:
        fp.write(np.ascontiguousarray(flow.Yp, dtype="<f8").tobytes())


def load(fp) -> MeasureFlow:
    if fp.read(4) != _MAGIC:
        raise InputError("not a measure-flow container (bad magic)")
    (version,) = struct.unpack("<I", fp.read(4))
    if version != _FORMAT_VERSION:
        raise InputError(f"unsupported container version {version}")
    p, n, d, k = struct.unpack("<IIII", fp.read(16))
    (horizon,) = struct.unpack("<d", fp.read(8))
    grid = TimeGrid(horizon, n)
    y = np.frombuffer(fp.read(8 * p * (n + 1) * d), dtype="<f8").reshape(
        p, n + 1, d
    )
    yp = None
    if k:
        yp = np.frombuffer(
            fp.read(8 * p * (n + 1) * d * k), dtype="<f8"
        ).reshape(p, n + 1, d, k).copy()
    return MeasureFlow(grid, y.copy(), yp)


def flow_csv(flow: MeasureFlow, fp) -> None:
    """Snapshot export: node, particle, state and derivative components."""
    d = flow.dim
    k = 0 if flow.Yp is None else flow.Yp.shape[-1]
    cols = ["node", "t", "particle"]
    cols += [f"y{i}" for i in range(d)]
    cols += [f"yp{i}_{j}" for i in range(d) for j in range(k)]
    fp.write(",".join(cols) + "\n")
    for n in range(flow.grid.steps + 1):
        t = flow.grid.nodes[n]
        for i in range(flow.particles):
            row = [str(n), repr(float(t)), str(i)]
            row += [repr(float(v)) for v in flow.Y[i, n]]
            if k:
                row += [repr(float(v)) for v in flow.Yp[i, n].ravel()]
            fp.write(",".join(row) + "\n")
