"""Rough-path lifts on a uniform time grid.

A lift stores the first level B at every node and the second level (the
iterated integrals) for every ordered node pair, dense, so that integrators
and norm estimators can query arbitrary (s, t) without re-summation.  Two
constructions are provided: the left-point (Ito) enhancement of an increment
sequence and the exact enhancement of a piecewise-linear path (geometric).
"""

import struct
from dataclasses import dataclass

import numpy as np

BRACKET_ITO = "ito_identity"
BRACKET_GEOMETRIC = "geometric"
_MAGIC = b"RPTH"
_FORMAT_VERSION = 1


class InputError(ValueError):
    """Bad caller-supplied data (shape, grid, non-finite values)."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T with spacing T/N."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise InputError(f"grid needs at least one step, got {self.steps}")
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise InputError(f"horizon must be a positive finite time, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def restrict(self, stride: int) -> "TimeGrid":
        if self.steps % stride != 0:
            raise InputError(f"stride {stride} does not divide N={self.steps}")
        return TimeGrid(self.horizon, self.steps // stride)

    def node_at(self, t: float) -> int:
        """Index of the grid node closest to time t."""
        i = int(round(t / self.dt))
        return min(max(i, 0), self.steps)


@dataclass(frozen=True)
class RoughPath:
    """First and second level of a lift over a TimeGrid.

    first_level: (N+1, k) node values of B.
    second_level: (N+1, N+1, k, k); entry [i, j] is the iterated integral
    over [t_i, t_j] for i < j, zero elsewhere.
    """

    grid: TimeGrid
    first_level: np.ndarray
    second_level: np.ndarray
    bracket_mode: str

    def __post_init__(self):
        n = self.grid.steps + 1
        k = self.dim
        if self.first_level.shape != (n, k):
            raise InputError(f"first level shape {self.first_level.shape} != {(n, k)}")
        if self.second_level.shape != (n, n, k, k):
            raise InputError(f"second level shape {self.second_level.shape} != {(n, n, k, k)}")
        if self.bracket_mode not in (BRACKET_ITO, BRACKET_GEOMETRIC):
            raise InputError(f"unknown bracket mode {self.bracket_mode!r}")
        if not (np.isfinite(self.first_level).all() and np.isfinite(self.second_level).all()):
            raise InputError("non-finite entries in rough path")
        self.first_level.setflags(write=False)
        self.second_level.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.first_level.shape[1]

    def increment(self, i: int, j: int) -> np.ndarray:
        return self.first_level[j] - self.first_level[i]

    def increments(self) -> np.ndarray:
        """One-step increments, shape (N, k)."""
        return np.diff(self.first_level, axis=0)

    def second(self, i: int, j: int) -> np.ndarray:
        return self.second_level[i, j]

    def step_second(self) -> np.ndarray:
        """One-step second level, shape (N, k, k)."""
        n = self.grid.steps
        idx = np.arange(n)
        return self.second_level[idx, idx + 1]

    def bracket(self, i: int, j: int) -> np.ndarray:
        """Realized bracket dB (x) dB - (second + second^T) over [t_i, t_j]."""
        db = self.increment(i, j)
        bb = self.second_level[i, j]
        return np.outer(db, db) - (bb + bb.T)

    def step_brackets(self) -> np.ndarray:
        """Per-step realized brackets, shape (N, k, k)."""
        db = self.increments()
        bb = self.step_second()
        return db[:, :, None] * db[:, None, :] - (bb + np.swapaxes(bb, -1, -2))

    def restrict(self, stride: int) -> "RoughPath":
        """Lift seen on every stride-th node (second level is subsampled)."""
        grid = self.grid.restrict(stride)
        sel = np.arange(0, self.grid.steps + 1, stride)
        return RoughPath(
            grid,
            self.first_level[sel].copy(),
            self.second_level[np.ix_(sel, sel)].copy(),
            self.bracket_mode,
        )


def _second_from_prefix(first: np.ndarray, prefix: np.ndarray) -> np.ndarray:
    """Assemble the dense pair array from prefix sums S_j of B_r (x) dB_r.

    second[i, j] = S_j - S_i - B_i (x) (B_j - B_i); the formula satisfies the
    Chen relation identically, so the dense storage stays algebraically
    consistent up to round-off.
    """
    n = first.shape[0]
    second = prefix[None, :, :, :] - prefix[:, None, :, :]
    db = first[None, :, :] - first[:, None, :]
    second -= first[:, None, :, None] * db[:, :, None, :]
    iu = np.tril_indices(n)
    second[iu] = 0.0
    return second


def ito_lift(increments: np.ndarray, grid: TimeGrid) -> RoughPath:
    """Left-point enhancement of an increment sequence (Ito iterated sums)."""
    increments = np.asarray(increments, dtype=float)
    if increments.ndim == 1:
        increments = increments[:, None]
    if increments.shape[0] != grid.steps:
        raise InputError(
            f"expected {grid.steps} increments, got {increments.shape[0]}"
        )
    if not np.isfinite(increments).all():
        raise InputError("non-finite increment")
    k = increments.shape[1]
    first = np.zeros((grid.steps + 1, k))
    np.cumsum(increments, axis=0, out=first[1:])
    # prefix[j] = sum_{r<j} B_r (x) dW_r
    terms = first[:-1, :, None] * increments[:, None, :]
    prefix = np.zeros((grid.steps + 1, k, k))
    np.cumsum(terms, axis=0, out=prefix[1:])
    return RoughPath(grid, first, _second_from_prefix(first, prefix), BRACKET_ITO)


def smooth_lift(path: np.ndarray, grid: TimeGrid) -> RoughPath:
    """Exact lift of the piecewise-linear interpolant of node values.

    Per segment the iterated integral is (1/2) dB (x) dB; pairs follow by Chen
    composition.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    if path.shape[0] != grid.steps + 1:
        raise InputError(f"expected {grid.steps + 1} node values, got {path.shape[0]}")
    if not np.isfinite(path).all():
        raise InputError("non-finite node value")
    k = path.shape[1]
    steps = np.diff(path, axis=0)
    # midpoint rule: prefix[j] = sum_{r<j} (B_r + dB_r/2) (x) dB_r
    terms = (path[:-1] + 0.5 * steps)[:, :, None] * steps[:, None, :]
    prefix = np.zeros((grid.steps + 1, k, k))
    np.cumsum(terms, axis=0, out=prefix[1:])
    return RoughPath(grid, path.copy(), _second_from_prefix(path, prefix), BRACKET_GEOMETRIC)


def chen_defect(p: RoughPath) -> float:
    """Max over grid triples s<u<t of |Chen residual| (Frobenius)."""
    first, second = p.first_level, p.second_level
    n = p.grid.steps + 1
    worst = 0.0
    for u in range(1, n - 1):
        # residual[i, t] for all i < u < t, one middle point at a time
        left = second[:u, u]                      # (u, k, k)
        right = second[u, u + 1:]                 # (n-u-1, k, k)
        cross = np.einsum(
            "ia,tb->itab", first[u] - first[:u], first[u + 1:] - first[u]
        )
        res = second[:u, u + 1:] - left[:, None] - right[None, :] - cross
        m = float(np.abs(res).max())
        if m > worst:
            worst = m
    return worst


def symmetry_defect(p: RoughPath) -> float:
    """Max over pairs of |Sym(second) - (1/2) dB (x) dB| (geometric identity)."""
    db = p.first_level[None, :, :] - p.first_level[:, None, :]
    outer = db[:, :, :, None] * db[:, :, None, :]
    sym = 0.5 * (p.second_level + np.swapaxes(p.second_level, -1, -2))
    res = sym - 0.5 * outer
    n = p.grid.steps + 1
    res[np.tril_indices(n)] = 0.0
    return float(np.abs(res).max())


@dataclass(frozen=True)
class HolderReport:
    """Grid-restricted Holder seminorms of a lift at exponent alpha."""

    alpha: float
    first_seminorm: float
    second_seminorm: float


def _pair_gaps(p: RoughPath) -> np.ndarray:
    t = p.grid.nodes
    return t[None, :] - t[:, None]


def _check_alpha(alpha: float):
    if not (0.0 < alpha <= 0.5):
        raise InputError(f"alpha must lie in (0, 1/2], got {alpha}")


def holder_report(p: RoughPath, alpha: float = 0.45) -> HolderReport:
    _check_alpha(alpha)
    gaps = _pair_gaps(p)
    iu = np.triu_indices(p.grid.steps + 1, k=1)
    db = p.first_level[None, :, :] - p.first_level[:, None, :]
    first = np.linalg.norm(db[iu], axis=-1) / gaps[iu] ** alpha
    second = (
        np.linalg.norm(p.second_level[iu].reshape(len(iu[0]), -1), axis=-1)
        / gaps[iu] ** (2 * alpha)
    )
    return HolderReport(alpha, float(first.max()), float(second.max()))


def rho_alpha(p: RoughPath, q: RoughPath, alpha: float = 0.45) -> float:
    """Grid-restricted rough-path distance: alpha-Holder gap of the first
    level plus 2*alpha-Holder gap of the second level."""
    _check_alpha(alpha)
    if p.grid != q.grid or p.dim != q.dim:
        raise InputError("rough paths must share grid and dimension")
    gaps = _pair_gaps(p)
    iu = np.triu_indices(p.grid.steps + 1, k=1)
    db = (p.first_level - q.first_level)[None, :, :] - (
        p.first_level - q.first_level
    )[:, None, :]
    first = np.linalg.norm(db[iu], axis=-1) / gaps[iu] ** alpha
    dbb = p.second_level - q.second_level
    second = (
        np.linalg.norm(dbb[iu].reshape(len(iu[0]), -1), axis=-1)
        / gaps[iu] ** (2 * alpha)
    )
    return float(first.max() + second.max())


_MODE_CODE = {BRACKET_ITO: 0, BRACKET_GEOMETRIC: 1}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


def dump(p: RoughPath, fp) -> None:
    """Write the binary container: magic, version, k, N, T, mode, levels."""
    fp.write(_MAGIC)
    fp.write(struct.pack("<I", _FORMAT_VERSION))
    fp.write(struct.pack("<II", p.dim, p.grid.steps))
    fp.write(struct.pack("<d", p.grid.horizon))
    fp.write(struct.pack("<B", _MODE_CODE[p.bracket_mode]))
    fp.write(np.ascontiguousarray(p.first_level, dtype="<f8").tobytes())
    fp.write(np.ascontiguousarray(p.second_level, dtype="<f8").tobytes())


def load(fp) -> RoughPath:
    if fp.read(4) != _MAGIC:
        raise InputError("not a rough-path container (bad magic)")
    (version,) = struct.unpack("<I", fp.read(4))
    if version != _FORMAT_VERSION:
        raise InputError(f"unsupported container version {version}")
    k, n = struct.unpack("<II", fp.read(8))
    (horizon,) = struct.unpack("<d", fp.read(8))
    (mode_code,) = struct.unpack("<B", fp.read(1))
    grid = TimeGrid(horizon, n)
    first = np.frombuffer(fp.read(8 * (n + 1) * k), dtype="<f8").reshape(n + 1, k)
    second = np.frombuffer(
        fp.read(8 * (n + 1) * (n + 1) * k * k), dtype="<f8"
    ).reshape(n + 1, n + 1, k, k)
    return RoughPath(grid, first.copy(), second.copy(), _CODE_MODE[mode_code])


def dump_path(p: RoughPath, path) -> None:
    with open(path, "wb") as fp:
        dump(p, fp)


def load_path(path) -> RoughPath:
    with open(path, "rb") as fp:
        return load(fp)


def first_level_csv(p: RoughPath, fp) -> None:
    """Plotting export: node time followed by the k components of B."""
    header = "t," + ",".join(f"B{i}" for i in range(p.dim))
    fp.write(header + "\n")
    for t, row in zip(p.grid.nodes, p.first_level):
        fp.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
