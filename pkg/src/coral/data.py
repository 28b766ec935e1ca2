"""Analytic PDE generators, observation grids and the dataset file format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import container
from . import diffcore as dc

TASK_KINDS = ("ivp", "dynamics", "geometry")


class DatasetError(ValueError):
    """A dataset violates its own header or invariants."""


# ---------------------------------------------------------------- core types


@dataclass(frozen=True, eq=False)
class Grid:
    """Observation points in [-1, 1]^d."""

    points: np.ndarray
    periodic: tuple = ()

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DatasetError(f"grid needs shape (N>=1, d), got {pts.shape}")
        if not np.isfinite(pts).all() or np.abs(pts).max() > 1 + 1e-9:
            raise DatasetError("grid coordinates must lie in [-1, 1]")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * pts.shape[1])

    def __len__(self):
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def has_duplicates(self, tol: float = 1e-12) -> bool:
        order = np.lexsort(self.points.T[::-1])
        srt = self.points[order]
        return bool(np.any(np.all(np.abs(np.diff(srt, axis=0)) <= tol, axis=1)))


@dataclass(eq=False)
class FieldSample:
    grid: Grid
    values: np.ndarray
    channels: tuple = ("u",)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != len(self.grid):
            raise DatasetError(
                f"{self.values.shape[0]} value rows for a grid of {len(self.grid)} points"
            )
        if not np.isfinite(self.values).all():
            raise DatasetError("field values must be finite")
        if len(self.channels) != self.values.shape[1]:
            self.channels = tuple(f"c{i}" for i in range(self.values.shape[1]))

    def restrict(self, idx) -> "FieldSample":
        return FieldSample(Grid(self.grid.points[idx], self.grid.periodic), self.values[idx], self.channels)


@dataclass(eq=False)
class Trajectory:
    """Frames of one field on a fixed grid; ``source(points, t)`` is the exact solution."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    dt: float
    source: Optional[Callable] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.shape[:2] != (len(self.times), len(self.grid)):
            raise DatasetError(f"trajectory values {self.values.shape} do not match times/grid")
        steps = np.diff(self.times)
        if np.any(steps <= 0) or (steps.size and not np.allclose(steps, self.dt, rtol=1e-9, atol=1e-12)):
            raise DatasetError("timestamps must be strictly increasing with uniform spacing dt")

    def frame(self, k: int) -> FieldSample:
        return FieldSample(self.grid, self.values[k])

    def on_grid(self, grid: Grid) -> "Trajectory":
        """Re-evaluate the exact solution on another grid."""
        if self.source is None:
            raise DatasetError("trajectory has no analytic source to re-evaluate")
        vals = np.stack([self.source(grid.points, t) for t in self.times])
        return Trajectory(grid, self.times, vals, self.dt, self.source)

    def restrict(self, idx) -> "Trajectory":
        g = Grid(self.grid.points[idx], self.grid.periodic)
        return Trajectory(g, self.times, self.values[:, idx], self.dt, self.source)


# ---------------------------------------------------------------- grids


def regular_grid(res: int, d: int = 2, periodic: bool = True) -> Grid:
    """``res**d`` nodes; periodic grids drop the duplicated +1 endpoint."""
    if periodic:
        axis = -1.0 + 2.0 * np.arange(res) / res
    else:
        axis = np.linspace(-1.0, 1.0, res)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    return Grid(pts, (periodic,) * d)


def subsample_indices(n: int, pct: float, seed: int) -> np.ndarray:
    if not 0 < pct <= 100:
        raise ValueError(f"subsample percentage must be in (0, 100], got {pct}")
    if pct == 100:
        return np.arange(n)
    count = max(1, math.ceil(pct * n / 100 - 1e-9))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def subsample_grid(grid: Grid, pct: float, seed: int) -> Grid:
    """Keep ``ceil(pct * N / 100)`` random nodes (all of them, in order, at 100)."""
    idx = subsample_indices(len(grid), pct, seed)
    return Grid(grid.points[idx], grid.periodic)


# ---------------------------------------------------------------- periodic analytic fields


def _wavevectors(k_max: int, d: int = 2) -> np.ndarray:
    r = np.arange(-k_max, k_max + 1)
    mesh = np.meshgrid(*([r] * d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


@dataclass
class FourierField:
    """``sum_k a_k cos(2 pi k.x) + b_k sin(2 pi k.x)`` over integer ``k``."""

    ks: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def random(cls, k_max: int, rng: np.random.Generator, d: int = 2) -> "FourierField":
        if k_max < 1:
            raise ValueError("k_max must be at least 1")
        ks = _wavevectors(k_max, d)
        decay = 1.0 / (1.0 + (ks ** 2).sum(axis=1))
        a = rng.standard_normal(len(ks)) * decay
        b = rng.standard_normal(len(ks)) * decay
        b[~ks.any(axis=1)] = 0.0
        return cls(ks, a, b)

    def mean(self) -> float:
        return float(self.a[~self.ks.any(axis=1)].sum())

    def __call__(self, points: np.ndarray, scale: Optional[np.ndarray] = None) -> np.ndarray:
        phase = 2 * np.pi * points @ self.ks.T
        a, b = self.a, self.b
        if scale is not None:
            a, b = a * scale, b * scale
        return np.cos(phase) @ a + np.sin(phase) @ b


def to_unit_cell(points: np.ndarray) -> np.ndarray:
    """Stored coordinates in [-1, 1] back to the physical unit torus [0, 1)."""
    return (np.asarray(points) + 1.0) / 2.0


@dataclass
class HeatSolution:
    """Exact heat flow on the unit torus, evaluated at normalized coordinates."""

    u0: FourierField
    nu: float

    def __call__(self, points, t):
        k2 = (self.u0.ks ** 2).sum(axis=1)
        return self.u0(to_unit_cell(points), np.exp(-self.nu * (2 * np.pi) ** 2 * k2 * t))[:, None]


@dataclass
class AdvectionSolution:
    """Rigid transport of ``u0`` at constant velocity, periodic with period 2 per normalized axis."""

    u0: FourierField
    velocity: np.ndarray

    def __call__(self, points, t):
        shifted = np.mod(points - np.asarray(self.velocity) * t + 1.0, 2.0) - 1.0
        return self.u0(to_unit_cell(shifted))[:, None]


def _trajectories(sources, grid, n_frames, dt):
    times = dt * np.arange(n_frames)
    out = []
    for src in sources:
        vals = np.stack([src(grid.points, t) for t in times])
        out.append(Trajectory(grid, times, vals, dt, src))
    return out


def gen_heat2d(n_traj: int, grid_res: int, n_frames: int, dt: float, nu: float, k_max: int,
               seed: int) -> list:
    """Exact periodic heat-equation trajectories on a ``grid_res``^2 grid."""
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    rng = np.random.default_rng(seed)
    sources = [HeatSolution(FourierField.random(k_max, rng), nu) for _ in range(n_traj)]
    return _trajectories(sources, regular_grid(grid_res), n_frames, dt)


def gen_advection2d(n_traj: int, grid_res: int, n_frames: int, dt: float, velocity, k_max: int,
                    seed: int) -> list:
    rng = np.random.default_rng(seed)
    c = np.asarray(velocity, dtype=np.float64)
    sources = [AdvectionSolution(FourierField.random(k_max, rng), c) for _ in range(n_traj)]
    return _trajectories(sources, regular_grid(grid_res), n_frames, dt)


def gen_ivp_heat(n_samples: int, grid_res: int, t_out: float, nu: float, k_max: int, seed: int,
                 grid_pct: float = 100.0) -> list:
    """(u(0), u(t_out)) pairs of the heat equation, each on its own subsampled grid."""
    rng = np.random.default_rng(seed)
    base = regular_grid(grid_res)
    pairs = []
    for i in range(n_samples):
        src = HeatSolution(FourierField.random(k_max, rng), nu)
        g = subsample_grid(base, grid_pct, seed * 100003 + i) if grid_pct < 100 else base
        pairs.append((FieldSample(g, src(g.points, 0.0)), FieldSample(g, src(g.points, t_out))))
    return pairs


# ---------------------------------------------------------------- geometry task


@dataclass
class GeometryPrior:
    res: int = 16
    n_ctrl: int = 5
    amplitude: float = 0.15
    gamma: float = 4.0
    n_boundary: int = 4096


class GeometryFamily:
    """Unit squares whose bottom and top edges are bent by cubic splines.

    Design parameters ``p`` have shape ``(2, n_ctrl)``: spline offsets of
    the bottom and top edge at uniformly spaced control abscissae.  The
    reference node ``(s, r)`` maps to ``(s, (1 - r) * bot(s) + r * top(s))``
    with ``bot = B p[0]`` and ``top = 1 + B p[1]``.
    """

    def __init__(self, prior: GeometryPrior = GeometryPrior()):
        self.prior = prior
        self.s_ctrl = np.linspace(0.0, 1.0, prior.n_ctrl)
        axis = np.linspace(0.0, 1.0, prior.res)
        s, r = np.meshgrid(axis, axis, indexing="ij")
        self.ref = np.stack([s.reshape(-1), r.reshape(-1)], axis=1)
        probe = np.linspace(0.0, 1.0, 257)
        self._probe_basis = self.basis(probe)
        reach = prior.amplitude * np.abs(self._probe_basis).sum(axis=1).max()
        self.y_lo, self.y_hi = -reach, 1.0 + reach
        bs = self.basis(self.ref[:, 0])
        r_col = self.ref[:, 1:2]
        # y = r + lin @ p.ravel()
        self.lin = np.concatenate([(1.0 - r_col) * bs, r_col * bs], axis=1)
        self.reference_grid = Grid(self.normalize(self.ref))

    def basis(self, s: np.ndarray) -> np.ndarray:
        eye = np.eye(self.prior.n_ctrl)
        return CubicSpline(self.s_ctrl, eye, bc_type="natural", axis=0)(np.asarray(s))

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        out = np.empty_like(xy, dtype=np.float64)
        out[:, 0] = 2.0 * xy[:, 0] - 1.0
        out[:, 1] = 2.0 * (xy[:, 1] - self.y_lo) / (self.y_hi - self.y_lo) - 1.0
        return out

    def sample_params(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            p = rng.uniform(-self.prior.amplitude, self.prior.amplitude, size=(2, self.prior.n_ctrl))
            if self.is_injective(p):
                return p

    def is_injective(self, p) -> bool:
        bot = self._probe_basis @ p[0]
        top = 1.0 + self._probe_basis @ p[1]
        # jacobian determinant of (s, r) -> (x, y) is top(s) - bot(s)
        return bool(np.all(top - bot > 1e-3))

    def deform(self, p) -> np.ndarray:
        """Physical node positions for design ``p``."""
        p = np.asarray(p, dtype=np.float64)
        y = self.ref[:, 1] + self.lin @ p.reshape(-1)
        return np.stack([self.ref[:, 0], y], axis=1)

    def deform_normalized(self, p: dc.Node) -> dc.Node:
        """Differentiable normalized node positions, shape ``(N, 2)``."""
        n = self.ref.shape[0]
        scale = 2.0 / (self.y_hi - self.y_lo)
        y = dc.reshape(dc.matmul(self.lin, dc.reshape(p, (-1, 1))), (n,))
        y_norm = (y + (self.ref[:, 1] - self.y_lo)) * scale - 1.0
        x_norm = 2.0 * self.ref[:, 0] - 1.0
        # place the two columns through fixed selector matrices
        return (dc.matmul(dc.reshape(y_norm, (n, 1)), np.array([[0.0, 1.0]]))
                + np.stack([x_norm, np.zeros(n)], axis=1))

    def boundary(self, p) -> np.ndarray:
        """Closed polyline of ``n_boundary`` points along the deformed boundary."""
        p = np.asarray(p, dtype=np.float64)
        m = self.prior.n_boundary // 4
        s = np.linspace(0.0, 1.0, m, endpoint=False)
        ends = self.basis(np.array([0.0, 1.0])) @ p.T
        bot0, top0 = ends[0, 0], 1.0 + ends[0, 1]
        bot1, top1 = ends[1, 0], 1.0 + ends[1, 1]
        bottom = np.stack([s, self.basis(s) @ p[0]], axis=1)
        right = np.stack([np.ones(m), bot1 + s * (top1 - bot1)], axis=1)
        top = np.stack([1.0 - s, 1.0 + self.basis(1.0 - s) @ p[1]], axis=1)
        left = np.stack([np.zeros(m), top0 - s * (top0 - bot0)], axis=1)
        return np.concatenate([bottom, right, top, left], axis=0)

    def field(self, xy: np.ndarray, p) -> np.ndarray:
        """``exp(-gamma * dist(x, boundary)^2)`` by brute-force polyline distance."""
        d = polyline_distance(xy, self.boundary(np.asarray(p)))
        return np.exp(-self.prior.gamma * d ** 2)


def polyline_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to a closed polyline, brute force over segments."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-300)
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], 256):
        pts = points[lo:lo + 256]
        ap = pts[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
        diff = ap - t[..., None] * ab[None]
        out[lo:lo + 256] = np.sqrt((diff ** 2).sum(axis=2).min(axis=1))
    return out


def gen_geometry_task(n_samples: int, prior: GeometryPrior, seed: int):
    """Pairs (deformation on the reference grid, field on the deformed grid), plus designs."""
    fam = GeometryFamily(prior)
    rng = np.random.default_rng(seed)
    pairs, designs = [], []
    for _ in range(n_samples):
        p = fam.sample_params(rng)
        pairs.append(geometry_pair(fam, p))
        designs.append(p)
    return pairs, designs


def geometry_pair(fam: GeometryFamily, p):
    xy = fam.deform(p)
    xy_n = fam.normalize(xy)
    a = FieldSample(fam.reference_grid, xy_n, ("x", "y"))
    u = FieldSample(Grid(xy_n), fam.field(xy, p), ("u",))
    return a, u


# ---------------------------------------------------------------- dataset container


@dataclass
class DatasetHeader:
    task: str
    d: int
    in_channels: int
    out_channels: int
    n_samples: int
    per_sample_grid: bool
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    header: DatasetHeader
    samples: list


def make_dataset(task: str, samples: list, meta: Optional[dict] = None) -> Dataset:
    if not samples:
        raise DatasetError("dataset has no samples")
    if task == "dynamics":
        first = samples[0]
        shared = all(s.grid is first.grid for s in samples)
        hdr = DatasetHeader(task, first.grid.d, first.values.shape[2], first.values.shape[2],
                            len(samples), not shared, dict(meta or {}))
    else:
        a, u = samples[0]
        shared = all(s[0].grid is a.grid and s[1].grid is u.grid for s in samples)
        hdr = DatasetHeader(task, a.grid.d, a.values.shape[1], u.values.shape[1],
                            len(samples), not shared, dict(meta or {}))
    return Dataset(hdr, samples)


def write_dataset(path, ds: Dataset) -> None:
    h = ds.header
    if h.task not in TASK_KINDS:
        raise DatasetError(f"unknown task {h.task!r}")
    if not ds.samples or h.n_samples != len(ds.samples):
        raise DatasetError("header sample count must match a nonempty payload")
    blocks = []
    if h.task == "dynamics":
        if not h.per_sample_grid:
            blocks += [ds.samples[0].grid.points, ds.samples[0].times]
        for tr in ds.samples:
            if h.per_sample_grid:
                blocks += [tr.grid.points, tr.times]
            blocks.append(tr.values)
        extra = {"dt": float(ds.samples[0].dt)}
    else:
        if not h.per_sample_grid:
            blocks += [ds.samples[0][0].grid.points, ds.samples[0][1].grid.points]
        for a, u in ds.samples:
            if h.per_sample_grid:
                blocks += [a.grid.points, u.grid.points]
            blocks += [a.values, u.values]
        extra = {"in_names": list(ds.samples[0][0].channels),
                 "out_names": list(ds.samples[0][1].channels)}
    meta = {"generator": h.meta, **extra}
    dims = [h.d, h.in_channels, h.out_channels, h.n_samples, int(h.per_sample_grid)]
    container.write(path, container.DATASET_MAGIC,
                    container.Container(TASK_KINDS.index(h.task), dims, blocks, meta))


def read_dataset(path) -> Dataset:
    c = container.read(path, container.DATASET_MAGIC)
    if c.kind >= len(TASK_KINDS) or len(c.dims) != 5:
        raise container.FormatVersionError(f"unrecognised dataset header (kind {c.kind})")
    task = TASK_KINDS[c.kind]
    d, cin, cout, n, per = c.dims
    per = bool(per)
    shared = 0 if per else 2
    per_block = (4 if per else 2) if task != "dynamics" else (3 if per else 1)
    if len(c.blocks) != shared + per_block * n:
        raise container.CountMismatchError(
            f"{len(c.blocks)} blocks for {n} samples of task {task}")
    blocks = iter(c.blocks)
    samples = []
    if task == "dynamics":
        dt = c.meta["dt"]
        if not per:
            grid = Grid(next(blocks), (True,) * d)
            times = next(blocks)
        for _ in range(n):
            if per:
                grid = Grid(next(blocks), (True,) * d)
                times = next(blocks)
            samples.append(Trajectory(grid, times, next(blocks), dt))
    else:
        names_in = tuple(c.meta.get("in_names", ()))
        names_out = tuple(c.meta.get("out_names", ()))
        if not per:
            g_in, g_out = Grid(next(blocks)), Grid(next(blocks))
        for _ in range(n):
            if per:
                g_in, g_out = Grid(next(blocks)), Grid(next(blocks))
            samples.append((FieldSample(g_in, next(blocks), names_in),
                            FieldSample(g_out, next(blocks), names_out)))
    hdr = DatasetHeader(task, d, cin, cout, n, per, c.meta.get("generator", {}))
    return Dataset(hdr, samples)
