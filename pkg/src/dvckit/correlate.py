"""Subvolume matching: ZNCC, integer-voxel search, first-order IC-GN
refinement, and the grid-level driver."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .field import DisplacementField, GridSpec, Status, densify
from .volume import Volume, gradient_array, in_domain, sample_array


class DegenerateSubvolumeError(ValueError):
    """Subvolume has (numerically) no gray variation to correlate."""


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class DvcParams:
    grid_step: int = 10
    subvolume_half_size: int = 70
    search_radius: int = 8
    max_iterations: int = 30
    convergence_tol: float = 1e-3
    zncc_accept: float = 0.8

    def __post_init__(self):
        if self.grid_step < 1:
            raise ValueError("grid_step must be >= 1")
        if 2 * self.subvolume_half_size + 1 < 5:
            raise ValueError("subvolume must span at least 5 voxels")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DvcParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DVC parameter(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DvcParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class PoiSpec:
    center: tuple[int, int, int]
    half_size: int

    def __post_init__(self):
        if 2 * self.half_size + 1 < 5:
            raise ValueError("subvolume must span at least 5 voxels")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))

    def fits(self, dims, margin: int = 0) -> bool:
        h = self.half_size + margin
        return all(h <= c <= n - 1 - h for c, n in zip(self.center, dims))


class WarpParams:
    """First-order shape function (u, ux, uy, uz, v, vx, vy, vz, w, wx, wy, wz)."""

    __slots__ = ("p",)

    def __init__(self, p=None):
        p = np.zeros(12) if p is None else np.array(p, dtype=np.float64).reshape(12)
        if not np.all(np.isfinite(p)):
            raise ValueError("warp parameters must be finite")
        self.p = p

    @classmethod
    def translation(cls, t) -> "WarpParams":
        p = np.zeros(12)
        p[[0, 4, 8]] = t
        return cls(p)

    @property
    def displacement(self) -> np.ndarray:
        return self.p[[0, 4, 8]].copy()

    @property
    def gradient(self) -> np.ndarray:
        """Displacement gradient ``B[i, j] = du_i / dx_j``."""
        return self.p.reshape(3, 4)[:, 1:].copy()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        q = self.p.reshape(3, 4)
        m[:3, :3] += q[:, 1:]
        m[:3, 3] = q[:, 0]
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "WarpParams":
        q = np.empty((3, 4))
        q[:, 0] = m[:3, 3]
        q[:, 1:] = m[:3, :3] - np.eye(3)
        return cls(q.ravel())

    def __repr__(self):
        return f"WarpParams({np.array2string(self.p, precision=5)})"


@dataclass
class MatchResult:
    warp: WarpParams
    zncc: float
    iterations: int
    status: Status


# --------------------------------------------------------------------------


def zncc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("zncc needs two sample sets of equal size >= 2")
    ah = a - a.mean()
    bh = b - b.mean()
    na = np.sqrt(np.dot(ah, ah))
    nb = np.sqrt(np.dot(bh, bh))
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    if na <= 1e-12 * scale * np.sqrt(a.size) or nb <= 1e-12 * scale * np.sqrt(b.size):
        raise DegenerateSubvolumeError("zero gray variance in subvolume")
    return float(np.clip(np.dot(ah, bh) / (na * nb), -1.0, 1.0))


def _subvolume(arr: np.ndarray, center, h: int) -> np.ndarray:
    x, y, z = center
    return arr[z - h : z + h + 1, y - h : y + h + 1, x - h : x + h + 1]


def integer_search(ref: Volume, dfm: Volume, poi: PoiSpec, radius: int, init=(0, 0, 0)):
    """Exhaustive ZNCC maximisation over integer offsets ``init + [-r, r]^3``.

    Ties go to the lexicographically smallest (dz, dy, dx).
    Returns ``(offset, zncc)``; offset is an (x, y, z) tuple.
    """
    h = poi.half_size
    if not poi.fits(ref.dims):
        raise OutOfBoundsError("reference subvolume leaves the volume")
    tmpl = _subvolume(ref.data, poi.center, h).astype(np.float64)
    t_hat = tmpl - tmpl.mean()
    t_norm = np.sqrt(np.sum(t_hat * t_hat))
    if t_norm <= 1e-12 * max(np.abs(tmpl).max(), 1.0):
        raise DegenerateSubvolumeError("flat reference subvolume")
    n = tmpl.size

    lo, hi = [], []
    for a in range(3):
        c, dim = poi.center[a], dfm.dims[a]
        lo.append(max(int(init[a]) - radius, h - c))
        hi.append(min(int(init[a]) + radius, dim - 1 - h - c))
    if any(l > u for l, u in zip(lo, hi)):
        raise OutOfBoundsError("every candidate offset leaves the deformed volume")

    cx, cy, cz = poi.center
    region = dfm.data[
        cz + lo[2] - h : cz + hi[2] + h + 1,
        cy + lo[1] - h : cy + hi[1] + h + 1,
        cx + lo[0] - h : cx + hi[0] + h + 1,
    ].astype(np.float64)
    s1 = _box_sums(region, 2 * h + 1)
    s2 = _box_sums(region * region, 2 * h + 1)
    var = s2 - s1 * s1 / n

    w = 2 * h + 1
    cc = np.empty(var.shape)
    for k in range(var.shape[0]):
        for j in range(var.shape[1]):
            # all x offsets of one (dz, dy) row in a single contraction
            rows = sliding_window_view(region[k : k + w, j : j + w], w, axis=2)
            cc[k, j] = np.einsum("abcd,abd->c", rows, t_hat)
    ok = var > 1e-12 * n
    if not ok.any():
        raise DegenerateSubvolumeError("all candidate windows are flat")
    score = np.where(ok, cc / (t_norm * np.sqrt(np.where(ok, var, 1.0))), -np.inf)
    # scores equal up to rounding count as ties; the first in (z, y, x) order wins
    top = float(score.max())
    k, j, i = np.unravel_index(int(np.argmax(score >= top - 1e-12)), score.shape)
    best = float(score[k, j, i])
    return (lo[0] + int(i), lo[1] + int(j), lo[2] + int(k)), min(best, 1.0)


def _box_sums(arr: np.ndarray, w: int) -> np.ndarray:
    """Sums over every w^3 window (valid positions only)."""
    c = np.pad(arr, [(1, 0)] * 3).cumsum(0).cumsum(1).cumsum(2)
    return (
        c[w:, w:, w:]
        - c[:-w, w:, w:]
        - c[w:, :-w, w:]
        - c[w:, w:, :-w]
        + c[:-w, :-w, w:]
        + c[:-w, w:, :-w]
        + c[w:, :-w, :-w]
        - c[:-w, :-w, :-w]
    )


class _Template:
    """Reference subvolume data reused across IC-GN iterations."""

    def __init__(self, ref: Volume, poi: PoiSpec):
        h = poi.half_size
        if not poi.fits(ref.dims, margin=1):
            raise OutOfBoundsError("reference subvolume and gradient margin leave the volume")
        block = _subvolume(ref.data, poi.center, h + 1).astype(np.float64)
        gx, gy, gz = (g[1:-1, 1:-1, 1:-1].ravel() for g in gradient_array(block))
        f = block[1:-1, 1:-1, 1:-1].ravel()
        r = np.arange(-h, h + 1, dtype=np.float64)
        dz, dy, dx = (a.ravel() for a in np.meshgrid(r, r, r, indexing="ij"))
        self.local = np.stack([dx, dy, dz, np.ones_like(dx)])  # (4, N)
        self.center = np.array(poi.center, dtype=np.float64)
        self.half = h
        self.f_hat = f - f.mean()
        self.f_norm = np.sqrt(np.dot(self.f_hat, self.f_hat))
        if self.f_norm <= 1e-9 * max(np.abs(f).max(), 1.0):
            raise DegenerateSubvolumeError("flat reference subvolume")
        self.J = np.column_stack(
            [gx, gx * dx, gx * dy, gx * dz,
             gy, gy * dx, gy * dy, gy * dz,
             gz, gz * dx, gz * dy, gz * dz]
        )
        self.H = self.J.T @ self.J
        # scale-aware conditioning check on the Hessian
        d = np.sqrt(np.diag(self.H))
        if np.any(d <= 0) or np.linalg.cond(self.H / np.outer(d, d)) > 1e12:
            raise DegenerateSubvolumeError("singular IC-GN Hessian (flat texture)")
        self.H_inv = np.linalg.inv(self.H)

    def points(self, warp: WarpParams) -> np.ndarray:
        m = warp.matrix()
        return (m[:3] @ self.local).T + self.center

    def target(self, dfm: Volume, warp: WarpParams):
        pts = self.points(warp)
        if not np.all(in_domain(dfm.shape, pts, "tricubic")):
            return None
        g = sample_array(dfm.data, pts, "tricubic")
        g_hat = g - g.mean()
        return g_hat, np.sqrt(np.dot(g_hat, g_hat))

    def zncc(self, g_hat, g_norm) -> float:
        return float(np.clip(np.dot(self.f_hat, g_hat) / (self.f_norm * g_norm), -1.0, 1.0))


def icgn_refine(ref: Volume, dfm: Volume, poi: PoiSpec, init: WarpParams, params: DvcParams) -> MatchResult:
    """Inverse-compositional Gauss-Newton on the zero-mean normalised SSD."""
    tpl = _Template(ref, poi)
    warp = WarpParams(init.p)
    h = tpl.half
    scale = np.array([1, h, h, h] * 3, dtype=np.float64)
    zn = np.nan
    for it in range(1, params.max_iterations + 1):
        tgt = tpl.target(dfm, warp)
        if tgt is None:
            return MatchResult(warp, zn, it - 1, Status.OUT_OF_BOUNDS)
        g_hat, g_norm = tgt
        if g_norm <= 1e-9:
            return MatchResult(warp, zn, it - 1, Status.DIVERGED)
        zn = tpl.zncc(g_hat, g_norm)
        err = tpl.f_hat - (tpl.f_norm / g_norm) * g_hat
        dp = -(tpl.H_inv @ (tpl.J.T @ err))
        inc = WarpParams(dp)
        try:
            warp = WarpParams.from_matrix(warp.matrix() @ np.linalg.inv(inc.matrix()))
        except (np.linalg.LinAlgError, ValueError):
            return MatchResult(warp, zn, it, Status.DIVERGED)
        if np.linalg.norm(dp * scale) < params.convergence_tol:
            tgt = tpl.target(dfm, warp)
            if tgt is None:
                return MatchResult(warp, zn, it, Status.OUT_OF_BOUNDS)
            return MatchResult(warp, tpl.zncc(*tgt), it, Status.CONVERGED)
    tgt = tpl.target(dfm, warp)
    if tgt is not None:
        zn = tpl.zncc(*tgt)
    return MatchResult(warp, zn, params.max_iterations, Status.DIVERGED)


# --------------------------------------------------------------------------
# Grid driver


def _predicted_offsets(grid: GridSpec, predictor: DisplacementField | None) -> np.ndarray:
    if predictor is None:
        return np.zeros(grid.shape + (3,), dtype=np.int64)
    if predictor.grid == grid:
        vals = predictor.disp
    else:
        dense = densify(predictor, allow_unrepaired=True)
        vals = dense(grid.node_positions().reshape(-1, 3)).reshape(grid.shape + (3,))
    vals = np.where(np.isfinite(vals), vals, 0.0)
    return np.rint(vals).astype(np.int64)


def _node_search(ref, dfm, center, h, radius, init):
    poi = PoiSpec(center, h)
    if not poi.fits(ref.dims, margin=1):
        return None, np.nan, Status.OUT_OF_BOUNDS
    try:
        off, zn = integer_search(ref, dfm, poi, radius, init)
    except OutOfBoundsError:
        return None, np.nan, Status.OUT_OF_BOUNDS
    except DegenerateSubvolumeError:
        return None, np.nan, Status.FAILED
    return off, zn, Status.CONVERGED


def _node_refine(ref, dfm, center, h, params, offset):
    poi = PoiSpec(center, h)
    try:
        res = icgn_refine(ref, dfm, poi, WarpParams.translation(offset), params)
    except DegenerateSubvolumeError:
        return MatchResult(WarpParams.translation(offset), np.nan, 0, Status.INTEGER_ONLY)
    return res


def run_dvc(
    ref: Volume,
    dfm: Volume,
    grid: GridSpec,
    params: DvcParams,
    predictor: DisplacementField | None = None,
    threads: int = 1,
) -> DisplacementField:
    """Search-then-refine at every grid node.

    Phase 1 runs an integer search per node seeded by the (rounded) predictor,
    phase 2 refines each node with IC-GN. Nodes are independent, so the
    result does not depend on ``threads``.
    """
    h = params.subvolume_half_size
    shp = grid.shape
    pos = grid.node_positions().astype(np.int64)
    seeds = _predicted_offsets(grid, predictor)
    idx = list(np.ndindex(*shp))

    def run(fn, jobs):
        if threads <= 1:
            return [fn(*j) for j in jobs]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda j: fn(*j), jobs))

    found = run(
        lambda n: _node_search(ref, dfm, tuple(pos[n]), h, params.search_radius, tuple(seeds[n])),
        [(n,) for n in idx],
    )

    disp = np.full(shp + (3,), np.nan)
    zn = np.full(shp, np.nan)
    status = np.full(shp, int(Status.FAILED), dtype=np.int8)
    iters = np.zeros(shp, dtype=np.int32)

    todo = []
    for n, (off, z, st) in zip(idx, found):
        if off is None:
            status[n] = st
        else:
            todo.append(n)
            disp[n] = off
            zn[n] = z

    refined = run(
        lambda n: _node_refine(ref, dfm, tuple(pos[n]), h, params, tuple(disp[n])),
        [(n,) for n in todo],
    )
    for n, res in zip(todo, refined):
        disp[n] = res.warp.displacement
        iters[n] = res.iterations
        st = res.status
        if np.isfinite(res.zncc):
            zn[n] = res.zncc
        if st == Status.CONVERGED and not zn[n] >= params.zncc_accept:
            st = Status.LOW_CORRELATION
        status[n] = st

    meta = {"dvc_params": params.to_json()}
    return DisplacementField(grid, disp, zn, status, iters, meta)
