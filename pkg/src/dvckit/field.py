"""Displacement and strain fields on a regular grid of points of interest.

Node arrays are indexed ``[iz, iy, ix]`` like volumes; displacement vectors
are stored as (u, v, w) along (x, y, z) in the last axis.
"""

from __future__ import annotations

import csv
import enum
import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline


class Status(enum.IntEnum):
    """Per-node outcome; larger values are weaker."""

    CONVERGED = 0
    REPAIRED = 1
    INTEGER_ONLY = 2
    LOW_CORRELATION = 3
    DIVERGED = 4
    OUT_OF_BOUNDS = 5
    FAILED = 6

    @property
    def label(self) -> str:
        return _STATUS_NAMES[self]

    @classmethod
    def from_label(cls, text: str) -> "Status":
        return _STATUS_BY_NAME[text]


_STATUS_NAMES = {
    Status.CONVERGED: "Converged",
    Status.REPAIRED: "Repaired",
    Status.INTEGER_ONLY: "IntegerOnly",
    Status.LOW_CORRELATION: "LowCorrelation",
    Status.DIVERGED: "Diverged",
    Status.OUT_OF_BOUNDS: "OutOfBounds",
    Status.FAILED: "Failed",
}
_STATUS_BY_NAME = {v: k for k, v in _STATUS_NAMES.items()}

# statuses whose displacement is never trusted by the outlier test
UNTRUSTED = (
    Status.INTEGER_ONLY,
    Status.LOW_CORRELATION,
    Status.DIVERGED,
    Status.OUT_OF_BOUNDS,
    Status.FAILED,
)


class UnrecoverableFieldError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[int, int, int]
    step: int
    counts: tuple[int, int, int]

    def __post_init__(self):
        if self.step < 1:
            raise ValueError("grid step must be >= 1")
        if min(self.counts) < 1:
            raise ValueError("grid needs at least one node per axis")
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @classmethod
    def covering(cls, dims, step: int, margin: int) -> "GridSpec":
        """Largest grid with the given step whose nodes keep ``margin`` voxels
        from every face; nodes are centred in the volume."""
        origin, counts = [], []
        for n in dims:
            span = n - 1 - 2 * margin
            if span < 0:
                raise ValueError(f"volume too small for margin {margin}")
            c = span // step + 1
            origin.append(margin + (span - (c - 1) * step) // 2)
            counts.append(c)
        return cls(tuple(origin), step, tuple(counts))

    @property
    def shape(self) -> tuple[int, int, int]:
        gx, gy, gz = self.counts
        return (gz, gy, gx)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.step * np.arange(self.counts[axis], dtype=np.float64)

    def node_positions(self) -> np.ndarray:
        """(gz, gy, gx, 3) array of node (x, y, z) voxel positions."""
        zz, yy, xx = np.meshgrid(
            self.axis_coords(2), self.axis_coords(1), self.axis_coords(0), indexing="ij"
        )
        return np.stack([xx, yy, zz], axis=-1)

    def fits(self, dims, margin: int = 0) -> bool:
        for a in range(3):
            lo = self.origin[a]
            hi = self.origin[a] + (self.counts[a] - 1) * self.step
            if lo < margin or hi > dims[a] - 1 - margin:
                return False
        return True

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "step": self.step, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), int(d["step"]), tuple(d["counts"]))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    grid: GridSpec
    disp: np.ndarray  # (gz, gy, gx, 3)
    zncc: np.ndarray  # (gz, gy, gx)
    status: np.ndarray  # (gz, gy, gx) of Status codes
    iterations: np.ndarray  # (gz, gy, gx)
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        shp = self.grid.shape
        disp = np.array(self.disp, dtype=np.float64)
        if disp.shape != shp + (3,):
            raise ValueError(f"displacement array {disp.shape} does not match grid {shp}")
        zn = np.array(self.zncc, dtype=np.float64).reshape(shp)
        st = np.array(self.status, dtype=np.int8).reshape(shp)
        it = np.array(self.iterations, dtype=np.int32).reshape(shp)
        good = (st == Status.CONVERGED) | (st == Status.REPAIRED)
        if not np.all(np.isfinite(disp[good])):
            raise ValueError("converged or repaired nodes must have finite displacement")
        for a in (disp, zn, st, it):
            a.setflags(write=False)
        object.__setattr__(self, "disp", disp)
        object.__setattr__(self, "zncc", zn)
        object.__setattr__(self, "status", st)
        object.__setattr__(self, "iterations", it)

    @classmethod
    def uniform(cls, grid: GridSpec, vec=(0.0, 0.0, 0.0), zncc: float = 1.0) -> "DisplacementField":
        disp = np.broadcast_to(np.asarray(vec, dtype=np.float64), grid.shape + (3,))
        return cls(
            grid,
            disp,
            np.full(grid.shape, zncc),
            np.full(grid.shape, Status.CONVERGED),
            np.zeros(grid.shape),
        )

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "DisplacementField":
        """Sample ``fn`` ((N, 3) positions -> (N, 3) displacements) at the nodes."""
        pos = grid.node_positions().reshape(-1, 3)
        disp = np.asarray(fn(pos), dtype=np.float64).reshape(grid.shape + (3,))
        return cls(
            grid, disp, np.ones(grid.shape), np.zeros(grid.shape, np.int8), np.zeros(grid.shape)
        )

    def with_values(self, disp=None, status=None, zncc=None, iterations=None, meta=None):
        return DisplacementField(
            self.grid,
            self.disp if disp is None else disp,
            self.zncc if zncc is None else zncc,
            self.status if status is None else status,
            self.iterations if iterations is None else iterations,
            dict(self.meta) if meta is None else meta,
        )

    def status_counts(self) -> dict[str, int]:
        return {s.label: int(np.sum(self.status == s)) for s in Status}

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.disp, axis=-1)


@dataclass(frozen=True, eq=False)
class StrainField:
    grid: GridSpec
    components: np.ndarray  # (gz, gy, gx, 6): ex, ey, ez, exy, eyz, ezx
    equivalent: np.ndarray  # (gz, gy, gx)

    def __post_init__(self):
        comps = np.array(self.components, dtype=np.float64)
        eq = np.array(self.equivalent, dtype=np.float64)
        if comps.shape != self.grid.shape + (6,) or eq.shape != self.grid.shape:
            raise ValueError("strain arrays do not match grid")
        for a in (comps, eq):
            a.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "equivalent", eq)


# --------------------------------------------------------------------------
# Outlier detection and repair
#
# The classic normalized-median test compares a node with the median of its
# neighbours. On a smooth field sampled a few nodes per wavelength that median
# is biased by the local curvature (and, on a clipped boundary neighbourhood,
# by the gradient), so extrema and faces of perfectly smooth fields get
# flagged. The default test keeps the same normalization but replaces the
# neighbour values by predictions of the centre that are exact for quadratic
# fields, each built from five nodes of the 26-neighbourhood:
#
#     P = (d(e) + d(-e)) / 2 - [(d(f + e) + d(f - e)) / 2 - d(f)]
#
# i.e. the midpoint along direction e, corrected by the second difference
# along e measured on the parallel line through f. Where fewer than
# ``_MIN_LINE`` such stencils exist (grid edges and corners), parallelogram
# predictions d(a) + d(b) - d(a + b) over axis-disjoint a, b are added; they
# are exact for linear fields and for curvature without cross terms.

_MIN_LINE = 3


def _neighbour_offsets():
    return [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) != (0, 0, 0)
    ]


def _in_cube(o) -> bool:
    return any(o) and all(-1 <= c <= 1 for c in o)


def _line_stencils():
    out, seen = [], set()
    for e in _neighbour_offsets():
        ne = tuple(-c for c in e)
        if ne in seen:
            continue
        seen.add(e)
        for f in _neighbour_offsets():
            fp = tuple(a + b for a, b in zip(f, e))
            fm = tuple(a - b for a, b in zip(f, e))
            if f in (e, ne) or not (_in_cube(fp) and _in_cube(fm)):
                continue
            out.append(((e, 0.5), (ne, 0.5), (fp, -0.5), (fm, -0.5), (f, 1.0)))
    return out


def _parallelogram_stencils():
    out = []
    offs = _neighbour_offsets()
    for i, a in enumerate(offs):
        for b in offs[i + 1 :]:
            s = tuple(x + y for x, y in zip(a, b))
            if not any(x * y for x, y in zip(a, b)) and _in_cube(s):
                out.append(((a, 1.0), (b, 1.0), (s, -1.0)))
    return out


_LINE = _line_stencils()
_PARALLELOGRAM = _parallelogram_stencils()


def _neighbour_stack(arr: np.ndarray, fill=np.nan) -> np.ndarray:
    """(26, gz, gy, gx, ...) array of the 26 neighbours, ``fill`` off-grid."""
    pad = [(1, 1)] * 3 + [(0, 0)] * (arr.ndim - 3)
    padded = np.pad(arr.astype(np.float64), pad, constant_values=fill)
    gz, gy, gx = arr.shape[:3]
    return np.stack(
        [
            padded[1 + dz : 1 + dz + gz, 1 + dy : 1 + dy + gy, 1 + dx : 1 + dx + gx]
            for dz, dy, dx in _neighbour_offsets()
        ]
    )


def _stencil_stack(disp: np.ndarray, stencils) -> np.ndarray:
    """(K, gz, gy, gx, 3) centre predictions; NaN where a stencil node is missing."""
    gz, gy, gx = disp.shape[:3]
    pad = np.pad(disp, [(1, 1)] * 3 + [(0, 0)], constant_values=np.nan)

    def at(o):
        dz, dy, dx = o
        return pad[1 + dz : 1 + dz + gz, 1 + dy : 1 + dy + gy, 1 + dx : 1 + dx + gx]

    return np.stack([sum(w * at(o) for o, w in st) for st in stencils])


def _predictions(disp: np.ndarray, method: str) -> np.ndarray:
    if method == "median":
        return _neighbour_stack(disp)
    if method != "quadratic":
        raise ValueError(f"unknown outlier method {method!r}")
    line = _stencil_stack(disp, _LINE)
    sparse = np.isfinite(line[..., 0]).sum(axis=0) < _MIN_LINE
    extra = _stencil_stack(disp, _PARALLELOGRAM)
    return np.concatenate([line, np.where(sparse[None, ..., None], extra, np.nan)])


def _median_and_spread(pred: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN neighbourhoods
        med = np.nanmedian(pred, axis=0)
        spread = np.nanmedian(np.abs(pred - med[None]), axis=0)
    return med, spread


def _untrusted(field: DisplacementField) -> np.ndarray:
    bad = np.isin(field.status, [int(s) for s in UNTRUSTED])
    return bad | ~np.all(np.isfinite(field.disp), axis=-1)


def detect_outliers(
    field: DisplacementField,
    eps0: float = 0.1,
    thresh: float = 2.0,
    method: str = "quadratic",
    max_rounds: int = 4,
) -> np.ndarray:
    """Normalized-median outlier test over the 26-neighbourhood, per component.

    A node is flagged when any component satisfies
    ``|d - m| / (s + eps0) > thresh``, where ``m`` is the median of the
    neighbourhood's predictions of the node and ``s`` the median absolute
    deviation of those predictions from ``m``. With ``method="median"`` the
    predictions are the neighbour values themselves (the classic test);
    ``"quadratic"`` uses curvature-corrected five-node stencils so smooth
    fields are not flagged at extrema or on the grid faces.

    The test is repeated with already flagged nodes removed from every
    neighbourhood until the flags stop changing, so a cluster of outliers
    does not drag its good neighbours along. Nodes with an untrusted status
    or a non-finite displacement are always flagged.

    Returns
    -------
    numpy.ndarray
        Boolean array of grid shape.
    """
    untrusted = _untrusted(field)
    flags = untrusted.copy()
    for _ in range(max_rounds):
        masked = np.where(flags[..., None], np.nan, field.disp)
        med, spread = _median_and_spread(_predictions(masked, method))
        has_pred = np.all(np.isfinite(med), axis=-1)
        with np.errstate(invalid="ignore"):
            norm = np.abs(field.disp - med) / (spread + eps0)
        bad = np.any(norm > thresh, axis=-1) & has_pred
        # nodes left without any prediction keep their previous verdict
        new = untrusted | bad | (flags & ~has_pred)
        if np.array_equal(new, flags):
            break
        flags = new
    return flags


def repair_field(
    field: DisplacementField, flags: np.ndarray, method: str = "quadratic"
) -> DisplacementField:
    """Replace flagged nodes by the median prediction from unflagged nodes.

    Repair proceeds in breadth-first layers: each layer is the set of flagged
    nodes that touch a valid node, and is filled from the valid nodes only,
    after which it counts as valid for the next layer. A node takes the
    median of the predictions used by :func:`detect_outliers` for the same
    ``method``; when no prediction is available it falls back to the median of
    its valid neighbours. Repaired nodes get status ``Repaired``.
    """
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return field
    if flags.all():
        raise UnrecoverableFieldError("every node is flagged; nothing to repair from")
    disp = np.array(field.disp, dtype=np.float64)
    disp[flags] = np.nan
    status = np.array(field.status)
    pending = flags.copy()
    while pending.any():
        valid_nb = np.isfinite(_neighbour_stack(disp)[..., 0]).any(axis=0)
        layer = pending & valid_nb
        if not layer.any():
            raise UnrecoverableFieldError("flagged region is disconnected from valid nodes")
        pred, _ = _median_and_spread(_predictions(disp, method))
        near, _ = _median_and_spread(_neighbour_stack(disp))
        fill = np.where(np.all(np.isfinite(pred), axis=-1)[..., None], pred, near)
        disp[layer] = fill[layer]
        status[layer] = Status.REPAIRED
        pending &= ~layer
    return field.with_values(disp=disp, status=status)


# --------------------------------------------------------------------------
# Dense interpolation


class DenseField:
    """Tensor-product cubic-spline interpolant of a vector or scalar grid.

    Each axis uses a not-a-knot cubic spline through the node values.
    Queries outside the node extent are clamped to it, so values beyond the
    last node are constant along that axis.
    """

    chunk = 65536

    def __init__(self, grid: GridSpec, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if min(grid.counts) < 4:
            raise ValueError("cubic densification needs at least 4 nodes per axis")
        if not np.all(np.isfinite(values)):
            raise ValueError("cannot densify non-finite node values")
        self.grid = grid
        self._scalar = values.ndim == 3
        self._values = values[..., None] if self._scalar else values
        self._lo = np.array([grid.axis_coords(a)[0] for a in range(3)])
        self._hi = np.array([grid.axis_coords(a)[-1] for a in range(3)])
        # B-spline coefficients, one interpolation solve per axis
        coef = self._values
        self._knots = []
        for axis, array_axis in ((0, 2), (1, 1), (2, 0)):
            spl = make_interp_spline(grid.axis_coords(axis), coef, k=3, axis=array_axis)
            coef = np.moveaxis(spl.c, 0, array_axis)
            self._knots.append(spl.t)
        self._coef = coef  # (nz, ny, nx, C)

    def _basis(self, axis: int, x: np.ndarray) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=np.float64), self._lo[axis], self._hi[axis])
        return BSpline.design_matrix(x, self._knots[axis], 3).toarray()

    def lattice(self, xs, ys, zs) -> np.ndarray:
        """Evaluate on the tensor lattice ``zs x ys x xs``: (nz, ny, nx[, C])."""
        bx, by, bz = self._basis(0, xs), self._basis(1, ys), self._basis(2, zs)
        out = np.einsum("kjic,xi->kjxc", self._coef, bx)
        out = np.einsum("kjxc,yj->kyxc", out, by)
        out = np.einsum("kyxc,zk->zyxc", out, bz)
        return out[..., 0] if self._scalar else out

    def full(self, dims) -> np.ndarray:
        nx, ny, nz = dims
        return self.lattice(np.arange(nx), np.arange(ny), np.arange(nz))

    def _local_basis(self, axis: int, x: np.ndarray):
        """Indices (N, 4) and values (N, 4) of the non-zero basis functions."""
        x = np.clip(x, self._lo[axis], self._hi[axis])
        m = BSpline.design_matrix(x, self._knots[axis], 3)
        return m.indices.reshape(-1, 4), m.data.reshape(-1, 4)

    def __call__(self, points) -> np.ndarray:
        """Values at arbitrary (N, 3) points."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 3)
        out = np.zeros((len(pts), self._coef.shape[-1]))
        for s in range(0, len(pts), self.chunk):
            p = pts[s : s + self.chunk]
            ix, wx = self._local_basis(0, p[:, 0])
            iy, wy = self._local_basis(1, p[:, 1])
            iz, wz = self._local_basis(2, p[:, 2])
            acc = out[s : s + self.chunk]
            for a in range(4):
                for b in range(4):
                    wab = (wz[:, a] * wy[:, b])[:, None]
                    for c in range(4):
                        acc += (wab * wx[:, c, None]) * self._coef[iz[:, a], iy[:, b], ix[:, c]]
        if self._scalar:
            out = out[:, 0]
        return out[0] if single else out


def densify(field: DisplacementField, allow_unrepaired: bool = False) -> DenseField:
    if not allow_unrepaired:
        ok = np.isin(field.status, [int(Status.CONVERGED), int(Status.REPAIRED)])
        if not ok.all():
            raise ValueError("densify needs a repaired field (all nodes Converged or Repaired)")
    return DenseField(field.grid, field.disp)


def densify_scalar(grid: GridSpec, values: np.ndarray) -> DenseField:
    return DenseField(grid, values)


# --------------------------------------------------------------------------
# Composition


def compose(total: DisplacementField, increment: DisplacementField) -> DisplacementField:
    """D'(x) = D(x) + dD(x + D(x)) with dD densified from ``increment``."""
    if total.grid != increment.grid:
        raise ValueError("compose needs fields on the same grid")
    dense = densify(increment, allow_unrepaired=True)
    pos = total.grid.node_positions().reshape(-1, 3)
    d = total.disp.reshape(-1, 3)
    out = np.full_like(d, np.nan)
    ok = np.all(np.isfinite(d), axis=1)
    out[ok] = d[ok] + dense(pos[ok] + d[ok])
    status = np.maximum(total.status, increment.status)
    zncc = np.minimum(total.zncc, increment.zncc)
    return total.with_values(
        disp=out.reshape(total.disp.shape),
        status=status,
        zncc=zncc,
        iterations=increment.iterations,
    )


def accumulate(increments) -> DisplacementField:
    increments = list(increments)
    if not increments:
        raise ValueError("accumulate needs at least one field")
    total = increments[0]
    for inc in increments[1:]:
        total = compose(total, inc)
    return total


# --------------------------------------------------------------------------
# Strain


def equivalent_strain(e) -> float | np.ndarray:
    """Octahedral equivalent strain from (ex, ey, ez, exy, eyz, ezx)."""
    e = np.asarray(e, dtype=np.float64)
    ex, ey, ez, exy, eyz, ezx = np.moveaxis(e, -1, 0)
    val = np.sqrt(
        2.0
        / 9.0
        * ((ex - ey) ** 2 + (ey - ez) ** 2 + (ez - ex) ** 2 + 6.0 * (exy**2 + eyz**2 + ezx**2))
    )
    return float(val) if val.ndim == 0 else val


def strain_from_gradient(B: np.ndarray) -> np.ndarray:
    """Small-strain components from displacement gradients ``B[..., i, j] = du_i/dx_j``."""
    return np.stack(
        [
            B[..., 0, 0],
            B[..., 1, 1],
            B[..., 2, 2],
            0.5 * (B[..., 0, 1] + B[..., 1, 0]),
            0.5 * (B[..., 1, 2] + B[..., 2, 1]),
            0.5 * (B[..., 2, 0] + B[..., 0, 2]),
        ],
        axis=-1,
    )


def strain_from_field(field: DisplacementField, window: int = 1) -> StrainField:
    """Windowed least-squares displacement gradient and small strain."""
    if window < 1:
        raise ValueError("strain window must be >= 1")
    if not np.all(np.isfinite(field.disp)) or np.any(field.status == Status.FAILED):
        raise ValueError("strain needs a repaired field without failed nodes")
    grid = field.grid
    shp = grid.shape
    pos = grid.node_positions()
    grads = np.empty(shp + (3, 3))
    for iz in range(shp[0]):
        zs = slice(max(iz - window, 0), min(iz + window + 1, shp[0]))
        for iy in range(shp[1]):
            ys = slice(max(iy - window, 0), min(iy + window + 1, shp[1]))
            for ix in range(shp[2]):
                xs = slice(max(ix - window, 0), min(ix + window + 1, shp[2]))
                p = pos[zs, ys, xs].reshape(-1, 3) - pos[iz, iy, ix]
                d = field.disp[zs, ys, xs].reshape(-1, 3)
                A = np.column_stack([np.ones(len(p)), p])
                if np.linalg.matrix_rank(A) < 4:
                    raise ValueError(
                        "degenerate strain neighbourhood; grid needs >= 2 nodes per axis"
                    )
                coef, *_ = np.linalg.lstsq(A, d, rcond=None)
                grads[iz, iy, ix] = coef[1:].T
    comps = strain_from_gradient(grads)
    return StrainField(grid, comps, equivalent_strain(comps))


# --------------------------------------------------------------------------
# File formats

FIELD_COLUMNS = ["ix", "iy", "iz", "x", "y", "z", "u", "v", "w", "zncc", "status", "iters"]
STRAIN_COLUMNS = ["ix", "iy", "iz", "ex", "ey", "ez", "exy", "eyz", "ezx", "eeq"]


def _fmt(v: float) -> str:
    return repr(float(v))


def save_field(field: DisplacementField, path, meta: dict | None = None) -> None:
    """CSV of nodes plus ``<path>.json`` with the grid and metadata."""
    path = Path(path)
    pos = field.grid.node_positions()
    gz, gy, gx = field.grid.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_COLUMNS)
        for iz in range(gz):
            for iy in range(gy):
                for ix in range(gx):
                    x, y, z = pos[iz, iy, ix]
                    u, v, ww = field.disp[iz, iy, ix]
                    w.writerow(
                        [ix, iy, iz, int(x), int(y), int(z), _fmt(u), _fmt(v), _fmt(ww),
                         _fmt(field.zncc[iz, iy, ix]),
                         Status(int(field.status[iz, iy, ix])).label,
                         int(field.iterations[iz, iy, ix])]
                    )
    sidecar = {"grid": field.grid.to_json(), "status_counts": field.status_counts()}
    sidecar.update(field.meta)
    if meta:
        sidecar.update(meta)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_field(path) -> DisplacementField:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    grid = GridSpec.from_json(side["grid"])
    shp = grid.shape
    disp = np.full(shp + (3,), np.nan)
    zncc = np.full(shp, np.nan)
    status = np.full(shp, int(Status.FAILED), dtype=np.int8)
    iters = np.zeros(shp, dtype=np.int32)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELD_COLUMNS:
            raise ValueError(f"unexpected field CSV header {reader.fieldnames}")
        for row in reader:
            idx = (int(row["iz"]), int(row["iy"]), int(row["ix"]))
            disp[idx] = [float(row["u"]), float(row["v"]), float(row["w"])]
            zncc[idx] = float(row["zncc"])
            status[idx] = Status.from_label(row["status"])
            iters[idx] = int(row["iters"])
    meta = {k: v for k, v in side.items() if k not in ("grid", "status_counts")}
    return DisplacementField(grid, disp, zncc, status, iters, meta)


def save_strain(strain: StrainField, path) -> None:
    gz, gy, gx = strain.grid.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STRAIN_COLUMNS)
        for iz in range(gz):
            for iy in range(gy):
                for ix in range(gx):
                    c = strain.components[iz, iy, ix]
                    w.writerow([ix, iy, iz] + [_fmt(v) for v in c]
                               + [_fmt(strain.equivalent[iz, iy, ix])])
    Path(str(path) + ".json").write_text(json.dumps({"grid": strain.grid.to_json()}, indent=2))


def save_vtk(field: DisplacementField, strain: StrainField | None, path) -> None:
    """Legacy VTK structured-points file with |D| and, if given, equivalent strain."""
    g = field.grid
    gx, gy, gz = g.counts
    lines = [
        "# vtk DataFile Version 3.0",
        "dvckit displacement field",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {gx} {gy} {gz}",
        f"ORIGIN {g.origin[0]} {g.origin[1]} {g.origin[2]}",
        f"SPACING {g.step} {g.step} {g.step}",
        f"POINT_DATA {g.n_nodes}",
        "SCALARS displacement_magnitude double 1",
        "LOOKUP_TABLE default",
    ]
    lines += [_fmt(v) for v in np.nan_to_num(field.magnitude()).ravel()]
    if strain is not None:
        lines += ["SCALARS equivalent_strain double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(v) for v in strain.equivalent.ravel()]
    Path(path).write_text("\n".join(lines) + "\n")
