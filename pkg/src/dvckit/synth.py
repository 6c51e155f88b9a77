"""Synthetic two-component speckle volumes and closed-form deformation fields.

The tricubic resampler here is deliberately separate from
:mod:`dvckit.volume` (matrix form of the Catmull-Rom spline instead of the
weight form) so it can act as an independent check of the warping code.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import LabelVolume, Volume

# Catmull-Rom basis: value = [1, t, t^2, t^3] @ CR @ [p-1, p0, p1, p2]
_CR = 0.5 * np.array(
    [
        [0.0, 2.0, 0.0, 0.0],
        [-1.0, 0.0, 1.0, 0.0],
        [2.0, -5.0, 4.0, -1.0],
        [-1.0, 3.0, -3.0, 1.0],
    ]
)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpeckleSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    matrix_mean: float = 105.78
    matrix_std: float = 12.0
    particle_mean: float = 175.17
    particle_std: float = 12.0
    particle_radius_range: tuple[float, float] = (2.5, 5.0)
    particle_volume_fraction: float = 0.25
    smoothing_radius: float = 1.0
    edge_sigma: float = 0.0
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "particle_radius_range", tuple(self.particle_radius_range))
        if not 0.0 <= self.particle_volume_fraction < 0.6:
            raise ValueError("particle volume fraction must be in [0, 0.6)")
        lo, hi = self.particle_radius_range
        if not 0 < lo <= hi:
            raise ValueError("invalid particle radius range")
        if self.dtype == "u8":
            for m in (self.matrix_mean, self.particle_mean):
                if not 0 <= m <= 255:
                    raise ValueError("component mean outside u8 range")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SpeckleSpec":
        return cls(**d)


FIELD_KINDS = ("translation", "affine", "sinusoid", "gaussian_shear_band")


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form displacement field.

    Parameters per kind:

    * translation: ``vector``
    * affine: ``matrix`` (3x3 gradient), optional ``vector`` and ``center``
    * sinusoid: ``amplitude`` (3-vector), ``period``, ``normal``, ``phase``
    * gaussian_shear_band: ``normal``, ``slip_direction``, ``center``,
      ``width``, ``slip``; u = slip/2 * tanh(n.(x - c) / width) along the
      slip direction
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.max_gradient_norm() >= 1.0:
            raise ValueError("field is not invertible (gradient norm >= 1)")
        if self.kind == "gaussian_shear_band":
            n = _unit(self.params["normal"])
            s = _unit(self.params["slip_direction"])
            if abs(np.dot(n, s)) > 1e-9:
                raise ValueError("slip direction must be orthogonal to the band normal")
            if self.params["width"] <= 0:
                raise ValueError("band width must be positive")

    @classmethod
    def translation(cls, t) -> "AnalyticField":
        return cls("translation", {"vector": [float(v) for v in t]})

    @classmethod
    def affine(cls, matrix, vector=(0, 0, 0), center=(0, 0, 0)) -> "AnalyticField":
        return cls(
            "affine",
            {
                "matrix": np.asarray(matrix, dtype=float).tolist(),
                "vector": [float(v) for v in vector],
                "center": [float(v) for v in center],
            },
        )

    @classmethod
    def sinusoid(cls, amplitude, period, normal=(1, 0, 0), phase=0.0) -> "AnalyticField":
        return cls(
            "sinusoid",
            {
                "amplitude": [float(a) for a in amplitude],
                "period": float(period),
                "normal": [float(v) for v in normal],
                "phase": float(phase),
            },
        )

    @classmethod
    def shear_band(cls, normal, slip_direction, center, width, slip) -> "AnalyticField":
        return cls(
            "gaussian_shear_band",
            {
                "normal": [float(v) for v in normal],
                "slip_direction": [float(v) for v in slip_direction],
                "center": [float(v) for v in center],
                "width": float(width),
                "slip": float(slip),
            },
        )

    @classmethod
    def shear_band_with_peak(cls, normal, slip_direction, center, width, peak_eq_strain):
        """Band whose centre-line equivalent strain equals ``peak_eq_strain``."""
        slip = 2.0 * np.sqrt(3.0) * width * peak_eq_strain
        return cls.shear_band(normal, slip_direction, center, width, slip)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_json(cls, d: dict) -> "AnalyticField":
        return cls(d["kind"], dict(d.get("params", {})))

    def max_gradient_norm(self) -> float:
        p = self.params
        if self.kind == "translation":
            return 0.0
        if self.kind == "affine":
            return float(np.linalg.norm(np.asarray(p["matrix"], dtype=float), 2))
        if self.kind == "sinusoid":
            return float(np.linalg.norm(p["amplitude"]) * 2 * np.pi / p["period"])
        return abs(p["slip"]) / (2.0 * p["width"])

    def peak_equivalent_strain(self) -> float:
        """Closed form for the shear band; numerical maximum of nothing else."""
        if self.kind != "gaussian_shear_band":
            raise ValueError("closed-form peak strain only for shear bands")
        return abs(self.params["slip"]) / (2.0 * np.sqrt(3.0) * self.params["width"])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def evaluate_field(fld: AnalyticField, points) -> tuple[np.ndarray, np.ndarray]:
    """Displacements (N, 3) and gradients (N, 3, 3), ``grad[n, i, j] = du_i/dx_j``."""
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = fld.params
    n_pts = len(x)
    if fld.kind == "translation":
        d = np.tile(np.asarray(p["vector"], dtype=float), (n_pts, 1))
        return d, np.zeros((n_pts, 3, 3))
    if fld.kind == "affine":
        B = np.asarray(p["matrix"], dtype=float)
        t = np.asarray(p.get("vector", (0, 0, 0)), dtype=float)
        c = np.asarray(p.get("center", (0, 0, 0)), dtype=float)
        return t + (x - c) @ B.T, np.broadcast_to(B, (n_pts, 3, 3)).copy()
    if fld.kind == "sinusoid":
        a = np.asarray(p["amplitude"], dtype=float)
        n = _unit(p["normal"])
        k = 2.0 * np.pi / p["period"]
        arg = k * (x @ n) + p.get("phase", 0.0)
        d = np.sin(arg)[:, None] * a
        g = (k * np.cos(arg))[:, None, None] * np.outer(a, n)[None]
        return d, g
    n = _unit(p["normal"])
    s = _unit(p["slip_direction"])
    c = np.asarray(p["center"], dtype=float)
    w = p["width"]
    xi = (x - c) @ n / w
    d = (0.5 * p["slip"] * np.tanh(xi))[:, None] * s
    g = (0.5 * p["slip"] / w / np.cosh(xi) ** 2)[:, None, None] * np.outer(s, n)[None]
    return d, g


def lagrangian_displacement(fld: AnalyticField, points, iterations: int = 60) -> np.ndarray:
    """Displacement of material points under :func:`deform_volume`.

    ``deform_volume`` places the reference gray at X into x with
    X = x - field(x); the material displacement therefore solves
    d = field(X + d). Fixed-point iteration converges because the field's
    gradient norm is below one.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = evaluate_field(fld, X)[0]
    for _ in range(iterations):
        d_new = evaluate_field(fld, X + d)[0]
        if np.max(np.abs(d_new - d)) < 1e-13:
            return d_new
        d = d_new
    return d


def compose_fields(fields_in_order: Sequence[AnalyticField], points) -> np.ndarray:
    """Material displacement after applying ``deform_volume`` successively."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cur = X.copy()
    for f in fields_in_order:
        cur = cur + lagrangian_displacement(f, cur)
    return cur - X


# --------------------------------------------------------------------------
# Generation


def _place_spheres(spec: SpeckleSpec, rng: np.random.Generator, max_tries: int = 200_000):
    nx, ny, nz = spec.dims
    total = nx * ny * nz
    labels = np.zeros((nz, ny, nx), dtype=np.int32)
    if spec.particle_volume_fraction == 0:
        return labels, []
    zz, yy, xx = np.ogrid[:nz, :ny, :nx]
    centers = np.empty((0, 3))
    radii = np.empty(0)
    filled = 0
    r_lo, r_hi = spec.particle_radius_range
    target = spec.particle_volume_fraction * total
    for _ in range(max_tries):
        c = rng.uniform(0, 1, 3) * np.array([nx - 1, ny - 1, nz - 1])
        r = rng.uniform(r_lo, r_hi)
        if len(centers):
            dist = np.linalg.norm(centers - c, axis=1)
            if np.any(dist < radii + r):
                continue
        centers = np.vstack([centers, c])
        radii = np.append(radii, r)
        z0, z1 = max(int(c[2] - r) - 1, 0), min(int(c[2] + r) + 2, nz)
        y0, y1 = max(int(c[1] - r) - 1, 0), min(int(c[1] + r) + 2, ny)
        x0, x1 = max(int(c[0] - r) - 1, 0), min(int(c[0] + r) + 2, nx)
        inside = (
            (xx[:, :, x0:x1] - c[0]) ** 2
            + (yy[:, y0:y1, :] - c[1]) ** 2
            + (zz[z0:z1] - c[2]) ** 2
        ) <= r * r
        block = labels[z0:z1, y0:y1, x0:x1]
        filled += int(np.sum(inside & (block == 0)))
        block[inside] = 2
        if filled >= target:
            return labels, list(zip(centers.tolist(), radii.tolist()))
    raise PlacementError(
        f"could only reach volume fraction {filled / total:.3f} "
        f"of {spec.particle_volume_fraction} after {max_tries} attempts"
    )


def generate_speckle(spec: SpeckleSpec) -> tuple[Volume, LabelVolume]:
    """Spheres of component 2 in a matrix of component 1, with textured gray.

    The gray texture is Gaussian noise smoothed by ``smoothing_radius`` and
    rescaled to unit variance, so each component keeps its configured mean
    and standard deviation. ``edge_sigma`` additionally blurs the particle
    boundaries (this pulls the measured component means toward each other).
    """
    rng = np.random.default_rng(spec.seed)
    particles, _ = _place_spheres(spec, rng)
    labels = np.where(particles == 2, 2, 1).astype(np.int32)
    nz_ny_nx = labels.shape
    texture = rng.standard_normal(nz_ny_nx)
    if spec.smoothing_radius > 0:
        texture = gaussian_filter(texture, spec.smoothing_radius, mode="wrap")
        texture /= texture.std()
    is_p = labels == 2
    base = np.where(is_p, spec.particle_mean, spec.matrix_mean)
    if spec.edge_sigma > 0:
        base = gaussian_filter(base, spec.edge_sigma, mode="nearest")
    gray = base + np.where(is_p, spec.particle_std, spec.matrix_std) * texture
    return Volume.from_array(gray, spec.dtype), LabelVolume(labels)


# --------------------------------------------------------------------------
# Independent tricubic resampler


def _resample_cubic(arr: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Catmull-Rom interpolation via the polynomial matrix form.

    Points are clamped into the region with a full 4^3 neighbourhood.
    """
    nz, ny, nx = arr.shape
    pts = np.asarray(points, dtype=np.float64)
    hi = np.array([nx, ny, nz], dtype=np.float64) - 2.0
    pts = np.clip(pts, 1.0, hi)
    base = np.minimum(np.floor(pts).astype(np.int64), (hi - 1).astype(np.int64))
    t = pts - base
    # monomials (N, 3, 4) then basis (N, 3, 4) = monomials @ CR
    mono = np.stack([np.ones_like(t), t, t * t, t * t * t], axis=-1)
    basis = mono @ _CR
    out = np.zeros(len(pts))
    offs = np.arange(-1, 3)
    # gather the 4x4x4 neighbourhood, contract one axis at a time
    zi = base[:, 2, None] + offs  # (N, 4)
    yi = base[:, 1, None] + offs
    xi = base[:, 0, None] + offs
    nb = arr[zi[:, :, None, None], yi[:, None, :, None], xi[:, None, None, :]]  # (N,4,4,4)
    nb = np.einsum("nabc,nc->nab", nb, basis[:, 0])
    nb = np.einsum("nab,nb->na", nb, basis[:, 1])
    out = np.einsum("na,na->n", nb, basis[:, 2])
    return out


def resample(vol: Volume, points) -> np.ndarray:
    """Gray at (N, 3) points using the independent resampler."""
    return _resample_cubic(vol.data.astype(np.float64), np.asarray(points).reshape(-1, 3))


def _voxel_positions(shape) -> np.ndarray:
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)


def warp_labels(labels: LabelVolume, fld: AnalyticField) -> LabelVolume:
    """Nearest-neighbour labels of the deformed state."""
    shape = labels.labels.shape
    src = _voxel_positions(shape) - evaluate_field(fld, _voxel_positions(shape))[0]
    nz, ny, nx = shape
    idx = np.rint(src).astype(np.int64)
    idx = np.clip(idx, 0, np.array([nx, ny, nz]) - 1)
    return LabelVolume(labels.labels[idx[:, 2], idx[:, 1], idx[:, 0]].reshape(shape))


def deform_volume(
    vol: Volume,
    fld: AnalyticField,
    noise_std: float = 0.0,
    gray_drift: dict | None = None,
    labels: LabelVolume | None = None,
    seed: int = 0,
    chunk: int = 1 << 16,
) -> Volume:
    """out(x) = vol(x - field(x)) + drift[label] + N(0, noise_std^2).

    Drift is applied through the labels carried to the deformed state;
    sample points within one voxel of a face are clamped (edge replication).
    """
    shape = vol.shape
    pos = _voxel_positions(shape)
    arr = vol.data.astype(np.float64)
    out = np.empty(len(pos))
    for s in range(0, len(pos), chunk):
        p = pos[s : s + chunk]
        out[s : s + chunk] = _resample_cubic(arr, p - evaluate_field(fld, p)[0])
    out = out.reshape(shape)
    if gray_drift:
        if labels is None:
            raise ValueError("gray drift needs component labels")
        moved = warp_labels(labels, fld).labels
        for k, off in gray_drift.items():
            out[moved == int(k)] += off
    if noise_std > 0:
        out += np.random.default_rng(seed).normal(0.0, noise_std, shape)
    return Volume.from_array(out, "f32")


def fixture_metadata(spec: SpeckleSpec, fld: AnalyticField | None = None, **extra) -> dict:
    meta = {"speckle_spec": spec.to_json()}
    if fld is not None:
        meta["analytic_field"] = fld.to_json()
    meta.update(extra)
    return json.loads(json.dumps(meta))


def add_noise(vol: Volume, noise_std: float, seed: int = 0) -> Volume:
    """Volume plus i.i.d. Gaussian gray noise (f32)."""
    out = vol.data.astype(np.float64)
    if noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_std, vol.shape)
    return Volume.from_array(out, "f32")


# --------------------------------------------------------------------------
# Fixture descriptions


@dataclass(frozen=True)
class StateSpec:
    """One deformed state, generated directly from the clean reference."""

    field: AnalyticField
    noise_std: float = 0.0
    gray_drift: dict | None = None
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "field": self.field.to_json(),
            "noise_std": self.noise_std,
            "gray_drift": self.gray_drift,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StateSpec":
        drift = d.get("gray_drift")
        if drift is not None:
            drift = {str(k): float(v) for k, v in drift.items()}
        return cls(
            AnalyticField.from_json(d["field"]),
            float(d.get("noise_std", 0.0)),
            drift,
            int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class FixtureSpec:
    """A reproducible synthetic experiment.

    The reference is the generated speckle plus optional noise; every state
    is the clean speckle deformed by its own analytic field, so the truth of
    state k is simply the Lagrangian displacement of ``states[k].field``.
    ``truth_step``/``truth_margin`` define the node grid the truth is
    sampled on. ``corruption`` (fraction, offset, seed) describes a
    deliberately damaged copy of the last truth field.
    """

    speckle: SpeckleSpec
    states: tuple[StateSpec, ...]
    reference_noise_std: float = 0.0
    reference_seed: int = 0
    truth_step: int = 8
    truth_margin: int = 16
    corruption: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if not self.states:
            raise ValueError("a fixture needs at least one deformed state")

    def to_json(self) -> dict:
        return {
            "speckle": self.speckle.to_json(),
            "reference_noise_std": self.reference_noise_std,
            "reference_seed": self.reference_seed,
            "states": [s.to_json() for s in self.states],
            "truth_step": self.truth_step,
            "truth_margin": self.truth_margin,
            "corruption": self.corruption,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FixtureSpec":
        known = {"speckle", "reference_noise_std", "reference_seed", "states",
                 "truth_step", "truth_margin", "corruption"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fixture keys: {sorted(unknown)}")
        return cls(
            SpeckleSpec.from_json(d.get("speckle", {})),
            tuple(StateSpec.from_json(s) for s in d["states"]),
            float(d.get("reference_noise_std", 0.0)),
            int(d.get("reference_seed", 0)),
            int(d.get("truth_step", 8)),
            int(d.get("truth_margin", 16)),
            d.get("corruption"),
        )

    @classmethod
    def load(cls, path) -> "FixtureSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class Fixture:
    spec: FixtureSpec
    reference: Volume
    labels: LabelVolume
    states: list[Volume]

    def truth_grid(self):
        from .field import GridSpec

        return GridSpec.covering(self.reference.dims, self.spec.truth_step, self.spec.truth_margin)

    def truth(self, k: int = -1, grid=None):
        """Node-sampled truth displacement of state ``k``."""
        from .field import DisplacementField

        grid = self.truth_grid() if grid is None else grid
        fld = self.spec.states[k].field
        out = DisplacementField.from_function(grid, lambda x: lagrangian_displacement(fld, x))
        return out.with_values(meta={"analytic_field": fld.to_json()})

    def corrupted(self, grid=None):
        """Last-state truth with ``offset`` added to a random node subset."""
        if not self.spec.corruption:
            raise ValueError("fixture has no corruption settings")
        c = self.spec.corruption
        truth = self.truth(-1, grid)
        rng = np.random.default_rng(int(c.get("seed", 0)))
        bad = rng.random(truth.grid.shape) < float(c["fraction"])
        disp = np.array(truth.disp)
        disp[bad] += float(c["offset"])
        return truth.with_values(disp=disp, meta={**truth.meta, "corrupted_nodes": int(bad.sum())})


def build_fixture(spec: FixtureSpec) -> Fixture:
    clean, labels = generate_speckle(spec.speckle)
    ref = add_noise(clean, spec.reference_noise_std, spec.reference_seed)
    states = [
        deform_volume(clean, s.field, s.noise_std, s.gray_drift,
                      labels if s.gray_drift else None, s.seed)
        for s in spec.states
    ]
    return Fixture(spec, ref, labels, states)
