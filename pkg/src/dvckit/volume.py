"""Volume images: raw I/O, continuous sampling, gradients, histograms and
multi-threshold segmentation.

Arrays are stored C-ordered as ``data[z, y, x]`` so that the x index runs
fastest in memory (and on disk). Every public function that takes a point
uses ``(x, y, z)`` ordering.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2"), "f32": np.dtype("<f4")}


class DomainError(ValueError):
    """A sample or gradient was requested outside the valid region."""


class VolumeFormatError(ValueError):
    """Header or payload of a volume file is missing or inconsistent."""


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray  # shape (nz, ny, nx)
    dtype: str = "f32"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise VolumeFormatError(f"unsupported dtype {self.dtype!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got shape {arr.shape}")
        if self.dtype != "f32" and arr.dtype != DTYPES[self.dtype]:
            info = np.iinfo(DTYPES[self.dtype])
            if arr.size and (arr.min() < info.min or arr.max() > info.max):
                raise ValueError(f"gray values outside {self.dtype} range")
        arr = np.ascontiguousarray(arr, dtype=DTYPES[self.dtype].newbyteorder("="))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @classmethod
    def from_array(cls, arr, dtype: str = "f32", spacing=(1.0, 1.0, 1.0)) -> "Volume":
        """Wrap a ``[z, y, x]`` array, rounding and clipping for integer dtypes."""
        arr = np.asarray(arr)
        if dtype != "f32":
            info = np.iinfo(DTYPES[dtype])
            arr = np.clip(np.rint(arr), info.min, info.max)
        return cls(arr, dtype, spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelVolume:
    labels: np.ndarray  # shape (nz, ny, nx), 0 = excluded

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.int32)
        if arr.ndim != 3:
            raise ValueError("label volume must be 3D")
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)

    @property
    def n_components(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0


@dataclass(frozen=True)
class GrayInterval:
    lo: float
    hi: float
    label: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"empty gray interval [{self.lo}, {self.hi})")
        if self.label < 1:
            raise ValueError("component labels start at 1")

    @classmethod
    def parse(cls, text: str, label: int) -> "GrayInterval":
        """Parse ``"50-150"`` or ``"50:150"`` into an interval."""
        sep = ":" if ":" in text else "-"
        lo, hi = text.split(sep)
        return cls(float(lo), float(hi), label)


# --------------------------------------------------------------------------
# I/O


def _header_path(path) -> Path:
    return Path(str(path) + ".json")


def load_volume(path, mmap: bool = False) -> Volume:
    """Read a volume; ``mmap`` maps the payload read-only instead of loading it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume file: {path}")
    hdr_path = _header_path(path)
    try:
        header = json.loads(hdr_path.read_text())
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing header {hdr_path}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"corrupt header {hdr_path}: {exc}") from exc
    try:
        nx, ny, nz = (int(d) for d in header["dims"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"header {hdr_path} lacks dims/dtype") from exc
    if dtype not in DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError("all dims must be >= 1")
    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    expected = nx * ny * nz * DTYPES[dtype].itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise VolumeFormatError(
            f"payload size mismatch: header implies {expected} bytes, file has {actual}"
        )
    if mmap:
        raw = np.memmap(path, dtype=DTYPES[dtype], mode="r", shape=(nz, ny, nx))
        return Volume(raw, dtype, spacing)
    raw = np.fromfile(path, dtype=DTYPES[dtype])
    return Volume(raw.reshape(nz, ny, nx), dtype, spacing)


def save_volume(vol: Volume, path, extra: dict | None = None) -> None:
    """Write ``<path>`` (raw little-endian payload) and ``<path>.json``.

    ``extra`` entries are merged into the header, e.g. a generator spec.
    """
    if vol.dtype == "f32" and not np.all(np.isfinite(vol.data)):
        raise ValueError("refusing to save non-finite gray values")
    path = Path(path)
    header = {"dims": list(vol.dims), "dtype": vol.dtype, "spacing": list(vol.spacing)}
    if extra:
        header.update(extra)
    vol.data.astype(DTYPES[vol.dtype], copy=False).tofile(path)
    _header_path(path).write_text(json.dumps(header, indent=2))


def save_labels(labels: LabelVolume, path) -> None:
    """Labels are stored as a u8 volume (u16 beyond 255 components)."""
    dtype = "u8" if labels.n_components < 256 else "u16"
    save_volume(Volume(labels.labels, dtype), path, extra={"kind": "labels"})


def load_labels(path) -> LabelVolume:
    return LabelVolume(load_volume(path).data)


# --------------------------------------------------------------------------
# Sampling


def catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom kernel weights for taps at offsets -1, 0, 1, 2."""
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        axis=-1,
    )


def _split(coord: np.ndarray, lo: int, hi: int):
    """Integer base index clipped to [lo, hi] and the fractional remainder."""
    base = np.clip(np.floor(coord).astype(np.int64), lo, hi)
    return base, coord - base


def in_domain(shape, points: np.ndarray, mode: str = "tricubic") -> np.ndarray:
    """Boolean mask of ``points`` (N, 3) that can be sampled in ``mode``."""
    margin = 1 if mode == "tricubic" else 0
    nz, ny, nx = shape
    hi = np.array([nx, ny, nz], dtype=np.float64) - 1 - margin
    pts = np.asarray(points, dtype=np.float64)
    return np.all((pts >= margin) & (pts <= hi), axis=-1)


def sample_array(arr: np.ndarray, points: np.ndarray, mode: str = "tricubic") -> np.ndarray:
    """Interpolate a ``[z, y, x]`` array at ``points`` (N, 3) in (x, y, z).

    No bounds check; callers validate with :func:`in_domain`.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nz, ny, nx = arr.shape
    if mode == "trilinear":
        ix, tx = _split(pts[:, 0], 0, max(nx - 2, 0))
        iy, ty = _split(pts[:, 1], 0, max(ny - 2, 0))
        iz, tz = _split(pts[:, 2], 0, max(nz - 2, 0))
        out = np.zeros(len(pts))
        for dz, wz in ((0, 1 - tz), (1, tz)):
            zz = np.minimum(iz + dz, nz - 1)
            for dy, wy in ((0, 1 - ty), (1, ty)):
                yy = np.minimum(iy + dy, ny - 1)
                for dx, wx in ((0, 1 - tx), (1, tx)):
                    xx = np.minimum(ix + dx, nx - 1)
                    out += wz * wy * wx * arr[zz, yy, xx]
        return out
    if mode != "tricubic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    ix, tx = _split(pts[:, 0], 1, nx - 3)
    iy, ty = _split(pts[:, 1], 1, ny - 3)
    iz, tz = _split(pts[:, 2], 1, nz - 3)
    wx, wy, wz = catmull_rom_weights(tx), catmull_rom_weights(ty), catmull_rom_weights(tz)
    # one gather of the 4x4x4 neighbourhood through flat indices
    k = np.arange(-1, 3)
    offs = (k[:, None, None] * (ny * nx) + k[None, :, None] * nx + k[None, None, :]).ravel()
    base = (iz * ny + iy) * nx + ix
    flat = np.ascontiguousarray(arr).reshape(-1)
    vals = flat[base[:, None] + offs].reshape(-1, 4, 4, 4).astype(np.float64, copy=False)
    return np.einsum("nabc,na,nb,nc->n", vals, wz, wy, wx, optimize=True)


def sample(vol: Volume, point, mode: str = "tricubic"):
    """Gray value at a continuous (x, y, z) point, or an (N, 3) array of them."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    if not np.all(in_domain(vol.shape, pts, mode)):
        raise DomainError(f"point outside the {mode} sampling domain")
    vals = sample_array(vol.data, pts, mode)
    return float(vals[0]) if single else vals


def gradient(vol: Volume, point) -> tuple[float, float, float]:
    """Central-difference gray gradient at an integer voxel."""
    x, y, z = (int(c) for c in point)
    nx, ny, nz = vol.dims
    if not (1 <= x <= nx - 2 and 1 <= y <= ny - 2 and 1 <= z <= nz - 2):
        raise DomainError(f"gradient needs a 1-voxel margin, got {(x, y, z)}")
    g = vol.data
    gx = (float(g[z, y, x + 1]) - float(g[z, y, x - 1])) / 2.0
    gy = (float(g[z, y + 1, x]) - float(g[z, y - 1, x])) / 2.0
    gz = (float(g[z + 1, y, x]) - float(g[z - 1, y, x])) / 2.0
    return gx, gy, gz


def gradient_array(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central differences over a whole ``[z, y, x]`` block (edges left zero)."""
    arr = np.asarray(arr, dtype=np.float64)
    gx = np.zeros_like(arr)
    gy = np.zeros_like(arr)
    gz = np.zeros_like(arr)
    gx[:, :, 1:-1] = (arr[:, :, 2:] - arr[:, :, :-2]) / 2.0
    gy[:, 1:-1, :] = (arr[:, 2:, :] - arr[:, :-2, :]) / 2.0
    gz[1:-1, :, :] = (arr[2:, :, :] - arr[:-2, :, :]) / 2.0
    return gx, gy, gz


# --------------------------------------------------------------------------
# Statistics and segmentation


def dtype_range(dtype: str, data: np.ndarray | None = None) -> tuple[float, float]:
    """Histogram range: full integer range, or the data range for floats."""
    if dtype == "u8":
        return 0.0, 256.0
    if dtype == "u16":
        return 0.0, 65536.0
    if data is None or data.size == 0:
        return 0.0, 1.0
    lo, hi = float(np.min(data)), float(np.max(data))
    return lo, hi if hi > lo else lo + 1.0


def histogram(vol: Volume, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts and edges over uniform bins spanning the dtype range."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = dtype_range(vol.dtype, vol.data)
    counts, edges = np.histogram(vol.data, bins=bins, range=(lo, hi))
    return counts, edges


def write_histogram_csv(counts, edges, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def check_disjoint(intervals: Sequence[GrayInterval]) -> None:
    ordered = sorted(intervals, key=lambda iv: iv.lo)
    for a, b in zip(ordered, ordered[1:]):
        if b.lo < a.hi:
            raise ValueError(f"overlapping gray intervals {a} and {b}")


def segment_array(arr: np.ndarray, intervals: Sequence[GrayInterval]) -> np.ndarray:
    check_disjoint(intervals)
    out = np.zeros(arr.shape, dtype=np.int32)
    for iv in intervals:
        out[(arr >= iv.lo) & (arr < iv.hi)] = iv.label
    return out


def threshold_segment(vol: Volume, intervals: Sequence[GrayInterval]) -> LabelVolume:
    return LabelVolume(segment_array(vol.data, intervals))


def component_mean(vol: Volume, labels: LabelVolume, k: int) -> float:
    if labels.labels.shape != vol.shape:
        raise ValueError("label volume does not match volume dims")
    sel = vol.data[labels.labels == k]
    if sel.size == 0:
        raise ValueError(f"component {k} is empty")
    return float(np.mean(sel, dtype=np.float64))
