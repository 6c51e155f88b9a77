"""Gray residuals, background-noise estimation, residual correction and the
accuracy index, plus strain-binned report curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .field import DisplacementField, StrainField, densify_scalar
from .volume import GrayInterval, LabelVolume, Volume, segment_array


class UndefinedContrastError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ResidualVolume:
    r: np.ndarray  # [z, y, x]
    valid: np.ndarray  # bool, same shape

    def __post_init__(self):
        if self.r.shape != self.valid.shape:
            raise ValueError("residual and mask dims differ")

    @property
    def dims(self):
        nz, ny, nx = self.r.shape
        return (nx, ny, nz)

    def mean(self) -> float:
        return _mean(self.r[self.valid])

    def mean_abs(self) -> float:
        return _mean(np.abs(self.r[self.valid]))


@dataclass
class NoiseEstimate:
    per_component: dict[int, float]
    counts: dict[int, int]
    pooled: float


@dataclass
class AccuracyReport:
    g1: float
    g2: float
    mean_r: float
    r0: float
    mean_r_corrected: float
    mean_abs_corrected: float
    p: float
    n_valid: int
    noise: dict = field(default_factory=dict)
    bins: list[dict] = field(default_factory=list)

    @property
    def unusable(self) -> bool:
        return self.p < 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["unusable"] = self.unusable
        return d


def _mean(values: np.ndarray) -> float:
    """Mean with a fixed (pairwise, C-order) summation for reproducibility."""
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return math.nan
    return float(np.sum(values) / values.size)


def gray_residual(warped: Volume, dfm: Volume, valid: np.ndarray | None = None) -> ResidualVolume:
    if warped.shape != dfm.shape:
        raise ValueError("gray_residual needs volumes of equal dims")
    r = np.abs(dfm.data.astype(np.float64) - warped.data.astype(np.float64))
    mask = np.ones(r.shape, bool) if valid is None else np.asarray(valid, bool)
    if mask.shape != r.shape:
        raise ValueError("validity mask does not match volume dims")
    return ResidualVolume(np.where(mask, r, 0.0), mask)


def estimate_background_noise(
    residual: ResidualVolume,
    labels: LabelVolume,
    source_labels: LabelVolume | None = None,
) -> NoiseEstimate:
    """Mean residual over voxels whose component is the same in both states.

    ``labels`` segments the deformed volume and ``source_labels`` the warped
    reference; with a single label volume every labelled voxel counts.
    """
    lab = labels.labels
    if lab.shape != residual.r.shape:
        raise ValueError("labels do not match residual dims")
    same = lab > 0
    if source_labels is not None:
        if source_labels.labels.shape != lab.shape:
            raise ValueError("source labels do not match residual dims")
        same &= source_labels.labels == lab
    same &= residual.valid
    per, counts = {}, {}
    for k in np.unique(lab[same]):
        sel = residual.r[same & (lab == k)]
        per[int(k)] = _mean(sel)
        counts[int(k)] = int(sel.size)
    if not counts:
        raise ValueError("no voxels share a component between the two states")
    total = sum(counts.values())
    pooled = sum(per[k] * counts[k] for k in per) / total
    return NoiseEstimate(per, counts, float(pooled))


def correct_residual(residual: ResidualVolume, r0: float) -> ResidualVolume:
    """r' = r - r0 on valid voxels (may go negative)."""
    if r0 < 0:
        raise ValueError("background residual must be >= 0")
    return ResidualVolume(np.where(residual.valid, residual.r - r0, 0.0), residual.valid)


def accuracy_index(r_corrected_mean: float, g1: float, g2: float) -> float:
    """p = 1 - r' / |g1 - g2|.

    A negative mean corrected residual means the match is already below the
    background-noise estimate; it counts as r' = 0 so that p never exceeds 1.
    Large residuals are not clamped and give p < 0 (an unusable field).
    """
    contrast = abs(g1 - g2)
    if contrast == 0:
        raise UndefinedContrastError("component gray means coincide; accuracy index undefined")
    return 1.0 - max(r_corrected_mean, 0.0) / contrast


# --------------------------------------------------------------------------
# Reports


def voxel_strain(strain: StrainField, dims) -> np.ndarray:
    """Equivalent strain interpolated to every voxel (clamped spline, >= 0)."""
    dense = densify_scalar(strain.grid, strain.equivalent)
    return np.maximum(dense.full(dims), 0.0)


def bin_edges(max_strain: float, bins: int) -> np.ndarray:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    top = max_strain if max_strain > 0 else 1e-12
    return np.linspace(0.0, top, bins + 1)


def _binned(r: np.ndarray, rc: np.ndarray, valid, eps, edges, g1, g2) -> list[dict]:
    out = []
    idx = np.clip(np.searchsorted(edges, eps, side="right") - 1, 0, len(edges) - 2)
    for b in range(len(edges) - 1):
        sel = valid & (idx == b)
        n = int(sel.sum())
        m = _mean(rc[sel]) if n else math.nan
        out.append(
            {
                "bin_lo": float(edges[b]),
                "bin_hi": float(edges[b + 1]),
                "mean_r": _mean(r[sel]) if n else math.nan,
                "mean_r_corrected": m,
                "p": accuracy_index(m, g1, g2) if n else math.nan,
                "count": n,
            }
        )
    return out


def background_noise(warped, valid, dfm, ref_intervals, def_intervals) -> NoiseEstimate:
    res = gray_residual(warped, dfm, valid)
    src_lab = LabelVolume(segment_array(warped.data, ref_intervals))
    def_lab = LabelVolume(segment_array(dfm.data, def_intervals))
    return estimate_background_noise(res, def_lab, src_lab)


def evaluate(
    warped: Volume,
    valid: np.ndarray,
    dfm: Volume,
    ref_intervals: Sequence[GrayInterval],
    def_intervals: Sequence[GrayInterval],
    eps: np.ndarray | None = None,
    edges: np.ndarray | None = None,
    noise: NoiseEstimate | None = None,
) -> AccuracyReport:
    """Residual statistics for an already warped reference.

    ``warped`` is segmented with the reference-state intervals and ``dfm``
    with the deformed-state ones; component means come from ``dfm``. A
    given ``noise`` estimate is used instead of estimating one here.
    """
    res = gray_residual(warped, dfm, valid)
    if noise is None:
        noise = background_noise(warped, valid, dfm, ref_intervals, def_intervals)
    def_lab = LabelVolume(segment_array(dfm.data, def_intervals))
    corr = correct_residual(res, noise.pooled)
    g = {}
    for k in (1, 2):
        sel = dfm.data[def_lab.labels == k]
        if sel.size == 0:
            raise ValueError(f"component {k} absent from the deformed volume")
        g[k] = _mean(sel)
    mean_rc = corr.mean()
    report = AccuracyReport(
        g1=g[1],
        g2=g[2],
        mean_r=res.mean(),
        r0=noise.pooled,
        mean_r_corrected=mean_rc,
        mean_abs_corrected=corr.mean_abs(),
        p=accuracy_index(mean_rc, g[1], g[2]),
        n_valid=int(valid.sum()),
        noise={
            "per_component": {str(k): v for k, v in noise.per_component.items()},
            "counts": {str(k): v for k, v in noise.counts.items()},
            "pooled": noise.pooled,
        },
    )
    if eps is not None and edges is not None:
        report.bins = _binned(res.r, corr.r, valid, eps, edges, g[1], g[2])
    return report


def residual_report(
    ref: Volume,
    dfm: Volume,
    fields: DisplacementField | Sequence[DisplacementField],
    ref_intervals: Sequence[GrayInterval],
    def_intervals: Sequence[GrayInterval],
    strain: StrainField | None = None,
    bins: int = 16,
    fill: float = 0.0,
) -> list[AccuracyReport]:
    """Warp ``ref`` by each field and report residual statistics.

    With several fields (e.g. before/after correction) all reports share the
    same strain bins, taken from ``strain``, and the same background noise
    estimate, taken from the last field (normally the best one) so that
    differences between reports reflect the residuals alone.
    """
    from .correct import warp_with_mask

    if isinstance(fields, DisplacementField):
        fields = [fields]
    eps = edges = None
    if strain is not None:
        eps = voxel_strain(strain, ref.dims)
    reports = []
    warped_all = [warp_with_mask(ref, f, fill=fill) for f in fields]
    if eps is not None:
        union = np.zeros(ref.shape, bool)
        for _, m in warped_all:
            union |= m
        edges = bin_edges(float(eps[union].max()) if union.any() else 0.0, bins)
    noise = background_noise(*warped_all[-1], dfm, ref_intervals, def_intervals)
    for warped, mask in warped_all:
        reports.append(
            evaluate(warped, mask, dfm, ref_intervals, def_intervals, eps, edges, noise)
        )
    return reports


CURVE_COLUMNS = ["bin_lo", "bin_hi", "mean_r_corrected", "p", "count"]


def write_curves(report: AccuracyReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for b in report.bins:
            w.writerow([repr(b["bin_lo"]), repr(b["bin_hi"]), repr(b["mean_r_corrected"]),
                        repr(b["p"]), b["count"]])


def write_paired_curves(before: AccuracyReport, after: AccuracyReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "mean_r_corrected_before", "p_before",
                    "mean_r_corrected_after", "p_after", "count"])
        for b, a in zip(before.bins, after.bins):
            w.writerow([repr(b["bin_lo"]), repr(b["bin_hi"]), repr(b["mean_r_corrected"]),
                        repr(b["p"]), repr(a["mean_r_corrected"]), repr(a["p"]), a["count"]])


def write_report_json(reports: Sequence[AccuracyReport], path, extra: dict | None = None) -> None:
    doc = {"reports": [r.to_json() for r in reports]}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)


def write_pgm(image: np.ndarray, path, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM of a 2D array, linearly mapped from [lo, hi]."""
    img = np.asarray(image, dtype=np.float64)
    img = np.where(np.isfinite(img), img, 0.0)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    px = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
