"""Image-matching self-correction of a measured displacement field.

Each pass cleans the field, densifies it, warps the reference volume into
the deformed configuration, re-correlates the warped volume against the
deformed one with unchanged DVC parameters, and adds the measured
increment to the field.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .correlate import DvcParams, run_dvc
from .field import (
    DenseField,
    DisplacementField,
    Status,
    compose,
    densify,
    detect_outliers,
    repair_field,
)
from .residual import AccuracyReport, evaluate
from .volume import GrayInterval, Volume, in_domain, sample_array, save_volume

log = logging.getLogger(__name__)


def _voxel_lattice(shape):
    nz, ny, nx = shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(np.float64)


def source_points(dense: DenseField, dims, inverse_iterations: int = 8, tol: float = 1e-6):
    """Reference positions X with X + D(X) = x for every voxel x.

    Starts from X = x - D(x) (the small-increment approximation, which is
    what ``inverse_iterations=1`` returns) and refines by fixed-point
    iteration X <- x - D(X).
    """
    nx, ny, nz = dims
    x = _voxel_lattice((nz, ny, nx))
    X = x - dense.full(dims).reshape(-1, 3)
    for _ in range(inverse_iterations - 1):
        X_new = x - dense(X)
        step = np.max(np.abs(X_new - X)) if len(X) else 0.0
        X = X_new
        if step < tol:
            break
    # spline round-off (~1e-15) would otherwise turn integer shifts into
    # interpolations; snap coordinates that are integers to within 1e-9
    near = np.rint(X)
    return np.where(np.abs(X - near) < 1e-9, near, X)


def as_measured(fld: DisplacementField) -> DenseField:
    """Dense version of a field as given, for scoring it.

    Flagged-but-finite nodes are kept so that a bad field scores badly;
    only non-finite nodes force a repair first.
    """
    if np.all(np.isfinite(fld.disp)):
        return densify(fld, allow_unrepaired=True)
    return densify(clean(fld))


def warp_with_mask(
    ref: Volume,
    fld: DisplacementField | DenseField,
    fill: float = 0.0,
    inverse_iterations: int = 8,
    support_only: bool = True,
):
    """Warp ``ref`` into the deformed configuration.

    Returns the warped f32 volume and a validity mask; voxels whose source
    position leaves the tricubic domain get ``fill`` and are invalid. With
    ``support_only`` voxels outside the grid's node extent are also marked
    invalid (their displacement is extrapolated, not measured).
    """
    dense = fld if isinstance(fld, DenseField) else as_measured(fld)
    X = source_points(dense, ref.dims, inverse_iterations)
    ok = in_domain(ref.shape, X, "tricubic")
    out = np.full(len(X), float(fill))
    out[ok] = sample_array(ref.data.astype(np.float64), X[ok], "tricubic")
    valid = ok.reshape(ref.shape)
    if support_only:
        g = dense.grid
        lat = _voxel_lattice(ref.shape)
        lo = np.array(g.origin, dtype=float)
        hi = lo + g.step * (np.array(g.counts) - 1)
        inside = np.all((lat >= lo) & (lat <= hi), axis=1).reshape(ref.shape)
        valid &= inside
    return Volume.from_array(out.reshape(ref.shape), "f32"), valid


def warp_volume(ref: Volume, dense: DenseField | DisplacementField, fill: float = 0.0,
                inverse_iterations: int = 8) -> Volume:
    return warp_with_mask(ref, dense, fill, inverse_iterations, support_only=False)[0]


def clean(fld: DisplacementField, eps0: float = 0.1, thresh: float = 2.0) -> DisplacementField:
    return repair_field(fld, detect_outliers(fld, eps0, thresh))


@dataclass
class PassRecord:
    index: int
    mean_abs_increment: float
    max_abs_increment: float
    mean_abs_corrected_before: float
    mean_abs_corrected_after: float
    mean_r_corrected_before: float
    mean_r_corrected_after: float
    p_before: float | None
    p_after: float | None
    low_correlation_before: int
    low_correlation_after: int
    flagged_nodes: int


@dataclass
class CorrectionReport:
    passes: int = 0
    records: list[PassRecord] = field(default_factory=list)
    best_pass: int = 0
    dvc_params: dict = field(default_factory=dict)
    dvc_params_per_run: list[dict] = field(default_factory=list)
    stop_reason: str = ""

    def to_json(self) -> dict:
        return {
            "passes": self.passes,
            "best_pass": self.best_pass,
            "stop_reason": self.stop_reason,
            "dvc_params": self.dvc_params,
            "dvc_params_per_run": self.dvc_params_per_run,
            "records": [asdict(r) for r in self.records],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


@dataclass
class _Score:
    mean_abs: float
    mean_rc: float
    p: float | None
    report: AccuracyReport | None


def _score(ref, dfm, fld, intervals, fill) -> _Score:
    warped, valid = warp_with_mask(ref, fld, fill=fill)
    if intervals is None:
        r = np.abs(dfm.data.astype(np.float64) - warped.data.astype(np.float64))[valid]
        m = float(np.sum(r) / r.size) if r.size else float("nan")
        return _Score(m, m, None, None)
    rep = evaluate(warped, valid, dfm, intervals[0], intervals[1])
    return _Score(rep.mean_abs_corrected, rep.mean_r_corrected, rep.p, rep)


def _low_corr(fld: DisplacementField) -> int:
    return int(np.sum(fld.status == Status.LOW_CORRELATION))


def self_correct(
    ref: Volume,
    dfm: Volume,
    fld: DisplacementField,
    params: DvcParams,
    max_passes: int = 3,
    min_gain: float = 0.02,
    intervals: tuple[Sequence[GrayInterval], Sequence[GrayInterval]] | None = None,
    eps0: float = 0.1,
    thresh: float = 2.0,
    fill: float = 0.0,
    threads: int = 1,
    keep_dir: str | Path | None = None,
):
    """Repeat warp / re-correlate / update until the residual stops improving.

    ``intervals`` holds (reference-state, deformed-state) segmentation
    intervals; with them the loop tracks mean |r'| after background-noise
    correction, without them mean |r|. Returns the best field seen
    (possibly the input) and a :class:`CorrectionReport`.
    """
    if max_passes < 1:
        raise ValueError("max_passes must be >= 1")
    report = CorrectionReport(dvc_params=params.to_json())
    current = fld
    cur_score = _score(ref, dfm, current, intervals, fill)
    best, best_score = fld, cur_score
    for k in range(1, max_passes + 1):
        flags = detect_outliers(current, eps0, thresh)
        repaired = repair_field(current, flags)
        dense = densify(repaired)
        g_prime = warp_volume(ref, dense, fill=fill)
        if keep_dir is not None:
            save_volume(g_prime, Path(keep_dir) / f"warped_pass{k}.vol")
        report.dvc_params_per_run.append(params.to_json())
        inc = run_dvc(g_prime, dfm, repaired.grid, params, predictor=None, threads=threads)
        low_after = _low_corr(inc)
        inc = clean(inc, eps0, thresh)
        new = compose(repaired, inc)
        new = new.with_values(meta={**fld.meta, "dvc_params": params.to_json(),
                                    "correction_pass": k})
        new_score = _score(ref, dfm, new, intervals, fill)
        mag = np.linalg.norm(inc.disp, axis=-1)
        report.records.append(
            PassRecord(
                index=k,
                mean_abs_increment=float(np.mean(mag)),
                max_abs_increment=float(np.max(mag)),
                mean_abs_corrected_before=cur_score.mean_abs,
                mean_abs_corrected_after=new_score.mean_abs,
                mean_r_corrected_before=cur_score.mean_rc,
                mean_r_corrected_after=new_score.mean_rc,
                p_before=cur_score.p,
                p_after=new_score.p,
                low_correlation_before=_low_corr(current),
                low_correlation_after=low_after,
                flagged_nodes=int(flags.sum()),
            )
        )
        report.passes = k
        log.info("pass %d: mean|r'| %.4f -> %.4f", k, cur_score.mean_abs, new_score.mean_abs)
        if new_score.mean_abs < best_score.mean_abs:
            best, best_score, report.best_pass = new, new_score, k
        gain = (cur_score.mean_abs - new_score.mean_abs) / cur_score.mean_abs
        current, cur_score = new, new_score
        if gain < min_gain:
            report.stop_reason = f"relative gain {gain:.4f} below {min_gain}"
            break
    else:
        report.stop_reason = "max_passes reached"
    return best, report
