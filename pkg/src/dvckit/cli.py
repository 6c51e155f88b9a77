"""Command-line pipeline: ``synth | dvc | correct | strain | report``.

Every command reads an optional JSON run configuration (``--config``) and
lets flags override individual entries. Outputs are first written to a
staging directory inside ``--out`` and moved into place only when the
command succeeds, so a failed run leaves no partial files behind.

Exit codes: 0 success, 1 processing or configuration error, 2 missing
input file or bad command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .correct import self_correct, warp_with_mask
from .correlate import DvcParams, run_dvc
from .field import (
    DisplacementField,
    GridSpec,
    accumulate,
    densify_scalar,
    load_field,
    save_field,
    save_strain,
    save_vtk,
    strain_from_field,
)
from .residual import (
    gray_residual,
    residual_report,
    write_curves,
    write_paired_curves,
    write_pgm,
    write_report_json,
)
from .synth import FixtureSpec, build_fixture
from .volume import GrayInterval, load_volume, save_labels, save_volume

log = logging.getLogger("dvckit")

EXIT_ERROR = 1
EXIT_MISSING = 2


class MissingInputError(Exception):
    pass


# --------------------------------------------------------------------------
# Run configuration


@dataclass
class CorrectionSettings:
    max_passes: int = 3
    min_gain: float = 0.02
    eps0: float = 0.1
    thresh: float = 2.0


@dataclass
class RunConfig:
    ref: str | None = None
    deformed: str | None = None
    states: list[str] = field(default_factory=list)
    dvc: DvcParams = field(default_factory=DvcParams)
    grid_margin: int | None = None
    correction: CorrectionSettings = field(default_factory=CorrectionSettings)
    ref_intervals: list[str] = field(default_factory=list)
    def_intervals: list[str] = field(default_factory=list)
    strain_window: int = 1
    bins: int = 16
    threads: int = 1

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__} - {"def"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "def" in d:
            d["deformed"] = d.pop("def")
        if "dvc" in d:
            d["dvc"] = DvcParams.from_json(d["dvc"])
        if "correction" in d:
            d["correction"] = CorrectionSettings(**d["correction"])
        return cls(**d)

    def echo(self) -> dict:
        """Everything needed to rerun the job; ``threads`` is left out
        because it never changes a result."""
        d = asdict(self)
        d.pop("threads")
        d["def"] = d.pop("deformed")
        d["dvc"] = self.dvc.to_json()
        return d

    def intervals(self):
        if not self.ref_intervals or not self.def_intervals:
            raise ValueError("gray intervals for both states are required (--ref-intervals/--def-intervals)")
        return _intervals(self.ref_intervals), _intervals(self.def_intervals)

    def grid_for(self, dims) -> GridSpec:
        p = self.dvc
        margin = self.grid_margin
        if margin is None:
            margin = p.subvolume_half_size + p.search_radius + 2
        return GridSpec.covering(dims, p.grid_step, margin)


def _intervals(items) -> list[GrayInterval]:
    return [GrayInterval.parse(str(t), k) for k, t in enumerate(items, start=1)]


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(json.loads(_need(args.config).read_text()))
    dvc = cfg.dvc.to_json()
    if getattr(args, "step", None) is not None:
        dvc["grid_step"] = args.step
    if getattr(args, "subvol", None) is not None:
        if args.subvol < 3 or args.subvol % 2 == 0:
            raise ValueError("--subvol must be an odd edge length >= 3")
        dvc["subvolume_half_size"] = args.subvol // 2
    if getattr(args, "search_radius", None) is not None:
        dvc["search_radius"] = args.search_radius
    cfg.dvc = DvcParams.from_json(dvc)
    for name, attr in (("ref", "ref"), ("deformed", "def_"), ("threads", "threads"),
                       ("bins", "bins"), ("strain_window", "window"), ("grid_margin", "margin")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "states", None):
        cfg.states = list(args.states)
    if getattr(args, "ref_intervals", None):
        cfg.ref_intervals = _split_list(args.ref_intervals)
    if getattr(args, "def_intervals", None):
        cfg.def_intervals = _split_list(args.def_intervals)
    if getattr(args, "max_passes", None) is not None:
        cfg.correction = replace(cfg.correction, max_passes=args.max_passes)
    if cfg.threads < 1:
        raise ValueError("--threads must be >= 1")
    return cfg


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"input file not found: {p}")
    return p


def _load_volume(path):
    _need(path)
    return load_volume(path)


def _load_field(path) -> DisplacementField:
    _need(path)
    _need(str(path) + ".json")
    return load_field(path)


# --------------------------------------------------------------------------
# Output staging


class Staging:
    """Collects outputs in a hidden directory and publishes them on success."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self) -> list[Path]:
        written = []
        for item in sorted(self.dir.iterdir()):
            target = self.out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            shutil.move(str(item), str(target))
            written.append(target)
        self.dir.rmdir()
        return written

    def discard(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _parse_slice(text: str):
    try:
        axis, idx = text.split(":")
        axis = axis.strip().lower()
        idx = int(idx)
    except ValueError:
        raise ValueError(f"--slice expects axis:index, e.g. x:1000, got {text!r}") from None
    if axis not in ("x", "y", "z"):
        raise ValueError(f"slice axis must be x, y or z, got {axis!r}")
    return axis, idx


def _take_slice(arr: np.ndarray, axis: str, idx: int) -> np.ndarray:
    """2D slice of a [z, y, x] array at ``axis = idx``."""
    n = {"x": arr.shape[2], "y": arr.shape[1], "z": arr.shape[0]}[axis]
    if not 0 <= idx < n:
        raise ValueError(f"slice {axis}:{idx} outside the volume (size {n})")
    if axis == "x":
        return arr[:, :, idx]
    if axis == "y":
        return arr[:, idx, :]
    return arr[idx]


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args, stage: Staging) -> dict:
    spec = FixtureSpec.load(_need(args.spec))
    if args.seed is not None:
        spec = replace(spec, speckle=replace(spec.speckle, seed=args.seed))
    fx = build_fixture(spec)
    meta = {"fixture": spec.to_json()}
    save_volume(fx.reference, stage.path("ref.vol"), extra=meta)
    save_labels(fx.labels, stage.path("labels.vol"))
    single = len(fx.states) == 1
    for k, vol in enumerate(fx.states, start=1):
        suffix = "" if single else f"_{k}"
        save_volume(vol, stage.path(f"def{suffix}.vol"), extra=meta)
        save_field(fx.truth(k - 1), stage.path(f"truth{suffix}.csv"))
    if spec.corruption:
        bad = fx.corrupted()
        save_field(bad, stage.path("corrupted.csv"))
    _write_json(stage.path("fixture.json"), spec.to_json())
    frac = float(np.mean(fx.labels.labels == 2))
    return {
        "dims": list(fx.reference.dims),
        "states": len(fx.states),
        "particle_fraction": round(frac, 4),
        "truth_nodes": fx.truth_grid().n_nodes,
    }


def _pair_run(ref, dfm, cfg, predictor=None):
    if ref.dims != dfm.dims:
        raise ValueError("reference and deformed volumes differ in dims")
    grid = cfg.grid_for(ref.dims)
    return run_dvc(ref, dfm, grid, cfg.dvc, predictor=predictor, threads=cfg.threads)


def cmd_dvc(args, stage: Staging) -> dict:
    cfg = build_config(args)
    echo = {"config": cfg.echo(), "command": "dvc", "incremental": bool(args.incremental)}
    predictor = _load_field(args.predictor) if args.predictor else None
    if cfg.states:
        if len(cfg.states) < 2:
            raise ValueError("--states needs at least two volumes")
        vols = [_load_volume(p) for p in cfg.states]
        summary = {"fields": []}
        if args.incremental:
            incs = []
            for k in range(1, len(vols)):
                # each increment is seeded by the previous one
                pred = incs[-1] if incs else predictor
                inc = _pair_run(vols[k - 1], vols[k], cfg, pred)
                incs.append(inc)
                tag = f"{k - 1}{k}" if len(vols) < 11 else f"{k - 1}_{k}"
                save_field(inc, stage.path(f"increment_{tag}.csv"), meta=echo)
                total = accumulate(incs)
                ttag = f"0{k}" if len(vols) < 11 else f"0_{k}"
                save_field(total, stage.path(f"total_{ttag}.csv"), meta=echo)
                summary["fields"].append({"increment": tag, "status_counts": inc.status_counts()})
        else:
            for k in range(1, len(vols)):
                fld = _pair_run(vols[0], vols[k], cfg, predictor)
                save_field(fld, stage.path(f"field_0{k}.csv"), meta=echo)
                summary["fields"].append({"state": k, "status_counts": fld.status_counts()})
        return summary
    if not cfg.ref or not cfg.deformed:
        raise ValueError("dvc needs --ref and --def, or --states")
    ref, dfm = _load_volume(cfg.ref), _load_volume(cfg.deformed)
    fld = _pair_run(ref, dfm, cfg, predictor)
    save_field(fld, stage.path("field.csv"), meta=echo)
    ok = fld.status == 0
    mean = np.mean(fld.disp[ok], axis=0).tolist() if ok.any() else None
    return {"status_counts": fld.status_counts(), "mean_displacement": mean}


def cmd_correct(args, stage: Staging) -> dict:
    cfg = build_config(args)
    ref, dfm = _load_volume(_require(cfg.ref, "--ref")), _load_volume(_require(cfg.deformed, "--def"))
    fld = _load_field(args.field)
    if not fld.grid.fits(ref.dims):
        raise ValueError("field grid does not fit inside the reference volume")
    intervals = cfg.intervals() if cfg.ref_intervals or cfg.def_intervals else None
    keep = stage.path("intermediate") if args.keep_intermediate else None
    if keep is not None:
        keep.mkdir()
    c = cfg.correction
    best, report = self_correct(
        ref, dfm, fld, cfg.dvc, max_passes=c.max_passes, min_gain=c.min_gain,
        intervals=intervals, eps0=c.eps0, thresh=c.thresh, threads=cfg.threads, keep_dir=keep,
    )
    echo = {"config": cfg.echo(), "command": "correct", "input_field": str(args.field)}
    save_field(best, stage.path("corrected.csv"), meta=echo)
    report.save(stage.path("correction_report.json"))
    summary = {"passes": report.passes, "best_pass": report.best_pass}
    if report.records:
        first, best_rec = report.records[0], report.records[max(report.best_pass, 1) - 1]
        before = first.mean_abs_corrected_before
        after = best_rec.mean_abs_corrected_after if report.best_pass else before
        summary.update(mean_abs_before=before, mean_abs_after=after)
    if intervals is not None:
        strain = strain_from_field(best, cfg.strain_window)
        reports = residual_report(ref, dfm, [fld, best], *intervals, strain=strain, bins=cfg.bins)
        write_report_json(reports, stage.path("residual_summary.json"),
                          extra={"labels": ["before", "after"], "config": cfg.echo()})
        write_paired_curves(reports[0], reports[1], stage.path("curves_paired.csv"))
    else:
        doc = {}
        for name, f in (("before", fld), ("after", best)):
            warped, valid = warp_with_mask(ref, f)
            doc[name] = {"mean_abs_residual": gray_residual(warped, dfm, valid).mean()}
        _write_json(stage.path("residual_summary.json"), doc)
    return summary


def _require(value, flag):
    if not value:
        raise ValueError(f"{flag} is required")
    return value


def cmd_strain(args, stage: Staging) -> dict:
    cfg = build_config(args)
    fld = _load_field(args.field)
    strain = strain_from_field(fld, cfg.strain_window)
    save_strain(strain, stage.path("strain.csv"))
    save_vtk(fld, strain, stage.path("field.vtk"))
    return {"max_equivalent_strain": float(np.nanmax(strain.equivalent))}


def cmd_report(args, stage: Staging) -> dict:
    cfg = build_config(args)
    ref, dfm = _load_volume(_require(cfg.ref, "--ref")), _load_volume(_require(cfg.deformed, "--def"))
    fields = [_load_field(p) for p in args.field]
    if len(fields) > 2:
        raise ValueError("report takes one field, or two for before/after curves")
    ref_iv, def_iv = cfg.intervals()
    sl = _parse_slice(args.slice) if args.slice else None
    strain = strain_from_field(fields[-1], cfg.strain_window)
    reports = residual_report(ref, dfm, fields, ref_iv, def_iv, strain=strain, bins=cfg.bins)
    labels = ["before", "after"] if len(fields) == 2 else ["field"]
    write_report_json(reports, stage.path("accuracy.json"),
                      extra={"labels": labels, "fields": list(args.field), "config": cfg.echo()})
    save_strain(strain, stage.path("strain.csv"))
    if len(fields) == 2:
        write_curves(reports[0], stage.path("curves_before.csv"))
        write_curves(reports[1], stage.path("curves_after.csv"))
        write_paired_curves(reports[0], reports[1], stage.path("curves_paired.csv"))
    else:
        write_curves(reports[0], stage.path("curves.csv"))
    if sl is not None:
        axis, idx = sl
        warped, valid = warp_with_mask(ref, fields[-1])
        res = gray_residual(warped, dfm, valid)
        write_pgm(_take_slice(res.r, axis, idx), stage.path(f"residual_{axis}{idx}.pgm"), lo=0.0)
        zn = fields[-1].zncc
        zn_dense = densify_scalar(fields[-1].grid, np.where(np.isfinite(zn), zn, 0.0)).full(ref.dims)
        zn_img = np.where(valid, np.clip(zn_dense, 0.0, 1.0), 0.0)
        write_pgm(_take_slice(zn_img, axis, idx), stage.path(f"zncc_{axis}{idx}.pgm"), lo=0.0, hi=1.0)
    return {"p": [r.p for r in reports], "unusable": [r.unusable for r in reports]}


# --------------------------------------------------------------------------
# Argument parsing


def _add_dvc_flags(p):
    p.add_argument("--step", type=int, help="grid step in voxels (default 10)")
    p.add_argument("--subvol", type=int, help="subvolume edge length, odd (default 141 = half size 70)")
    p.add_argument("--search-radius", type=int, dest="search_radius")
    p.add_argument("--margin", type=int, help="grid margin from the volume faces")


def _add_common(p, volumes=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int, help="accepted for reproducible reruns")
    if volumes:
        p.add_argument("--ref")
        p.add_argument("--def", dest="def_")


def _add_intervals(p):
    p.add_argument("--ref-intervals", dest="ref_intervals",
                   help="comma separated gray intervals of the reference, label order, e.g. 50-150,150-256")
    p.add_argument("--def-intervals", dest="def_intervals")
    p.add_argument("--bins", type=int, help="strain bins for the curves (default 16)")
    p.add_argument("--window", type=int, help="strain window half-width in nodes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dvckit", description="DVC with residual-based self-correction")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture")
    p.add_argument("spec", help="fixture JSON, e.g. fixtures/translation.json")
    _add_common(p, volumes=False)

    p = sub.add_parser("dvc", help="correlate a volume pair or a state sequence")
    _add_common(p)
    _add_dvc_flags(p)
    p.add_argument("--states", nargs="+")
    p.add_argument("--incremental", action="store_true",
                   help="correlate adjacent states and accumulate the increments")
    p.add_argument("--predictor", help="field file whose rounded values seed the search")

    p = sub.add_parser("correct", help="self-correct a measured field")
    _add_common(p)
    _add_dvc_flags(p)
    _add_intervals(p)
    p.add_argument("--field", required=True)
    p.add_argument("--max-passes", type=int, dest="max_passes")
    p.add_argument("--keep-intermediate", action="store_true", dest="keep_intermediate")

    p = sub.add_parser("strain", help="strain tensors and equivalent strain of a field")
    _add_common(p, volumes=False)
    p.add_argument("--field", required=True)
    p.add_argument("--window", type=int)

    p = sub.add_parser("report", help="residuals, accuracy index and strain-binned curves")
    _add_common(p)
    _add_intervals(p)
    p.add_argument("--field", required=True, nargs="+", help="one field, or before and after")
    p.add_argument("--slice", help="export residual and ZNCC slice images, e.g. x:1000")
    return ap


COMMANDS = {
    "synth": cmd_synth,
    "dvc": cmd_dvc,
    "correct": cmd_correct,
    "strain": cmd_strain,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = None
    try:
        stage = Staging(args.out)
        summary = COMMANDS[args.command](args, stage)
        written = stage.publish()
    except (MissingInputError, FileNotFoundError) as exc:
        if stage is not None:
            stage.discard()
        print(f"dvckit: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        if stage is not None:
            stage.discard()
        log.debug("failure", exc_info=True)
        print(f"dvckit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    summary["outputs"] = [p.name for p in written]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
