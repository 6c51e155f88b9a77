"""Run the synthetic benchmark experiments through the command-line tool.

Usage::

    python scripts/experiments.py translation --out runs/
    python scripts/experiments.py all --out runs/ --threads 4

Each experiment builds its fixture from ``fixtures/``, runs the same commands
a user would, and prints a JSON summary of the measured errors and accuracy
indices. Outputs stay under ``<out>/<experiment>/`` for inspection.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from dvckit.cli import main as dvckit
from dvckit.field import load_field

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
INTERVALS = ["--ref-intervals", "0-140,140-256", "--def-intervals", "0-140,140-256"]


def run(*argv) -> None:
    code = dvckit([str(a) for a in argv])
    if code != 0:
        sys.exit(f"command failed ({code}): {' '.join(map(str, argv))}")


def node_error(a, b) -> np.ndarray:
    return np.linalg.norm(a.disp - b.disp, axis=-1)


def translation(out: Path, threads: int) -> dict:
    """Rigid shift (3.3, -1.7, 2.5) on a 64^3 speckle volume."""
    run("synth", FIXTURES / "translation.json", "--out", out / "fx")
    t0 = time.perf_counter()
    run("dvc", "--ref", out / "fx/ref.vol", "--def", out / "fx/def.vol", "--out", out / "dvc",
        "--step", 8, "--subvol", 21, "--search-radius", 5, "--margin", 15, "--threads", threads)
    seconds = time.perf_counter() - t0
    err = load_field(out / "dvc/field.csv").disp.reshape(-1, 3) - np.array([3.3, -1.7, 2.5])
    return {"mean_error": err.mean(axis=0).tolist(), "std_error": err.std(axis=0).tolist(),
            "dvc_seconds": seconds}


def sinusoid(out: Path, threads: int, subvol: int = 13) -> dict:
    """Sinusoidal field (amplitude 3, period 64) on a 96^3 volume."""
    run("synth", FIXTURES / "sinusoid.json", "--out", out / "fx")
    run("dvc", "--ref", out / "fx/ref.vol", "--def", out / "fx/def.vol", "--out", out / "dvc",
        "--step", 8, "--subvol", subvol, "--search-radius", 4, "--margin", 12, "--threads", threads)
    e = node_error(load_field(out / "dvc/field.csv"), load_field(out / "fx/truth.csv"))
    return {"subvol": subvol, "rmse": float(np.sqrt(np.mean(e**2))), "max_error": float(e.max())}


def correction(out: Path, threads: int) -> dict:
    """Self-correction of a truth field with 10% of nodes pushed by +8 voxels."""
    run("synth", FIXTURES / "corrupted.json", "--out", out / "fx")
    run("correct", "--ref", out / "fx/ref.vol", "--def", out / "fx/def.vol", "--field", out / "fx/corrupted.csv",
        "--out", out / "correct", "--step", 8, "--subvol", 21, "--search-radius", 3, "--margin", 11,
        "--bins", 4, "--threads", threads, *INTERVALS)
    truth = load_field(out / "fx/truth.csv")
    before, after = json.loads((out / "correct/residual_summary.json").read_text())["reports"]
    return {
        "mean_abs_r_corrected": [before["mean_abs_corrected"], after["mean_abs_corrected"]],
        "p": [before["p"], after["p"]],
        "displacement_error": [float(node_error(load_field(out / f), truth).mean())
                               for f in ("fx/corrupted.csv", "correct/corrected.csv")],
        "bin_mean_r": [[b["mean_r"] for b in r["bins"]] for r in (before, after)],
    }


def shear_band(out: Path, threads: int) -> dict:
    """Three-step shear band (peak equivalent strain 0.3), stitched then corrected."""
    run("synth", FIXTURES / "shear_band.json", "--out", out / "fx")
    fx = out / "fx"
    dvc = ["--step", 4, "--subvol", 21, "--search-radius", 4, "--margin", 15, "--threads", threads]
    run("dvc", "--states", fx / "ref.vol", fx / "def_1.vol", fx / "def_2.vol", fx / "def_3.vol",
        "--incremental", "--out", out / "dvc", *dvc)
    run("correct", "--ref", fx / "ref.vol", "--def", fx / "def_3.vol", "--field", out / "dvc/total_03.csv",
        "--out", out / "correct", "--bins", 8, *dvc, *INTERVALS)
    with open(out / "correct/curves_paired.csv") as fh:
        rows = list(csv.DictReader(fh))
    truth = load_field(fx / "truth_3.csv")
    return {
        "bins": [{"eps": [float(r["bin_lo"]), float(r["bin_hi"])], "count": int(r["count"]),
                  "p_before": float(r["p_before"]), "p_after": float(r["p_after"])} for r in rows],
        "displacement_error": [float(np.nanmean(node_error(load_field(out / f), truth)))
                               for f in ("dvc/total_03.csv", "correct/corrected.csv")],
    }


EXPERIMENTS = {"translation": translation, "sinusoid": sinusoid, "correction": correction,
               "shear_band": shear_band}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=[*EXPERIMENTS, "all"])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    names = list(EXPERIMENTS) if args.experiment == "all" else [args.experiment]
    results = {}
    for name in names:
        t0 = time.perf_counter()
        results[name] = EXPERIMENTS[name](args.out / name, args.threads)
        results[name]["wall_seconds"] = round(time.perf_counter() - t0, 1)
        print(json.dumps({name: results[name]}, indent=2), flush=True)
    (args.out).mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(results, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
