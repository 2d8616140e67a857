"""Fail when a desk pipeline run misses one of its target metrics.

usage: python scripts/check_reports.py ENV REPORTS_DIR CKPT_DIR
"""
from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np

from pinfer.checkpoint import load_checkpoint

ABLATIONS = ("no_rigidness", "no_refinement", "no_params")


def _rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _losses(path: Path) -> list[float]:
    return [float(r["loss"]) for r in _rows(path)]


def check(env: str, reports: Path, ckpt: Path) -> list[str]:
    failures = []

    def expect(ok: bool, what: str) -> None:
        print(f"{'ok  ' if ok else 'FAIL'} {env}: {what}")
        if not ok:
            failures.append(what)

    losses = _losses(reports / "visual_metrics.csv")
    head = max(1, len(losses) // 10)
    first, last = np.mean(losses[:head]), np.mean(losses[-head:])
    expect(last <= 0.5 * first, f"visual loss {first:.4g} -> {last:.4g} halves")

    (refine,) = _rows(reports / "refinement.csv")
    pre, post = float(refine["mse_pre"]), float(refine["mse_post"])
    expect(post < pre, f"refinement mse {pre:.4g} -> {post:.4g} lower")
    if env == "massrope":
        expect(2.0 * post <= pre, f"refinement mse {pre:.4g} -> {post:.4g} at least 2x lower")
        probs = {(int(r["T"]), r["object"]): float(r["mean_prob"]) for r in _rows(reports / "rigidness.csv")}
        for name in sorted({obj for _, obj in probs}):
            expect(probs[(10, name)] >= 0.9, f"rigidness {name} at T=10 {probs[(10, name)]:.3f} >= 0.9")

    if env == "rigidfall":
        meta = load_checkpoint(ckpt / "dynamics.ckpt").metadata
        expect(meta["test_mse"] < 0.5 * meta["copy_last_mse"],
               f"one-step mse {meta['test_mse']:.4g} below half of copy-last {meta['copy_last_mse']:.4g}")
        (params,) = _rows(reports / "params.csv")
        mae = float(params["mae_pct"])
        expect(mae < 15.0, f"gravity mae {mae:.2f}% < 15%")
        at_20 = {}
        for mode in ("full", *ABLATIONS):
            rows = {int(r["horizon"]): float(r["mse"]) for r in _rows(reports / f"rollout_{mode}.csv")}
            at_20[mode] = rows[20]
        for mode in ABLATIONS:
            expect(at_20["full"] < at_20[mode], f"rollout h=20 full {at_20['full']:.4g} < {mode} {at_20[mode]:.4g}")
    return failures


def main(argv: list[str]) -> int:
    if len(argv) != 3:
        print(__doc__.strip().splitlines()[-1], file=sys.stderr)
        return 1
    env, reports, ckpt = argv[0], Path(argv[1]), Path(argv[2])
    failures = check(env, reports, ckpt)
    if failures:
        print(f"{len(failures)} check(s) missed for {env}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
