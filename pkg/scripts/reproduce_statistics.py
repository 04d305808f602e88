#!/usr/bin/env python3
"""Rebuild the headline statistics from synthetic corpora, end to end.

Generates a device corpus per wafer preset, a spectrum-pair corpus and a
plateau-map corpus, then runs the locate, misalign and stark passes over
them exactly as the CLI would, printing recovered against injected
numbers.  Slower than calibrate_presets.py but exercises every stage,
file format and statistic in one go.

    python3 scripts/reproduce_statistics.py --scenes 10 --jobs 4
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from qdalign.fileio import read_csv
from qdalign.pipeline import run_locate, run_misalign, run_stark
from qdalign.synth import CorpusConfig, emit_corpus


def _config(corpus_dir: Path) -> dict:
    return json.loads((corpus_dir / "run.json").read_text())


def _truth_misalignment(corpus_dir: Path) -> np.ndarray:
    _, rows = read_csv(corpus_dir / "truth.csv")
    deltas = []
    for r in rows:
        if r["feature_kind"] != "waveguide":
            continue
        meta = dict(p.split("=") for p in r["params"].split(";") if p)
        deltas.append(float(meta["delta_nm"]))
    return np.asarray(deltas)


def device_pass(name: str, root: Path, n_scenes: int, seed: int, jobs: int):
    corpus = root / name
    emit_corpus(CorpusConfig(preset=name, out_dir=corpus, n_scenes=n_scenes,
                             seed=seed, jobs=jobs))
    config = _config(corpus)

    t0 = time.perf_counter()
    locate = run_locate(config, corpus, root / f"{name}-locate", epoch="pre")
    t_locate = time.perf_counter() - t0
    t0 = time.perf_counter()
    mis = run_misalign(config, corpus, root / f"{name}-misalign",
                       locate_dir=root / f"{name}-locate")
    t_mis = time.perf_counter() - t0

    injected = _truth_misalignment(corpus)
    stats = mis["stats"]
    print(f"--- {name}: {n_scenes} scenes, {injected.size} devices")
    print(f"  locate: delta mean {locate['delta_mean_nm']:.2f} nm over "
          f"{locate['n_emitters']} emitters ({t_locate:.1f} s)")
    if stats is None:
        print("  misalign: too few matches for statistics")
    else:
        print(f"  misalign: recovered ({stats['mean_nm']:+.1f}, {stats['std_nm']:.1f}) nm, "
              f"injected sample ({injected.mean():+.1f}, {injected.std(ddof=1):.1f}) nm "
              f"({t_mis:.1f} s)")
    print(f"  yield {mis['emitter_yield']:.3f}, {mis['n_unmatched']} unmatched, "
          f"{len(mis['warnings'])} warning(s)")


def spectrum_pass(root: Path, n_scenes: int, seed: int):
    corpus = root / "fig3"
    emit_corpus(CorpusConfig(preset="fig3", out_dir=corpus, n_scenes=n_scenes, seed=seed))
    summary = run_stark(_config(corpus), corpus, root / "fig3-stark")
    print(f"--- fig3: {n_scenes} spectrum pairs")
    for key, group in sorted((summary["groups"] or {}).items()):
        print(f"  group {key}: mean {group['mean_nm']:+.2f} nm, "
              f"std {group['std_nm']:.2f} nm (n={group['n']})")


def plateau_pass(root: Path, n_scenes: int, seed: int):
    corpus = root / "fig5"
    emit_corpus(CorpusConfig(preset="fig5", out_dir=corpus, n_scenes=n_scenes, seed=seed))
    summary = run_stark(_config(corpus), corpus, root / "fig5-stark")
    print(f"--- fig5: {n_scenes} plateau-map pairs")
    for scene in summary["maps"] or []:
        for label, line in sorted(scene["lines"].items()):
            delta = line.get("delta")
            if delta:
                print(f"  {scene['scene_id']}/{label}: d_lambda0 {delta['d_lambda0_nm']:+.3f} nm")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scenes", type=int, default=10,
                        help="device scenes per wafer preset (5 devices each)")
    parser.add_argument("--spectra", type=int, default=24, help="fig3 spectrum pairs")
    parser.add_argument("--maps", type=int, default=2, help="fig5 plateau-map pairs")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", help="working dir (default: temp dir)")
    args = parser.parse_args(argv)

    root = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="qdalign-repro-"))
    t0 = time.perf_counter()
    for name in ("fig2b", "fig2c"):
        device_pass(name, root, args.scenes, args.seed, args.jobs)
    spectrum_pass(root, args.spectra, args.seed)
    plateau_pass(root, args.maps, args.seed)
    print(f"artifacts under {root} ({time.perf_counter() - t0:.1f} s total)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
