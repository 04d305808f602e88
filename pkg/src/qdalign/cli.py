"""Command-line front end chaining the toolkit into full runs.

    qdalign simulate --preset fig2b --n 10 --seed 7 --out corpus
    qdalign locate   --config corpus/run.json --out results
    qdalign misalign --config corpus/run.json --out results --locate-dir results
    qdalign stark    --config maps/run.json --out results
    qdalign report results --out results

Each subcommand reads one JSON config plus flag overrides (flags win),
writes whole-file-atomic artifacts, and returns 0 on success, 1 on a
runtime failure, 2 on a configuration error.  Failures are also emitted
as one machine-readable JSON object on stdout.  Set QDALIGN_LOG to a
level name for diagnostics on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ContractError, ToolkitError
from .fileio import atomic_write_text, read_csv
from .pipeline import (
    StageFailure,
    histogram_svg,
    run_locate,
    run_misalign,
    run_stark,
)
from .synth import CorpusConfig, emit_corpus
from .waveguides import histogram_rows

__all__ = ["main"]

log = logging.getLogger("qdalign.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


# ---------------------------------------------------------------------------
# config plumbing


def _read_config(args, command: str) -> tuple[dict, Path]:
    """The run config (a run.json) and the corpus root it lives in."""
    if not args.config:
        raise StageFailure(command, "--config is required", config_error=True)
    path = Path(args.config)
    if not path.exists():
        raise StageFailure(command, f"config {path} does not exist", config_error=True)
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise StageFailure(command, f"config {path} is not JSON: {err}", config_error=True)
    if not isinstance(config, dict):
        raise StageFailure(command, f"config {path} is not an object", config_error=True)
    return config, path.parent


def _pick(flag, config: dict, key: str, default):
    # Flag overrides config overrides default.
    if flag is not None:
        return flag
    return config.get(key, default)


def _emit_error(record: dict, out) -> None:
    text = json.dumps(record, sort_keys=True)
    print(text)
    if out:
        try:
            out_dir = Path(out)
            out_dir.mkdir(parents=True, exist_ok=True)
            atomic_write_text(out_dir / "error.json", text + "\n")
        except OSError:
            log.warning("could not persist error.json under %s", out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    config: dict = {}
    if args.config:
        config, _ = _read_config(args, "simulate")
    preset = _pick(args.preset, config, "preset", None)
    if preset is None:
        raise StageFailure("simulate", "no preset given (flag or config)", config_error=True)
    n = int(_pick(args.n, config, "n", 1))
    if n < 0:
        raise StageFailure("simulate", f"cannot build {n} scenes", config_error=True)
    out = Path(_pick(args.out, config, "out", "corpus"))
    request = CorpusConfig(
        preset=str(preset),
        out_dir=out,
        n_scenes=n,
        seed=int(_pick(args.seed, config, "seed", 0)),
        kind=_pick(args.kind, config, "kind", None),
        jobs=int(_pick(args.jobs, config, "jobs", 1)),
    )
    result = emit_corpus(request)
    log.info("truth table: %s", result.truth_path)
    print(f"simulate: {n} scene(s) -> {out}")
    if result.config_path is not None:
        print(f"simulate: run config -> {result.config_path}")
    return EXIT_OK


def cmd_locate(args) -> int:
    config, root = _read_config(args, "locate")
    out = Path(_pick(args.out, config, "out", root / "locate"))
    summary = run_locate(config, root, out, epoch=args.epoch)
    for scene in summary["scenes"]:
        for warning in scene["warnings"]:
            print(f"warning: {scene['scene_id']}: {warning}")
        print(
            f"{scene['scene_id']}: {scene['n_emitters']} emitters, "
            f"delta {scene['delta_mean_nm']:.2f} nm"
            if scene["n_emitters"]
            else f"{scene['scene_id']}: no emitters"
        )
    print(f"locate: {summary['n_scenes']} scene(s) -> {out}")
    return EXIT_OK


def cmd_misalign(args) -> int:
    config, root = _read_config(args, "misalign")
    out = Path(_pick(args.out, config, "out", root / "misalign"))
    locate_dir = args.locate_dir and Path(args.locate_dir)
    summary = run_misalign(config, root, out, locate_dir=locate_dir)
    for warning in summary["warnings"]:
        print(f"warning: {warning}")
    stats = summary["stats"]
    if stats is not None:
        print(
            f"misalign: mean {stats['mean_nm']:+.1f} nm, "
            f"std {stats['std_nm']:.1f} nm (n={stats['n']})"
        )
    if summary["emitter_yield"] is not None:
        print(f"misalign: emitter yield {summary['emitter_yield']:.3f}")
    print(
        f"misalign: {summary['n_matched']} device(s) matched, "
        f"{summary['n_unmatched']} unmatched -> {out}"
    )
    return EXIT_OK


def cmd_stark(args) -> int:
    config, root = _read_config(args, "stark")
    out = Path(_pick(args.out, config, "out", root / "stark"))
    summary = run_stark(config, root, out)
    for warning in summary["warnings"]:
        print(f"warning: {warning}")
    if summary["groups"]:
        for key, group in sorted(summary["groups"].items()):
            print(
                f"stark: group {key}: mean {group['mean_nm']:+.2f} nm, "
                f"std {group['std_nm']:.2f} nm (n={group['n']})"
            )
    if summary["maps"]:
        print(f"stark: {len(summary['maps'])} plateau-map scene(s)")
    print(f"stark: {summary['n_scenes']} scene(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _html_escape(value) -> str:
    return (
        str(value)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
    )


def _table(headers: tuple, rows: list[tuple]) -> str:
    head = "".join(f"<th>{_html_escape(h)}</th>" for h in headers)
    body = "\n".join(
        "<tr>" + "".join(f"<td>{_html_escape(c)}</td>" for c in row) + "</tr>"
        for row in rows
    )
    return f"<table>\n<tr>{head}</tr>\n{body}\n</table>"


def _load_json(path: Path):
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        log.warning("skipping unparseable %s", path)
        return None


def _report_sections(results: Path) -> list[str]:
    sections: list[str] = []

    locate = _load_json(results / "locate.json")
    if locate is not None:
        rows = [
            (
                s["scene_id"],
                s["n_emitters"],
                "" if s["delta_mean_nm"] is None else f"{s['delta_mean_nm']:.2f}",
                f"{s['rotation_deg']:.4f}",
                "" if s["label"] is None else f"r{s['label']['row']}c{s['label']['column']}",
                len(s["warnings"]),
            )
            for s in locate["scenes"]
        ]
        sections.append(
            "<h2>Localization</h2>\n"
            + f"<p>{locate['n_emitters']} emitters over {locate['n_scenes']} scene(s), "
            + (
                f"mean accuracy {locate['delta_mean_nm']:.2f} nm.</p>\n"
                if locate["delta_mean_nm"] is not None
                else "no accuracy estimate.</p>\n"
            )
            + _table(
                ("scene", "emitters", "delta (nm)", "rotation (deg)", "label", "warnings"),
                rows,
            )
        )
        deltas = []
        for s in locate["scenes"]:
            _, rows_csv = _maybe_csv(results / s["scene_id"] / "emitters.csv")
            deltas.extend(float(r["delta_nm"]) for r in rows_csv)
        if deltas:
            sections.append(
                "<h3>Accuracy distribution</h3>\n"
                + histogram_svg(
                    histogram_rows(deltas, bin_width=0.5), x_label="accuracy (nm)"
                )
            )

    misalign = _load_json(results / "misalign.json")
    _, hist = _maybe_csv(results / "histogram.csv")
    if misalign is not None:
        stats = misalign["stats"]
        text = (
            f"mean {stats['mean_nm']:+.1f} nm, std {stats['std_nm']:.1f} nm "
            f"over {stats['n']} devices"
            if stats is not None
            else f"{misalign['n_matched']} device(s), too few for statistics"
        )
        body = f"<h2>Misalignment</h2>\n<p>{text}; {misalign['n_unmatched']} unmatched.</p>\n"
        if misalign["emitter_yield"] is not None:
            body += f"<p>Post-fabrication emitter yield {misalign['emitter_yield']:.3f}.</p>\n"
        if hist:
            body += histogram_svg(
                [(float(r["bin_center_nm"]), int(r["count"])) for r in hist]
            )
        sections.append(body)

    stark = _load_json(results / "stark.json")
    if stark is not None:
        body = "<h2>Spectral shifts</h2>\n"
        if stark["groups"]:
            body += _table(
                ("group", "mean (nm)", "std (nm)", "n"),
                [
                    (key, f"{g['mean_nm']:+.3f}", f"{g['std_nm']:.3f}", g["n"])
                    for key, g in sorted(stark["groups"].items())
                ],
            )
            _, shifts = _maybe_csv(results / "shifts.csv")
            if shifts:
                body += "\n" + histogram_svg(
                    histogram_rows(
                        [float(r["delta_lambda_nm"]) for r in shifts], bin_width=0.2
                    ),
                    x_label="spectral shift (nm)",
                )
        if stark["maps"]:
            rows = []
            for scene in stark["maps"]:
                for label, line in sorted(scene["lines"].items()):
                    delta = line.get("delta")
                    rows.append(
                        (
                            scene["scene_id"],
                            label,
                            f"{delta['d_lambda0_nm']:+.4f}" if delta else "",
                            f"{delta['d_dipole']:+.3e}" if delta else "",
                            f"{delta['d_polarizability']:+.3e}" if delta else "",
                        )
                    )
            body += "\n<h3>Plateau maps</h3>\n" + _table(
                ("scene", "line", "d lambda0 (nm)", "d dipole", "d polarizability"),
                rows,
            )
        sections.append(body)

    return sections


def _maybe_csv(path: Path) -> tuple[dict, list[dict]]:
    if not path.exists():
        return {}, []
    return read_csv(path)


_REPORT_STYLE = (
    "body{font-family:sans-serif;margin:2em;max-width:60em}"
    "table{border-collapse:collapse;margin:1em 0}"
    "td,th{border:1px solid #999;padding:0.25em 0.6em;text-align:right}"
    "th{background:#eee}"
)


def cmd_report(args) -> int:
    results = Path(args.results)
    if not results.is_dir():
        raise StageFailure("report", f"{results} is not a directory", config_error=True)
    sections = _report_sections(results)
    if not sections:
        raise StageFailure(
            "report", f"no toolkit artifacts under {results}", config_error=True
        )
    out = Path(args.out) if args.out else results
    out.mkdir(parents=True, exist_ok=True)
    html = (
        "<!DOCTYPE html>\n<html><head><meta charset='utf-8'>"
        f"<title>qdalign run report</title><style>{_REPORT_STYLE}</style></head>\n<body>\n"
        "<h1>qdalign run report</h1>\n"
        + "\n".join(sections)
        + "\n</body></html>\n"
    )
    path = out / "report.html"
    atomic_write_text(path, html)
    print(f"report: -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdalign",
        description="Emitter localization, registration and device-alignment runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON (flags override it)")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic corpus from a preset")
    common(p)
    p.add_argument("--preset", help="preset name (fig2b, fig2c, fig3, fig5)")
    p.add_argument("--kind", help="preset scene kind, default per preset")
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.add_argument("--jobs", type=int, help="parallel scene builders")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("locate", help="register markers and localize emitters")
    common(p)
    p.add_argument("--epoch", choices=("pre", "post"), default="pre")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("misalign", help="measure emitter-to-waveguide misalignment")
    common(p)
    p.add_argument("--locate-dir", help="reuse emitter tables from this locate output")
    p.set_defaults(func=cmd_misalign)

    p = sub.add_parser("stark", help="plateau-map and spectrum-pair analysis")
    common(p)
    p.set_defaults(func=cmd_stark)

    p = sub.add_parser("report", help="HTML summary from existing run artifacts")
    p.add_argument("results", help="directory with locate/misalign/stark outputs")
    p.add_argument("--out", help="where to write report.html (default: results dir)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = os.environ.get("QDALIGN_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = getattr(args, "out", None)
    try:
        return args.func(args)
    except StageFailure as err:
        _emit_error(err.record(), out)
        return EXIT_CONFIG if err.config_error else EXIT_RUNTIME
    except ContractError as err:
        _emit_error({"stage": args.command, "error": "config", "message": str(err)}, out)
        return EXIT_CONFIG
    except ToolkitError as err:
        _emit_error({"stage": args.command, "error": "runtime", "message": str(err)}, out)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
