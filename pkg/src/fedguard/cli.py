"""Command-line entry point: ``fedguard run | sweep | report``.

Exit codes: 0 success, 1 runtime failure, 2 bad config or arguments.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import zlib
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import rng as rng_mod
from .config import ConfigError, apply_overrides, config_hash, load_raw, parse_config, resolved_dict
from .export import export_pgm
from .harness import SCHEMA_VERSION, ExperimentConfig, run_experiment
from .metrics import as_image, summarize

SUMMARY_COLUMNS = [
    "rule", "lpips", "psnr", "ssim", "final_accuracy", "mean_accuracy", "indicator_rate", "rounds",
]


def _jsonable(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _decode_float(value):
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return value


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow(["" if row.get(c) is None else row[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def execute(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run one experiment and write records, summary, images and manifest under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    result = run_experiment(cfg)
    records = [r.to_dict() for r in result.records]
    records_path = out_dir / "records.jsonl"
    with open(records_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    window = (cfg.attack.start_round, cfg.rounds) if cfg.attack.kind != "none" else None
    summary = summarize(records, window)
    (out_dir / "summary.csv").write_text(_csv_text([summary]))
    images_dir = out_dir / "images"
    shape = result.state.train.shape
    if result.images and shape is not None:
        images_dir.mkdir(exist_ok=True)
        export_pgm(as_image(result.state.reference, shape), images_dir / "reference.pgm")
        for t, batch in sorted(result.images.items()):
            for j, img in enumerate(batch):
                export_pgm(as_image(img, shape), images_dir / f"round{t:04d}_{j}.pgm")
    manifest = {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "config": resolved_dict(cfg),
        "started": started,
        "artifacts": {
            "records": records_path.name,
            "summary": "summary.csv",
            "images": images_dir.name if images_dir.exists() else None,
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return summary


def _load(args) -> tuple:
    raw = apply_overrides(load_raw(args.config), args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    out = args.out or raw.get("output")
    raw.pop("output", None)
    return raw, out


def cmd_run(args) -> int:
    raw, out = _load(args)
    cfg = parse_config(raw)
    out_dir = Path(out) if out else Path("runs") / config_hash(cfg)[:12]
    summary = execute(cfg, out_dir)
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return 0


def _point_dir(param: str, value) -> str:
    return f"{param}={json.dumps(value)}".replace("/", "_").replace('"', "")


def cmd_sweep(args) -> int:
    if not args.values:
        raise ConfigError("sweep needs at least one value", field="--values")
    raw, out = _load(args)
    base_seed = raw.get("seed", 0)
    if not isinstance(base_seed, int):
        raise ConfigError("must be an integer", field="seed")
    values = [json.loads(v) if _is_json(v) else v for v in args.values]
    points = []
    for v in values:
        point_raw = apply_overrides(raw, [f"{args.param}={json.dumps(v)}"])
        # sub-seed depends only on the value, not on its position in the list
        tag = zlib.crc32(json.dumps(v, sort_keys=True).encode())
        point_raw["seed"] = rng_mod.derive_seed(base_seed, rng_mod.SWEEP, tag)
        points.append((v, parse_config(point_raw)))
    root = Path(out) if out else Path("runs") / f"sweep-{args.param}"
    rows = []
    for v, cfg in points:
        summary = execute(cfg, root / _point_dir(args.param, v))
        rows.append({"value": v, "seed": cfg.seed, "config_hash": config_hash(cfg), **summary})
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(
        json.dumps(_jsonable({"param": args.param, "points": rows}), indent=2, sort_keys=True) + "\n"
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["value"] + SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([json.dumps(row["value"])] + ["" if row.get(c) is None else row[c] for c in SUMMARY_COLUMNS])
    (root / "sweep_summary.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
    except json.JSONDecodeError:
        return False
    return True


def read_records(path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid record ({exc.msg})", line=lineno) from exc
            for key in ("psnr", "ssim"):
                if key in rec:
                    rec[key] = _decode_float(rec[key])
            records.append(rec)
    if not records:
        raise ConfigError(f"{path}: no records")
    return records


def cmd_report(args) -> int:
    rows, schemas = [], set()
    for path in args.records:
        recs = read_records(path)
        schemas.update(r.get("schema") for r in recs)
        if len(schemas) > 1:
            raise ConfigError(f"mixed record schema versions {sorted(map(str, schemas))}", field=str(path))
        rows.append(summarize(recs))
    rows.sort(key=lambda r: str(r["rule"]))
    text = _csv_text(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the experiment seed")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one experiment per parameter value")
    common(p_sweep)
    p_sweep.add_argument("--param", required=True, help="dotted config key, e.g. rule.lambda")
    p_sweep.add_argument("--values", nargs="*", default=[], help="values to sweep")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="join record files into one CSV table")
    p_report.add_argument("records", nargs="+", help="records.jsonl files")
    p_report.add_argument("--out", help="write the table here as well as to stdout")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedguard: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"fedguard: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
