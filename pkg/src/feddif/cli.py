"""Command-line experiment runner.

    feddif run <config>       base scenario for every seed (+ paired baseline)
    feddif sweep <config>     full sweep grid x seeds
    feddif validate <config>  parse and validate only
    feddif summary <dir>      rebuild the summary table from cell files

Outputs land in ``--output-dir``, else ``$FEDDIF_OUTPUT_ROOT/<name>``
(root defaults to ``./results``).  A config ``output_dir`` replaces
``<name>``; absolute paths are used as given.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from feddif import config as cfgmod
from feddif.learn import TrainingDiverged
from feddif.sim import Mode, run_experiment, summarize

log = logging.getLogger("feddif")

OUTPUT_ROOT_ENV = "FEDDIF_OUTPUT_ROOT"
CSV_COLUMNS = ("round", "test_accuracy", "diffusion_rounds", "subframes_cum",
               "models_cum", "mean_iid_distance", "weight_divergence")
SUMMARY_COLUMNS = ("scenario", "seed", "mode", "peak_accuracy", "peak_round", "final_accuracy",
                   "final_weight_divergence", "total_diffusion_rounds", "total_subframes",
                   "total_models", "target_accuracy", "rounds_to_target",
                   "subframes_to_target", "models_to_target")
NA = "N/A"


# ------------------------------------------------------------------ files

def atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def _fmt(value) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(metrics, provenance: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# provenance: {json.dumps(provenance, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in metrics:
        w.writerow([_fmt(getattr(m, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path) -> list:
    """Rows of a metrics CSV as dicts; provenance comment lines are skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def output_dir_for(spec: cfgmod.ExperimentSpec, flag=None) -> Path:
    if flag:
        return Path(flag)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV) or "results")
    sub = spec.output_dir or spec.name
    return Path(sub) if Path(sub).is_absolute() else root / sub


# ---------------------------------------------------------------- running

def run_cell(cell: cfgmod.Cell) -> dict:
    res = run_experiment(cell.config)
    resolved = cfgmod.config_to_dict(cell.config)
    provenance = {"scenario": cell.scenario, "seed": cell.seed,
                  "params": cfgmod._plain(cell.params), "config": resolved}
    return {
        **provenance,
        "csv": metrics_csv(res.metrics, provenance),
        "metrics": [vars(m).copy() for m in res.metrics],
        "summary": res.summary,
    }


def write_cell(out: Path, record: dict) -> None:
    stem = f"{record['scenario']}__seed{record['seed']}"
    payload = {k: v for k, v in record.items() if k != "csv"}
    atomic_write(out / "cells" / f"{stem}.csv", record["csv"])
    atomic_write(out / "cells" / f"{stem}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_summary(records) -> list:
    """Per-cell summary rows; baselines set the target for their group.

    A group is every cell with the same seed and the same scenario
    parameters apart from ``mode``.  The target is the baseline's peak.
    """
    targets = {}
    for r in records:
        if r["config"]["mode"] == Mode.BASELINE.value:
            key = (cfgmod.group_key(r["params"]), r["seed"])
            targets[key] = r["summary"]["peak_accuracy"]
    rows = []
    for r in records:
        key = (cfgmod.group_key(r["params"]), r["seed"])
        target = targets.get(key, r["config"].get("target_accuracy"))
        metrics = [_MetricView(m) for m in r["metrics"]]
        s = summarize(metrics, target)
        rows.append({"scenario": r["scenario"], "seed": r["seed"],
                     "mode": r["config"]["mode"], **s})
    rows.sort(key=lambda row: (row["scenario"], row["seed"]))
    return rows


class _MetricView:
    def __init__(self, d):
        self.__dict__.update(d)


def write_summary(out: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in SUMMARY_COLUMNS])
    atomic_write(out / "summary.csv", buf.getvalue())
    clean = [{k: (NA if v is None else v) for k, v in row.items()} for row in rows]
    atomic_write(out / "summary.json", json.dumps(clean, indent=2, sort_keys=True) + "\n")


def run_and_persist(spec: cfgmod.ExperimentSpec, out: Path, use_sweep: bool = True,
                    jobs: int = 1) -> list:
    cells = cfgmod.expand(spec, use_sweep=use_sweep)
    log.info("running %d cells into %s", len(cells), out)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_cell, cells))
    else:
        records = [run_cell(c) for c in cells]
    for rec in records:
        write_cell(out, rec)
    rows = build_summary(records)
    write_summary(out, rows)
    return rows


def load_records(out: Path) -> list:
    cells = sorted((Path(out) / "cells").glob("*.json"))
    if not cells:
        raise FileNotFoundError(f"{out}: no cell files under cells/")
    return [json.loads(p.read_text(encoding="utf-8")) for p in cells]


def print_table(rows, stream=None) -> None:
    stream = stream or sys.stdout
    cols = ("scenario", "seed", "peak_accuracy", "total_models", "target_accuracy",
            "rounds_to_target", "models_to_target")
    table = [[_short(row.get(c)) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in table)) if table else len(c)
              for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=stream)
    for r in table:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)), file=stream)


def _short(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddif", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seeds", help="comma-separated seeds, replaces the config list")
        if name != "validate":
            sp.add_argument("--output-dir")
            sp.add_argument("--jobs", type=int, default=1)
    sp = sub.add_parser("summary")
    sp.add_argument("dir")
    return p


def _load(args) -> cfgmod.ExperimentSpec:
    overrides = list(args.overrides)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise cfgmod.ConfigError(f"--seeds: expected integers, got {args.seeds!r}") from None
        overrides.append(f"seeds={json.dumps(seeds)}")
    return cfgmod.load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summary":
            out = Path(args.dir)
            rows = build_summary(load_records(out))
            write_summary(out, rows)
            print_table(rows)
            return 0
        spec = _load(args)
        if args.command == "validate":
            n = len(cfgmod.expand(spec))
            print(f"ok: {spec.name}: {n} cells ({len(spec.seeds)} seeds)")
            return 0
        out = output_dir_for(spec, args.output_dir)
        rows = run_and_persist(spec, out, use_sweep=args.command == "sweep", jobs=args.jobs)
        print_table(rows)
        print(f"wrote {out}")
        return 0
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
