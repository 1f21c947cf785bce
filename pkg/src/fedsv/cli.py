"""Command line front end: ``fedsv run|sweep|report|config-dump``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import dump_config, load_config
from .errors import ConfigError, DivergenceError
from .orchestrator import (SUCCESS_RATIO, RunConfig, RunSummary, detection_report, run,
                           run_sweep)

log = logging.getLogger("fedsv")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_OUTPUT = 3
EXIT_EMPTY = 4
EXIT_MISSING = 5
EXIT_DIVERGENCE = 6
EXIT_CELL_FAILED = 7

BASE_COLUMNS = ["run_id", "round", "defense", "attack", "malicious_fraction", "loss",
                "accuracy", "selected_count", "excluded_ids"]
_SEED_RE = re.compile(r"-s(\d+)$")


def _num(x) -> str:
    return repr(float(x))


def run_id(cfg: RunConfig) -> str:
    return (f"{cfg.defense.kind}-{cfg.attack.kind}-f{_num(cfg.malicious_fraction)}"
            f"-s{cfg.master_seed}")


def metrics_header(n_clients: int) -> list[str]:
    return BASE_COLUMNS + [f"sv_{k}" for k in range(n_clients)] + ["wall_time_s"]


class MetricsWriter:
    """CSV sink: header, then one flushed row per round."""

    def __init__(self, path, cfg: RunConfig):
        self.cfg = cfg
        self.run_id = run_id(cfg)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(metrics_header(cfg.num_clients))
        self._fh.flush()

    def __call__(self, rec):
        cfg, n = self.cfg, self.cfg.num_clients
        chosen = set(rec.selected)
        excluded = [str(k) for k in range(n) if k not in chosen]
        sv = [_num(v) for v in rec.sv] if rec.sv is not None else [""] * n
        wall = _num(rec.wall_time) if rec.wall_time is not None else ""
        self._csv.writerow([self.run_id, rec.round, cfg.defense.kind, cfg.attack.kind,
                            _num(cfg.malicious_fraction), _num(rec.loss), _num(rec.accuracy),
                            len(rec.selected), ";".join(excluded), *sv, wall])
        self._fh.flush()

    def close(self):
        self._fh.close()


def summary_payload(summary: RunSummary) -> dict:
    cfg = summary.config
    out = {
        "run_id": run_id(cfg),
        "rounds_completed": len(summary.records),
        "final_accuracy": summary.final_accuracy,
        "final_loss": summary.final_loss,
        "baseline_accuracy": summary.baseline_accuracy,
        "success": summary.success,
        "error": summary.error,
    }
    if cfg.defense.kind == "fedsv" and summary.records:
        rep = detection_report(summary)
        out["detection"] = {"precision": rep.precision, "recall": rep.recall,
                            "rounds_to_full_exclusion": rep.rounds_to_full_exclusion}
    return out


def execute(cfg: RunConfig, metrics_path) -> RunSummary:
    """Run one config, streaming rows to ``metrics_path`` and writing a summary file."""
    writer = MetricsWriter(metrics_path, cfg)
    try:
        summary = run(cfg, on_round=writer)
    finally:
        writer.close()
    Path(str(metrics_path) + ".summary.json").write_text(
        json.dumps(summary_payload(summary), indent=2) + "\n", encoding="utf-8")
    return summary


# ------------------------------------------------------------------ helpers

def _load(config_path, seed=None, defense=None):
    if config_path is None:
        cfg, sweep = RunConfig(), {}
    else:
        cfg, sweep = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, master_seed=seed)
    if defense is not None and "," not in defense:
        cfg = replace(cfg, defense=replace(cfg.defense, kind=defense))
        cfg.validate()
    return cfg, sweep


def _config_errors(fn):
    def wrapper(args):
        try:
            return fn(args)
        except FileNotFoundError as exc:
            log.error("missing file: %s", exc.filename or exc)
            return EXIT_MISSING
        except ConfigError as exc:
            log.error("config error: %s", exc)
            return EXIT_CONFIG
    return wrapper


# ----------------------------------------------------------------- commands

@_config_errors
def cmd_run(args) -> int:
    cfg, _ = _load(args.config, args.seed, args.defense)
    out = Path(args.out or "metrics.csv")
    try:
        out.open("w").close()
    except OSError as exc:
        log.error("cannot write %s: %s", out, exc)
        return EXIT_OUTPUT
    try:
        summary = execute(cfg, out)
    except DivergenceError as exc:
        log.error("run diverged: %s", exc)
        return EXIT_DIVERGENCE
    log.info("%s final accuracy %.4f", run_id(cfg), summary.final_accuracy)
    return EXIT_OK


def _parse_fractions(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --fractions value: {exc}") from exc


@_config_errors
def cmd_sweep(args) -> int:
    cfg, sweep = _load(args.config, args.seed, args.defense)
    fractions = _parse_fractions(args.fractions) if args.fractions else sweep.get("fractions")
    reps = args.reps if args.reps is not None else sweep.get("reps", 1)
    if args.defense and "," in args.defense:
        defenses = [d.strip() for d in args.defense.split(",") if d.strip()]
    elif args.defense:
        defenses = [args.defense]
    else:
        defenses = sweep.get("defenses") or [cfg.defense.kind]
    if not fractions:
        log.error("no malicious fractions given (--fractions or sweep.fractions)")
        return EXIT_CONFIG
    if reps < 1:
        log.error("--reps must be >= 1")
        return EXIT_CONFIG
    for d in defenses:
        replace(cfg, defense=replace(cfg.defense, kind=d)).validate()

    out_dir = Path(args.out or "sweep_out")
    try:
        (out_dir / "baseline").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create %s: %s", out_dir, exc)
        return EXIT_OUTPUT

    def runner(c, role):
        folder = out_dir / "baseline" if role == "baseline" else out_dir
        summary = execute(c, folder / f"{run_id(c)}.csv")
        log.info("%s %s accuracy %.4f", role, run_id(c), summary.final_accuracy)
        return summary

    results = run_sweep(cfg, fractions, reps, defenses, runner=runner)
    table = _success_table(results)
    with open(out_dir / "success_rates.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["defense", "malicious_fraction", "runs", "successes", "failed_runs",
                    "success_pct"])
        w.writerows(table)
    for row in table:
        print(f"{row[0]:<14} fraction={row[1]:<6} success={row[5]}% ({row[3]}/{row[2]})")
    failed = sum(1 for r in results if r.error)
    return EXIT_CELL_FAILED if failed else EXIT_OK


def _success_table(results):
    cells = {}
    for s in results:
        key = (s.config.defense.kind, s.config.malicious_fraction)
        cells.setdefault(key, []).append(s)
    rows = []
    for (defense, frac), runs in cells.items():
        ok = sum(1 for s in runs if s.success)
        failed = sum(1 for s in runs if s.error)
        rows.append([defense, _num(frac), len(runs), ok, failed,
                     _num(round(100.0 * ok / len(runs), 4))])
    return rows


def read_metrics_file(path):
    """Valid rows of a metrics CSV as dicts; None if the file is not one."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[: len(BASE_COLUMNS)] != BASE_COLUMNS:
            return None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                log.warning("%s:%d: expected %d columns, got %d; row skipped",
                            path, lineno, len(header), len(row))
                continue
            rec = dict(zip(header, row))
            try:
                rec["round"] = int(rec["round"])
                rec["accuracy"] = float(rec["accuracy"])
                rec["loss"] = float(rec["loss"])
                rec["malicious_fraction"] = float(rec["malicious_fraction"])
                rec["excluded"] = [int(x) for x in rec["excluded_ids"].split(";") if x]
            except ValueError:
                log.warning("%s:%d: unparsable row skipped", path, lineno)
                continue
            rec["has_sv"] = any(rec[c] != "" for c in header if c.startswith("sv_"))
            rec["n_clients"] = sum(1 for c in header if c.startswith("sv_"))
            rows.append(rec)
        return rows


def _run_detection(rows):
    n = rows[0]["n_clients"]
    malicious = set(range(int(round(rows[0]["malicious_fraction"] * n))))
    sv_rows = [r for r in rows if r["has_sv"]]
    tp = fp = fn = 0
    for r in sv_rows:
        ex = set(r["excluded"])
        tp += len(ex & malicious)
        fp += len(ex - malicious)
        fn += len(malicious - ex)
    precision = tp / (tp + fp) if tp + fp else (1.0 if not malicious else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


@_config_errors
def cmd_report(args) -> int:
    root = Path(args.metrics_dir)
    runs = {}
    if root.is_dir():
        for path in sorted(root.rglob("*.csv")):
            rows = read_metrics_file(path)
            for r in rows or []:
                runs.setdefault(r["run_id"], []).append(r)
    if not runs:
        log.error("no metrics rows under %s", root)
        return EXIT_EMPTY

    finals = {rid: max(rows, key=lambda r: r["round"]) for rid, rows in runs.items()}
    baselines = {}
    for rid, last in finals.items():
        if last["defense"] == "fedavg" and last["attack"] == "none" \
                and last["malicious_fraction"] == 0.0:
            baselines[_seed_of(rid)] = last["accuracy"]
    default_base = float(np.mean(list(baselines.values()))) if baselines else None
    if default_base is not None:
        print(f"baseline (clean fedavg) accuracy: {default_base:.4f} "
              f"over {len(baselines)} run(s)")

    groups = {}
    for rid, last in finals.items():
        groups.setdefault((last["defense"], last["attack"], last["malicious_fraction"]),
                          []).append(rid)
    print(f"{'defense':<14}{'attack':<22}{'fraction':>9}{'runs':>6}"
          f"{'final acc':>18}{'success':>9}{'precision':>11}{'recall':>8}")
    long_rows = []
    for (defense, attack, frac), rids in sorted(groups.items()):
        accs = np.array([finals[r]["accuracy"] for r in rids])
        base = [baselines.get(_seed_of(r), default_base) for r in rids]
        hits = [a >= SUCCESS_RATIO * b for a, b in zip(accs, base) if b is not None]
        success = f"{100.0 * np.mean(hits):.0f}%" if hits else "n/a"
        prec = rec = "-"
        if defense == "fedsv":
            det = [_run_detection(sorted(runs[r], key=lambda x: x["round"])) for r in rids]
            prec = f"{np.mean([d[0] for d in det]):.3f}"
            rec = f"{np.mean([d[1] for d in det]):.3f}"
        print(f"{defense:<14}{attack:<22}{frac:>9.3f}{len(rids):>6}"
              f"{accs.mean():>11.4f}±{accs.std():.4f}{success:>9}{prec:>11}{rec:>8}")
        series = f"{defense}|{attack}|{_num(frac)}"
        by_round = {}
        for r in rids:
            for row in runs[r]:
                by_round.setdefault(row["round"], []).append((row["accuracy"], row["loss"]))
        for rnd in sorted(by_round):
            vals = np.array(by_round[rnd])
            long_rows.append([rnd, series + "|accuracy", _num(vals[:, 0].mean())])
            long_rows.append([rnd, series + "|loss", _num(vals[:, 1].mean())])

    long_path = Path(args.out) if args.out else root / "report_long.tsv"
    try:
        with open(long_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["round", "series", "value"])
            w.writerows(long_rows)
    except OSError as exc:
        log.error("cannot write %s: %s", long_path, exc)
        return EXIT_OUTPUT
    return EXIT_OK


def _seed_of(rid):
    m = _SEED_RE.search(rid)
    return int(m.group(1)) if m else None


@_config_errors
def cmd_config_dump(args) -> int:
    cfg, sweep = _load(args.config, args.seed, args.defense)
    text = dump_config(cfg, sweep)
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            log.error("cannot write %s: %s", args.out, exc)
            return EXIT_OUTPUT
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsv", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--defense", help="override defense.kind (sweep: comma list)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("run", help="run one experiment")
    common(p, "metrics CSV path (default metrics.csv)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over malicious fractions and repetitions")
    common(p, "output directory (default sweep_out)")
    p.add_argument("--fractions", help="comma-separated malicious fractions, e.g. 0.2,0.4")
    p.add_argument("--reps", type=int, help="repetitions per cell")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a directory of metrics files")
    p.add_argument("metrics_dir")
    p.add_argument("--out", help="long-format table path (default <dir>/report_long.tsv)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config-dump", help="print the fully resolved config")
    common(p, "write to this file instead of stdout")
    p.set_defaults(func=cmd_config_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
