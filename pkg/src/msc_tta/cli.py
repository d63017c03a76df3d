"""Command-line entry point: run, matrix, report and export-schedule."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .core import ConfigError, TrainingFault
from .evaluation import future_series, imminent_series, summarize, transition_report
from .runlog import SCHEMA_VERSION, LogFormatError, RunLog, dumps, read_log, write_csv, write_log
from .scenarios import CellPartition
from .sim import RunArtifacts, SharedInputs, grid
from .world import build_world, schedule_rows, weather_rows

EXIT_OK, EXIT_CONFIG, EXIT_FAULT, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "MSC_TTA_OUT"
SUMMARY = "summary.json"

log = logging.getLogger("msc_tta")


def _header_line(config_hash: str, seed: int) -> str:
    return f"msc-tta config_hash={config_hash} seed={seed} schema={SCHEMA_VERSION}"


def run_dir_name(config_hash: str, seed: int) -> str:
    return f"{config_hash[:12]}-s{seed}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_report(run_dir: Path, run_log: RunLog, transition_partition: str | None = None) -> dict:
    """Emit the evaluation files for one run directory; returns the summary document."""
    h = run_log.header
    line = _header_line(h["config_hash"], h["seed"])
    imm = imminent_series(run_log)
    fut = future_series(run_log, delay=h["future_delay"])
    for name, series in (("metrics_imminent.csv", imm), ("metrics_future.csv", fut)):
        write_csv(run_dir / name, line, ("time_s", "miou"), series.points())
    part = None
    if transition_partition is not None:
        part = CellPartition(transition_partition, h["n_agents"], h["n_zones"])
    rep = transition_report(run_log, partition=part)
    write_csv(
        run_dir / "transitions.csv",
        f"{line} transitions={rep.n_transitions}",
        ("offset_s", "miou"),
        zip(rep.offsets.tolist(), rep.miou.tolist()),
    )
    try:
        summary = summarize(imm, fut, h["test_start"], h["test_end"]).as_dict()
    except ArithmeticError:
        summary = None
    doc = {
        "schema": SCHEMA_VERSION,
        "config_hash": h["config_hash"],
        "seed": h["seed"],
        "partition": h["partition"],
        "pretrain": h["pretrain"],
        "mode": h["mode"],
        "adapt": h["adapt"],
        "summary": summary,
    }
    _write_json(run_dir / SUMMARY, doc)
    return doc


def save_run(run_dir: Path, doc: cfgmod.Document, art: RunArtifacts) -> dict:
    """Persist a finished run; ``summary.json`` is written last and marks completion."""
    run_dir.mkdir(parents=True, exist_ok=True)
    h = art.log.header
    line = _header_line(h["config_hash"], h["seed"])
    (run_dir / "config.yaml").write_text(f"# {line}\n" + cfgmod.dump_yaml(doc), encoding="utf-8")
    write_log(run_dir / "run.log", art.log)
    write_csv(
        run_dir / "training.csv",
        line,
        ("time_s", "cell", "buffer", "steps", "loss"),
        ((r["t"], r["cell"], r["buf"], r["steps"], r["loss"]) for r in art.log.of_kind("train")),
    )
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for name, snap in art.checkpoints.items():
        (ckpt / f"{name}.bin").write_bytes(snap.to_bytes())
    _write_json(ckpt / "manifest.json", {
        "schema": SCHEMA_VERSION, "config_hash": h["config_hash"], "seed": h["seed"],
        "files": sorted(f"{n}.bin" for n in art.checkpoints),
    })
    return write_report(run_dir, art.log)


def _out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None


def cmd_run(args) -> int:
    doc = cfgmod.load(args.config, args.set)
    seed = args.seed if args.seed is not None else doc.run.world.seed
    cfg = doc.resolved(seed)
    chash = doc.config_hash()
    run_dir = _out_root(args.out) / run_dir_name(chash, seed)
    log.info("running %s/%s/%s seed=%d -> %s", cfg.partition.value, cfg.pretrain.mode.value,
             cfg.mode.value, seed, run_dir)
    art = SharedInputs().run(cfg, config_hash=chash)
    result = save_run(run_dir, dataclasses.replace(doc, run=doc.run.with_seed(seed)), art)
    print(run_dir)
    print(dumps(result["summary"]))
    return EXIT_OK


TABLE_COLUMNS = (
    "scenario", "pretrain", "mode", "adapt", "seed", "config_hash",
    "miou_imminent_3h", "miou_imminent_lasthour", "miou_future_3h",
    "miou_future_lasthour", "miou_imminent_lastquarter",
)


def cmd_matrix(args) -> int:
    doc = cfgmod.load(args.config, args.set)
    m = doc.matrix
    seeds = _seeds(args.seeds) if args.seeds else list(m.seeds)
    root = _out_root(args.out)
    shared = SharedInputs()
    rows = []
    for cfg in grid(doc.run, m.scenarios, m.pretrains, m.modes, seeds, m.adapt):
        seed = cfg.world.seed
        cell_doc = dataclasses.replace(doc, run=cfg)
        chash = cell_doc.config_hash()
        run_dir = root / run_dir_name(chash, seed)
        done = run_dir / SUMMARY
        if done.is_file():
            result = json.loads(done.read_text(encoding="utf-8"))
            log.info("skip %s (complete)", run_dir.name)
        else:
            art = shared.run(cell_doc.resolved(), config_hash=chash)
            result = save_run(run_dir, cell_doc, art)
        s = result["summary"] or {}
        rows.append([cfg.partition.value, cfg.pretrain.mode.value, cfg.mode.value,
                     str(cfg.adapt).lower(), seed, chash[:12]]
                    + [s.get(c) for c in TABLE_COLUMNS[6:]])
    root.mkdir(parents=True, exist_ok=True)
    write_csv(root / "table.csv", f"msc-tta config_hash={doc.config_hash()} seeds={','.join(map(str, seeds))} "
              f"schema={SCHEMA_VERSION}", TABLE_COLUMNS, rows)
    print(root / "table.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    run_log = read_log(run_dir / "run.log")
    try:
        doc = write_report(run_dir, run_log, args.transition_partition)
    except (KeyError, TypeError, IndexError) as exc:
        raise LogFormatError(f"{run_dir / 'run.log'}: inconsistent records ({exc!r})") from None
    print(dumps(doc["summary"]))
    return EXIT_OK


def cmd_export_schedule(args) -> int:
    doc = cfgmod.load(args.config, args.set)
    seed = args.seed if args.seed is not None else doc.run.world.seed
    cfg = doc.resolved(seed)
    world = build_world(cfg.world)
    chash = doc.config_hash()
    out = _out_root(args.out) / run_dir_name(chash, seed)
    out.mkdir(parents=True, exist_ok=True)
    line = _header_line(chash, seed)
    write_csv(out / "schedule.csv", line, ("time_s", "agent_id", "zone_id"), schedule_rows(world))
    write_csv(out / "weather.csv", line, ("time_s", "kind_weights", "sun_altitude_deg"),
              weather_rows(world, args.step))
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msc-tta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", help="YAML config (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, repeatable (e.g. world.dynamic_weather=true)")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        if seeds:
            p.add_argument("--seeds", help="comma-separated seeds, overriding matrix.seeds")
        else:
            p.add_argument("--seed", type=int)

    common(p := sub.add_parser("run", help="execute one run"))
    p.set_defaults(fn=cmd_run)
    common(p := sub.add_parser("matrix", help="execute the scenario grid"), seeds=True)
    p.set_defaults(fn=cmd_matrix)
    p = sub.add_parser("report", help="recompute evaluation files from a run log")
    p.add_argument("run_dir")
    p.add_argument("--transition-partition", help="analyze transitions under another partition")
    p.set_defaults(fn=cmd_report)
    common(p := sub.add_parser("export-schedule", help="write agent paths and the weather timeline"))
    p.add_argument("--step", type=float, default=1.0, help="weather sampling step in seconds")
    p.set_defaults(fn=cmd_export_schedule)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (LogFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
