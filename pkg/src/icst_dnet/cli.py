"""Command-line entry point.

Subcommands: synth | train | evaluate | predict | causal-graph | ablate.
Every run writes its artifacts plus a manifest.json capturing the resolved
options, seed, and content hashes of the inputs, so a run can be repeated
from the manifest alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import cgg, dataio, trainer
from .config import VARIANTS, TrainConfig
from .dataio import SynthConfig, TimeFilterArray
from .errors import ConfigError, IcstError
from .roadnet import load_network
from .stcl import relevance_schedule


def _cap_threads() -> None:
    cap = os.environ.get("ICST_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"ICST_THREADS must be an integer, got {cap!r}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(out: str, filenames: list, force: bool) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    existing = [str(out_dir / f) for f in filenames if (out_dir / f).exists()]
    if existing and not force:
        raise ConfigError(
            "refusing to overwrite existing outputs (use --force): "
            + ", ".join(existing)
        )
    return out_dir

def _write_manifest(out_dir: Path, command: str, options: dict, inputs: dict,
                    outputs: list, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "options": options,
        "inputs": {k: _sha256(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "extra": extra or {},
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def _load_config(args) -> TrainConfig:
    """Precedence: explicit flag > config file > dataclass default."""
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    for name in ("seed", "epochs", "variant", "batch_size", "lr", "slot_minutes"):
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    return TrainConfig.from_dict(doc)


def _read_series(args, cfg_slot: int) -> dataio.SpeedSeries:
    start = dt.datetime.fromisoformat(args.start)
    return dataio.ingest_csv(args.data, cfg_slot, start)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    files = ["speeds.csv", "network.csv", "truth.json"]
    out_dir = _prepare_out(args.out, files, args.force)
    steps = args.days * dataio.steps_per_day(args.slot)
    series, network, truth = dataio.synth_diffusion(
        args.roads, steps, args.slot, args.edge_prob, args.seed
    )
    dataio.write_speed_csv(series, out_dir / "speeds.csv")
    lines = ["m,n"] + [f"{m},{n}" for m, n in sorted(network.edges)]
    (out_dir / "network.csv").write_text("\n".join(lines) + "\n")
    dataio.save_truth(truth, out_dir / "truth.json")
    _write_manifest(
        out_dir,
        "synth",
        {
            "roads": args.roads, "days": args.days, "slot": args.slot,
            "edge_prob": args.edge_prob, "seed": args.seed,
            "start": series.start_timestamp.isoformat(),
            "generator": dataclasses.asdict(SynthConfig()),
        },
        {},
        files,
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    files = ["checkpoint.zip", "stats.json", "train_log.csv"]
    out_dir = _prepare_out(args.out, files, args.force)
    series = _read_series(args, cfg.slot_minutes)
    network = load_network(args.network, num_roads=series.num_roads)
    run = trainer.train_pipeline(series, network, cfg, progress=args.progress)
    filt, _ = trainer.pick_filter(cfg)
    trainer.save_checkpoint(
        run.model,
        out_dir / "checkpoint.zip",
        stats=run.prepared.stats,
        filt=filt,
        time_dim=run.prepared.time_dim,
        extra={"start": args.start, "best_epoch": run.log.best_epoch},
    )
    dataio.save_stats(run.prepared.stats, out_dir / "stats.json")
    run.log.write(out_dir / "train_log.csv")
    _write_manifest(
        out_dir,
        "train",
        {"config": cfg.to_dict(), "start": args.start},
        {"data": args.data, "network": args.network, "config_file": args.config},
        files,
        extra={"best_epoch": run.log.best_epoch, "aborted": run.log.aborted},
    )
    return 0


def _restore(args):
    model, manifest = trainer.load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(manifest["config"])
    stats = dataio.NormalizationStats(**manifest["stats"])
    filt = TimeFilterArray(offsets=tuple(manifest["filter_offsets"]))
    series = _read_series(args, cfg.slot_minutes)
    _, min_depth = trainer.pick_filter(cfg)
    prepared = trainer.prepare_data(
        series, filt, cfg.horizon, min_depth=min_depth, stats_override=stats
    )
    return model, cfg, prepared, series


def cmd_evaluate(args) -> int:
    files = ["metrics.json"]
    out_dir = _prepare_out(args.out, files, args.force)
    model, cfg, prepared, _ = _restore(args)
    report = trainer.evaluate(model, prepared, args.split)
    (out_dir / "metrics.json").write_text(report.to_json())
    _write_manifest(
        out_dir,
        "evaluate",
        {"split": args.split, "start": args.start, "config": cfg.to_dict()},
        {"data": args.data, "checkpoint": args.checkpoint},
        files,
    )
    return 0


def cmd_predict(args) -> int:
    files = ["predictions.csv"]
    out_dir = _prepare_out(args.out, files, args.force)
    model, cfg, prepared, series = _restore(args)
    origins = prepared.origins[args.split]
    if origins.size == 0:
        raise ConfigError(f"split {args.split!r} has no predictable windows")
    pred, _ = trainer.predict_batches(model, prepared, origins)
    header = "origin,horizon," + ",".join(
        f"road_{i}" for i in range(series.num_roads)
    )
    lines = [header]
    for s, origin in enumerate(origins):
        for h in range(cfg.horizon):
            row = [str(int(origin)), str(h + 1)]
            row += [repr(float(v)) for v in pred[s, h, :, 0]]
            lines.append(",".join(row))
    (out_dir / "predictions.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out_dir,
        "predict",
        {"split": args.split, "start": args.start},
        {"data": args.data, "checkpoint": args.checkpoint},
        files,
    )
    return 0


def cmd_causal_graph(args) -> int:
    model, manifest = trainer.load_checkpoint(args.checkpoint)
    bank = getattr(model, "stcl", None)
    if bank is None:
        raise ConfigError(
            f"checkpoint variant {model.cfg.variant!r} has no causality branch; "
            "train the 'full' variant to export causal graphs"
        )
    filt = TimeFilterArray(offsets=tuple(manifest["filter_offsets"]))
    margin = model.cfg.graph_margin if args.margin is None else args.margin

    states = bank.all_pair_states()
    gammas = relevance_schedule(model.cfg.l_tcl, model.cfg.gamma_terminal)
    graph = cgg.with_edges(cgg.build_global_graph(states, gammas), margin)

    files = ["graph.dot", "graph.json"]
    tcm_files = [f"tcm_pair_{m}_{n}.csv" for m, n in bank.pairs]
    out_dir = _prepare_out(args.out, files + tcm_files, args.force)
    (out_dir / "graph.dot").write_text(cgg.export_dot(graph))
    (out_dir / "graph.json").write_text(cgg.export_json(graph, margin))
    for state in states:
        tcm = cgg.extract_time_causality(state, filt)
        m, n = state.pair
        (out_dir / f"tcm_pair_{m}_{n}.csv").write_text(cgg.export_heatmap_csv(tcm))
    _write_manifest(
        out_dir,
        "causal-graph",
        {"margin": margin},
        {"checkpoint": args.checkpoint},
        files + tcm_files,
        extra={"row_score": "sum of absolute first-layer weights per offset row"},
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    for tag in variants:
        if tag not in VARIANTS:
            raise ConfigError(f"unknown variant {tag!r}; valid: {', '.join(VARIANTS)}")
    files = ["ablation.csv"]
    out_dir = _prepare_out(args.out, files, args.force)
    series = _read_series(args, cfg.slot_minutes)
    network = load_network(args.network, num_roads=series.num_roads)
    results = trainer.run_ablation(series, network, cfg, variants, progress=args.progress)
    lines = ["variant,mae,rmse,mape"]
    for tag in variants:
        avg = results[tag].avg
        lines.append(f"{tag},{avg['mae']!r},{avg['rmse']!r},{avg['mape']!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out_dir,
        "ablate",
        {"config": cfg.to_dict(), "variants": list(variants), "start": args.start},
        {"data": args.data, "network": args.network, "config_file": args.config},
        files,
    )
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")


def _add_data(p: argparse.ArgumentParser, checkpoint: bool) -> None:
    p.add_argument("--data", required=True, help="speed CSV (rows=steps, cols=roads)")
    p.add_argument(
        "--start", default="2024-01-01T00:00",
        help="timestamp of the first row (ISO format)",
    )
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    else:
        p.add_argument("--network", required=True, help="road edge list CSV or JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icst",
        description="Causality-aware traffic speed forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate planted-causality synthetic data")
    _add_common(p)
    p.add_argument("--roads", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--slot", type=int, default=5, help="minutes per timestep")
    p.add_argument("--edge-prob", type=float, default=0.4)
    p.set_defaults(fn=cmd_synth, seed=0)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_data(p, checkpoint=False)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--slot-minutes", dest="slot_minutes", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _add_common(p)
    _add_data(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("predict", help="write denormalized predictions")
    _add_common(p)
    _add_data(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("causal-graph", help="export causal graphs from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--margin", type=float, default=None)
    p.set_defaults(fn=cmd_causal_graph)

    p = sub.add_parser("ablate", help="train and compare model variants")
    _add_common(p)
    _add_data(p, checkpoint=False)
    p.add_argument(
        "--variants", default=",".join(VARIANTS),
        help="comma-separated variant tags",
    )
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except IcstError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
