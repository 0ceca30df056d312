"""Command-line entry point: data generation, training, evaluation, ablations, reports."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .scene_synth import generate_dataset, read_dataset, write_dataset
from .trainer import (RunConfig, ablate_depth, ablate_layer_mode, ablate_objectives,
                      apply_overrides, config_hash, eval_checkpoint, load_config,
                      run_finetune, run_pretrain)

CONFIG_OVERRIDABLE = ("seed", "batch_size", "pretrain_epochs", "finetune_epochs",
                      "n_graph_layers", "graph_layer_mode", "m_proposals")


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in CONFIG_OVERRIDABLE:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return apply_overrides(cfg, overrides)


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "config": asdict(cfg),
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen_cfg = cfg.generator_config()
    train = generate_dataset(cfg.seed, args.scenes, gen_cfg)
    write_dataset(train, out / "train.jsonl")
    outputs = ["train.jsonl"]
    if args.val_scenes:
        val = generate_dataset(cfg.seed + 999_331, args.val_scenes, gen_cfg)
        write_dataset(val, out / "val.jsonl")
        outputs.append("val.jsonl")
    write_manifest(out, "gen-data", cfg, outputs)
    print(f"wrote {args.scenes} train scenes"
          + (f" and {args.val_scenes} val scenes" if args.val_scenes else "")
          + f" to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    scenes = read_dataset(_require_file(args.data, "dataset"))
    out = Path(args.out)
    ckpt = run_pretrain(scenes, cfg, out)
    write_manifest(out, "pretrain", cfg, [ckpt.name, "pretrain_losses.csv"])
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    scenes = read_dataset(_require_file(args.data, "dataset"))
    ckpt_in = _require_file(args.ckpt, "checkpoint") if args.ckpt else None
    out = Path(args.out)
    ckpt = run_finetune(args.task, scenes, cfg, out, ckpt_in)
    write_manifest(out, "finetune", cfg,
                   [ckpt.name, f"finetune_{args.task}_losses.csv"])
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    scenes = read_dataset(_require_file(args.data, "dataset"))
    ckpt = _require_file(args.ckpt, "checkpoint")
    report = eval_checkpoint(args.task, ckpt, scenes, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"eval_{args.task}.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "eval", cfg, [report_path.name])
    print(json.dumps(report, indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.data)
    train = read_dataset(_require_file(data_dir / "train.jsonl", "train dataset"))
    val = read_dataset(_require_file(data_dir / "val.jsonl", "val dataset"))
    out = Path(args.out)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.grid == "objectives":
        rows = ablate_objectives(train, val, cfg, out, seeds)
    elif args.grid == "depth":
        rows = ablate_depth(train, val, cfg, out)
    else:
        rows = ablate_layer_mode(train, val, cfg, out)
    write_manifest(out, f"ablate-{args.grid}", cfg, [f"{args.grid}.csv"])
    for row in rows:
        print({k: row[k] for k in sorted(row)})
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_paths = [_require_file(p, "csv") for p in args.csv]
    summary_lines = []
    for path in csv_paths:
        with path.open() as f:
            rows = list(csv.DictReader(f))
        if not rows:
            continue
        numeric_cols = [k for k in rows[0]
                        if _is_float(rows[0][k]) and k not in ("epoch", "seed")]
        last = rows[-1]
        summary_lines.append(f"{path.name}: " + ", ".join(
            f"{k}={last[k]}" for k in numeric_cols))
        if not args.no_plots and "epoch" in rows[0]:
            _plot_csv(path, rows, numeric_cols, out)
    summary = out / "summary.txt"
    summary.write_text("\n".join(summary_lines) + "\n")
    print(summary.read_text())
    return 0


def _is_float(value: str) -> bool:
    try:
        float(value)
        return True
    except (TypeError, ValueError):
        return False


def _plot_csv(path: Path, rows: list[dict], cols: list[str], out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [float(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in cols:
        ax.plot(epochs, [float(r[col]) for r in rows], label=col)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=7)
    ax.set_title(path.stem)
    fig.tight_layout()
    fig.savefig(out / f"{path.stem}.png", dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sg3dvl")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--val-scenes", dest="val_scenes", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train on a dataset")
    add_common(p)
    p.add_argument("--data", required=True, help="train.jsonl path")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for one task")
    add_common(p)
    p.add_argument("--task", choices=("ground", "caption", "qa"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="pre-trained checkpoint (omit for scratch)")
    p.add_argument("--out", required=True)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("--task", choices=("ground", "caption", "qa"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="eval_out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    add_common(p)
    p.add_argument("--grid", choices=("objectives", "depth", "mode"), required=True)
    p.add_argument("--data", required=True, help="directory with train.jsonl/val.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render loss/metric CSVs into plots + summary")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_report)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())
