"""Command-line entry point: ``spectrofm <command> --config run.json --seed N --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, Heads, TransformerEncoder, load_model, save_model
from .errors import ConfigError, SpectroError
from .evaluation import ModelSpec, Task, class_keys, export_embeddings, render, run_task, select
from .moe import ExpertBank, RouterConfig, Router, save_bank, train_router
from .objectives import Finetuner, MaskedPretrainer, TrainConfig
from .specgen import DatasetConfig, NormStats, build_dataset, config_hash, derive_seed, generate_dataset, load_dataset

log = logging.getLogger("spectrofm")

SECTIONS = ("dataset", "encoder", "pretrain", "finetune", "router", "eval")
U64_MAX = 2**64 - 1

# Desk-scale defaults; anything in the config file overrides them.
DEFAULTS = {
    "dataset": {},
    "encoder": {"patch": 8, "depth": 2, "dim": 32, "heads": 4},
    "pretrain": {"epochs": 30, "batch_size": 32, "base_lr": 5e-4, "warmup_epochs": 5},
    "finetune": {"epochs": 100, "batch_size": 40, "base_lr": 1e-3, "warmup_epochs": 2, "weight_decay": 5e-4},
    "router": {"model": {"patch": 8}, "train": {"epochs": 20, "batch_size": 32, "base_lr": 1e-3, "warmup_epochs": 2}},
    "eval": {"n_val": 0, "filter": {}},
}


def u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = {}
    for s in SECTIONS:
        base = DEFAULTS.get(s, {})
        over = raw.get(s, {})
        if s == "router":
            merged[s] = {k: {**base.get(k, {}), **over.get(k, {})} for k in ("model", "train")}
        else:
            merged[s] = {**base, **over}
    # validate eagerly so a bad file fails before any work starts
    DatasetConfig.from_dict(merged["dataset"])
    EncoderConfig.from_dict(merged["encoder"])
    TrainConfig.from_dict(merged["pretrain"])
    TrainConfig.from_dict(merged["finetune"])
    RouterConfig.from_dict(merged["router"]["model"])
    TrainConfig.from_dict(merged["router"]["train"])
    return merged


def write_resolved(out: Path, command: str, args: argparse.Namespace, config: dict) -> str:
    """Write ``<command>.resolved.json`` and return its content hash."""
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func", "config")}
    resolved = {"command": command, "args": opts, "config": config}
    digest = config_hash(resolved)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.resolved.json").write_text(json.dumps({**resolved, "config_hash": digest}, indent=2, sort_keys=True))
    return digest


def _data_dir(args, default: str) -> Path:
    return Path(args.data) if args.data else args.out / default


def _open_dataset(path: Path, dataset_cfg: dict, master_seed: int):
    if (path / "manifest.json").is_file():
        return load_dataset(path)
    log.info("no dataset at %s, generating in memory with master seed %d", path, master_seed)
    return build_dataset(DatasetConfig.from_dict(dataset_cfg), master_seed)


def _stats_from(meta: dict) -> NormStats | None:
    return NormStats(**meta["norm_stats"]) if "norm_stats" in meta else None


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg) -> dict:
    out = args.out / args.name
    manifest = generate_dataset(DatasetConfig.from_dict(cfg["dataset"]), out, args.seed)
    return {"dataset": str(out), "count": manifest["count"], "dataset_hash": manifest["config_hash"]}


def cmd_pretrain(args, cfg) -> dict:
    ds = _open_dataset(_data_dir(args, "data"), cfg["dataset"], args.seed)
    if args.protocol:
        ds = select(ds, protocol=[args.protocol])
    S = ds.normalized()
    tc = TrainConfig.from_dict({**cfg["pretrain"], "seed": args.seed})
    enc_cfg = EncoderConfig.from_dict(cfg["encoder"])
    encoder = TransformerEncoder(enc_cfg, args.seed)
    heads = Heads(enc_cfg, 0, args.seed + 1)
    perm = np.random.default_rng(args.seed).permutation(len(S))
    n_val = max(1, len(S) // 10)
    trainer = MaskedPretrainer(encoder, heads, tc)
    if args.resume:
        trainer.load(args.resume)
    result = trainer.fit(S[perm[n_val:]], S[perm[:n_val]], csv_path=args.out / "pretrain_curve.csv")
    trainer.save(args.out / "pretrain_state.ckpt")
    ckpt = args.out / (args.name or "encoder.ckpt")
    save_model(ckpt, encoder, heads, {"norm_stats": ds.manifest["norm_stats"], "protocol": args.protocol})
    return {
        "checkpoint": str(ckpt),
        "initial_val": result.initial_val,
        "best_val": result.best_val,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }


def cmd_finetune(args, cfg) -> dict:
    encoder, pre_heads, meta = load_model(args.checkpoint or args.out / "encoder.ckpt")
    ds = _open_dataset(_data_dir(args, "data"), cfg["dataset"], args.seed)
    task = Task.parse(args.task)
    y, classes = class_keys(ds.labels, task)
    heads = Heads(encoder.config, len(classes), args.seed + 1)
    # the pretrained decoder carries over; the classifier is sized for this task
    heads.decoder.load_arrays(pre_heads.decoder.arrays())
    heads.projector.load_arrays(pre_heads.projector.arrays())
    tc = TrainConfig.from_dict({**cfg["finetune"], "mode": args.mode, "seed": args.seed})
    tuner = Finetuner(encoder, heads, tc)
    result = tuner.fit(ds.normalized(_stats_from(meta)), y)
    result.write_csv(args.out / "finetune_curve.csv")
    ckpt = args.out / "finetuned.ckpt"
    save_model(ckpt, encoder, heads, {**meta, "task": task.value, "classes": classes})
    return {"checkpoint": str(ckpt), "classes": classes, "final": result.curve[-1]}


def cmd_train_router(args, cfg) -> dict:
    paths = args.experts or [args.out / "encoder.ckpt"] * 3
    if len(paths) != 3:
        raise ConfigError("--experts takes exactly three checkpoints (WIFI_LIKE, LTE_LIKE, NR_LIKE)")
    loaded = [load_model(p) for p in paths]
    bank = ExpertBank([m[0] for m in loaded])
    ds = _open_dataset(_data_dir(args, "data"), cfg["dataset"], args.seed)
    stats = _stats_from(loaded[0][2])
    rcfg = RouterConfig.from_dict(cfg["router"]["model"])
    tc = TrainConfig.from_dict({**cfg["router"]["train"], "seed": args.seed})
    router, result = train_router(bank, ds.normalized(stats), ds.column("protocol"), tc, Router(rcfg, args.seed))
    bundle = save_bank(bank, router, args.out / "moe")
    return {"bundle": str(bundle), "final": result.curve[-1], "expert_checksum": bank.checksum()}


def cmd_eval(args, cfg) -> dict:
    ev = cfg["eval"]
    eval_seed = derive_seed(args.seed, "eval")
    ds = _open_dataset(_data_dir(args, "eval_data"), cfg["dataset"], eval_seed)
    ds = select(ds, **ev.get("filter", {}))
    train = {**cfg["finetune"], "mode": args.mode}
    if args.checkpoint and args.checkpoint != "none":
        spec = ModelSpec(checkpoint=str(args.checkpoint), train=train)
    else:
        spec = ModelSpec(encoder=cfg["encoder"], init_seed=args.seed, train=train)
    result = run_task(args.task, ds, spec, args.n_per_class, args.repeats, args.seed, n_val=ev.get("n_val", 0))
    report = result.to_dict()
    (args.out / "metrics.json").write_text(json.dumps(report, indent=2))
    s = result.summary["macro_f1"]
    print(f"{result.task.value} n/class={args.n_per_class} macro-F1 {s['mean']:.4f} +/- {s['std']:.4f}")
    return {"metrics": str(args.out / "metrics.json"), "summary": result.summary}


def cmd_export(args, cfg) -> dict:
    encoder, _, meta = load_model(args.checkpoint or args.out / "encoder.ckpt")
    ds = _open_dataset(_data_dir(args, "data"), cfg["dataset"], args.seed)
    path = Path(args.output) if args.output else args.out / "embeddings.tsv"
    n = export_embeddings(encoder, ds, path, _stats_from(meta))
    return {"embeddings": str(path), "rows": n}


def cmd_render(args, cfg) -> dict:
    ds = _open_dataset(_data_dir(args, "data"), cfg["dataset"], args.seed)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} out of range for {len(ds)} samples")
    S = ds.normalized()[args.index]
    path = Path(args.output) if args.output else args.out / f"spectrogram_{args.index:05d}.pgm"
    img = render(S, path)
    return {"image": str(path), "shape": list(img.shape), "label": ds.labels[args.index]}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--seed", type=u64, default=0, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spectrofm", description="Spectrogram foundation model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a dataset into SGS1 shards")
    g.add_argument("--name", default="data", help="subdirectory of --out")
    g.set_defaults(func=cmd_generate)

    pt = sub.add_parser("pretrain", parents=[common], help="masked spectrogram pretraining")
    pt.add_argument("--data")
    pt.add_argument("--protocol", help="restrict to one protocol (expert pretraining)")
    pt.add_argument("--resume", help="pretrainer state checkpoint to resume from")
    pt.add_argument("--name", help="checkpoint file name (default encoder.ckpt)")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", parents=[common], help="train task heads (FROZEN) or encoder + heads (FT)")
    ft.add_argument("--data")
    ft.add_argument("--checkpoint")
    ft.add_argument("--task", default="modulation")
    ft.add_argument("--mode", choices=["FROZEN", "FT"], default="FROZEN")
    ft.set_defaults(func=cmd_finetune)

    tr = sub.add_parser("train-router", parents=[common], help="train the MoE gate with frozen experts")
    tr.add_argument("--data")
    tr.add_argument("--experts", nargs="+", help="three expert checkpoints in WIFI_LIKE, LTE_LIKE, NR_LIKE order")
    tr.set_defaults(func=cmd_train_router)

    ev = sub.add_parser("eval", parents=[common], help="few-shot evaluation with repeats")
    ev.add_argument("--data", help="evaluation dataset (default: generated from a seed disjoint from --seed)")
    ev.add_argument("--checkpoint", help="encoder checkpoint; 'none' for a random init")
    ev.add_argument("--task", default="modulation")
    ev.add_argument("--n-per-class", type=int, default=8)
    ev.add_argument("--repeats", type=int, default=5)
    ev.add_argument("--mode", choices=["FROZEN", "FT"], default="FROZEN")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export-embeddings", parents=[common], help="write pooled features as TSV")
    ex.add_argument("--data")
    ex.add_argument("--checkpoint")
    ex.add_argument("--output")
    ex.set_defaults(func=cmd_export)

    rd = sub.add_parser("render", parents=[common], help="write one spectrogram as a PGM image")
    rd.add_argument("--data")
    rd.add_argument("--index", type=int, default=0)
    rd.add_argument("--output")
    rd.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"spectrofm: error: {e}", file=sys.stderr)
        return 2
    try:
        digest = write_resolved(args.out, args.command, args, cfg)
        info = args.func(args, cfg)
    except ConfigError as e:
        print(f"spectrofm: error: {e}", file=sys.stderr)
        return 2
    except (SpectroError, OSError) as e:
        print(f"spectrofm: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "config_hash": digest, **info}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
