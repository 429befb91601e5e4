"""rose-lab command line.

Exit codes: 0 success, 2 usage/config/data error, 3 numeric abort, 4 checkpoint fingerprint mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from rose_lab.checkpoint import CheckpointError, FingerprintMismatch, load_checkpoint, read_checkpoint, save_checkpoint
from rose_lab.config import ConfigError, dump_config, load_config
from rose_lab.data import Dataset, ParseError, band_specs, load_csv, make_windows, subsample_train, synthetic_dataset
from rose_lab.evaluation import EvaluationError, evaluate, register_report
from rose_lab.model import ModelConfig, RoseModel
from rose_lab.train import NonFiniteLossError, TrainConfig, finetune, pretrain

logger = logging.getLogger("rose_lab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_FINGERPRINT = 0, 2, 3, 4
DATA_DIR_ENV = "ROSE_LAB_DATA_DIR"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config -> objects


def model_config(values: dict) -> ModelConfig:
    try:
        return ModelConfig(
            lookback=values["model.lookback"], patch_len=values["model.patch_len"], d_model=values["model.d_model"],
            n_heads=values["model.n_heads"], enc_layers=values["model.enc_layers"],
            dec_layers=values["model.dec_layers"], ff_mult=values["model.ff_mult"], dropout=values["model.dropout"],
            n_r=values["register.n_r"], horizons=values["model.horizons"], k_f=values["mask.k_f"],
            register_size=values["register.size"], top_k=values["register.top_k"],
            recon_from_patches=values["model.recon_from_patches"],
            isolate_prediction=values["model.isolate_prediction"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from None


def pretrain_config(values: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=values["train.lr"], lr_decay_factor=values["train.lr_decay_factor"],
            lr_decay_interval=values["train.lr_decay_interval"] or None, batch_size=values["train.batch_size"],
            steps=values["train.steps"], seed=values["seed"], mode="pretrain",
            w_reconstruction=values["train.w_reconstruction"], w_prediction=values["train.w_prediction"],
            w_register=values["train.w_register"], mask_kind=values["mask.kind"], a_ratio=values["mask.a_ratio"],
            bernoulli_p=values["mask.bernoulli_p"], mask_ratio=values["mask.ratio"],
            normalize=values["train.normalize"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from None


def finetune_config(values: dict, horizon: int, fraction: float) -> TrainConfig:
    try:
        return TrainConfig(
            lr=values["finetune.lr"], lr_decay_factor=values["train.lr_decay_factor"],
            batch_size=values["finetune.batch_size"], steps=values["finetune.steps"], seed=values["seed"],
            mode="finetune", fewshot_fraction=fraction, horizon=horizon, normalize=values["train.normalize"],
            patience=values["finetune.patience"] or None, val_interval=values["finetune.val_interval"],
        )
    except ValueError as exc:
        raise ConfigError(f"invalid fine-tuning configuration: {exc}") from None


def _resolve(path: str, data_dir: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and data_dir is not None and not p.exists():
        p = data_dir / p
    if not p.is_file():
        raise UsageError(f"dataset not found: {path}")
    return p


def _ratio(values: dict):
    return values["data.split_ratio"] or None


def _domain_bands(values: dict) -> list[tuple[float, float]]:
    n = values["synthetic.domains"]
    top = values["synthetic.band_fraction"] * values["model.lookback"] / 2
    width = (top - 1.0) / n
    return [(1.0 + d * width, 1.0 + (d + 0.8) * width) for d in range(n)]


def synthetic_domains(values: dict, seed_offset: int = 0) -> list[Dataset]:
    rng = np.random.default_rng(values["seed"] + seed_offset)
    out = []
    for d, band in enumerate(_domain_bands(values)):
        specs = band_specs(values["synthetic.series_per_domain"], band, rng, length=values["model.lookback"],
                           n_components=values["synthetic.components"],
                           noise_std=values["synthetic.noise_std"], domain_id=d)
        out.append(synthetic_dataset(specs, values["synthetic.timesteps"], values["seed"] + seed_offset + d,
                                     name=f"synthetic_d{d}"))
    return out


def pretrain_windows(values: dict, data_dir: Path | None):
    datasets = [load_csv(_resolve(p, data_dir), _ratio(values)) for p in values["data.pretrain"]]
    if values["synthetic.domains"] > 0:
        datasets += synthetic_domains(values)
    if not datasets:
        raise UsageError("no pretraining data: set data.pretrain or synthetic.domains")
    windows = []
    for ds in datasets:
        windows += make_windows(ds, "train", values["model.lookback"], values["model.horizons"],
                                stride=values["train.stride"], require_all=False)
    if not windows:
        raise UsageError("pretraining data is too short for the configured lookback and horizons")
    return windows


def target_dataset(values: dict, data_dir: Path | None, override: str | None = None) -> Dataset:
    path = override or values["data.dataset"]
    if path:
        return load_csv(_resolve(path, data_dir), _ratio(values))
    if values["synthetic.domains"] > 0:
        ds = synthetic_domains(values, seed_offset=1000)[0]
        ds.name = "synthetic_target"
        return ds
    raise UsageError("no target dataset: set data.dataset, pass --dataset, or enable synthetic.domains")


# --------------------------------------------------------------------------
# commands


def _setup(args) -> tuple[dict, Path | None]:
    values = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV) or str(Path(args.config).parent)
    return values, Path(data_dir)


def _load(path, expected: ModelConfig, force: bool) -> RoseModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, expected, force=force)


def cmd_pretrain(args) -> int:
    values, data_dir = _setup(args)
    mcfg, tcfg = model_config(values), pretrain_config(values)
    windows = pretrain_windows(values, data_dir)
    out = Path(args.out)
    torch.manual_seed(values["seed"])
    model = RoseModel(mcfg)
    reports = pretrain(model, windows, tcfg, log_path=out.with_suffix(".log.jsonl"))
    save_checkpoint(out, model)
    out.with_suffix(".config").write_text(dump_config(values), encoding="utf-8")
    last = reports[-1] if reports else None
    print(json.dumps({"checkpoint": str(out), "fingerprint": mcfg.fingerprint(), "steps": len(reports),
                      "final_loss": last.total if last else None}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    values, data_dir = _setup(args)
    mcfg = model_config(values)
    horizon = args.horizon if args.horizon is not None else values["finetune.horizon"]
    fraction = args.fraction if args.fraction is not None else values["finetune.fraction"]
    if horizon not in mcfg.horizons:
        raise UsageError(f"horizon {horizon} has no pre-trained head; valid horizons: {list(mcfg.horizons)}")
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must lie in (0, 1], got {fraction}")
    fcfg = finetune_config(values, horizon, fraction)
    model = _load(args.checkpoint, mcfg, args.force)
    target = target_dataset(values, data_dir, args.dataset)
    windows = subsample_train(make_windows(target, "train", mcfg.lookback, [horizon], stride=1), fraction, values["seed"])
    if not windows:
        raise UsageError(f"{target.name}: no training windows for horizon {horizon}")
    out = Path(args.out)
    val = None
    if fcfg.patience is not None:
        val = make_windows(target, "val", mcfg.lookback, [horizon], stride=1)
    finetune(model, windows, fcfg, log_path=out.with_suffix(".log.jsonl"), val_windows=val)
    save_checkpoint(out, model)
    print(json.dumps({"checkpoint": str(out), "horizon": horizon, "fraction": fraction, "windows": len(windows)}))
    return EXIT_OK


def _evaluate(args, mode: str) -> int:
    values, data_dir = _setup(args)
    mcfg = model_config(values)
    model = _load(args.checkpoint, mcfg, args.force)
    target = target_dataset(values, data_dir, args.dataset)
    horizons = [args.horizon] if args.horizon is not None else list(model.config.horizons)
    for h in horizons:
        if h not in model.config.horizons:
            raise UsageError(f"horizon {h} has no head; valid horizons: {list(model.config.horizons)}")
    report = evaluate(model, target, horizons, mode, seed=values["seed"], batch_size=values["eval.batch_size"],
                      normalize=values["train.normalize"], metric_space=values["eval.metric_space"])
    json_path, _ = report.write(args.out, stem=f"{mode}_{target.name}")
    print(json.dumps({"report": str(json_path), "avg_mse": report.avg_mse, "avg_mae": report.avg_mae}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    return _evaluate(args, args.mode)


def cmd_zeroshot(args) -> int:
    return _evaluate(args, "zeroshot")


def _corpus_windows(spec: str, values: dict, data_dir: Path | None, lookback: int):
    if spec.startswith("synthetic:"):
        d = int(spec.split(":", 1)[1])
        domains = synthetic_domains(values, seed_offset=2000)
        if not 0 <= d < len(domains):
            raise UsageError(f"synthetic domain {d} is out of range (have {len(domains)})")
        ds = domains[d]
    else:
        ds = load_csv(_resolve(spec, data_dir), _ratio(values))
    windows = make_windows(ds, "test", lookback, [1], stride=1)
    if not windows:
        raise UsageError(f"corpus {spec} has no test windows of length {lookback}")
    return Path(spec).stem if not spec.startswith("synthetic:") else spec.replace(":", "_"), windows


def cmd_inspect_register(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    config, _, tensors = read_checkpoint(args.checkpoint)
    codebook = tensors.get("register.codebook")
    if codebook is None or not np.isfinite(codebook).all():
        raise UsageError(f"{args.checkpoint}: checkpoint holds no usable register")
    if args.config:
        values, data_dir = _setup(args)
    else:
        from rose_lab.config import SCHEMA
        values = {k: s.default for k, s in SCHEMA.items()}
        data_dir = Path(args.data_dir or os.environ.get(DATA_DIR_ENV) or ".")
    model = load_checkpoint(args.checkpoint)
    corpora = {}
    for spec in args.corpora:
        name, windows = _corpus_windows(spec, values, data_dir, config.lookback)
        corpora[name] = windows
    report = register_report(model, corpora, k=args.top_k)
    paths = report.write(args.out)
    print(json.dumps({"outputs": [str(p) for p in paths], "similarity": report.similarity.tolist()}))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rose-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--data-dir")

    p = sub.add_parser("pretrain", help="pretrain a model and write a checkpoint")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint on one horizon")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--dataset")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_finetune)

    for name, func in (("evaluate", cmd_evaluate), ("zeroshot", cmd_zeroshot)):
        p = sub.add_parser(name, help=f"{name} report on the target test split")
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True, help="run directory for reports")
        p.add_argument("--horizon", type=int)
        p.add_argument("--dataset")
        p.add_argument("--force", action="store_true")
        if name == "evaluate":
            p.add_argument("--mode", choices=("full", "fewshot"), default="full")
        p.set_defaults(func=func)

    p = sub.add_parser("inspect-register", help="register selection histograms and similarity matrix")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int)
    p.add_argument("corpora", nargs="+", help="CSV paths or synthetic:<domain>")
    p.set_defaults(func=cmd_inspect_register)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FingerprintMismatch as exc:
        print(f"error: {exc} (pass --force to override)", file=sys.stderr)
        return EXIT_FINGERPRINT
    except NonFiniteLossError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ParseError, CheckpointError, EvaluationError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
