"""Flat ``dotted.key = value`` run configuration with a fixed schema.

Defaults follow the published hyperparameters where those exist; the rest are
desk-scale choices.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0),
    "model.lookback": Key(int, 512),
    "model.patch_len": Key(int, 64),
    "model.d_model": Key(int, 256),
    "model.n_heads": Key(int, 16),
    "model.enc_layers": Key(int, 3),
    "model.dec_layers": Key(int, 3),
    "model.ff_mult": Key(int, 4),
    "model.dropout": Key(float, 0.1),
    "model.horizons": Key(_ints, (96, 192, 336, 720)),
    "model.recon_from_patches": Key(_bool, True),
    "model.isolate_prediction": Key(_bool, True),
    "mask.kind": Key(str, "multi_freq"),
    "mask.k_f": Key(int, 4),
    "mask.a_ratio": Key(float, 0.2, "threshold upper bound as a fraction of L"),
    "mask.bernoulli_p": Key(float, 0.5),
    "mask.ratio": Key(float, 0.4, "mask ratio of the ablation maskers"),
    "register.size": Key(int, 128),
    "register.n_r": Key(int, 3),
    "register.top_k": Key(int, 3),
    "train.lr": Key(float, 5e-4),
    "train.lr_decay_factor": Key(float, 0.5),
    "train.lr_decay_interval": Key(int, 0, "0 = a third of the run"),
    "train.batch_size": Key(int, 64),
    "train.steps": Key(int, 1000),
    "train.stride": Key(int, 1),
    "train.normalize": Key(_bool, True),
    "train.w_reconstruction": Key(float, 1.0),
    "train.w_prediction": Key(float, 1.0),
    "train.w_register": Key(float, 1.0),
    "finetune.lr": Key(float, 5e-4),
    "finetune.steps": Key(int, 100),
    "finetune.batch_size": Key(int, 64),
    "finetune.fraction": Key(float, 1.0),
    "finetune.horizon": Key(int, 96),
    "finetune.patience": Key(int, 0, "early stopping on validation MSE; 0 disables"),
    "finetune.val_interval": Key(int, 50),
    "data.pretrain": Key(_strs, (), "CSV files for pretraining"),
    "data.dataset": Key(str, "", "target CSV for fine-tuning/evaluation"),
    "data.split_ratio": Key(_floats, (), "empty = 6:2:2 for ETT*, 7:1:2 otherwise"),
    "synthetic.domains": Key(int, 0, "0 disables the synthetic corpus"),
    "synthetic.series_per_domain": Key(int, 4),
    "synthetic.timesteps": Key(int, 4000),
    "synthetic.components": Key(int, 2),
    "synthetic.noise_std": Key(float, 0.0),
    "synthetic.band_fraction": Key(float, 0.25, "share of the L/2 spectrum spanned by all domain bands"),
    "eval.batch_size": Key(int, 256),
    "eval.metric_space": Key(str, "raw"),
    "run.name": Key(str, "run"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values = {k: spec.default for k, spec in SCHEMA.items()}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        if key not in SCHEMA:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    return values


def load_config(path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def dump_config(values: dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(values[k])}\n" for k in SCHEMA)
