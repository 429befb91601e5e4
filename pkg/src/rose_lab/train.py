"""Pretraining and fine-tuning loops, Adam with step decay, zero-shot forecasting."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from rose_lab.data import SeriesWindow, denormalize, normalize_window
from rose_lab.model import RoseModel
from rose_lab.spectral import MASK_KINDS, masked_views

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay_factor: float = 0.5
    lr_decay_interval: int | None = None  # None -> a third of the run
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    mode: str = "pretrain"
    fewshot_fraction: float = 1.0
    horizon: int = 96
    w_reconstruction: float = 1.0
    w_prediction: float = 1.0
    w_register: float = 1.0
    mask_kind: str = "multi_freq"
    a_ratio: float = 0.2
    bernoulli_p: float = 0.5
    mask_ratio: float = 0.4
    normalize: bool = True
    patience: int | None = None  # early stopping on validation MSE; None disables
    val_interval: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.patience is not None and (self.patience < 1 or self.val_interval < 1):
            raise ValueError("patience and val_interval must be >= 1")

    def decay_interval(self) -> int:
        return self.lr_decay_interval or max(1, self.steps // 3)


@dataclass
class LossReport:
    step: int
    lr: float
    total: float
    reconstruction: float = 0.0
    prediction: float = 0.0
    register: float = 0.0
    grad_norm: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# batching


@dataclass
class WindowBatch:
    """Stacked, normalized windows; targets share each window's lookback statistics."""

    x: np.ndarray  # (N, L)
    targets: dict[int, np.ndarray]  # horizon -> (N, F), zeros where missing
    valid: dict[int, np.ndarray]  # horizon -> (N,) bool
    stats: np.ndarray  # (N, 2) mean/std

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        return WindowBatch(self.x[idx], {h: t[idx] for h, t in self.targets.items()},
                           {h: v[idx] for h, v in self.valid.items()}, self.stats[idx])


def stack_windows(windows: Sequence[SeriesWindow], horizons: Sequence[int], normalize: bool = True) -> WindowBatch:
    if not windows:
        raise ValueError("no windows to stack")
    if normalize:
        windows = [normalize_window(w) for w in windows]
    x = np.stack([w.x for w in windows]).astype(np.float64)
    stats = np.array([w.norm_stats if w.norm_stats else (0.0, 1.0) for w in windows], dtype=np.float64)
    targets, valid = {}, {}
    for h in horizons:
        t = np.zeros((len(windows), h))
        ok = np.zeros(len(windows), dtype=bool)
        for i, w in enumerate(windows):
            if h in w.y and len(w.y[h]) == h:
                t[i] = (w.y[h] - stats[i, 0]) / stats[i, 1]
                ok[i] = True
        targets[h], valid[h] = t, ok
    return WindowBatch(x, targets, valid, stats)


class BatchSampler:
    """Seeded epoch-wise shuffling; the last short batch of an epoch is kept."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self._order.size == 0:
            self._order = self.rng.permutation(self.n)
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx


# --------------------------------------------------------------------------
# optimizer


def make_optimizer(params, config: TrainConfig):
    opt = torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_interval(), gamma=config.lr_decay_factor)
    return opt, sched


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach().double() ** 2).sum())
    return math.sqrt(total)


def optimizer_step(optimizer, scheduler=None) -> float:
    """Adam step then schedule step; aborts on any non-finite gradient. Returns the lr used."""
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteLossError("non-finite gradient")
    lr = optimizer.param_groups[0]["lr"]
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return lr


def _to_tensor(a, model: RoseModel) -> torch.Tensor:
    return torch.as_tensor(a, dtype=next(model.parameters()).dtype)


# --------------------------------------------------------------------------
# steps


def pretrain_step(model: RoseModel, batch: WindowBatch, optimizer, scheduler, config: TrainConfig,
                  rng: np.random.Generator, step: int = 0) -> LossReport:
    model.train()
    c = model.config
    views = masked_views(config.mask_kind, batch.x, rng, k_f=c.k_f, a=config.a_ratio * c.lookback,
                         p=config.bernoulli_p, patch_len=c.patch_len, mask_ratio=config.mask_ratio)
    targets = {h: (_to_tensor(batch.targets[h], model), torch.as_tensor(batch.valid[h])) for h in c.horizons}
    optimizer.zero_grad(set_to_none=True)
    losses = model.pretrain_losses(_to_tensor(batch.x, model), _to_tensor(views, model), targets,
                                   weights=(config.w_reconstruction, config.w_prediction, config.w_register))
    total = losses["total"]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite pretrain loss at step {step} (lr={optimizer.param_groups[0]['lr']:.3g}, "
            f"components={ {k: v.item() for k, v in losses.items() if k != 'indices'} })")
    total.backward()
    gn = grad_norm(params)
    if not math.isfinite(gn):
        raise NonFiniteLossError(f"non-finite gradient at step {step} (lr={optimizer.param_groups[0]['lr']:.3g}, grad_norm={gn})")
    lr = optimizer_step(optimizer, scheduler)
    parts = [losses[k].item() for k in ("reconstruction", "prediction", "register")]
    weights = (config.w_reconstruction, config.w_prediction, config.w_register)
    return LossReport(step=step, lr=lr, total=sum(w * v for w, v in zip(weights, parts)),
                      reconstruction=parts[0], prediction=parts[1], register=parts[2], grad_norm=gn)


def finetune_step(model: RoseModel, batch: WindowBatch, optimizer, scheduler, config: TrainConfig,
                  step: int = 0) -> LossReport:
    model.train()
    h = config.horizon
    keep = batch.valid[h]
    optimizer.zero_grad(set_to_none=True)
    loss = model.finetune_loss(_to_tensor(batch.x[keep], model), _to_tensor(batch.targets[h][keep], model), h)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite fine-tune loss at step {step}")
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    gn = grad_norm(params)
    lr = optimizer_step(optimizer, scheduler)
    return LossReport(step=step, lr=lr, total=loss.item(), prediction=loss.item(), grad_norm=gn)


# --------------------------------------------------------------------------
# loops


class _Logger:
    def __init__(self, log_path):
        self.fh = self.timing = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = log_path.open("w", encoding="utf-8")
            self.timing = log_path.with_suffix(".timing.jsonl").open("w", encoding="utf-8")
        self.t0 = time.perf_counter()

    def write(self, report: LossReport):
        if self.fh is not None:
            self.fh.write(report.to_json() + "\n")
            self.timing.write(json.dumps({"step": report.step,
                                          "wall_time": round(time.perf_counter() - self.t0, 4)}) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.timing.close()


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def pretrain(model: RoseModel, windows: Sequence[SeriesWindow] | WindowBatch, config: TrainConfig,
             log_path=None) -> list[LossReport]:
    """Joint reconstruction + prediction + register training.

    Loss records go to ``log_path`` (JSON lines); wall-clock timings go to a
    sibling ``.timing.jsonl`` so the loss log itself stays reproducible.
    """
    rng = seed_everything(config.seed)
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(windows, model.config.horizons, config.normalize)
    params = [p for p in model.parameters() if p.requires_grad]
    opt, sched = make_optimizer(params, config)
    sampler = BatchSampler(len(batch), config.batch_size, rng)
    log = _Logger(log_path)
    reports = []
    try:
        for step in range(config.steps):
            report = pretrain_step(model, batch.take(sampler.next()), opt, sched, config, rng, step)
            reports.append(report)
            log.write(report)
    finally:
        log.close()
    model.eval()
    return reports


def prepare_finetune(model: RoseModel):
    """Freeze the codebook and its query embedding; reset the adapter to identity."""
    model.register.freeze()
    model.adapter.reset()


def _val_mse(model: RoseModel, batch: WindowBatch, h: int) -> float:
    model.eval()
    with torch.no_grad():
        pred = model.predict_path(_to_tensor(batch.x, model), "finetune", [h])[h]
        return float(((pred - _to_tensor(batch.targets[h], model)) ** 2).mean())


def finetune(model: RoseModel, windows: Sequence[SeriesWindow] | WindowBatch, config: TrainConfig,
             log_path=None, reset_adapter: bool = True,
             val_windows: Sequence[SeriesWindow] | None = None) -> list[LossReport]:
    """Single-horizon fine-tuning of backbone, selected head and adapter.

    With ``config.patience`` set and validation windows given, validation MSE is
    checked every ``config.val_interval`` steps; training stops after
    ``patience`` checks without improvement and the best weights are restored.
    """
    h = config.horizon
    if str(h) not in model.heads:
        raise KeyError(f"no pre-trained head for horizon {h}; available: {list(model.config.horizons)}")
    rng = seed_everything(config.seed)
    if reset_adapter:
        prepare_finetune(model)
    else:
        model.register.freeze()
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(windows, [h], config.normalize)
    if not batch.valid[h].any():
        raise ValueError(f"no fine-tuning windows carry horizon-{h} targets")
    batch = batch.take(np.flatnonzero(batch.valid[h]))
    params = [p for name, p in model.named_parameters()
              if p.requires_grad and not (name.startswith("heads.") and name.split(".")[1] != str(h))]
    opt, sched = make_optimizer(params, config)
    sampler = BatchSampler(len(batch), config.batch_size, rng)
    val = None
    if config.patience is not None and val_windows:
        val = stack_windows(val_windows, [h], config.normalize)
        val = val.take(np.flatnonzero(val.valid[h]))
    best, best_state, stale = math.inf, None, 0
    log = _Logger(log_path)
    reports = []
    try:
        for step in range(config.steps):
            report = finetune_step(model, batch.take(sampler.next()), opt, sched, config, step)
            reports.append(report)
            log.write(report)
            if val is not None and len(val) and (step + 1) % config.val_interval == 0:
                score = _val_mse(model, val, h)
                if score < best:
                    best, stale = score, 0
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                else:
                    stale += 1
                    if stale >= config.patience:
                        logger.info("early stop at step %d (best validation MSE %.6g)", step, best)
                        break
    finally:
        log.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return reports


# --------------------------------------------------------------------------
# inference


def forecast(model: RoseModel, windows: Sequence[SeriesWindow], horizon: int, mode: str = "zeroshot",
             normalize: bool = True, batch_size: int = 256) -> np.ndarray:
    """Raw-unit forecasts (N, F) for every window; no window is dropped."""
    if str(horizon) not in model.heads:
        raise KeyError(f"no prediction head for horizon {horizon}; available: {list(model.config.horizons)}")
    model.eval()
    out = []
    with torch.no_grad():
        for lo in range(0, len(windows), batch_size):
            chunk = windows[lo:lo + batch_size]
            if normalize:
                chunk = [normalize_window(w) for w in chunk]
            x = _to_tensor(np.stack([w.x for w in chunk]), model)
            pred = model.predict_path(x, mode, [horizon])[horizon].double().numpy()
            out.extend(denormalize(p, w.norm_stats) for p, w in zip(pred, chunk))
    return np.array(out).reshape(len(windows), horizon)


def zero_shot_forecast(window: SeriesWindow, model: RoseModel, horizon: int) -> np.ndarray:
    return forecast(model, [window], horizon, "zeroshot")[0]
