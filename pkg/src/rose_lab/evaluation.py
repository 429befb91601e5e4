"""Test-split metrics, the repeat-last baseline, masking ablations and register-selection reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from rose_lab.data import Dataset, SeriesWindow, make_windows, normalize_window, subsample_train
from rose_lab.model import ModelConfig, RoseModel
from rose_lab.register import cosine_similarity, selection_histogram
from rose_lab.train import TrainConfig, finetune, forecast, pretrain

Predictor = Callable[[Sequence[SeriesWindow], int], np.ndarray]


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    dataset: str
    mode: str
    horizons: list[int]
    mse: dict[int, float]
    mae: dict[int, float]
    avg_mse: float
    avg_mae: float
    baseline_mse: dict[int, float]
    baseline_mae: dict[int, float]
    n_windows: dict[int, int]
    seed: int = 0
    metric_space: str = "raw"
    normalization: str = "window-zscore"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("mse", "mae", "baseline_mse", "baseline_mae", "n_windows"):
            d[key] = {str(h): v for h, v in d[key].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(self.to_json() + "\n", encoding="utf-8")
        csv_path = out_dir / f"{stem}.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "mode", "horizon", "mse", "mae", "baseline_mse", "baseline_mae", "n_windows"])
            for h in self.horizons:
                w.writerow([self.dataset, self.mode, h, repr(self.mse[h]), repr(self.mae[h]),
                            repr(self.baseline_mse[h]), repr(self.baseline_mae[h]), self.n_windows[h]])
            w.writerow([self.dataset, self.mode, "avg", repr(self.avg_mse), repr(self.avg_mae), "", "", ""])
        return json_path, csv_path


def baseline_repeat_last(window: SeriesWindow, horizon: int) -> np.ndarray:
    return np.full(horizon, float(window.x[-1]))


def _model_predictor(model: RoseModel, mode: str, normalize: bool, batch_size: int) -> Predictor:
    fwd = "zeroshot" if mode == "zeroshot" else "finetune"
    return lambda windows, h: forecast(model, windows, h, fwd, normalize=normalize, batch_size=batch_size)


def evaluate(model: RoseModel | Predictor, dataset: Dataset, horizons: Sequence[int], mode: str = "zeroshot",
             *, lookback: int | None = None, seed: int = 0, batch_size: int = 256, normalize: bool = True,
             metric_space: str = "raw", split: str = "test") -> EvalReport:
    """Score every stride-1 test window; batch size affects throughput only."""
    if metric_space not in ("raw", "normalized"):
        raise ValueError("metric_space must be 'raw' or 'normalized'")
    if isinstance(model, RoseModel):
        lookback = lookback or model.config.lookback
        predict = _model_predictor(model, mode, normalize, batch_size)
    else:
        if lookback is None:
            raise ValueError("lookback is required for a bare predictor")
        predict = model
    mse, mae, bmse, bmae, counts = {}, {}, {}, {}, {}
    for h in horizons:
        windows = make_windows(dataset, split, lookback, [h], stride=1)
        if not windows:
            raise EvaluationError(f"{dataset.name}: no {split} windows for lookback {lookback} + horizon {h}")
        truth = np.stack([w.y[h] for w in windows])
        pred = np.asarray(predict(windows, h), dtype=np.float64)
        base = np.stack([baseline_repeat_last(w, h) for w in windows])
        if metric_space == "normalized":
            stats = np.array([normalize_window(w).norm_stats for w in windows])
            scale = lambda a: (a - stats[:, :1]) / stats[:, 1:]
            truth, pred, base = scale(truth), scale(pred), scale(base)
        mse[h] = float(np.mean((pred - truth) ** 2))
        mae[h] = float(np.mean(np.abs(pred - truth)))
        bmse[h] = float(np.mean((base - truth) ** 2))
        bmae[h] = float(np.mean(np.abs(base - truth)))
        counts[h] = len(windows)
    hs = list(horizons)
    return EvalReport(
        dataset=dataset.name, mode=mode, horizons=hs, mse=mse, mae=mae,
        avg_mse=float(np.mean([mse[h] for h in hs])), avg_mae=float(np.mean([mae[h] for h in hs])),
        baseline_mse=bmse, baseline_mae=bmae, n_windows=counts, seed=seed, metric_space=metric_space,
        normalization="window-zscore" if normalize else "none",
    )


def write_plot_data(path, windows: Sequence[SeriesWindow], predictions: np.ndarray, horizon: int) -> Path:
    """Long-format CSV of prediction vs. truth per window and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "channel", "start", "step", "prediction", "truth"])
        for i, (win, pred) in enumerate(zip(windows, predictions)):
            for t in range(horizon):
                w.writerow([i, win.channel_id, win.start, t, repr(float(pred[t])), repr(float(win.y[horizon][t]))])
    return path


# --------------------------------------------------------------------------
# ablations


def pretrain_finetune_evaluate(pretrain_windows, target: Dataset, model_config: ModelConfig,
                               pretrain_config: TrainConfig, finetune_config: TrainConfig,
                               *, seed: int, mode: str = "fewshot") -> tuple[RoseModel, EvalReport]:
    torch.manual_seed(seed)
    model = RoseModel(model_config)
    pretrain(model, pretrain_windows, replace(pretrain_config, seed=seed))
    h = finetune_config.horizon
    train_windows = make_windows(target, "train", model_config.lookback, [h], stride=1)
    train_windows = subsample_train(train_windows, finetune_config.fewshot_fraction, seed)
    finetune(model, train_windows, replace(finetune_config, seed=seed))
    return model, evaluate(model, target, [h], mode, seed=seed)


def ablation_run(mask_kinds: Sequence[str], pretrain_windows, target: Dataset, model_config: ModelConfig,
                 pretrain_config: TrainConfig, finetune_config: TrainConfig,
                 seeds: Sequence[int] = (0,)) -> dict[str, list[EvalReport]]:
    """One pretrain + fine-tune + evaluate cycle per (mask kind, seed); everything else shared."""
    out = {}
    for kind in mask_kinds:
        cfg = replace(pretrain_config, mask_kind=kind)
        out[kind] = [pretrain_finetune_evaluate(pretrain_windows, target, model_config, cfg, finetune_config,
                                                seed=s)[1] for s in seeds]
    return out


def ablation_table(results: Mapping[str, list[EvalReport]]) -> list[dict]:
    rows = []
    for kind, reports in results.items():
        rows.append({"mask_kind": kind, "seeds": [r.seed for r in reports],
                     "mean_mse": float(np.mean([r.avg_mse for r in reports])),
                     "mean_mae": float(np.mean([r.avg_mae for r in reports]))})
    return rows


# --------------------------------------------------------------------------
# register analysis


@dataclass
class RegisterReport:
    names: list[str]
    histograms: np.ndarray  # (n_corpora, H)
    similarity: np.ndarray  # (n_corpora, n_corpora)

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, hist in zip(self.names, self.histograms):
            p = out_dir / f"histogram_{name}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "count"])
                w.writerows(enumerate(hist.tolist()))
            paths.append(p)
        p = out_dir / "similarity.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["corpus", *self.names])
            for name, row in zip(self.names, self.similarity):
                w.writerow([name, *(repr(float(v)) for v in row)])
        paths.append(p)
        return paths


def _window_matrix(windows, normalize: bool) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows
    if normalize:
        windows = [normalize_window(w) for w in windows]
    return np.stack([w.x for w in windows])


def register_report(model: RoseModel, corpora: Mapping[str, Sequence[SeriesWindow] | np.ndarray],
                    k: int | None = None, normalize: bool = True) -> RegisterReport:
    """Top-K selection histogram per corpus and the all-pairs cosine similarity of those histograms."""
    k = k or model.config.top_k
    names = list(corpora)
    hists = np.stack([selection_histogram(model.register, _window_matrix(corpora[n], normalize), k) for n in names])
    n = len(names)
    sim = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cosine_similarity(hists[i], hists[j])
    return RegisterReport(names, hists, sim)
