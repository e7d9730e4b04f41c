"""Pre-training loop, AdamW with warmup + cosine schedule, and the adaptation modes."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, OptimizerState, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, TrainConfig
from .etl import TimeSeriesRecord
from .features import make_windows, sample_windows, selection_probabilities
from .models import ForecastModel, build_model

log = logging.getLogger(__name__)

FINETUNE_GRID = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
MAX_NAN_STREAK = 10


class TrainingError(RuntimeError):
    pass


class TrainingAborted(TrainingError):
    """Loss stayed non-finite for too many consecutive iterations."""

    def __init__(self, iteration: int, recent: list[float]):
        super().__init__(f"aborting at iteration {iteration}: {len(recent)} consecutive non-finite losses "
                         f"(last values {recent[-3:]})")
        self.iteration = iteration
        self.recent = recent


# -- optimizer ---------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine annealing to zero at ``iterations``."""
    if step <= 0 or step > cfg.iterations:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.iterations - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return max(0.0, cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac)))


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return norm


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, wd: float,
               decay: dict | None = None) -> bool:
    """One AdamW update applied in place to the arrays in ``params``.

    Decoupled decay (p <- p - lr*wd*p) runs before the Adam step and only for
    names flagged in ``decay``. Returns False, leaving everything untouched
    except ``state.skipped``, when any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s; skipping update (%d skipped so far)", name, state.skipped)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if decay is None or decay.get(name, True):
            p -= (lr * wd) * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# -- data plumbing -------------------------------------------------------------

def holdout_last_horizon(series: list[TimeSeriesRecord], H: int, min_train: int = 1):
    """Split each series into (head, full) where head drops the final H steps.

    Training samples windows from the heads; validation scores the window that
    ends at each full series' final step.
    """
    train, val = [], []
    for s in series:
        if s.length - H < min_train:
            continue
        train.append(s.slice(0, s.length - H))
        val.append(s)
    if not train:
        raise TrainingError("no series is long enough to hold out a validation horizon")
    return train, val


def validation_loss(model: ForecastModel, series: list[TimeSeriesRecord], batch: int = 64) -> float:
    """Pooled mean head loss over the windows ending at each series' last step."""
    c = model.config
    if not series:
        return float("nan")
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(series), batch):
            idx = np.arange(lo, min(lo + batch, len(series)))
            starts = np.array([series[i].length - c.L - c.H for i in idx])
            wb = make_windows(series, idx, starts, c.L, c.H, c.lags, dtype=model.dtype)
            total += float(model.loss(wb).data) * len(idx)
            count += len(idx)
    return total / count


def _spread(series: list, k: int) -> list:
    if len(series) <= k:
        return list(series)
    idx = np.linspace(0, len(series) - 1, k).round().astype(int)
    return [series[i] for i in idx]


def _dtype(cfg: TrainConfig):
    return np.float64 if cfg.precision == "float64" else np.float32


# -- main loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ForecastModel
    optimizer: OptimizerState
    losses: list = field(default_factory=list)          # one per iteration run here
    val_history: list = field(default_factory=list)     # (iteration, val loss)
    checkpoints: list = field(default_factory=list)
    iteration: int = 0

    @property
    def final_val(self) -> float:
        return self.val_history[-1][1] if self.val_history else float("nan")


def _train_loop(model: ForecastModel, train: list, val: list, cfg: TrainConfig, state: OptimizerState,
                start: int, stop: int, out_dir: Path | None, log_fh, meta: dict) -> TrainResult:
    c = model.config
    params = dict(model.named_parameters())
    decay = {n: p.decay for n, p in params.items()}
    arrays = {n: p.data for n, p in params.items()}
    cum = np.cumsum(selection_probabilities(train))
    result = TrainResult(model, state, iteration=start)
    streak: list[float] = []
    t0 = time.perf_counter()
    for it in range(start + 1, stop + 1):
        batch = sample_windows(train, cfg.batch_size, c.L, c.H, cfg.seed, it, c.lags, dtype=model.dtype, cum=cum)
        loss = model.loss(batch)
        value = float(loss.data)
        lr = lr_at(it, cfg)
        record = {"step": it, "loss": value, "lr": lr}
        if "config_hash" in meta:
            record["config_hash"] = meta["config_hash"]
        if not math.isfinite(value):
            streak.append(value)
            state.skipped += 1
            record["grad_norm"] = None
            log.warning("non-finite loss at iteration %d", it)
            if len(streak) >= MAX_NAN_STREAK:
                raise TrainingAborted(it, streak)
        else:
            streak.clear()
            model.zero_grad()
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            norm = clip_gradients(grads, cfg.clip_norm)
            adamw_step(arrays, grads, state, lr, cfg.weight_decay, decay)
            record["grad_norm"] = norm
        result.losses.append(value)
        result.iteration = it
        at_eval = (cfg.eval_every > 0 and it % cfg.eval_every == 0) or it == cfg.iterations
        if at_eval:
            vl = validation_loss(model, val)
            result.val_history.append((it, vl))
            record["val_loss"] = vl
            if out_dir is not None:
                path = save_checkpoint(model, out_dir / f"ckpt_{it:07d}.clops", state,
                                       {**meta, "iteration": it, "val_loss": vl})
                result.checkpoints.append(path)
        record["wallclock"] = round(time.perf_counter() - t0, 4)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
            log_fh.flush()
    return result


def pretrain(series: list[TimeSeriesRecord], model_config: ModelConfig, train_config: TrainConfig,
             out_dir=None, resume_from=None, stop_at: int | None = None,
             model: ForecastModel | None = None, meta: dict | None = None) -> TrainResult:
    """Train ``model_config`` on ``series``; the last horizon of each series is held out for validation.

    ``out_dir`` receives ``train.jsonl``, a checkpoint every ``eval_every``
    iterations and ``final.clops``. ``resume_from`` continues a run from a
    checkpoint holding optimizer state; ``stop_at`` ends early (for resumption
    tests and staged runs) without changing the schedule. ``meta`` is stored
    in every checkpoint header (and its ``config_hash`` in every log line).
    """
    cfg = train_config
    with T.precision(_dtype(cfg)):
        train, val = holdout_last_horizon(series, model_config.H)
        val = _spread(val, cfg.max_val_series)
        start = 0
        if resume_from is not None:
            ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
            if ckpt.optimizer is None:
                raise TrainingError("checkpoint has no optimizer state; cannot resume")
            model, state = ckpt.model, ckpt.optimizer
            start = int(ckpt.meta.get("iteration", state.step + state.skipped))
            if ckpt.config != model_config:
                raise ConfigError("resume checkpoint was trained with a different model config")
        else:
            if model is None:
                model, _ = build_model(model_config, seed=cfg.seed)
            state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        stop = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
        meta = {**(meta or {}), "train": cfg.to_dict()}
        out = Path(out_dir) if out_dir is not None else None
        log_fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_fh = open(out / "train.jsonl", "a" if start else "w")
        try:
            result = _train_loop(model, train, val, cfg, state, start, stop, out, log_fh, meta)
        finally:
            if log_fh is not None:
                log_fh.close()
        if out is not None and stop == cfg.iterations:
            result.checkpoints.append(save_checkpoint(
                model, out / "final.clops", state,
                {**meta, "iteration": stop, "val_loss": result.final_val}))
    return result


# -- adaptation -------------------------------------------------------------------

def _check_compatible(config: ModelConfig, series: list[TimeSeriesRecord]) -> None:
    for s in series:
        dims = (s.d_y, s.past_dynamic.shape[0], s.static_real.shape[0])
        if dims != (config.d_y, config.d_pd, config.d_s):
            raise ConfigError(f"series {s.series_id} has (d_y, d_pd, d_s)={dims}, model expects "
                              f"{(config.d_y, config.d_pd, config.d_s)}")


def zero_shot(model: ForecastModel | Checkpoint, series: list[TimeSeriesRecord]) -> ForecastModel:
    """Return the pre-trained model untouched after checking the collection fits it."""
    if isinstance(model, Checkpoint):
        model = model.model
    _check_compatible(model.config, series)
    return model


def train_scratch(train_region: list[TimeSeriesRecord], model_config: ModelConfig,
                  train_config: TrainConfig, out_dir=None, meta: dict | None = None) -> TrainResult:
    """The no-pre-training comparator: same architecture, trained on the train region only."""
    if not train_region:
        raise TrainingError("empty train region")
    _check_compatible(model_config, train_region)
    return pretrain(train_region, model_config, train_config, out_dir=out_dir, meta=meta)


@dataclass
class FinetuneResult:
    model: ForecastModel
    best_lr: float | None
    grid: dict            # lr -> validation loss (nan when the run diverged)
    fallback: bool        # True when every run diverged and the input model is returned
    baseline_val: float = float("nan")


def _clone(model: ForecastModel) -> ForecastModel:
    twin, _ = build_model(model.config)
    twin.load_state_dict(model.state_dict())
    return twin


def finetune(model: ForecastModel | Checkpoint, train_region: list[TimeSeriesRecord], train_config: TrainConfig,
             lr_grid=FINETUNE_GRID) -> FinetuneResult:
    """Fine-tune a copy per learning rate and keep the one with the lowest validation loss.

    Validation is the last horizon of the train region; fine-tuning sees the
    train region without it.
    """
    if isinstance(model, Checkpoint):
        model = model.model
    if not train_region:
        raise TrainingError("empty train region")
    _check_compatible(model.config, train_region)
    if not lr_grid:
        raise ConfigError("learning-rate grid is empty")
    with T.precision(_dtype(train_config)):
        train, val = holdout_last_horizon(train_region, model.config.H)
        val = _spread(val, train_config.max_val_series)
        baseline = validation_loss(model, val)
        grid, best, best_lr = {}, None, None
        for lr in lr_grid:
            cfg = dataclasses.replace(train_config, peak_lr=float(lr))
            twin = _clone(model)
            state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
            try:
                run = _train_loop(twin, train, val, dataclasses.replace(cfg, eval_every=0), state, 0,
                                  cfg.iterations, None, None, {})
                vl = run.final_val
            except TrainingAborted as exc:
                log.warning("fine-tune at lr=%g diverged: %s", lr, exc)
                vl = float("nan")
            grid[float(lr)] = vl
            if math.isfinite(vl) and (best is None or vl < grid[best_lr]):
                best, best_lr = twin, float(lr)
    if best is None:
        return FinetuneResult(model, None, grid, True, baseline)
    return FinetuneResult(best, best_lr, grid, False, baseline)
