"""Rolling-window test evaluation, point and probabilistic metrics, and the naive baseline."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import DECILES, ConfigError, EvalPlan
from .etl import FREQ, TimeSeriesRecord
from .features import WindowBatch, make_windows
from .heads import ForecastDistribution, pinball
from .models import ForecastModel


class MetricError(ValueError):
    pass


# -- metrics ---------------------------------------------------------------------

def smape(y, yhat) -> float:
    """200/H * sum |y - yhat| / (|y| + |yhat|) over the horizon, averaged over target dimensions.

    ``y`` and ``yhat`` are (H,) or (H, d_y). Terms with a zero denominator contribute 0.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if y.ndim == 1:
        y, yhat = y[:, None], yhat[:, None]
    den = np.abs(y) + np.abs(yhat)
    ratio = np.divide(np.abs(y - yhat), den, out=np.zeros_like(den), where=den > 0)
    return float((200.0 / y.shape[0] * ratio.sum(axis=0)).mean())


def _quantile_loss_sums(q, y, levels) -> np.ndarray:
    """Per level: sum of pinball losses over all observations. q is (..., K), y is (...)."""
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.array([pinball(q[..., k], y, a).sum() for k, a in enumerate(levels)])


def wql(q, y, alpha: float) -> float:
    """Weighted quantile loss 2 * sum pinball / sum |y| pooled over every observation given."""
    y = np.asarray(y, dtype=np.float64)
    den = np.abs(y).sum()
    if den == 0:
        raise MetricError(f"wQL undefined: all {y.size} targets are zero")
    return float(2.0 * pinball(np.asarray(q, dtype=np.float64), y, alpha).sum() / den)


def crps(q, y, levels=DECILES) -> float:
    """Mean wQL over ``levels``; q is (..., K) aligned with y (...)."""
    y = np.asarray(y, dtype=np.float64)
    den = np.abs(y).sum()
    if den == 0:
        raise MetricError(f"CRPS undefined: all {y.size} targets are zero")
    return float(2.0 * _quantile_loss_sums(q, y, levels).mean() / den)


def crps_sum(samples, y, levels=DECILES) -> float:
    """CRPS of the distribution of the sum over target dimensions.

    ``samples`` is (S, ..., d_y) and ``y`` is (..., d_y).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < len(levels):
        raise MetricError(f"crps_sum needs at least {len(levels)} samples, got {samples.shape[0]}")
    total = samples.sum(axis=-1)
    q = np.moveaxis(np.quantile(total, levels, axis=0), 0, -1)
    return crps(q, np.asarray(y).sum(axis=-1), levels)


# -- naive baseline ----------------------------------------------------------------

def naive_forecast(context, H: int, observed=None) -> ForecastDistribution:
    """Last observed value repeated, Gaussian intervals widening with sqrt(h).

    ``context`` is (B, L, d_y); ``observed`` (B, L) marks real (unpadded)
    steps. Sigma is the root mean square of one-step naive residuals over the
    observed context; fewer than two observations give sigma = 0.
    """
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.ndim == 1:
        ctx = ctx[None, :, None]
    B, L, d_y = ctx.shape
    obs = np.ones((B, L), bool) if observed is None else np.asarray(observed, bool)
    mu = np.zeros((B, d_y))
    sigma = np.zeros((B, d_y))
    for b in range(B):
        vals = ctx[b, obs[b]]
        if len(vals) == 0:
            continue
        mu[b] = vals[-1]
        if len(vals) >= 2:
            sigma[b] = np.sqrt(np.mean(np.diff(vals, axis=0) ** 2, axis=0))
    steps = np.sqrt(np.arange(1, H + 1))[None, :, None]
    return ForecastDistribution("normal", {
        "mu": np.repeat(mu[:, None, :], H, axis=1),
        "sigma": sigma[:, None, :] * steps,
    })


def naive_forecaster(batch: WindowBatch) -> ForecastDistribution:
    ctx = batch.context_targets.astype(np.float64) * batch.scale[:, None, :] + batch.loc[:, None, :]
    return naive_forecast(ctx, batch.H, observed=~batch.pad_mask[:, :batch.L])


def model_forecaster(model: ForecastModel) -> Callable[[WindowBatch], ForecastDistribution]:
    def run(batch: WindowBatch) -> ForecastDistribution:
        with T.no_grad():
            return model.forecast(batch)
    return run


# -- rolling evaluation ----------------------------------------------------------------

def window_starts(length: int, plan: EvalPlan) -> np.ndarray:
    """Index of the first forecast step of each evaluation window, oldest first."""
    return length - plan.H - plan.stride * np.arange(plan.windows - 1, -1, -1)


@dataclass
class WindowRow:
    series_id: str
    window: int
    forecast_start: str
    smape: float
    crps: float          # nan when the window's targets are all zero
    crps_sum: float | None = None


@dataclass
class MetricsReport:
    smape: float
    crps: float
    crps_sum: float | None
    wql: dict
    n_series: int
    n_windows: int
    rows: list = field(default_factory=list)
    fingerprint: str = ""
    undefined_windows: int = 0

    def summary(self) -> dict:
        return {"smape": self.smape, "crps": self.crps, "crps_sum": self.crps_sum,
                "n_series": self.n_series, "n_windows": self.n_windows,
                "undefined_windows": self.undefined_windows, "config_hash": self.fingerprint}

    def to_json(self, path, config: dict | None = None) -> Path:
        doc = {**self.summary(), "wql": {str(k): v for k, v in self.wql.items()},
               "windows": [asdict(r) for r in self.rows]}
        if config is not None:
            doc["config"] = config
        return _atomic_write(path, json.dumps(doc, indent=2, default=_jsonable))

    def to_csv(self, path) -> Path:
        cols = ["row_type", "series_id", "window", "forecast_start", "smape", "crps", "crps_sum", "config_hash"]
        lines = []
        for r in self.rows:
            lines.append(["window", r.series_id, r.window, r.forecast_start, r.smape, r.crps,
                          "" if r.crps_sum is None else r.crps_sum, self.fingerprint])
        lines.append(["summary", "", "", "", self.smape, self.crps,
                      "" if self.crps_sum is None else self.crps_sum, self.fingerprint])
        return _atomic_write_csv(path, cols, lines)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


def _atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def _atomic_write_csv(path, header: list, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
    return path


def rolling_evaluate(forecaster, series: list[TimeSeriesRecord], plan: EvalPlan, L: int,
                     lags=None, chunk: int = 256, fingerprint: str = "") -> MetricsReport:
    """Score ``plan.windows`` end-aligned windows per series.

    ``forecaster`` is a ForecastModel, the string "naive", or any callable
    mapping a WindowBatch to a ForecastDistribution in the original scale.
    Quantiles are Monte-Carlo estimates from ``plan.n_samples`` draws seeded
    per (series, window); ``n_samples = 0`` uses exact quantiles instead.
    """
    if isinstance(forecaster, ForecastModel):
        c = forecaster.config
        if c.H != plan.H:
            raise ConfigError(f"model horizon {c.H} differs from evaluation horizon {plan.H}")
        L, lags = c.L, c.lags
        fn = model_forecaster(forecaster)
    elif forecaster == "naive":
        fn = naive_forecaster
    else:
        fn = forecaster
    lags = tuple(lags) if lags is not None else ()
    if not series:
        raise MetricError("no series to evaluate")
    levels = tuple(plan.levels)
    d_y = series[0].d_y
    n_samples = plan.n_samples or None
    multivariate = d_y > 1
    if multivariate and n_samples is None:
        n_samples = 100

    jobs = []  # (series index, window index, start of context)
    for i, s in enumerate(series):
        firsts = window_starts(s.length, plan)
        if firsts[0] < 1:
            raise MetricError(f"series {s.series_id} of length {s.length} is too short for "
                              f"{plan.windows} windows of {plan.H}")
        jobs.extend((i, w, int(t) - L) for w, t in enumerate(firsts))

    num = np.zeros(len(levels))
    den = 0.0
    num_sum = np.zeros(len(levels))
    den_sum = 0.0
    per_series: dict[int, list] = {}
    rows, undefined = [], 0
    for lo in range(0, len(jobs), chunk):
        part = jobs[lo:lo + chunk]
        idx = np.array([j[0] for j in part])
        starts = np.array([j[2] for j in part])
        batch = make_windows(series, idx, starts, L, plan.H, lags or (1,), dtype=np.float32)
        dist = fn(batch)
        median = dist.median()
        for j, (i, w, start) in enumerate(part):
            rng = np.random.default_rng([plan.seed, i, w])
            dj = dist.take([j])
            t0 = start + L
            y = series[i].targets[:, t0:t0 + plan.H].T.astype(np.float64)
            need_samples = multivariate or (n_samples is not None and dist.kind != "iqf")
            samples = dj.sample(n_samples, rng)[:, 0] if need_samples else None
            if samples is not None and dist.kind != "iqf":
                q = np.moveaxis(np.quantile(samples, levels, axis=0), 0, -1)
            else:
                q = dj.quantiles(levels)[0]
            s_val = smape(y, median[j])
            sums = _quantile_loss_sums(q, y, levels)
            num += sums
            d = float(np.abs(y).sum())
            den += d
            c_val = float(2.0 * sums.mean() / d) if d > 0 else float("nan")
            undefined += d == 0
            cs_val = None
            if multivariate:
                tot = samples.sum(axis=-1)
                qs = np.moveaxis(np.quantile(tot, levels, axis=0), 0, -1)
                ys = y.sum(axis=-1)
                s2 = _quantile_loss_sums(qs, ys, levels)
                num_sum += s2
                den_sum += float(np.abs(ys).sum())
                ds = float(np.abs(ys).sum())
                cs_val = float(2.0 * s2.mean() / ds) if ds > 0 else float("nan")
            rec = series[i]
            first = rec.start + t0 * FREQ
            rows.append(WindowRow(rec.series_id, w, str(first), s_val, c_val, cs_val))
            per_series.setdefault(i, []).append(s_val)
    if den == 0:
        raise MetricError(f"CRPS undefined: all {len(jobs) * plan.H * d_y} test targets are zero")
    wql_levels = {a: float(2.0 * n / den) for a, n in zip(levels, num)}
    crps_val = float(np.mean(list(wql_levels.values())))
    crps_sum_val = float(2.0 * num_sum.mean() / den_sum) if multivariate and den_sum > 0 else None
    smape_val = float(np.mean([np.mean(v) for v in per_series.values()]))
    report = MetricsReport(smape_val, crps_val, crps_sum_val, wql_levels, len(series), len(jobs),
                           rows, fingerprint, int(undefined))
    for v in (report.smape, report.crps):
        if not (math.isfinite(v) and v >= 0):
            raise MetricError(f"non-finite or negative aggregate metric {v}")
    return report
