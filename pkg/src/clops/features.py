"""Window sampling and the feature pipeline feeding every model variant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_LAGS, ModelConfig
from .etl import FREQ, TimeSeriesRecord

NORM_EPS = 1e-10
N_DATETIME = 5


@dataclass
class NormStats:
    loc: np.ndarray
    scale: np.ndarray
    eps: float = NORM_EPS


def instance_normalize(y: np.ndarray, eps: float = NORM_EPS, observed: np.ndarray | None = None):
    """Standardize an (L, d_y) window by its own mean and population std.

    ``observed`` optionally marks which rows count toward the statistics.
    """
    y = np.asarray(y, dtype=np.float64)
    if observed is None:
        loc = y.mean(axis=0)
        var = ((y - loc) ** 2).mean(axis=0)
    else:
        w = np.asarray(observed, dtype=np.float64)[:, None]
        n = max(w.sum(), 1.0)
        loc = (y * w).sum(axis=0) / n
        var = (((y - loc) ** 2) * w).sum(axis=0) / n
    scale = np.sqrt(var + eps)
    return (y - loc) / scale, NormStats(loc, scale, eps)


def unnormalize(y_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(y_norm) * stats.scale + stats.loc


def unnormalize_forecast(dist, stats: NormStats):
    """Map a normalized-scale ForecastDistribution back to the original scale."""
    loc = np.atleast_2d(stats.loc)
    scale = np.atleast_2d(stats.scale)
    try:
        return dist.affine(loc, scale)
    except ValueError as exc:
        raise TypeError(str(exc)) from exc


def log_scale_feature(stats: NormStats) -> np.ndarray:
    return np.log(stats.scale)


def datetime_features(timestamps) -> np.ndarray:
    """minute-of-hour, hour-of-day, day-of-week, day-of-month, day-of-year in [-0.5, 0.5]."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    minutes = ts.astype("datetime64[m]").astype(np.int64)
    days = ts.astype("datetime64[D]")
    minute = minutes % 60
    hour = (minutes // 60) % 24
    dow = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    dom = (days - days.astype("datetime64[M]").astype("datetime64[D]")).astype(np.int64)
    doy = (days - days.astype("datetime64[Y]").astype("datetime64[D]")).astype(np.int64)
    feats = np.stack([minute / 59.0, hour / 23.0, dow / 6.0, dom / 30.0, doy / 365.0], axis=-1)
    return feats - 0.5


def lag_features(y: np.ndarray, positions: np.ndarray, lags=DEFAULT_LAGS):
    """Lagged values y[p - lag] for each position p.

    y is (d_y, T); returns (values (P, d_y, n_lags), valid (P, n_lags)); lags
    reaching before the series start are zero-filled and flagged invalid.
    """
    lags = np.asarray(lags)
    idx = np.asarray(positions)[:, None] - lags[None, :]
    valid = (idx >= 0) & (idx < y.shape[1])
    vals = y[:, np.clip(idx, 0, y.shape[1] - 1)]  # (d_y, P, n_lags)
    vals = np.where(valid[None], vals, 0.0)
    return vals.transpose(1, 0, 2), valid


@dataclass
class WindowBatch:
    context_targets: np.ndarray   # (B, L, d_y) normalized
    future_targets: np.ndarray    # (B, H, d_y) normalized
    dynamic_feats: np.ndarray     # (B, L+H, 5)
    past_dynamic: np.ndarray      # (B, L, d_pd) normalized per channel
    lag_feats: np.ndarray         # (B, L+H, d_y * n_lags) normalized, zero where invalid
    lag_valid: np.ndarray         # (B, L+H, n_lags)
    static_feats: np.ndarray      # (B, d_y + d_s): log-scale then static reals
    pad_mask: np.ndarray          # (B, L+H) True where left padding
    loc: np.ndarray               # (B, d_y)
    scale: np.ndarray             # (B, d_y)
    series_ids: list
    starts: np.ndarray            # (B,) window start index into each series
    lags: tuple = DEFAULT_LAGS

    @property
    def B(self) -> int:
        return self.context_targets.shape[0]

    @property
    def L(self) -> int:
        return self.context_targets.shape[1]

    @property
    def H(self) -> int:
        return self.future_targets.shape[1]

    @property
    def d_y(self) -> int:
        return self.context_targets.shape[2]

    @property
    def stats(self) -> NormStats:
        return NormStats(self.loc, self.scale)

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(
            *(getattr(self, f)[idx] for f in (
                "context_targets", "future_targets", "dynamic_feats", "past_dynamic", "lag_feats",
                "lag_valid", "static_feats", "pad_mask", "loc", "scale")),
            series_ids=[self.series_ids[i] for i in idx], starts=self.starts[idx], lags=self.lags,
        )


def make_windows(series: list[TimeSeriesRecord], index: np.ndarray, starts: np.ndarray,
                 L: int, H: int, lags=DEFAULT_LAGS, dtype=np.float32) -> WindowBatch:
    """Cut windows [start, start + L + H) from ``series[index[b]]``.

    Negative starts are left-padded with zeros and flagged in ``pad_mask``.
    The future part must lie inside the series.
    """
    lags = tuple(lags)
    B, total = len(index), L + H
    first = series[index[0]]
    d_y, d_pd, d_s = first.d_y, first.past_dynamic.shape[0], first.static_real.shape[0]
    ctx = np.zeros((B, L, d_y))
    fut = np.zeros((B, H, d_y))
    dyn = np.zeros((B, total, N_DATETIME))
    pdyn = np.zeros((B, L, d_pd))
    lagf = np.zeros((B, total, d_y * len(lags)))
    lagv = np.zeros((B, total, len(lags)), bool)
    static = np.zeros((B, d_y + d_s))
    pad = np.zeros((B, total), bool)
    loc = np.zeros((B, d_y))
    scale = np.zeros((B, d_y))
    ids = []
    for b, (i, s) in enumerate(zip(index, starts)):
        rec = series[i]
        if rec.d_y != d_y or rec.past_dynamic.shape[0] != d_pd or rec.static_real.shape[0] != d_s:
            raise ValueError(f"series {rec.series_id} has inconsistent dimensions")
        if s + total > rec.length:
            raise ValueError(f"window end {s + total} beyond series {rec.series_id} of length {rec.length}")
        pos = s + np.arange(total)
        obs = pos >= 0
        y = rec.targets.astype(np.float64)
        yw = np.where(obs[:, None], y[:, np.clip(pos, 0, None)].T, 0.0)
        norm_ctx, st = instance_normalize(yw[:L], observed=obs[:L])
        ctx[b] = np.where(obs[:L, None], norm_ctx, 0.0)
        fut[b] = (yw[L:] - st.loc) / st.scale
        loc[b], scale[b] = st.loc, st.scale
        dyn[b] = datetime_features(rec.start + pos * FREQ)
        if d_pd:
            pw = np.where(obs[:L, None], rec.past_dynamic[:, np.clip(pos[:L], 0, None)].T.astype(np.float64), 0.0)
            pn, _ = instance_normalize(pw, observed=obs[:L])
            pdyn[b] = np.where(obs[:L, None], pn, 0.0)
        vals, valid = lag_features(y, pos, lags)
        vals = (vals - st.loc[None, :, None]) / st.scale[None, :, None]
        vals = np.where(valid[:, None, :], vals, 0.0)
        lagf[b] = vals.reshape(total, -1)
        lagv[b] = valid
        static[b, :d_y] = log_scale_feature(st)
        if d_s:
            sr = rec.static_real.astype(np.float64)
            static[b, d_y:] = np.sign(sr) * np.log1p(np.abs(sr))
        pad[b] = ~obs
        ids.append(rec.series_id)
    c = lambda a: a.astype(dtype)
    return WindowBatch(c(ctx), c(fut), c(dyn), c(pdyn), c(lagf), lagv, c(static), pad,
                       loc, scale, ids, np.asarray(starts), lags)


def selection_probabilities(series: list[TimeSeriesRecord]) -> np.ndarray:
    lengths = np.array([s.length for s in series], dtype=np.float64)
    return lengths / lengths.sum()


def slot_rng(seed: int, iteration: int, slot: int) -> np.random.Generator:
    """Generator keyed on (seed, iteration, slot), independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, slot])))


def sample_indices(series: list[TimeSeriesRecord], B: int, L: int, H: int, seed: int, counter: int,
                   cum: np.ndarray | None = None):
    if not series:
        raise ValueError("cannot sample windows from an empty collection")
    if cum is None:
        cum = np.cumsum(selection_probabilities(series))
    index = np.empty(B, dtype=np.int64)
    starts = np.empty(B, dtype=np.int64)
    for b in range(B):
        rng = slot_rng(seed, counter, b)
        i = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(series) - 1)
        n = series[i].length
        if n >= L + H:
            s = int(rng.integers(0, n - L - H + 1))
        else:
            s = n - L - H
        index[b], starts[b] = i, s
    return index, starts


def sample_windows(series: list[TimeSeriesRecord], B: int, L: int, H: int, seed: int, counter: int,
                   lags=DEFAULT_LAGS, dtype=np.float32, cum: np.ndarray | None = None) -> WindowBatch:
    """Length-proportional series choice, uniform window start; deterministic in (seed, counter)."""
    index, starts = sample_indices(series, B, L, H, seed, counter, cum)
    return make_windows(series, index, starts, L, H, lags, dtype)


# -- model inputs -----------------------------------------------------------------

@dataclass
class ModelInputs:
    context: np.ndarray      # (B, L, d_in)
    prediction: np.ndarray   # (B, H, d_in), target channels zeroed, unknown lags zeroed
    prev_targets: np.ndarray  # (B, H, d_y): y_{t-1} for each prediction step (teacher forcing)
    d_in: int


def assemble_inputs(batch: WindowBatch, config: ModelConfig) -> ModelInputs:
    """Concatenate per-position channels: targets | lags | past dynamic | date/time | static.

    At prediction positions the target and past-dynamic channels are zero and
    only lags of at least H steps (known from the context) are kept.
    """
    B, L, H, d_y = batch.B, batch.L, batch.H, batch.d_y
    n_lags = len(batch.lags)
    if d_y != config.d_y or L != config.L or H != config.H:
        raise ValueError(f"batch (d_y={d_y}, L={L}, H={H}) does not match config "
                         f"(d_y={config.d_y}, L={config.L}, H={config.H})")
    if batch.past_dynamic.shape[-1] != config.d_pd or batch.static_feats.shape[-1] != d_y + config.d_s:
        raise ValueError("covariate dimensions do not match config")
    if tuple(batch.lags) != tuple(config.lags):
        raise ValueError("lag set does not match config")
    dtype = batch.context_targets.dtype
    total = L + H
    lagf = batch.lag_feats.copy()
    known = np.asarray(batch.lags) >= H
    pred_lags = lagf[:, L:].reshape(B, H, d_y, n_lags)
    pred_lags[..., ~known] = 0.0
    lagf[:, L:] = pred_lags.reshape(B, H, d_y * n_lags)
    targets = np.concatenate([batch.context_targets, np.zeros((B, H, d_y), dtype)], axis=1)
    pdyn = np.concatenate([batch.past_dynamic, np.zeros((B, H, config.d_pd), dtype)], axis=1)
    parts = [targets, lagf, pdyn]
    if config.use_datetime:
        parts.append(batch.dynamic_feats)
    parts.append(np.broadcast_to(batch.static_feats[:, None, :], (B, total, batch.static_feats.shape[-1])))
    x = np.concatenate(parts, axis=-1).astype(dtype)
    if x.shape[-1] != config.d_in:
        raise ValueError(f"assembled {x.shape[-1]} channels, config expects d_in={config.d_in}")
    prev = np.concatenate([batch.context_targets[:, -1:], batch.future_targets[:, :-1]], axis=1)
    return ModelInputs(x[:, :L], x[:, L:], prev, config.d_in)
