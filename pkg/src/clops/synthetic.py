"""Synthetic utilization-like collections for desk-scale experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .etl import TimeSeriesRecord

STEPS_PER_DAY = 288
STEPS_PER_HOUR = 12


@dataclass
class SynthParams:
    level: tuple = (20.0, 80.0)
    daily_amp: tuple = (5.0, 20.0)
    hourly_amp: tuple = (2.0, 8.0)
    ar_phi: float = 0.8
    noise_std: float = 1.0
    series_per_attr: int = 10
    start: str = "2020-01-01T00:00:00"


def gen_synthetic(n_series: int, T: int, seed: int = 0, params: SynthParams | None = None,
                  prefix: str = "s", d_y: int = 1) -> list[TimeSeriesRecord]:
    """Daily + hourly sinusoids with random amplitude/phase, AR(1) noise and a per-series level.

    With ``d_y > 1`` every target dimension is an independent draw from the same generator.
    """
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    shape = (n_series, d_y)
    level = rng.uniform(*p.level, size=shape)
    a_day = rng.uniform(*p.daily_amp, size=shape)
    a_hour = rng.uniform(*p.hourly_amp, size=shape)
    ph_day = rng.uniform(0, 2 * np.pi, size=shape)
    ph_hour = rng.uniform(0, 2 * np.pi, size=shape)
    eps = rng.standard_normal((n_series, d_y, T)) * p.noise_std
    noise = signal.lfilter([1.0], [1.0, -p.ar_phi], eps, axis=-1)
    t = np.arange(T)
    y = (level[..., None]
         + a_day[..., None] * np.sin(2 * np.pi * t / STEPS_PER_DAY + ph_day[..., None])
         + a_hour[..., None] * np.sin(2 * np.pi * t / STEPS_PER_HOUR + ph_hour[..., None])
         + noise)
    width = len(str(max(n_series - 1, 1)))
    start = np.datetime64(p.start, "s")
    return [
        TimeSeriesRecord(
            series_id=f"{prefix}{i:0{width}d}", top_level_attr=f"g{i // p.series_per_attr:0{width}d}",
            start=start, targets=y[i], past_dynamic=np.zeros((0, T)),
            static_real=np.zeros(0), missing_mask=np.zeros((d_y, T), bool),
        )
        for i in range(n_series)
    ]
