"""Cluster-trace ingestion: row-format CSV to cleaned, aligned 5-minute series and leakage-free splits."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

log = logging.getLogger(__name__)

FREQ_SECONDS = 300
FREQ = np.timedelta64(FREQ_SECONDS, "s")
MIN_LENGTH = 48 * (12 + 1 + 1)


@dataclass(frozen=True)
class TraceSchema:
    kind: str
    entity: str
    top_level: str
    targets: tuple
    past_dynamic: tuple
    static_real: tuple = ()
    timestamp: str = "timestamp"
    reference: str = "2016-11-15T00:00:00"
    missing_thresh: float = 0.01
    irregular: bool = False

    @property
    def metrics(self) -> tuple:
        return self.targets + self.past_dynamic + self.static_real


SCHEMAS = {
    "azure2017": TraceSchema(
        kind="azure2017", entity="vm_id", top_level="subscription_id",
        targets=("avg_cpu",), past_dynamic=("min_cpu", "max_cpu"),
        static_real=("vm_virtual_core_count", "vm_memory", "deployment_size"),
        reference="2016-11-15T00:00:00", missing_thresh=0.00125,
    ),
    "borg2011": TraceSchema(
        kind="borg2011", entity="task_id", top_level="user",
        targets=("cpu_rate", "canonical_memory_usage"),
        past_dynamic=("assigned_memory_usage", "unmapped_page_cache", "total_page_cache",
                      "local_disk_space_usage", "sample_portion"),
        reference="2011-05-01T19:00:00", missing_thresh=0.01,
    ),
    "ali2018": TraceSchema(
        kind="ali2018", entity="container_id", top_level="app_du",
        targets=("cpu_util_percent", "mem_util_percent"),
        past_dynamic=("cpi", "mem_gps", "mpki", "net_in", "net_out", "disk_io_percent"),
        reference="2018-01-01T12:00:00", missing_thresh=0.01, irregular=True,
    ),
    "synthetic": TraceSchema(
        kind="synthetic", entity="series_id", top_level="group",
        targets=("value",), past_dynamic=(), reference="2020-01-01T00:00:00", missing_thresh=0.01,
    ),
}


class SchemaError(ValueError):
    pass


class CleaningError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class TraceRow:
    entity_id: str
    top_level_attr: str
    timestamp: int
    metrics: dict


@dataclass
class ParseReport:
    rows: int = 0
    skipped: int = 0
    reasons: Counter = field(default_factory=Counter)


@dataclass
class TimeSeriesRecord:
    series_id: str
    top_level_attr: str
    start: np.datetime64
    targets: np.ndarray          # (d_y, T) float32
    past_dynamic: np.ndarray     # (d_pd, T) float32
    static_real: np.ndarray      # (d_s,) float32
    missing_mask: np.ndarray     # (d_y, T) bool

    def __post_init__(self):
        self.start = np.datetime64(self.start, "s")
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float32))
        t = self.targets.shape[1]
        pd_ = np.asarray(self.past_dynamic, dtype=np.float32)
        self.past_dynamic = pd_.reshape(-1, t) if pd_.size else np.zeros((0, t), np.float32)
        self.static_real = np.asarray(self.static_real, dtype=np.float32).reshape(-1)
        mm = np.asarray(self.missing_mask, dtype=bool)
        self.missing_mask = mm.reshape(self.targets.shape) if mm.size else np.zeros(self.targets.shape, bool)

    @property
    def length(self) -> int:
        return self.targets.shape[1]

    @property
    def d_y(self) -> int:
        return self.targets.shape[0]

    @property
    def end(self) -> np.datetime64:
        """Timestamp of the final observation."""
        return self.start + (self.length - 1) * FREQ

    def timestamps(self) -> np.ndarray:
        return self.start + np.arange(self.length) * FREQ

    def slice(self, a: int, b: int | None = None) -> "TimeSeriesRecord":
        b = self.length if b is None else b
        return TimeSeriesRecord(
            self.series_id, self.top_level_attr, self.start + a * FREQ,
            self.targets[:, a:b].copy(), self.past_dynamic[:, a:b].copy(),
            self.static_real.copy(), self.missing_mask[:, a:b].copy(),
        )

    def equals(self, other: "TimeSeriesRecord") -> bool:
        return (
            self.series_id == other.series_id and self.top_level_attr == other.top_level_attr
            and self.start == other.start
            and np.array_equal(self.targets, other.targets, equal_nan=True)
            and np.array_equal(self.past_dynamic, other.past_dynamic, equal_nan=True)
            and np.array_equal(self.static_real, other.static_real, equal_nan=True)
            and np.array_equal(self.missing_mask, other.missing_mask)
        )


# -- parsing -----------------------------------------------------------------

def _to_float(text: str):
    text = text.strip()
    if text == "" or text.lower() in ("nan", "null", "none", "na"):
        return None
    return float(text)


def parse_trace(stream: TextIO | Iterable[str], schema: str | TraceSchema,
                report: ParseReport | None = None) -> Iterator[TraceRow]:
    """Yield typed rows from a headed CSV stream; bad rows are counted in ``report``."""
    sch = SCHEMAS[schema] if isinstance(schema, str) else schema
    report = report if report is not None else ParseReport()
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    mandatory = (sch.timestamp, sch.entity, sch.top_level) + sch.targets
    missing = [c for c in mandatory if c not in header]
    if missing:
        raise SchemaError(f"{sch.kind}: missing mandatory column(s) {missing}")
    optional = [c for c in sch.past_dynamic + sch.static_real if c in header]
    for row in reader:
        report.rows += 1
        try:
            ts = float(row[sch.timestamp])
        except (TypeError, ValueError):
            ts = math.nan
        if not math.isfinite(ts) or ts < 0:
            report.skipped += 1
            report.reasons["bad_timestamp"] += 1
            continue
        entity = (row[sch.entity] or "").strip()
        if not entity:
            report.skipped += 1
            report.reasons["missing_entity"] += 1
            continue
        metrics = {}
        try:
            for c in sch.targets + tuple(optional):
                metrics[c] = _to_float(row[c] or "")
        except ValueError:
            report.skipped += 1
            report.reasons["bad_metric"] += 1
            continue
        yield TraceRow(entity, (row[sch.top_level] or "").strip(), int(ts), metrics)


# -- aggregation ---------------------------------------------------------------

def aggregate_series(rows: Iterable[TraceRow], schema: str | TraceSchema) -> list[TimeSeriesRecord]:
    """Group rows per entity onto a 5-minute grid.

    Regular traces keep the first row of each bin (duplicate timestamps);
    irregular traces average all samples in a bin. Empty bins become nulls.
    """
    sch = SCHEMAS[schema] if isinstance(schema, str) else schema
    groups: dict[str, list[TraceRow]] = defaultdict(list)
    for r in rows:
        groups[r.entity_id].append(r)
    ref = np.datetime64(sch.reference, "s")
    out = []
    for entity in sorted(groups):
        rs = sorted(groups[entity], key=lambda r: r.timestamp)  # stable: first occurrence wins
        bins = np.array([r.timestamp // FREQ_SECONDS for r in rs])
        first, last = int(bins[0]), int(bins[-1])
        n = last - first + 1

        def column(names):
            arr = np.full((len(names), n), np.nan)
            counts = np.zeros((len(names), n))
            for r, b in zip(rs, bins):
                j = b - first
                for i, name in enumerate(names):
                    v = r.metrics.get(name)
                    if sch.irregular:
                        if v is not None:
                            arr[i, j] = v if counts[i, j] == 0 else arr[i, j] + v
                            counts[i, j] += 1
                    elif counts[i, j] == 0:
                        counts[i, j] = 1
                        arr[i, j] = np.nan if v is None else v
            if sch.irregular:
                with np.errstate(invalid="ignore"):
                    arr = arr / np.where(counts > 0, counts, np.nan)
            return arr

        targets = column(sch.targets)
        present = [c for c in sch.past_dynamic if any(c in r.metrics for r in rs)]
        past = column(present) if present else np.zeros((0, n))
        static = []
        for c in sch.static_real:
            vals = [r.metrics.get(c) for r in rs if r.metrics.get(c) is not None]
            if vals:
                static.append(vals[0])
        out.append(TimeSeriesRecord(
            series_id=entity, top_level_attr=rs[0].top_level_attr,
            start=ref + first * FREQ, targets=targets, past_dynamic=past,
            static_real=np.array(static), missing_mask=np.isnan(targets),
        ))
    return out


# -- cleaning --------------------------------------------------------------------

def _carry_forward(x: np.ndarray) -> np.ndarray:
    """Fill NaNs along the last axis with the previous value; leading NaNs take the first observed value."""
    x = x.copy()
    for row in x:
        bad = np.isnan(row)
        if not bad.any():
            continue
        if bad.all():
            row[:] = 0.0
            continue
        idx = np.where(~bad, np.arange(len(row)), 0)
        np.maximum.accumulate(idx, out=idx)
        first = np.argmax(~bad)
        filled = row[idx]
        filled[:first] = row[first]
        row[:] = filled
    return x


@dataclass
class CleaningReport:
    kept: int = 0
    rejected: dict = field(default_factory=dict)  # series_id -> reason

    def counts(self) -> dict:
        return dict(Counter(self.rejected.values()))


def clean_series(series: list[TimeSeriesRecord], min_len: int = MIN_LENGTH,
                 missing_thresh: float = 0.01) -> tuple[list[TimeSeriesRecord], CleaningReport]:
    report = CleaningReport()
    kept = []
    for s in series:
        if s.length < min_len:
            report.rejected[s.series_id] = "too_short"
            continue
        missing = s.missing_mask.any(axis=0).mean()
        if missing > missing_thresh:
            report.rejected[s.series_id] = "too_missing"
            continue
        y = s.targets
        constant = False
        for row in y:
            obs = row[~np.isnan(row)]
            if obs.size == 0 or np.all(obs == obs[0]):
                constant = True
        if constant:
            report.rejected[s.series_id] = "constant"
            continue
        kept.append(TimeSeriesRecord(
            s.series_id, s.top_level_attr, s.start, _carry_forward(s.targets),
            _carry_forward(s.past_dynamic), np.nan_to_num(s.static_real), s.missing_mask,
        ))
    report.kept = len(kept)
    if not kept:
        raise CleaningError(f"no series survived cleaning ({report.counts()})")
    return kept, report


# -- splitting ---------------------------------------------------------------------

@dataclass
class SplitPlan:
    pretrain_attrs: frozenset
    traintest_attrs: frozenset
    end_timestamp: np.datetime64
    test_start: np.datetime64
    seed: int

    def __post_init__(self):
        overlap = self.pretrain_attrs & self.traintest_attrs
        assert not overlap, f"attributes in both splits: {sorted(overlap)[:5]}"


def make_split(series: list[TimeSeriesRecord], frac: float = 0.10, seed: int = 0,
               H: int = 48, windows: int = 12) -> SplitPlan:
    """Choose train-test top-level attributes at random; everything else is pre-train."""
    if not 0.0 < frac < 1.0:
        raise SplitError(f"frac must lie in (0, 1), got {frac}")
    if not series:
        raise SplitError("cannot split an empty collection")
    end = max(s.end for s in series)
    by_attr: dict[str, list] = defaultdict(list)
    for s in series:
        by_attr[s.top_level_attr].append(s)
    valid = sorted(a for a, ss in by_attr.items() if any(s.end == end for s in ss))
    n_valid_series = sum(len(by_attr[a]) for a in valid)
    n = int(round(len(valid) * (frac * len(series)) / n_valid_series)) if n_valid_series else 0
    n = min(n, len(valid))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(valid), size=n, replace=False) if n else np.array([], int)
    traintest = frozenset(valid[i] for i in chosen)
    pretrain = frozenset(by_attr) - traintest
    test_start = end - (H * windows - 1) * FREQ
    return SplitPlan(pretrain, traintest, end, test_start, seed)


def apply_split(series: list[TimeSeriesRecord], plan: SplitPlan,
                min_pretrain_len: int = 1) -> tuple[list[TimeSeriesRecord], list[TimeSeriesRecord]]:
    """Materialize (pretrain, traintest). Pre-train series lose the test time range;
    train-test series that are not end-aligned are dropped."""
    pretrain, traintest = [], []
    for s in sorted(series, key=lambda r: r.series_id):
        if s.top_level_attr in plan.traintest_attrs:
            if s.end == plan.end_timestamp:
                traintest.append(s)
            continue
        keep = int((plan.test_start - s.start) // FREQ)
        keep = min(keep, s.length)
        if keep >= min_pretrain_len:
            pretrain.append(s if keep == s.length else s.slice(0, keep))
    return pretrain, traintest


def check_leakage(pretrain: list[TimeSeriesRecord], traintest: list[TimeSeriesRecord], plan: SplitPlan) -> None:
    attrs_pt = {s.top_level_attr for s in pretrain}
    attrs_tt = {s.top_level_attr for s in traintest}
    if attrs_pt & attrs_tt:
        raise SplitError("top-level attributes shared between splits")
    if any(s.end != plan.end_timestamp for s in traintest):
        raise SplitError("train-test series not end-aligned")
    if pretrain and max(s.end for s in pretrain) >= plan.test_start:
        raise SplitError("pre-train data overlaps the test region")


def ingest(stream, kind: str) -> tuple[list[TimeSeriesRecord], ParseReport, CleaningReport]:
    sch = SCHEMAS[kind]
    preport = ParseReport()
    rows = parse_trace(stream, sch, preport)
    series = aggregate_series(rows, sch)
    kept, creport = clean_series(series, missing_thresh=sch.missing_thresh)
    return kept, preport, creport
