"""Ingestion: long-format events to imputed per-patient grids, plus splits.

The pipeline is resample -> filter -> split -> impute. Bin aggregation uses
the mean for continuous features and the mode for categoricals. Imputation
forward-fills temporal features across gaps of at most `max_gap_h` hours and
falls back to the training-split median (mode for categoricals) beyond that;
statics always take the median/mode fallback. Leading steps are trimmed up
to the first step at which every feature is observed or median-fillable.

A regime-switching synthetic generator is included so the whole pipeline is
testable without any clinical data source.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .labeler import STABLE, VOLATILE
from .schema import DatasetSchema, validate_schema, FeatureSpec


class IngestError(Exception):
    pass


class UnknownFeature(IngestError):
    pass


class UnparsableValue(IngestError):
    pass


class NegativeTime(IngestError):
    pass


class EmptyPatient(IngestError):
    pass


class TooFewPatients(IngestError):
    pass


class AllMissingFeature(IngestError):
    pass


@dataclass(frozen=True)
class RawEvent:
    patient_id: str
    time_h: float
    feature: str
    value: float  # categorical values are stored as their vocab index


@dataclass
class PatientSeries:
    """One patient's values on the fixed grid, schema feature order."""

    patient_id: str
    values: np.ndarray  # (n_steps, n_features) float64
    mask: np.ndarray  # (n_steps, n_features) bool, true = observed pre-imputation
    imputed: bool = False
    trimmed_steps: int = 0

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    def column(self, schema: DatasetSchema, name: str) -> np.ndarray:
        return self.values[:, schema.column(name)]


@dataclass
class SplitAssignment:
    assignment: dict  # patient_id -> "train" | "val" | "test"

    def ids(self, split: str) -> list:
        return sorted(pid for pid, s in self.assignment.items() if s == split)


@dataclass
class TrainStats:
    """Per-feature fallback values computed on the training split only."""

    medians: dict = field(default_factory=dict)  # name -> float (mode for categoricals)

    def fallback(self, name: str):
        return self.medians.get(name)


def parse_events(csv_stream, schema: DatasetSchema) -> list:
    """Parse long-format rows (patient_id,time_h,feature,value) into events."""
    reader = csv.reader(csv_stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["patient_id", "time_h", "feature", "value"]:
        raise IngestError(f"unexpected CSV header: {header}")
    names = {f.name: f for f in schema.features}
    events = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        pid, time_s, feat, raw = (c.strip() for c in row)
        if feat not in names:
            raise UnknownFeature(f"line {lineno}: {feat!r}")
        try:
            t = float(time_s)
        except ValueError:
            raise UnparsableValue(f"line {lineno}: time {time_s!r}") from None
        if t < 0:
            raise NegativeTime(f"line {lineno}: time {t}")
        spec = names[feat]
        if spec.is_categorical:
            try:
                value = float(int(float(raw)))
                if not 0 <= value < spec.vocab_size:
                    raise UnparsableValue(f"line {lineno}: index {raw!r} outside vocab")
            except ValueError:
                value = float(spec.category_index(raw))
        else:
            try:
                value = float(raw)
            except ValueError:
                raise UnparsableValue(f"line {lineno}: value {raw!r}") from None
        events.append(RawEvent(pid, t, feat, value))
    return events


def _bin_mode(values: list) -> float:
    counts: dict = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))  # tie -> smallest value
    return best[0]


def resample_to_grid(events: list, schema: DatasetSchema) -> PatientSeries:
    """Bin one patient's events onto the schema grid (pre-imputation).

    Continuous features take the bin mean, categoricals the bin mode; empty
    bins stay masked out.
    """
    if not events:
        raise EmptyPatient("no events for patient")
    pid = events[0].patient_id
    step_h = schema.grid_step_min / 60.0
    t_max = max(e.time_h for e in events)
    n = int(math.floor(t_max / step_h)) + 1

    cols = {f.name: i for i, f in enumerate(schema.features)}
    buckets: dict = {}
    for e in events:
        b = min(int(e.time_h // step_h), n - 1)
        buckets.setdefault((b, cols[e.feature]), []).append(e.value)

    values = np.zeros((n, len(schema.features)))
    mask = np.zeros((n, len(schema.features)), dtype=bool)
    for (b, j), vals in buckets.items():
        spec = schema.features[j]
        values[b, j] = _bin_mode(vals) if spec.is_categorical else float(np.mean(vals))
        mask[b, j] = True
    return PatientSeries(pid, values, mask)


def compute_train_stats(series_list: list, schema: DatasetSchema) -> TrainStats:
    """Median (mode for categoricals) of every feature over observed cells."""
    stats = TrainStats()
    for j, spec in enumerate(schema.features):
        pool = np.concatenate(
            [s.values[s.mask[:, j], j] for s in series_list] or [np.array([])]
        )
        if pool.size == 0:
            continue
        if spec.is_categorical:
            stats.medians[spec.name] = _bin_mode(list(pool))
        else:
            stats.medians[spec.name] = float(np.median(pool))
    return stats


def impute(
    series: PatientSeries,
    schema: DatasetSchema,
    stats: TrainStats,
    max_gap_h: float = 6.0,
) -> PatientSeries:
    """Fill a resampled series; observed cells keep their values bit-exactly."""
    step_h = schema.grid_step_min / 60.0
    max_steps = int(math.floor(max_gap_h / step_h + 1e-9))
    n = series.n_steps
    values = series.values.copy()
    mask = series.mask.copy()

    # leading trim: wait until every feature is observed or median-fillable
    start = 0
    first_obs = []
    for j, spec in enumerate(schema.features):
        obs = np.flatnonzero(mask[:, j])
        if obs.size == 0 and stats.fallback(spec.name) is None:
            raise AllMissingFeature(spec.name)
        if stats.fallback(spec.name) is None:
            first_obs.append(int(obs[0]))
    if first_obs:
        start = max(first_obs)
    values, mask = values[start:], mask[start:]
    n = n - start

    for j, spec in enumerate(schema.features):
        col, obs = values[:, j], mask[:, j]
        fallback = stats.fallback(spec.name)
        if spec.role == "static":
            seen = np.flatnonzero(obs)
            fill = col[seen[0]] if seen.size else fallback
            out = np.full(n, fill)
            out[obs] = col[obs]
            values[:, j] = out
            continue
        last_seen = -1
        for t in range(n):
            if obs[t]:
                last_seen = t
                continue
            if last_seen >= 0 and (t - last_seen) <= max_steps:
                values[t, j] = values[last_seen, j]
            elif fallback is not None:
                values[t, j] = fallback
            else:
                # no median anywhere and beyond the forward-fill span
                raise AllMissingFeature(spec.name)

    return PatientSeries(series.patient_id, values, mask, imputed=True, trimmed_steps=start)


def filter_patients(series_list: list, schema: DatasetSchema, threshold: float = 0.8) -> list:
    """Drop patients whose static or observed-feature missingness exceeds threshold."""
    static_cols = [j for j, f in enumerate(schema.features) if f.role == "static"]
    obs_cols = [j for j, f in enumerate(schema.features) if f.role == "observed_past"]
    kept = []
    for s in series_list:
        fracs = []
        if static_cols:
            fracs.append(1.0 - s.mask[:, static_cols].any(axis=0).mean())
        if obs_cols:
            fracs.append(1.0 - s.mask[:, obs_cols].mean())
        if fracs and max(fracs) > threshold:  # strictly more-than drops
            continue
        kept.append(s)
    return kept


def split_by_patient(ids, ratios=(7, 2, 1), seed: int = 0) -> SplitAssignment:
    """Deterministic 7:2:1-style split; floors, remainder goes to train."""
    ids = sorted(ids)
    if len(ids) < 10:
        raise TooFewPatients(f"need >= 10 patients, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(ids)))
    total = float(sum(ratios))
    n_train = int(math.floor(len(ids) * ratios[0] / total))
    n_val = int(math.floor(len(ids) * ratios[1] / total))
    n_test = int(math.floor(len(ids) * ratios[2] / total))
    n_train += len(ids) - (n_train + n_val + n_test)
    assignment = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            split = "train"
        elif pos < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[ids[idx]] = split
    return SplitAssignment(assignment)


# ---------------------------------------------------------------------------
# synthetic regime-switching generator


def synthetic_schema(
    encoder_len: int = 12,
    horizon_len: int = 4,
    grid_step_min: float = 60.0,
    site_vocab: int = 20,
) -> DatasetSchema:
    """Schema for the synthetic generator: one target, lagged covariates,
    time-of-day known inputs, and a long-tailed categorical static."""
    sites = tuple(f"site{k:02d}" for k in range(site_vocab))
    return validate_schema(
        DatasetSchema(
            features=(
                FeatureSpec("y", "target", unit="beats/min"),
                FeatureSpec("obs_lag", "observed_past", unit="beats/min"),
                FeatureSpec("obs_mix", "observed_past", unit="a.u."),
                FeatureSpec("tod_sin", "known_future", unit="1"),
                FeatureSpec("tod_cos", "known_future", unit="1"),
                FeatureSpec("site", "static", dtype="categorical", vocab=sites),
                FeatureSpec("age", "static", unit="years"),
            ),
            grid_step_min=grid_step_min,
            encoder_len=encoder_len,
            horizon_len=horizon_len,
        )
    )


def regime_transition(shock_rate: float, mean_volatile_run: float = 5.0) -> np.ndarray:
    """Two-state chain whose stationary volatile fraction equals shock_rate."""
    if not 0.0 <= shock_rate < 1.0:
        raise IngestError("shock_rate must be in [0, 1)")
    leave_v = 1.0 / mean_volatile_run
    enter_v = 0.0 if shock_rate == 0.0 else leave_v * shock_rate / (1.0 - shock_rate)
    enter_v = min(enter_v, 1.0)
    return np.array([[1.0 - enter_v, enter_v], [leave_v, 1.0 - leave_v]])


def simulate_regime_chain(n: int, shock_rate: float, rng,
                          mean_volatile_run: float = 5.0) -> np.ndarray:
    trans = regime_transition(shock_rate, mean_volatile_run)
    states = np.zeros(n, dtype=int)
    u = rng.random(n)
    state = 0
    for t in range(n):
        state = int(u[t] < trans[state, 1])
        states[t] = state
    return states


_AR_PHI = 0.9
_AR_MEAN = 80.0
_SIGMA_STABLE = 0.3
_SIGMA_VOLATILE = 3.0  # x10 the stable innovation scale


def generate_synthetic(
    n_patients: int,
    schema: DatasetSchema,
    shock_rate: float = 0.3,
    seed: int = 0,
    min_steps: int = 48,
    max_steps: int = 96,
    mean_volatile_run: float = 5.0,
):
    """Regime-switching AR(1) targets with covariates and Zipf statics.

    Returns (series_list, truth) where truth maps patient_id to the per-step
    regime labels the chain actually visited; masks are fully observed.
    """
    rng = np.random.default_rng(seed)
    site_spec = next((f for f in schema.static_features if f.is_categorical), None)
    if site_spec is not None:
        ranks = np.arange(1, site_spec.vocab_size + 1, dtype=np.float64)
        zipf = (1.0 / ranks**1.2) / (1.0 / ranks**1.2).sum()

    series_list, truth = [], {}
    for p in range(n_patients):
        n = int(rng.integers(min_steps, max_steps + 1))
        states = simulate_regime_chain(n, shock_rate, rng, mean_volatile_run)
        sigma = np.where(states == 1, _SIGMA_VOLATILE, _SIGMA_STABLE)
        eps = rng.standard_normal(n)
        y = np.empty(n)
        y[0] = _AR_MEAN + sigma[0] * eps[0]
        for t in range(1, n):
            y[t] = _AR_MEAN + _AR_PHI * (y[t - 1] - _AR_MEAN) + sigma[t] * eps[t]

        hours = np.arange(n) * schema.grid_step_min / 60.0
        values = np.zeros((n, len(schema.features)))
        for j, spec in enumerate(schema.features):
            if spec.role == "target":
                values[:, j] = y
            elif spec.name == "obs_lag":
                values[:, j] = np.concatenate([[y[0]], y[:-1]]) + 0.5 * rng.standard_normal(n)
            elif spec.name == "obs_mix":
                values[:, j] = 0.5 * y + 40.0 + rng.standard_normal(n)
            elif spec.name == "tod_sin":
                values[:, j] = np.sin(2 * np.pi * (hours % 24.0) / 24.0)
            elif spec.name == "tod_cos":
                values[:, j] = np.cos(2 * np.pi * (hours % 24.0) / 24.0)
            elif spec.role == "static" and spec.is_categorical:
                values[:, j] = float(rng.choice(spec.vocab_size, p=zipf))
            elif spec.role == "static":
                values[:, j] = float(rng.normal(65.0, 10.0))
            elif spec.role == "observed_past":
                values[:, j] = y + rng.standard_normal(n)
            elif spec.role == "known_future":
                values[:, j] = np.sin(2 * np.pi * (hours % 24.0) / 24.0 + j)

        pid = f"p{p:04d}"
        series_list.append(
            PatientSeries(pid, values, np.ones_like(values, dtype=bool), imputed=True)
        )
        truth[pid] = [VOLATILE if s == 1 else STABLE for s in states]
    return series_list, truth


def series_to_events(series: PatientSeries, schema: DatasetSchema) -> list:
    """Flatten a gridded series back to long-format rows for CSV export.

    Statics are emitted once at time 0; categoricals round-trip through
    their vocab names when available.
    """
    step_h = schema.grid_step_min / 60.0
    rows = []
    for j, spec in enumerate(schema.features):
        if spec.role == "static":
            v = series.values[0, j]
            out = spec.vocab[int(v)] if (spec.is_categorical and spec.vocab) else repr(float(v))
            rows.append((series.patient_id, 0.0, spec.name, out))
            continue
        for t in range(series.n_steps):
            if not series.mask[t, j]:
                continue
            v = series.values[t, j]
            out = spec.vocab[int(v)] if (spec.is_categorical and spec.vocab) else repr(float(v))
            rows.append((series.patient_id, t * step_h, spec.name, out))
    return rows


def write_events_csv(path, series_list: list, schema: DatasetSchema):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time_h", "feature", "value"])
        for s in series_list:
            for pid, t, feat, val in series_to_events(s, schema):
                w.writerow([pid, repr(float(t)), feat, val])


def write_split_grids(out_dir, splits: dict, schema: DatasetSchema, report: dict):
    """Materialize imputed grids per split plus the ingest manifest.

    grid_<split>.csv holds one row per (patient, step) with a column per
    feature; mask_<split>.csv mirrors it with 0/1 observation flags.
    """
    import json
    import os

    names = [f.name for f in schema.features]
    paths = []
    for split, series_list in splits.items():
        gpath = os.path.join(out_dir, f"grid_{split}.csv")
        mpath = os.path.join(out_dir, f"mask_{split}.csv")
        with open(gpath, "w", newline="") as gf, open(mpath, "w", newline="") as mf:
            gw, mw = csv.writer(gf), csv.writer(mf)
            gw.writerow(["patient_id", "step"] + names)
            mw.writerow(["patient_id", "step"] + names)
            for s in series_list:
                for t in range(s.n_steps):
                    gw.writerow([s.patient_id, t] + [repr(float(v)) for v in s.values[t]])
                    mw.writerow([s.patient_id, t] + [int(v) for v in s.mask[t]])
        paths.extend([gpath, mpath])
    mpath = os.path.join(out_dir, "ingest_manifest.json")
    with open(mpath, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths + [mpath]


def read_split_grids(out_dir, schema: DatasetSchema) -> dict:
    """Load grids written by write_split_grids back into PatientSeries."""
    import os

    splits = {}
    for split in ("train", "val", "test"):
        gpath = os.path.join(out_dir, f"grid_{split}.csv")
        mpath = os.path.join(out_dir, f"mask_{split}.csv")
        if not os.path.exists(gpath):
            continue
        per_patient: dict = {}
        with open(gpath, newline="") as gf, open(mpath, newline="") as mf:
            gr, mr = csv.reader(gf), csv.reader(mf)
            next(gr), next(mr)
            for grow, mrow in zip(gr, mr):
                pid = grow[0]
                vals = [float(v) for v in grow[2:]]
                mask = [bool(int(v)) for v in mrow[2:]]
                per_patient.setdefault(pid, ([], []))
                per_patient[pid][0].append(vals)
                per_patient[pid][1].append(mask)
        splits[split] = [
            PatientSeries(pid, np.array(v), np.array(m, dtype=bool), imputed=True)
            for pid, (v, m) in sorted(per_patient.items())
        ]
    return splits


# ---------------------------------------------------------------------------
# full pipeline


def ingest_pipeline(
    events: list,
    schema: DatasetSchema,
    seed: int = 0,
    ratios=(7, 2, 1),
    missing_threshold: float = 0.8,
    max_gap_h: float = 6.0,
):
    """events -> resample -> filter -> split -> impute (train-split medians).

    Returns (splits, stats, report) where splits maps split name to a list of
    imputed PatientSeries and report carries counts and trim statistics.
    """
    by_patient: dict = {}
    for e in sorted(events, key=lambda e: (e.patient_id, e.time_h)):
        by_patient.setdefault(e.patient_id, []).append(e)

    resampled = [resample_to_grid(evs, schema) for evs in by_patient.values()]
    retained = filter_patients(resampled, schema, missing_threshold)
    split = split_by_patient([s.patient_id for s in retained], ratios, seed)

    by_id = {s.patient_id: s for s in retained}
    stats = compute_train_stats([by_id[p] for p in split.ids("train")], schema)

    splits = {"train": [], "val": [], "test": []}
    trims = {}
    for name in ("train", "val", "test"):
        for pid in split.ids(name):
            imp = impute(by_id[pid], schema, stats, max_gap_h)
            splits[name].append(imp)
            trims[pid] = imp.trimmed_steps

    report = {
        "n_input_patients": len(resampled),
        "n_retained": len(retained),
        "n_dropped": len(resampled) - len(retained),
        "split_counts": {k: len(v) for k, v in splits.items()},
        "medians": {k: stats.medians[k] for k in sorted(stats.medians)},
        "trimmed_steps": trims,
    }
    return splits, stats, report
