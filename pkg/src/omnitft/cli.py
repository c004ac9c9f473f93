"""Command-line pipeline: synth | train | eval | label.

Every command is deterministic given its inputs and seeds and writes a
manifest.json into --out listing produced artifacts with sha256 digests.
Exit codes: 0 success, 2 configuration or input error, 3 training diverged,
1 unexpected failure. OMNITFT_THREADS caps per-patient parallelism during
ingestion.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evalkit, ingest, labeler, sampler, trainer
from .model import (
    Model,
    ModelConfig,
    WindowBatch,
    compute_scalers,
    load_checkpoint,
    save_checkpoint,
)
from .schema import DatasetSchema, load_schema, save_schema, schema_to_dict, validate_schema


class CliError(Exception):
    pass


class SchemaMismatch(CliError):
    pass


EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def worker_count() -> int:
    raw = os.environ.get("OMNITFT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict, inputs: list, artifacts: list):
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": [{"path": str(p), "sha256": _digest(p)} for p in inputs],
        "artifacts": [{"path": str(p), "sha256": _digest(p)} for p in artifacts],
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _parallel_map(fn, items):
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def load_events(data_dir: Path, schema: DatasetSchema):
    path = data_dir / "data.csv"
    if not path.exists():
        raise CliError(f"no data.csv under {data_dir}")
    with open(path, newline="") as fh:
        return ingest.parse_events(fh, schema), path


def build_window_pools(splits: dict, schema: DatasetSchema, delta_overrides: dict):
    """Per-target window pools for every split, with resolved cutoffs.

    The volatility cutoff per target comes from the override table when
    given, otherwise from the 75th percentile of training-window scores.
    """
    pools = {name: {} for name in splits}
    deltas = {}
    for t_spec in schema.target_features:
        per_split = {}
        for name, series_list in splits.items():
            wins = []
            for s in series_list:
                try:
                    wins.extend(
                        sampler.enumerate_windows(s, schema, 0.0, target=t_spec.name)
                    )
                except sampler.SeriesTooShort:
                    continue
            per_split[name] = wins
        if t_spec.name in delta_overrides:
            delta = float(delta_overrides[t_spec.name])
        else:
            scores = [w.score for w in per_split.get("train", [])]
            delta = labeler.default_delta(scores) if scores else 0.0
        deltas[t_spec.name] = delta
        for name, wins in per_split.items():
            for w in wins:
                w.label = labeler.threshold_label(w.score, delta)
            pools[name][t_spec.name] = wins
    return pools, deltas


def _load_train_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def resolve_configs(doc: dict):
    """Split a training-config JSON into trainer/model configs and extras."""
    model_doc = dict(doc.get("model", {}))
    if "quantiles" in doc and "quantiles" not in model_doc:
        model_doc["quantiles"] = doc["quantiles"]
    if "quantiles" in model_doc:
        model_doc["quantiles"] = tuple(model_doc["quantiles"])
    model_cfg = ModelConfig(**model_doc)
    train_doc = {
        k: doc[k]
        for k in ("lr", "batch", "clip", "max_epochs", "patience", "seed", "quantiles")
        if k in doc
    }
    if "weights" in doc:
        train_doc["weights"] = doc["weights"]
    train_doc.setdefault("quantiles", model_cfg.quantiles)
    train_cfg = trainer.train_config_from_dict(train_doc)
    extras = {
        "delta": doc.get("delta", {}),
        "split_seed": int(doc.get("split_seed", 0)),
        "ratios": tuple(doc.get("ratios", (7, 2, 1))),
        "model_seed": int(doc.get("model_seed", 0)),
        "max_gap_h": float(doc.get("max_gap_h", 6.0)),
        "missing_threshold": float(doc.get("missing_threshold", 0.8)),
    }
    return model_cfg, train_cfg, extras


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = ingest.synthetic_schema(
        encoder_len=args.encoder_len,
        horizon_len=args.horizon_len,
        grid_step_min=args.grid_step_min,
    )
    series, truth = ingest.generate_synthetic(
        args.patients, schema, shock_rate=args.shock_rate, seed=args.seed,
        min_steps=args.min_steps, max_steps=args.max_steps,
    )
    data_path = out / "data.csv"
    ingest.write_events_csv(data_path, series, schema)
    schema_path = out / "schema.json"
    save_schema(schema, schema_path)
    labels_path = out / "truth_labels.csv"
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "step", "label"])
        for s in series:
            for step, lab in enumerate(truth[s.patient_id]):
                w.writerow([s.patient_id, step, lab])
    _write_manifest(
        out,
        "synth",
        {
            "patients": args.patients,
            "shock_rate": args.shock_rate,
            "seed": args.seed,
            "encoder_len": args.encoder_len,
            "horizon_len": args.horizon_len,
            "grid_step_min": args.grid_step_min,
        },
        inputs=[],
        artifacts=[data_path, schema_path, labels_path],
    )
    print(f"wrote {args.patients} patients to {out}")
    return EXIT_OK


def _ingest_from_dir(data_dir: Path, schema: DatasetSchema, extras: dict):
    events, data_path = load_events(data_dir, schema)
    resample = lambda evs: ingest.resample_to_grid(evs, schema)  # noqa: E731
    by_patient: dict = {}
    for e in sorted(events, key=lambda e: (e.patient_id, e.time_h)):
        by_patient.setdefault(e.patient_id, []).append(e)
    resampled = _parallel_map(resample, list(by_patient.values()))
    retained = ingest.filter_patients(resampled, schema, extras["missing_threshold"])
    split = ingest.split_by_patient(
        [s.patient_id for s in retained], extras["ratios"], extras["split_seed"]
    )
    by_id = {s.patient_id: s for s in retained}
    stats = ingest.compute_train_stats([by_id[p] for p in split.ids("train")], schema)
    splits = {}
    trims = {}
    for name in ("train", "val", "test"):
        splits[name] = []
        for pid in split.ids(name):
            imp = ingest.impute(by_id[pid], schema, stats, extras["max_gap_h"])
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
    return splits, stats, data_path, report


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = validate_schema(load_schema(args.schema))
    doc = _load_train_config(args.config)
    model_cfg, train_cfg, extras = resolve_configs(doc)

    data_dir = Path(args.data)
    splits, stats, data_path, ingest_report = _ingest_from_dir(data_dir, schema, extras)
    pools, deltas = build_window_pools(splits, schema, extras["delta"])

    if args.dry_run:
        counts = {k: sum(len(v) for v in pools[k].values()) for k in pools}
        print(f"dry run ok: windows per split {counts}, cutoffs {deltas}")
        return EXIT_OK

    scalers = compute_scalers(splits["train"], schema)
    model = Model(schema, model_cfg, seed=extras["model_seed"], scalers=scalers)
    val_windows = [w for wins in pools["val"].values() for w in wins]
    result = trainer.train(model, pools["train"], val_windows, train_cfg)

    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, model)
    hist_path = out / "history.csv"
    trainer.write_history_csv(hist_path, result.history)
    grid_paths = ingest.write_split_grids(out, splits, schema, ingest_report)
    resolved_path = out / "resolved_config.json"
    with open(resolved_path, "w") as fh:
        json.dump(
            {
                "model": {**model_cfg.__dict__, "quantiles": list(model_cfg.quantiles)},
                "train": trainer.train_config_to_dict(train_cfg),
                "deltas": deltas,
                "extras": {**extras, "ratios": list(extras["ratios"])},
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    _write_manifest(
        out,
        "train",
        {"schema": str(args.schema), "config": str(args.config), "seed": train_cfg.seed},
        inputs=[data_path, Path(args.schema)],
        artifacts=[ckpt_path, hist_path, resolved_path] + [Path(p) for p in grid_paths],
    )
    if result.diverged:
        print("training diverged; last good checkpoint written", file=sys.stderr)
        return EXIT_DIVERGED
    print(
        f"trained {result.stopped_epoch} epochs, best val {result.best_val:.6f} "
        f"at epoch {result.best_epoch}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    schema = model.schema

    data_dir = Path(args.data)
    schema_path = data_dir / "schema.json"
    if schema_path.exists():
        disk = schema_to_dict(load_schema(schema_path))
        if disk != schema_to_dict(schema):
            raise SchemaMismatch("checkpoint schema differs from the data directory schema")

    extras = {
        "ratios": (7, 2, 1),
        "split_seed": args.split_seed,
        "max_gap_h": 6.0,
        "missing_threshold": 0.8,
    }
    splits, _, data_path, _ = _ingest_from_dir(data_dir, schema, extras)
    pools, _ = build_window_pools(splits, schema, {})
    eval_pools = pools[args.split]

    reports = []
    artifacts = []
    for t_spec in schema.target_features:
        windows = eval_pools.get(t_spec.name, [])
        if not windows:
            continue
        p10, p50, p90, actual = [], [], [], []
        bundles, maes = [], []
        for i in range(0, len(windows), 256):
            chunk = windows[i : i + 256]
            batch = WindowBatch.from_windows(chunk)
            fp = model.forward(batch, rng=None)
            for j, w in enumerate(chunk):
                b = fp.bundle(j, model.config)
                bundles.append(b)
                q = b.quantiles_sorted
                p10.extend(q[:, 0])
                p50.extend(q[:, 1])
                p90.extend(q[:, 2])
                actual.extend(w.fut_target)
                maes.append(evalkit.mae(q[:, 1], w.fut_target))
        reports.append(evalkit.compute_report(t_spec.name, p10, p50, p90, actual))

        table = evalkit.aggregate_importance(
            [bundles], [f.name for f in schema.past_features],
            schema.encoder_len, target=t_spec.name,
        )
        imp_path = out / f"importance_{t_spec.name}.csv"
        with open(imp_path, "w", newline="") as fh:
            csv.writer(fh).writerows(table.to_csv_rows())
        artifacts.append(imp_path)

        typical = evalkit.select_typical_window(maes)
        w = windows[typical]
        tgt_col = [f.name for f in schema.past_features].index(t_spec.name)
        rows = evalkit.export_trajectories(
            bundles[typical], w.enc_past[:, tgt_col], w.fut_target
        )
        traj_path = out / f"trajectory_{t_spec.name}.csv"
        with open(traj_path, "w", newline="") as fh:
            wtr = csv.DictWriter(fh, fieldnames=["t", "history", "actual_future", "p10", "p50", "p90"])
            wtr.writeheader()
            wtr.writerows(rows)
        artifacts.append(traj_path)

    metrics_path = out / "metrics.json"
    evalkit.write_reports_json(metrics_path, reports)
    table_path = out / "metrics.txt"
    with open(table_path, "w") as fh:
        fh.write(evalkit.render_table(reports))
    _write_manifest(
        out,
        "eval",
        {"checkpoint": str(args.checkpoint), "split": args.split, "split_seed": args.split_seed},
        inputs=[data_path, Path(args.checkpoint)],
        artifacts=[metrics_path, table_path] + artifacts,
    )
    print(evalkit.render_table(reports))
    return EXIT_OK


def _truth_window_labels(data_dir: Path, schema: DatasetSchema):
    """Ground-truth per-window labels from a generator truth file, if any."""
    path = data_dir / "truth_labels.csv"
    if not path.exists():
        return None
    steps: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            steps.setdefault(row["patient_id"], {})[int(row["step"])] = row["label"]
    E, H = schema.encoder_len, schema.horizon_len

    def window_label(pid: str, start: int) -> str | None:
        per = steps.get(pid)
        if per is None:
            return None
        future = [per.get(t) for t in range(start + E, start + E + H)]
        if any(v is None for v in future):
            return None
        return labeler.VOLATILE if labeler.VOLATILE in future else labeler.STABLE

    return window_label


def cmd_label(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = validate_schema(load_schema(args.schema))
    overrides = {}
    if args.delta_config:
        with open(args.delta_config) as fh:
            overrides = json.load(fh).get("delta", {})
    extras = {
        "ratios": (7, 2, 1),
        "split_seed": args.split_seed,
        "max_gap_h": 6.0,
        "missing_threshold": 0.8,
    }
    data_dir = Path(args.data)
    splits, _, data_path, _ = _ingest_from_dir(data_dir, schema, extras)
    pools, deltas = build_window_pools(splits, schema, overrides)

    all_series = {s.patient_id: s for name in splits for s in splits[name]}
    hmm_steps: dict = {}
    if args.method == "hmm":
        for t_spec in schema.target_features:
            col = schema.column(t_spec.name)
            for pid, s in all_series.items():
                y = s.values[:, col]
                diffs = np.diff(y)
                try:
                    params = labeler.hmm_fit(diffs, seed=0)
                    step_labels = [labeler.STABLE] + labeler.hmm_decode(diffs, params)
                except labeler.LabelerError:
                    step_labels = [labeler.STABLE] * s.n_steps
                hmm_steps[(t_spec.name, pid)] = step_labels

    truth_fn = _truth_window_labels(data_dir, schema)

    labels_path = out / "window_labels.csv"
    counts = {"stable": 0, "volatile": 0}
    agree_truth = [0, 0]
    agree_methods = [0, 0]
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "target", "start", "score", "label"])
        for split_pools in pools.values():
            for tname, wins in split_pools.items():
                for win in wins:
                    if args.method == "hmm":
                        label = labeler.hmm_window_label(
                            hmm_steps[(tname, win.patient_id)],
                            schema.encoder_len, win.start, schema.horizon_len,
                        )
                        thr_label = win.label
                        agree_methods[0] += int(label == thr_label)
                        agree_methods[1] += 1
                    else:
                        label = win.label
                    counts[label] += 1
                    if truth_fn is not None:
                        t = truth_fn(win.patient_id, win.start)
                        if t is not None:
                            agree_truth[0] += int(label == t)
                            agree_truth[1] += 1
                    w.writerow([win.patient_id, tname, win.start, repr(win.score), label])

    summary = {
        "method": args.method,
        "deltas": deltas,
        "counts": counts,
        "total_windows": counts["stable"] + counts["volatile"],
    }
    if agree_truth[1]:
        summary["agreement_vs_truth"] = agree_truth[0] / agree_truth[1]
    if agree_methods[1]:
        summary["agreement_threshold_vs_hmm"] = agree_methods[0] / agree_methods[1]
    summary_path = out / "label_summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        out,
        "label",
        {"method": args.method, "schema": str(args.schema)},
        inputs=[data_path, Path(args.schema)],
        artifacts=[labels_path, summary_path],
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="omnitft",
        description="Quantile forecasting pipeline for gridded clinical-style series",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic regime-switching dataset")
    sp.add_argument("--patients", type=int, default=50)
    sp.add_argument("--shock-rate", type=float, default=0.3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--encoder-len", type=int, default=12)
    sp.add_argument("--horizon-len", type=int, default=4)
    sp.add_argument("--grid-step-min", type=float, default=60.0)
    sp.add_argument("--min-steps", type=int, default=48)
    sp.add_argument("--max-steps", type=int, default=96)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="run the full training pipeline")
    tp.add_argument("--data", required=True)
    tp.add_argument("--schema", required=True)
    tp.add_argument("--config", default=None)
    tp.add_argument("--out", required=True)
    tp.add_argument("--dry-run", action="store_true")
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint and export artifacts")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--split", default="test", choices=["train", "val", "test"])
    ep.add_argument("--split-seed", type=int, default=0)
    ep.set_defaults(func=cmd_eval)

    lp = sub.add_parser("label", help="emit per-window regime labels")
    lp.add_argument("--data", required=True)
    lp.add_argument("--schema", required=True)
    lp.add_argument("--method", default="threshold", choices=["threshold", "hmm"])
    lp.add_argument("--delta-config", default=None)
    lp.add_argument("--out", required=True)
    lp.add_argument("--split-seed", type=int, default=0)
    lp.set_defaults(func=cmd_label)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # schema/ingest/trainer contract violations
        from . import schema as schema_mod

        known = (
            schema_mod.SchemaError,
            ingest.IngestError,
            sampler.SamplerError,
            labeler.LabelerError,
            trainer.TrainerError,
        )
        if isinstance(e, known):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
