"""Acceptance suite: one test per release criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`. Every tolerance is pinned
here; the training-based criteria use small fixed desk-scale
configurations validated to pass with margin.
"""

import json
import time

import numpy as np
import pytest

from _gradtools import check_param, offkink_targets

from omnitft import cli
from omnitft import diffcore as dc
from omnitft import penalties as pen
from omnitft.diffcore import Tensor
from omnitft.evalkit import coverage_below, format_cell, mae, mape, pinball_at, rmse
from omnitft.ingest import generate_synthetic, synthetic_schema
from omnitft.labeler import hmm_decode, hmm_fit
from omnitft.model import Model, ModelConfig, WindowBatch, compute_scalers
from omnitft.penalties import PenaltyWeights
from omnitft.sampler import balanced_epoch, enumerate_windows
from omnitft.schema import (
    DatasetSchema,
    FeatureSpec,
    build_group_assignment,
    validate_schema,
)
from omnitft.trainer import TrainConfig, quantile_loss, total_objective, train


def ok(n, name):
    print(f"\nACCEPTANCE {n} ({name}): PASS")


def tiny_schema():
    return validate_schema(
        DatasetSchema(
            features=(
                FeatureSpec("y", "target"),
                FeatureSpec("c1", "observed_past"),
                FeatureSpec("k1", "known_future"),
                FeatureSpec("site", "static", dtype="categorical", vocab_size=5),
            ),
            grid_step_min=60.0,
            encoder_len=6,
            horizon_len=4,
        )
    )


def tiny_model_and_batch(seed, param_scale=0.5):
    """d=8, E=6, H=4, M=2 model at a random non-degenerate parameter point,
    with targets held off the pinball kinks."""
    rng = np.random.default_rng(seed)
    schema = tiny_schema()
    m = Model(schema, ModelConfig(hidden=8, heads=2, blocks=2, dropout=0.0), seed=seed)
    for p in m.params.values():
        p.data = rng.normal(0.0, param_scale, size=p.data.shape)
    batch = WindowBatch(
        enc_past=rng.normal(size=(2, 6, 3)),
        fut_known=rng.normal(size=(2, 4, 1)),
        statics=rng.integers(0, 5, size=(2, 1)).astype(float),
        target_idx=np.zeros(2, dtype=int),
        fut_target=np.zeros((2, 4)),
    )
    batch.fut_target = offkink_targets(m, batch, rng)
    return schema, m, batch, rng


def test_criterion_1_gradient_fidelity():
    start = time.time()
    total_tensors = [
        "head/w", "attn/b1/q0/w", "attn/b0/v/w", "lstm/enc/l0/x/w",
        "lstm/dec/l1/h/w", "vsn/past/sel/fc1/w", "embed/static/site/table",
        "enrich/fc2/w", "embed/y/w",
    ]
    component_tensors = {
        "quantile": ["head/w", "lstm/dec/l0/x/w", "embed/c1/w"],
        "embed": ["embed/static/site/table", "embed/target_id/table"],
        "group": ["vsn/past/sel/fc1/w", "vsn/past/sel/gate/w"],
        "shock": ["attn/b1/k1/w", "attn/b0/v/w", "lstm/enc/l1/h/w"],
    }
    worst = 0.0
    for seed in range(20):
        schema, m, batch, rng = tiny_model_and_batch(seed)
        gmat = build_group_assignment(schema).matrix
        E = schema.encoder_len

        def loss_total():
            fp = m.forward(batch)
            loss, _ = total_objective(m, fp, batch, PenaltyWeights(), gmat)
            return loss

        def loss_quantile():
            fp = m.forward(batch)
            return quantile_loss(fp.quantiles, batch.fut_target, m.config.quantiles)

        def loss_embed():
            fp = m.forward(batch)
            return pen.c_embed(m.embedding_tables(), fp.category_counts, 1e-6)

        def loss_group():
            fp = m.forward(batch)
            p_hs = pen.group_distribution_past(fp.w_hist, gmat, 1e-6)
            return pen.c_group(p_hs, pen.group_distribution_future(fp.w_fut))

        def loss_shock():
            fp = m.forward(batch)
            a = pen.retro_mass(fp.abar, m.config.retro_window)[:, E:]
            a_std, fa = pen.standardize(a)
            s = pen.rep_first_diff(fp.decoder_states, fp.encoder_anchor)
            s_std, fs = pen.standardize(s)
            return pen.c_shock(a_std, s_std, fa | fs)

        losses = {
            "quantile": loss_quantile, "embed": loss_embed,
            "group": loss_group, "shock": loss_shock,
        }
        for kind, names in component_tensors.items():
            for name in names:
                err = check_param(m, name, losses[kind], rng, n_coords=4)
                worst = max(worst, err)
                assert err <= 1e-4, f"seed {seed} {kind} {name}: {err:.2e}"
        for name in total_tensors:
            err = check_param(m, name, loss_total, rng, n_coords=6)
            worst = max(worst, err)
            assert err <= 1e-4, f"seed {seed} total {name}: {err:.2e}"
    elapsed = time.time() - start
    assert elapsed < 120.0, f"runtime {elapsed:.1f}s exceeds 2 minutes"
    print(f"\n  max rel err {worst:.2e}, {elapsed:.1f}s")
    ok(1, "gradient fidelity")


def test_criterion_2_row_shrinkage_gradient_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        row = rng.normal(size=6)
        p = float(rng.uniform(0.0, 1.0))
        eps = 1e-6
        t = Tensor(row.copy(), requires_grad=True)
        dc.backward(pen.embed_row_penalty(t, p, eps))
        expect = 2.0 * row / np.sqrt(p + eps)
        rel = np.abs(t.grad - expect) / (np.abs(expect) + 1e-300)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-12
    print(f"\n  max rel err {worst:.2e}")
    ok(2, "closed-form shrinkage gradient")


def test_criterion_3_entropy_geometry():
    one_hot = np.zeros((9, 3))
    one_hot[:, 1] = 1.0
    fut = pen.group_distribution_future(np.ones((9, 2)))
    assert pen.c_group(Tensor(one_hot), fut).item() == 0.0

    uniform = np.full((9, 3), 1.0 / 3.0)
    val = pen.c_group(Tensor(uniform), fut).item()
    assert abs(val - 0.5 * np.log(3.0)) <= 1e-9

    rng = np.random.default_rng(1)
    simplex = rng.dirichlet(np.ones(3), size=10_000)
    h = pen.entropy(Tensor(simplex)).data
    assert np.all(h <= np.log(3.0) + 1e-12) and np.all(h >= -1e-12)

    for _ in range(50):
        w = rng.uniform(1e-9, 1.0, size=int(rng.integers(1, 6)))
        p = pen.group_distribution_future(w)
        np.testing.assert_array_equal(p.data, [0.0, 1.0, 0.0])
        assert pen.entropy(p).item() == 0.0
    ok(3, "entropy geometry")


def test_criterion_4_attention_invariants():
    schema = tiny_schema()
    T, E, W = 10, 6, 3
    triu = np.triu_indices(T, k=1)
    lag_mask = pen.retro_window_mask(T, W)
    rng = np.random.default_rng(2)
    model = None
    for i in range(1000):
        if i % 100 == 0:  # fresh random parameter point every 100 passes
            model = Model(schema, ModelConfig(hidden=8, heads=2, blocks=2, dropout=0.0),
                          seed=i)
            for p in model.params.values():
                p.data = rng.normal(0.0, 0.6, size=p.data.shape)
        batch = WindowBatch(
            enc_past=rng.normal(size=(1, 6, 3)),
            fut_known=rng.normal(size=(1, 4, 1)),
            statics=rng.integers(0, 5, size=(1, 1)).astype(float),
            target_idx=np.zeros(1, dtype=int),
            fut_target=rng.normal(size=(1, 4)),
        )
        fp = model.forward(batch)
        abar = fp.abar.data[0]
        assert np.all(np.abs(abar.sum(-1) - 1.0) <= 1e-9)
        assert np.all(abar[triu] == 0.0)
        a = pen.retro_mass(fp.abar, W).data[0]
        assert np.all(a >= -1e-12) and np.all(a <= 1.0 + 1e-12)
        np.testing.assert_allclose(a, (abar * lag_mask).sum(-1), atol=1e-15)

    # mass placed at lag 4 contributes nothing
    surface = np.zeros((T, T))
    surface[7, 3] = 1.0
    assert pen.retro_mass(Tensor(surface), W).data[7] == 0.0
    ok(4, "attention invariants")


def test_criterion_5_sampler_balance():
    schema = validate_schema(
        DatasetSchema(
            features=(FeatureSpec("y", "target"),),
            grid_step_min=60.0, encoder_len=4, horizon_len=2,
        )
    )
    from omnitft.ingest import PatientSeries

    def one_window(pid, volatile):
        y = np.linspace(0.0, 10.0, 6) if volatile else np.zeros(6)
        values = y[:, None]
        s = PatientSeries(pid, values, np.ones_like(values, dtype=bool), imputed=True)
        return enumerate_windows(s, schema, delta=1.0)[0]

    pool = [one_window(f"s{i}", False) for i in range(100)]
    pool += [one_window(f"v{i}", True) for i in range(20)]
    for epoch in range(30):
        sample = balanced_epoch(pool, seed=epoch)
        assert not sample.single_class
        labels = [w.label for w in sample.windows]
        assert labels.count("stable") == 20 and labels.count("volatile") == 20

    degraded = balanced_epoch([one_window(f"s{i}", False) for i in range(50)], seed=0)
    assert degraded.single_class and len(degraded.windows) == 50
    ok(5, "state-balanced sampler")


def test_criterion_6_overfit_capacity():
    start = time.time()
    schema = synthetic_schema(encoder_len=8, horizon_len=4)
    series, _ = generate_synthetic(2, schema, shock_rate=0.3, seed=42,
                                   min_steps=30, max_steps=30)
    windows = []
    for s in series:
        windows.extend(enumerate_windows(s, schema, delta=1e9))
    windows = windows[:10]
    scalers = compute_scalers(series, schema)
    model = Model(schema, ModelConfig(hidden=16, heads=1, blocks=1, dropout=0.0),
                  seed=0, scalers=scalers)
    cfg = TrainConfig(lr=5e-3, batch=5, max_epochs=300, patience=300, seed=0)
    result = train(model, windows, windows, cfg)
    l0 = result.history[0]["l_quantile"]
    lbest = min(r["l_quantile"] for r in result.history[1:])
    elapsed = time.time() - start
    assert l0 / lbest >= 100.0, f"only {l0 / lbest:.1f}x"
    assert elapsed < 300.0, f"runtime {elapsed:.1f}s exceeds 5 minutes"
    print(f"\n  loss {l0:.4f} -> {lbest:.6f} ({l0 / lbest:.0f}x) in {elapsed:.1f}s")
    ok(6, "overfit capacity")


def _split_windows(series_list, schema, delta, rng, n_train, n_val):
    windows = []
    for s in series_list:
        windows.extend(enumerate_windows(s, schema, delta=delta))
    idx = rng.permutation(len(windows))
    train_w = [windows[i] for i in idx[:n_train]]
    val_w = [windows[i] for i in idx[n_train : n_train + n_val]]
    held = [windows[i] for i in idx[n_train + n_val :]]
    return train_w, val_w, held


def _standardize_rows(x, eps=1e-8):
    mu = x.mean(-1, keepdims=True)
    sd = x.std(-1, keepdims=True)
    flag = sd[..., 0] < eps
    z = (x - mu) / (sd + eps)
    z[flag] = 0.0
    return z, flag


def _heldout_alignment_corr(model, windows):
    a_all, s_all = [], []
    E = model.schema.encoder_len
    for i in range(0, len(windows), 256):
        batch = WindowBatch.from_windows(windows[i : i + 256])
        fp = model.forward(batch)
        a = pen.retro_mass(fp.abar, model.config.retro_window).data[:, E:]
        s = pen.rep_first_diff(fp.decoder_states, fp.encoder_anchor).data
        a_std, fa = _standardize_rows(a)
        s_std, fs = _standardize_rows(s)
        keep = ~(fa | fs)
        a_all.append(a_std[keep].ravel())
        s_all.append(s_std[keep].ravel())
    a = np.concatenate(a_all)
    s = np.concatenate(s_all)
    return float(np.corrcoef(a, s)[0, 1])


def test_criterion_7_shock_alignment_effect():
    wins = 0
    for seed in range(5):
        schema = synthetic_schema(encoder_len=8, horizon_len=4)
        series, _ = generate_synthetic(12, schema, shock_rate=0.3, seed=100 + seed,
                                       min_steps=36, max_steps=48)
        rng = np.random.default_rng(seed)
        train_w, val_w, held = _split_windows(series, schema, 2.0, rng, 240, 40)
        scalers = compute_scalers(series, schema)
        corr = {}
        for lam in (0.1, 0.0):
            model = Model(schema, ModelConfig(hidden=16, heads=2, blocks=2, dropout=0.0),
                          seed=seed, scalers=scalers)
            cfg = TrainConfig(lr=3e-3, batch=32, max_epochs=10, patience=10, seed=seed,
                              weights=PenaltyWeights(lambda_shock=lam))
            train(model, train_w, val_w, cfg)
            corr[lam] = _heldout_alignment_corr(model, held)
        wins += int(corr[0.1] > corr[0.0])
        print(f"\n  seed {seed}: corr regularized {corr[0.1]:+.3f} vs plain {corr[0.0]:+.3f}")
    assert wins >= 4, f"regularized run won only {wins}/5 seeds"
    ok(7, "shock-aligned attention effect")


def test_criterion_8_shrinkage_effect():
    le_hits, ratio_hits = 0, 0
    for seed in range(5):
        schema = synthetic_schema(encoder_len=8, horizon_len=4, site_vocab=20)
        series, _ = generate_synthetic(40, schema, shock_rate=0.2, seed=200 + seed,
                                       min_steps=24, max_steps=32)
        col = schema.column("site")
        counts = np.bincount(
            np.array([int(s.values[0, col]) for s in series]), minlength=20
        )
        order = np.lexsort((np.arange(20), counts))
        rare, freq = order[:2], order[-2:]  # rarest and most frequent decile
        rng = np.random.default_rng(seed)
        train_w, val_w, _ = _split_windows(series, schema, 2.0, rng, 300, 40)
        scalers = compute_scalers(series, schema)
        norm = {}
        for lam in (1e-3, 0.0):
            model = Model(schema, ModelConfig(hidden=16, heads=2, blocks=2, dropout=0.0),
                          seed=seed, scalers=scalers)
            cfg = TrainConfig(lr=5e-3, batch=32, max_epochs=12, patience=12, seed=seed,
                              weights=PenaltyWeights(lambda_embed=lam))
            train(model, train_w, val_w, cfg)
            rows = np.linalg.norm(model.params["embed/static/site/table"].data, axis=1)
            norm[lam] = (rows[rare].mean(), rows[freq].mean())
        le_hits += int(norm[1e-3][0] <= norm[1e-3][1])
        ratio_reg = norm[1e-3][0] / norm[1e-3][1]
        ratio_plain = norm[0.0][0] / norm[0.0][1]
        ratio_hits += int(ratio_reg < ratio_plain)
        print(f"\n  seed {seed}: rare/freq ratio {ratio_reg:.3f} regularized "
              f"vs {ratio_plain:.3f} plain")
    assert le_hits == 5, f"rare <= frequent failed in {5 - le_hits} seeds"
    assert ratio_hits >= 4, f"ratio shrank in only {ratio_hits}/5 seeds"
    ok(8, "frequency-aware shrinkage effect")


def test_criterion_9_calibration_sanity():
    schema = synthetic_schema(encoder_len=8, horizon_len=4)
    series, _ = generate_synthetic(24, schema, shock_rate=0.0, seed=10,
                                   min_steps=40, max_steps=60)
    rng = np.random.default_rng(0)
    train_w, val_w, held = _split_windows(series, schema, 0.8, rng, 700, 100)
    scalers = compute_scalers(series, schema)
    model = Model(schema, ModelConfig(hidden=16, heads=2, blocks=2, dropout=0.0),
                  seed=0, scalers=scalers)
    cfg = TrainConfig(lr=5e-3, batch=64, max_epochs=25, patience=25, seed=0)
    train(model, train_w, val_w, cfg)
    p10, p90, actual = [], [], []
    for i in range(0, len(held), 256):
        chunk = held[i : i + 256]
        fp = model.forward(WindowBatch.from_windows(chunk))
        q = np.sort(fp.quantiles.data, axis=-1)
        p10.extend(q[..., 0].ravel())
        p90.extend(q[..., 2].ravel())
        actual.extend(np.concatenate([w.fut_target for w in chunk]))
    c10 = coverage_below(0.1, p10, actual)
    c90 = coverage_below(0.9, p90, actual)
    print(f"\n  held-out P10 coverage {c10:.3f}, P90 coverage {c90:.3f}")
    assert 0.05 <= c10 <= 0.18, f"P10 coverage {c10:.3f} outside [0.05, 0.18]"
    assert 0.82 <= c90 <= 0.95, f"P90 coverage {c90:.3f} outside [0.82, 0.95]"
    ok(9, "quantile calibration sanity")


def test_criterion_10_hmm_labeler():
    schema = synthetic_schema(encoder_len=8, horizon_len=4)
    series, truth = generate_synthetic(1, schema, shock_rate=0.3, seed=7,
                                       min_steps=2001, max_steps=2001,
                                       mean_volatile_run=16.0)
    y = series[0].values[:, schema.column("y")]
    diffs = np.diff(y)
    params = hmm_fit(diffs, seed=0)
    lls = np.array(params.log_likelihoods)
    assert np.all(np.diff(lls) >= -1e-9), "EM log-likelihood decreased"
    decoded = hmm_decode(diffs, params)
    true_labels = truth[series[0].patient_id][1:]
    acc = float(np.mean([a == b for a, b in zip(decoded, true_labels)]))
    print(f"\n  Viterbi step accuracy {acc:.4f} over {len(decoded)} steps")
    assert acc >= 0.90
    ok(10, "two-state HMM labeler")


def test_criterion_11_metric_oracle():
    pred, actual = [1.0, 2.0, 3.0], [2.0, 2.0, 5.0]
    assert abs(mae(pred, actual) - 1.0) <= 1e-9
    assert abs(rmse(pred, actual) - np.sqrt(5.0 / 3.0)) <= 1e-9
    assert abs(mape(pred, actual) - (100.0 * (1 / 2 + 0 + 2 / 5) / 3)) <= 1e-9
    assert abs(pinball_at(0.9, [0.0], [1.0]) - 0.9) <= 1e-9
    assert abs(pinball_at(0.9, [1.0], [0.0]) - 0.1) <= 1e-9
    assert abs(pinball_at(0.5, pred, actual) - 0.5 * mae(pred, actual)) <= 1e-9
    assert coverage_below(0.9, [10.0, 10.0, 10.0], actual) == 1.0
    assert abs(coverage_below(0.5, [2.5, 2.5, 2.5], actual) - 2 / 3) <= 1e-9
    assert format_cell(5.05, 6.67) == "5.05 (6.67)"
    ok(11, "metric oracle and cell format")


def test_criterion_12_pipeline_determinism(tmp_path):
    def one_run(root):
        synth = root / "synth"
        run = root / "run"
        ev = root / "eval"
        assert cli.main([
            "synth", "--patients", "14", "--shock-rate", "0.3", "--seed", "5",
            "--out", str(synth), "--encoder-len", "6", "--horizon-len", "3",
            "--min-steps", "24", "--max-steps", "32",
        ]) == 0
        cfg = {
            "lr": 3e-3, "batch": 32, "max_epochs": 5, "patience": 5, "seed": 0,
            "model": {"hidden": 8, "heads": 2, "blocks": 1, "dropout": 0.3},
        }
        cfg_path = root / "config.json"
        cfg_path.write_text(json.dumps(cfg))
        assert cli.main([
            "train", "--data", str(synth), "--schema", str(synth / "schema.json"),
            "--config", str(cfg_path), "--out", str(run),
        ]) == 0
        assert cli.main([
            "eval", "--checkpoint", str(run / "checkpoint.bin"),
            "--data", str(synth), "--out", str(ev),
        ]) == 0
        return (
            (run / "checkpoint.bin").read_bytes(),
            (ev / "metrics.json").read_bytes(),
            (run / "history.csv").read_bytes(),
        )

    a = one_run(tmp_path / "a")
    b = one_run(tmp_path / "b")
    assert a[0] == b[0], "checkpoints differ"
    assert a[1] == b[1], "metric reports differ"
    assert a[2] == b[2], "training histories differ"
    ok(12, "end-to-end determinism")
