"""Training loop: composite objective, Adam, clipping, early stopping.

The loss is the quantile (pinball) loss plus the three weighted penalties;
epochs draw class-balanced window samples, multiple targets interleave
their batches round-robin, and early stopping tracks the validation
quantile loss alone (the penalties shape training, the task metric picks
the checkpoint).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import penalties as pen
from .diffcore import Tensor
from .model import Model, WindowBatch, ForwardPass
from .penalties import PenaltyWeights
from .sampler import balanced_epoch
from .schema import build_group_assignment


class TrainerError(Exception):
    pass


class AllMasked(TrainerError):
    pass


class Diverged(TrainerError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch: int = 64
    clip: float = 1.0
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0  # drives dropout masks and epoch draws
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    quantiles: tuple = (0.1, 0.5, 0.9)

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise TrainerError("lr > 0, batch >= 1, patience >= 1, max_epochs >= 1 required")


@dataclass
class ObjectiveBreakdown:
    l_quantile: float
    c_embed: float
    c_group: float
    c_shock: float
    l_total: float

    def as_row(self) -> list:
        return [self.l_quantile, self.c_embed, self.c_group, self.c_shock, self.l_total]


def quantile_loss(pred: Tensor, actual, quantiles, mask=None) -> Tensor:
    """Pinball loss averaged over batch, horizon steps, and quantiles.

    pinball_q(e) = max(q e, (q-1) e) with e = y - yhat; at the kink the
    gradient takes the (q-1) branch. `mask` (matching actual) drops steps
    from the average.
    """
    pred = dc.as_tensor(pred)
    y = dc.as_tensor(np.asarray(actual)[..., None])
    qvec = np.asarray(quantiles, dtype=np.float64)
    e = dc.sub(y, pred)
    elems = dc.mul(e, Tensor(qvec - 1.0)) + dc.relu(e)
    if mask is None:
        return dc.reduce_mean(dc.reshape(elems, (-1,)))
    m = np.asarray(mask, dtype=np.float64)
    if m.sum() == 0:
        raise AllMasked("no unmasked target steps")
    weights = np.broadcast_to(m[..., None], elems.shape).copy()
    total = dc.reduce_sum(dc.mul(elems, Tensor(weights)))
    return dc.div(total, float(weights.sum()))


def total_objective(
    model: Model,
    fp: ForwardPass,
    batch: WindowBatch,
    weights: PenaltyWeights,
    group_matrix: np.ndarray,
):
    """The full training objective; returns (loss node, breakdown)."""
    E = model.schema.encoder_len
    H = batch.fut_target.shape[1]

    lq = quantile_loss(fp.quantiles, batch.fut_target, model.config.quantiles)

    ce = pen.c_embed(model.embedding_tables(), fp.category_counts, weights.eps_embed)

    p_hs = pen.group_distribution_past(fp.w_hist, group_matrix, weights.eps_group)
    p_fut = pen.group_distribution_future(fp.w_fut) if fp.w_fut is not None else None
    cg = pen.c_group(p_hs, p_fut)

    if H >= 2:
        retro = pen.retro_mass(fp.abar, model.config.retro_window)
        a_dec = retro[:, E:]
        a_std, flag_a = pen.standardize(a_dec, weights.eps_std)
        s_raw = pen.rep_first_diff(fp.decoder_states, fp.encoder_anchor)
        s_std, flag_s = pen.standardize(s_raw, weights.eps_std)
        cs = pen.c_shock(a_std, s_std, flag_a | flag_s)
    else:
        cs = Tensor(0.0)  # a single decoder step has no alignable dynamics

    total = (
        lq
        + dc.mul(ce, weights.lambda_embed)
        + dc.mul(cg, weights.lambda_group)
        + dc.mul(cs, weights.lambda_shock)
    )
    breakdown = ObjectiveBreakdown(
        l_quantile=float(lq.data),
        c_embed=float(ce.data),
        c_group=float(cg.data),
        c_shock=float(cs.data),
        l_total=float(total.data),
    )
    return total, breakdown


def clip_gradients(grads: dict, max_norm: float = 1.0):
    """Scale the whole gradient set so its global L2 norm is at most max_norm."""
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    norm = float(np.sqrt(sq))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    history: list  # dict rows per epoch
    best_epoch: int
    best_val: float
    stopped_epoch: int
    diverged: bool = False
    single_class: bool = False  # any epoch degraded to one regime class


def _batches(windows: list, size: int):
    for i in range(0, len(windows), size):
        yield WindowBatch.from_windows(windows[i : i + size])


def evaluate_quantile_loss(model: Model, windows: list, batch_size: int = 256) -> float:
    """Mean pinball loss over windows, dropout off."""
    if not windows:
        return float("nan")
    total, n = 0.0, 0
    for batch in _batches(windows, batch_size):
        fp = model.forward(batch, rng=None)
        lq = quantile_loss(fp.quantiles, batch.fut_target, model.config.quantiles)
        total += float(lq.data) * batch.size
        n += batch.size
    return total / n


def _epoch_batches(pools: dict, epoch: int, config: TrainConfig):
    """Balanced draw per target pool, then round-robin across targets."""
    single = False
    per_pool = []
    for i, name in enumerate(sorted(pools)):
        if not pools[name]:
            continue
        sample = balanced_epoch(pools[name], seed=config.seed + 7919 * (epoch + 1) + i)
        single = single or sample.single_class
        per_pool.append(list(_batches(sample.windows, config.batch)))
    batches = []
    for round_idx in range(max(len(b) for b in per_pool)):
        for b in per_pool:
            if round_idx < len(b):
                batches.append(b[round_idx])
    return batches, single


def train(model: Model, train_pools, val_windows: list, config: TrainConfig) -> TrainResult:
    """Optimize the composite objective with early stopping on validation
    pinball loss.

    `train_pools` is either a flat window list (single pool) or a mapping of
    target name to window list. The best-validation parameters are restored
    into the model before returning. A non-finite loss aborts training and
    restores the best parameters seen so far.
    """
    if tuple(config.quantiles) != tuple(model.config.quantiles):
        raise TrainerError("train and model quantile sets differ")
    pools = train_pools if isinstance(train_pools, dict) else {"": list(train_pools)}
    if not any(pools.values()):
        raise TrainerError("no training windows")

    gmat = build_group_assignment(model.schema).matrix
    dropout_rng = np.random.default_rng(config.seed) if model.config.dropout > 0 else None
    state = AdamState()

    def snapshot():
        return {k: v.data.copy() for k, v in model.params.items()}

    def restore(snap):
        for k, v in model.params.items():
            v.data = snap[k].copy()

    history: list = []

    # epoch 0: evaluation only, the pre-training baseline
    base_batches, single0 = _epoch_batches(pools, -1, config)
    rows = []
    for batch in base_batches:
        fp = model.forward(batch, rng=None)
        _, br = total_objective(model, fp, batch, config.weights, gmat)
        rows.append(br.as_row())
    base = np.mean(rows, axis=0)
    val0 = evaluate_quantile_loss(model, val_windows)
    history.append(
        {
            "epoch": 0,
            "l_quantile": float(base[0]),
            "c_embed": float(base[1]),
            "c_group": float(base[2]),
            "c_shock": float(base[3]),
            "l_total": float(base[4]),
            "val_loss": float(val0),
        }
    )

    best_val = val0 if np.isfinite(val0) else float("inf")
    best_snap = snapshot()
    best_epoch = 0
    bad_epochs = 0
    single_any = single0
    diverged = False
    stopped = 0

    for epoch in range(1, config.max_epochs + 1):
        batches, single = _epoch_batches(pools, epoch, config)
        single_any = single_any or single
        rows = []
        for batch in batches:
            for p in model.params.values():
                p.zero_grad()
            fp = model.forward(batch, rng=dropout_rng)
            loss, br = total_objective(model, fp, batch, config.weights, gmat)
            if not np.isfinite(br.l_total):
                diverged = True
                break
            rows.append(br.as_row())
            dc.backward(loss)
            grads = {
                k: p.grad for k, p in model.params.items() if p.grad is not None
            }
            grads, _ = clip_gradients(grads, config.clip)
            adam_step(model.params, grads, state, config.lr)
        if diverged:
            stopped = epoch
            break

        mean_row = np.mean(rows, axis=0)
        val = evaluate_quantile_loss(model, val_windows)
        history.append(
            {
                "epoch": epoch,
                "l_quantile": float(mean_row[0]),
                "c_embed": float(mean_row[1]),
                "c_group": float(mean_row[2]),
                "c_shock": float(mean_row[3]),
                "l_total": float(mean_row[4]),
                "val_loss": float(val),
            }
        )
        stopped = epoch

        if np.isfinite(val) and val < best_val:
            best_val = val
            best_snap = snapshot()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    restore(best_snap)
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
        stopped_epoch=stopped,
        diverged=diverged,
        single_class=single_any,
    )


HISTORY_COLUMNS = ["epoch", "l_quantile", "c_embed", "c_group", "c_shock", "l_total", "val_loss"]


def write_history_csv(path, history: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in HISTORY_COLUMNS])


def train_config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["quantiles"] = list(config.quantiles)
    return d


def train_config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    if "weights" in doc and isinstance(doc["weights"], dict):
        doc["weights"] = PenaltyWeights(**doc["weights"])
    if "quantiles" in doc:
        doc["quantiles"] = tuple(doc["quantiles"])
    return TrainConfig(**doc)
