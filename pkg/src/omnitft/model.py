"""The forecasting network.

Per-variable embeddings feed variable-selection networks (one for the
encoder side, one for the known-future side, one for statics), a static
covariate encoder conditions everything, a 2-layer LSTM encoder/decoder
captures local dynamics, and a stack of causal interpretable multi-head
attention blocks (per-head queries/keys, one shared value projection, so
the head-averaged surface is a meaningful attention map) models long-range
structure. A shared dense head emits the P10/P50/P90 trajectory.

Everything runs on diffcore tensors; a forward pass exposes every internal
the regularizers consume: per-head attention, selection weights, decoder
representations, and per-batch category counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .schema import DatasetSchema, FeatureSpec

_CKPT_MAGIC = b"OTFTCKPT"
_CKPT_VERSION = 1


class ModelError(Exception):
    pass


class CategoryOutOfVocab(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    heads: int = 6
    blocks: int = 4
    dropout: float = 0.3
    quantiles: tuple = (0.1, 0.5, 0.9)
    lstm_layers: int = 2
    retro_window: int = 3
    use_raw_decoder_state: bool = False  # expose the LSTM state instead of
    # the post-attention representation as v_t

    def __post_init__(self):
        if self.hidden < 1 or self.heads < 1 or self.blocks < 1 or self.lstm_layers < 1:
            raise ModelError("hidden, heads, blocks and lstm_layers must be >= 1")
        if self.hidden < self.heads:
            raise ModelError("hidden width must be at least the head count")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        q = self.quantiles
        if len(q) < 1 or any(not 0.0 < v < 1.0 for v in q) or any(
            q[i] >= q[i + 1] for i in range(len(q) - 1)
        ):
            raise ModelError("quantiles must be strictly increasing inside (0, 1)")
        if self.retro_window < 1:
            raise ModelError("retro_window must be >= 1")

    @property
    def head_dim(self) -> int:
        # per-head query/key width; the value projection is shared across
        # heads and heads are averaged, so the width need not divide evenly
        return max(self.hidden // self.heads, 1)


@dataclass
class WindowBatch:
    """Arrays for a batch of windows; categorical entries are index floats."""

    enc_past: np.ndarray  # (B, E, n_past)
    fut_known: np.ndarray  # (B, H, n_future)
    statics: np.ndarray  # (B, n_static)
    target_idx: np.ndarray  # (B,) int
    fut_target: np.ndarray  # (B, H)
    patient_ids: list = field(default_factory=list)
    starts: list = field(default_factory=list)

    @classmethod
    def from_windows(cls, windows: list) -> "WindowBatch":
        return cls(
            enc_past=np.stack([w.enc_past for w in windows]),
            fut_known=np.stack([w.fut_known for w in windows]),
            statics=np.stack([w.statics for w in windows]),
            target_idx=np.array([w.target_idx for w in windows], dtype=int),
            fut_target=np.stack([w.fut_target for w in windows]),
            patient_ids=[w.patient_id for w in windows],
            starts=[w.start for w in windows],
        )

    @property
    def size(self) -> int:
        return self.enc_past.shape[0]


@dataclass
class SelectionWeights:
    historical: np.ndarray  # (E, n_past) rows on the simplex
    future: np.ndarray  # (H, n_future) rows on the simplex


@dataclass
class ForecastBundle:
    quantiles: np.ndarray  # (H, 3) raw P10/P50/P90 trajectory
    attention: np.ndarray  # (T, T) head-averaged causal surface
    selection: SelectionWeights
    decoder_states: np.ndarray  # (H, d)
    quantiles_sorted: np.ndarray = None  # non-crossing view, metrics only
    sorted_applied: bool = True

    def __post_init__(self):
        if self.quantiles_sorted is None:
            self.quantiles_sorted = np.sort(self.quantiles, axis=-1)


@dataclass
class ForwardPass:
    """Batch outputs plus every internal the penalties read."""

    quantiles: Tensor  # (B, H, n_q)
    abar: Tensor  # (B, T, T)
    head_attention: list  # per head, (B, T, T), final block
    w_hist: Tensor  # (B, E, n_past)
    w_fut: Tensor | None  # (B, H, n_future); None when no known covariates
    decoder_states: Tensor  # (B, H, d)
    encoder_anchor: Tensor  # (B, d) last encoder-side representation
    category_counts: dict  # table name -> per-category batch counts
    enc_out: Tensor  # (B, E, d) LSTM-side encoder outputs

    def bundle(self, i: int, config: ModelConfig) -> ForecastBundle:
        w_fut = (
            self.w_fut.data[i]
            if self.w_fut is not None
            else np.zeros((self.decoder_states.shape[1], 0))
        )
        return ForecastBundle(
            quantiles=self.quantiles.data[i].copy(),
            attention=self.abar.data[i].copy(),
            selection=SelectionWeights(self.w_hist.data[i].copy(), np.array(w_fut)),
            decoder_states=self.decoder_states.data[i].copy(),
        )


def _glorot(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def compute_scalers(series_list: list, schema: DatasetSchema) -> dict:
    """Per-feature (mean, std) over all steps of the given series.

    Continuous features only; stds are floored so constant features scale to
    zero rather than exploding. Computed on the training split and stored
    with the model so evaluation reuses the same affine frame.
    """
    scalers = {}
    for j, spec in enumerate(schema.features):
        if spec.is_categorical:
            continue
        pool = np.concatenate([s.values[:, j] for s in series_list])
        scalers[spec.name] = (float(pool.mean()), float(max(pool.std(), 1e-8)))
    return scalers


class Model:
    """Network parameters plus the forward pass, bound to one schema.

    `scalers` maps continuous feature names to a (mean, std) frame: inputs
    are standardized on the way in and quantile outputs are anchored back to
    the target's frame on the way out. Missing entries mean identity.
    """

    def __init__(self, schema: DatasetSchema, config: ModelConfig, seed: int = 0,
                 params: dict | None = None, scalers: dict | None = None):
        self.schema = schema
        self.config = config
        self.scalers = dict(scalers) if scalers else {}
        self.past_specs = schema.past_features
        self.future_specs = schema.future_features
        self.static_specs = schema.static_features
        self.n_targets = len(schema.target_features)
        self.params = params if params is not None else self._init_params(seed)

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        d = self.config.hidden
        p: dict = {}

        def dense(name, n_in, n_out, bias: float = 0.0):
            p[f"{name}/w"] = Tensor(_glorot(rng, n_in, n_out), requires_grad=True)
            p[f"{name}/b"] = Tensor(np.full(n_out, bias), requires_grad=True)

        def vec(name, n, value):
            p[name] = Tensor(np.full(n, value), requires_grad=True)

        def grn(prefix, d_in, d_out, with_ctx=False):
            dense(f"{prefix}/fc1", d_in, d)
            if with_ctx:
                p[f"{prefix}/ctx/w"] = Tensor(_glorot(rng, d, d), requires_grad=True)
            dense(f"{prefix}/fc2", d, d_out)
            dense(f"{prefix}/gate", d_out, d_out)
            dense(f"{prefix}/val", d_out, d_out)
            if d_in != d_out:
                p[f"{prefix}/skip/w"] = Tensor(_glorot(rng, d_in, d_out), requires_grad=True)
            vec(f"{prefix}/ln_g", d_out, 1.0)
            vec(f"{prefix}/ln_b", d_out, 0.0)

        def embed(name, spec: FeatureSpec):
            if spec.is_categorical:
                p[f"embed/{name}/table"] = Tensor(
                    rng.normal(0.0, 0.05, size=(spec.vocab_size, d)), requires_grad=True
                )
            else:
                p[f"embed/{name}/w"] = Tensor(rng.normal(0.0, 0.05, size=d), requires_grad=True)
                p[f"embed/{name}/b"] = Tensor(np.zeros(d), requires_grad=True)

        for spec in {**{s.name: s for s in self.past_specs},
                     **{s.name: s for s in self.future_specs}}.values():
            embed(spec.name, spec)
        for spec in self.static_specs:
            embed(f"static/{spec.name}", spec)
        p["embed/target_id/table"] = Tensor(
            rng.normal(0.0, 0.05, size=(self.n_targets, d)), requires_grad=True
        )

        n_static_vars = len(self.static_specs) + 1  # + target id
        grn("vsn/static/sel", n_static_vars * d, n_static_vars)
        for j in range(n_static_vars):
            grn(f"vsn/static/var{j}", d, d)
        grn("vsn/past/sel", len(self.past_specs) * d, len(self.past_specs), with_ctx=True)
        for j in range(len(self.past_specs)):
            grn(f"vsn/past/var{j}", d, d)
        if self.future_specs:
            grn("vsn/future/sel", len(self.future_specs) * d, len(self.future_specs),
                with_ctx=True)
            for j in range(len(self.future_specs)):
                grn(f"vsn/future/var{j}", d, d)

        for which in ("select", "enrich", "h0", "c0"):
            grn(f"static_ctx/{which}", d, d)

        for side in ("enc", "dec"):
            for layer in range(self.config.lstm_layers):
                p[f"lstm/{side}/l{layer}/x/w"] = Tensor(
                    _glorot(rng, d, 4 * d), requires_grad=True
                )
                p[f"lstm/{side}/l{layer}/h/w"] = Tensor(
                    _glorot(rng, d, 4 * d), requires_grad=True
                )
                # forget-gate slice of the shared bias starts at 1
                b = np.zeros(4 * d)
                b[d : 2 * d] = 1.0
                p[f"lstm/{side}/l{layer}/b"] = Tensor(b, requires_grad=True)

        dense("post_lstm/gate", d, d)
        dense("post_lstm/val", d, d)
        vec("post_lstm/ln_g", d, 1.0)
        vec("post_lstm/ln_b", d, 0.0)

        grn("enrich", d, d, with_ctx=True)

        dqk = self.config.head_dim
        for k in range(self.config.blocks):
            for m in range(self.config.heads):
                p[f"attn/b{k}/q{m}/w"] = Tensor(_glorot(rng, d, dqk), requires_grad=True)
                p[f"attn/b{k}/k{m}/w"] = Tensor(_glorot(rng, d, dqk), requires_grad=True)
            p[f"attn/b{k}/v/w"] = Tensor(_glorot(rng, d, d), requires_grad=True)
            dense(f"attn/b{k}/out", d, d)
            dense(f"attn/b{k}/gate", d, d)
            dense(f"attn/b{k}/val", d, d)
            vec(f"attn/b{k}/ln_g", d, 1.0)
            vec(f"attn/b{k}/ln_b", d, 0.0)
            grn(f"attn/b{k}/grn", d, d)

        dense("head", d, len(self.config.quantiles))
        return p

    # ------------------------------------------------------------------
    # building blocks

    def _dense(self, name, x):
        return dc.matmul(x, self.params[f"{name}/w"]) + self.params[f"{name}/b"]

    def _dropout(self, x, rng):
        rate = self.config.dropout
        if rng is None or rate <= 0.0:
            return x
        keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
        return dc.mul(x, Tensor(keep))

    def _layernorm(self, x, gamma_name, beta_name):
        mu = dc.reduce_mean(x, axis=-1, keepdims=True)
        centered = dc.sub(x, mu)
        var = dc.reduce_mean(dc.square(centered), axis=-1, keepdims=True)
        normed = dc.div(centered, dc.sqrt(var + 1e-5))
        return dc.mul(normed, self.params[gamma_name]) + self.params[beta_name]

    def _glu(self, prefix, x):
        return dc.mul(dc.sigmoid(self._dense(f"{prefix}/gate", x)),
                      self._dense(f"{prefix}/val", x))

    def grn(self, prefix, x, ctx=None, rng=None):
        """dense -> ELU -> dense -> GLU, residual-added and layer-normalized."""
        h = self._dense(f"{prefix}/fc1", x)
        if ctx is not None:
            c = dc.matmul(ctx, self.params[f"{prefix}/ctx/w"])
            if len(x.shape) == 3:
                c = dc.reshape(c, (c.shape[0], 1, c.shape[-1]))
            h = h + c
        h = dc.elu(h)
        h = self._dense(f"{prefix}/fc2", h)
        h = self._dropout(h, rng)
        gated = self._glu(prefix, h)
        skip = x
        if f"{prefix}/skip/w" in self.params:
            skip = dc.matmul(x, self.params[f"{prefix}/skip/w"])
        return self._layernorm(gated + skip, f"{prefix}/ln_g", f"{prefix}/ln_b")

    # ------------------------------------------------------------------
    # embeddings

    def _scale(self, name: str, col: np.ndarray) -> np.ndarray:
        mu, sd = self.scalers.get(name, (0.0, 1.0))
        return (col - mu) / sd

    def _embed_feature(self, key, spec: FeatureSpec, col: np.ndarray) -> Tensor:
        """col: (...,) raw values -> (..., d) embedding."""
        if spec.is_categorical:
            idx = col.astype(int)
            if idx.min() < 0 or idx.max() >= spec.vocab_size:
                raise CategoryOutOfVocab(f"{spec.name}: index outside [0, {spec.vocab_size})")
            return self.params[f"embed/{key}/table"][idx]
        v = Tensor(self._scale(spec.name, col)[..., None])
        return dc.mul(v, self.params[f"embed/{key}/w"]) + self.params[f"embed/{key}/b"]

    def embed_inputs(self, values: np.ndarray, specs, key_prefix: str = "") -> Tensor:
        """Per-variable embeddings, stacked: (..., n_vars, d)."""
        cols = []
        for j, spec in enumerate(specs):
            e = self._embed_feature(f"{key_prefix}{spec.name}", spec, values[..., j])
            cols.append(dc.reshape(e, e.shape[:-1] + (1, e.shape[-1])))
        return dc.concat(cols, axis=-2)

    # ------------------------------------------------------------------
    # variable selection

    def variable_select(self, side: str, emb: Tensor, ctx=None, rng=None):
        """Simplex weights over variables plus the fused representation.

        emb: (..., N, d). Returns (weights (..., N), fused (..., d)).
        """
        n = emb.shape[-2]
        flat = dc.reshape(emb, emb.shape[:-2] + (n * emb.shape[-1],))
        logits = self.grn(f"vsn/{side}/sel", flat, ctx=ctx, rng=rng)
        weights = dc.softmax(logits, axis=-1)
        processed = []
        for j in range(n):
            vj = self.grn(f"vsn/{side}/var{j}", emb[..., j, :], rng=rng)
            processed.append(dc.reshape(vj, vj.shape[:-1] + (1, vj.shape[-1])))
        stacked = dc.concat(processed, axis=-2)  # (..., N, d)
        fused = dc.reduce_sum(
            dc.mul(stacked, dc.reshape(weights, weights.shape + (1,))), axis=-2
        )
        return weights, fused

    # ------------------------------------------------------------------
    # recurrent encoder/decoder

    def _lstm_pass(self, side: str, seq: Tensor, h0: list, c0: list):
        """Run the stacked LSTM over (B, T, d); returns outputs and finals."""
        d = self.config.hidden
        T = seq.shape[1]
        hs, cs = list(h0), list(c0)
        outputs = []
        for t in range(T):
            x = seq[:, t, :]
            for layer in range(self.config.lstm_layers):
                z = (
                    dc.matmul(x, self.params[f"lstm/{side}/l{layer}/x/w"])
                    + dc.matmul(hs[layer], self.params[f"lstm/{side}/l{layer}/h/w"])
                    + self.params[f"lstm/{side}/l{layer}/b"]
                )
                i_g = dc.sigmoid(z[:, 0 * d : 1 * d])
                f_g = dc.sigmoid(z[:, 1 * d : 2 * d])
                g_g = dc.tanh(z[:, 2 * d : 3 * d])
                o_g = dc.sigmoid(z[:, 3 * d : 4 * d])
                cs[layer] = dc.mul(f_g, cs[layer]) + dc.mul(i_g, g_g)
                hs[layer] = dc.mul(o_g, dc.tanh(cs[layer]))
                x = hs[layer]
            outputs.append(dc.reshape(x, (x.shape[0], 1, d)))
        return dc.concat(outputs, axis=1), hs, cs

    def encode_decode(self, fused_past: Tensor, fused_future: Tensor, ctx_h, ctx_c):
        """LSTM over the past, state handoff into the future, gated residual.

        The static context seeds the first encoder layer's initial state;
        decoder layers start from the encoder finals.
        """
        B = fused_past.shape[0]
        d = self.config.hidden
        zero = Tensor(np.zeros((B, d)))
        h0 = [ctx_h] + [zero] * (self.config.lstm_layers - 1)
        c0 = [ctx_c] + [zero] * (self.config.lstm_layers - 1)
        enc_out, h_fin, c_fin = self._lstm_pass("enc", fused_past, h0, c0)
        dec_out, _, _ = self._lstm_pass("dec", fused_future, h_fin, c_fin)

        lstm_seq = dc.concat([enc_out, dec_out], axis=1)
        inputs_seq = dc.concat([fused_past, fused_future], axis=1)
        gated = self._glu("post_lstm", lstm_seq)
        seq = self._layernorm(gated + inputs_seq, "post_lstm/ln_g", "post_lstm/ln_b")
        return seq, enc_out, dec_out

    # ------------------------------------------------------------------
    # attention

    def _causal_mask(self, T: int) -> np.ndarray:
        return np.triu(np.ones((T, T), dtype=bool), k=1)

    def causal_attention(self, seq: Tensor, rng=None):
        """Stacked causal interpretable attention; returns features, per-head
        surfaces of the final block, and their head average."""
        cfg = self.config
        T = seq.shape[1]
        mask = self._causal_mask(T)
        scale = 1.0 / np.sqrt(cfg.head_dim)
        x = seq
        heads: list = []
        for k in range(cfg.blocks):
            value = dc.matmul(x, self.params[f"attn/b{k}/v/w"])  # shared across heads
            heads = []
            ctx_sum = None
            for m in range(cfg.heads):
                q = dc.matmul(x, self.params[f"attn/b{k}/q{m}/w"])
                key = dc.matmul(x, self.params[f"attn/b{k}/k{m}/w"])
                scores = dc.mul(dc.matmul(q, dc.swap_last(key)), scale)
                scores = dc.masked_fill(scores, mask, -np.inf)
                attn = dc.softmax(scores, axis=-1)
                heads.append(attn)
                ctx = dc.matmul(attn, value)
                ctx_sum = ctx if ctx_sum is None else ctx_sum + ctx
            mean_ctx = dc.mul(ctx_sum, 1.0 / cfg.heads)
            out = self._dropout(self._dense(f"attn/b{k}/out", mean_ctx), rng)
            gated = self._glu(f"attn/b{k}", out)
            x = self._layernorm(gated + x, f"attn/b{k}/ln_g", f"attn/b{k}/ln_b")
            x = self.grn(f"attn/b{k}/grn", x, rng=rng)

        abar = heads[0]
        for h in heads[1:]:
            abar = abar + h
        abar = dc.mul(abar, 1.0 / cfg.heads)
        return x, heads, abar

    def quantile_head(self, decoder_features: Tensor) -> Tensor:
        """Shared dense map to the quantile trajectory; raw, may cross."""
        return self._dense("head", decoder_features)

    # ------------------------------------------------------------------
    # full pass

    def batch_category_counts(self, batch: WindowBatch) -> dict:
        counts = {}
        for spec in self.past_specs:
            if spec.is_categorical:
                j = [s.name for s in self.past_specs].index(spec.name)
                counts[f"embed/{spec.name}/table"] = np.bincount(
                    batch.enc_past[..., j].astype(int).ravel(), minlength=spec.vocab_size
                )
        for spec in self.future_specs:
            if spec.is_categorical:
                j = [s.name for s in self.future_specs].index(spec.name)
                counts[f"embed/{spec.name}/table"] = np.bincount(
                    batch.fut_known[..., j].astype(int).ravel(), minlength=spec.vocab_size
                )
        for j, spec in enumerate(self.static_specs):
            if spec.is_categorical:
                counts[f"embed/static/{spec.name}/table"] = np.bincount(
                    batch.statics[:, j].astype(int), minlength=spec.vocab_size
                )
        counts["embed/target_id/table"] = np.bincount(
            batch.target_idx, minlength=self.n_targets
        )
        return counts

    def embedding_tables(self) -> dict:
        return {k: v for k, v in self.params.items() if k.endswith("/table")}

    def forward(self, batch: WindowBatch, rng=None) -> ForwardPass:
        """Full pass over a window batch; rng drives dropout (None = off)."""
        E = self.schema.encoder_len

        static_embs = [
            dc.reshape(e, e.shape[:-1] + (1, e.shape[-1]))
            for e in (
                [
                    self._embed_feature(f"static/{s.name}", s, batch.statics[:, j])
                    for j, s in enumerate(self.static_specs)
                ]
                + [self.params["embed/target_id/table"][batch.target_idx]]
            )
        ]
        _, static_vec = self.variable_select(
            "static", dc.concat(static_embs, axis=-2), rng=rng
        )
        ctx_sel = self.grn("static_ctx/select", static_vec, rng=rng)
        ctx_enr = self.grn("static_ctx/enrich", static_vec, rng=rng)
        ctx_h = self.grn("static_ctx/h0", static_vec, rng=rng)
        ctx_c = self.grn("static_ctx/c0", static_vec, rng=rng)

        past_emb = self.embed_inputs(batch.enc_past, self.past_specs)
        w_hist, fused_past = self.variable_select("past", past_emb, ctx=ctx_sel, rng=rng)

        H = batch.fut_target.shape[1]
        if self.future_specs:
            fut_emb = self.embed_inputs(batch.fut_known, self.future_specs)
            w_fut, fused_fut = self.variable_select("future", fut_emb, ctx=ctx_sel, rng=rng)
        else:
            w_fut = None
            fused_fut = Tensor(np.zeros((batch.size, H, self.config.hidden)))

        seq, enc_out, dec_out = self.encode_decode(fused_past, fused_fut, ctx_h, ctx_c)
        enriched = self.grn("enrich", seq, ctx=ctx_enr, rng=rng)
        features, heads, abar = self.causal_attention(enriched, rng=rng)

        if self.config.use_raw_decoder_state:
            dec_repr = dec_out
            anchor = enc_out[:, E - 1, :]
        else:
            dec_repr = features[:, E:, :]
            anchor = features[:, E - 1, :]

        quantiles = self.quantile_head(features[:, E:, :])
        # anchor outputs in each window's target frame
        t_names = [f.name for f in self.schema.target_features]
        mus = np.array([self.scalers.get(n, (0.0, 1.0))[0] for n in t_names])
        sds = np.array([self.scalers.get(n, (0.0, 1.0))[1] for n in t_names])
        if np.any(mus != 0.0) or np.any(sds != 1.0):
            mu_b = Tensor(mus[batch.target_idx][:, None, None])
            sd_b = Tensor(sds[batch.target_idx][:, None, None])
            quantiles = dc.mul(quantiles, sd_b) + mu_b

        return ForwardPass(
            quantiles=quantiles,
            abar=abar,
            head_attention=heads,
            w_hist=w_hist,
            w_fut=w_fut,
            decoder_states=dec_repr,
            encoder_anchor=anchor,
            category_counts=self.batch_category_counts(batch),
            enc_out=enc_out,
        )


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: Model):
    """Byte-stable container: magic, version, JSON header, raw float64 data."""
    from .schema import schema_to_dict

    names = list(model.params.keys())
    header = {
        "config": asdict(model.config),
        "schema": schema_to_dict(model.schema),
        "scalers": {k: list(v) for k, v in sorted(model.scalers.items())},
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    from .schema import schema_from_dict

    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            params[entry["name"]] = Tensor(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy(), requires_grad=True
            )
    cfg = header["config"]
    cfg["quantiles"] = tuple(cfg["quantiles"])
    config = ModelConfig(**cfg)
    schema = schema_from_dict(header["schema"])
    scalers = {k: tuple(v) for k, v in header.get("scalers", {}).items()}
    return Model(schema, config, params=params, scalers=scalers)
