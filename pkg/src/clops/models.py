"""Transformer forecasting variants built from the shared pre-LN blocks."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .features import ModelInputs, WindowBatch, assemble_inputs, unnormalize_forecast
from .heads import ForecastDistribution, Head, make_head
from .nn import (DecoderLayer, EncoderLayer, LayerNorm, LearnedPE, Linear, Module, Parameter,
                 sinusoidal_pe, trunc_normal)
from .tensor import Tensor


def build_attention_mask(scheme: str, L: int, H: int) -> np.ndarray:
    """Boolean (L+H, L+H) matrix; entry (i, j) True when position i may attend to j."""
    n = L + H
    if scheme == "full":
        return np.ones((n, n), bool)
    causal = np.tril(np.ones((n, n), bool))
    if scheme == "full_causal":
        return causal
    if scheme == "mask_causal":
        m = causal.copy()
        m[:L, :L] = True
        return m
    raise ConfigError(f"unknown attention mask scheme {scheme!r}")


class ForecastModel(Module):
    """Common plumbing: positional encodings, final projection to the head, loss and prediction."""

    decoder_iterations = 1

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.head: Head = make_head(config.head, config.d_y, config.levels)
        D = config.d_model
        if config.pe == "learned":
            self.lpe = LearnedPE(config.L + config.H, D, rng)
        self._spe = sinusoidal_pe(config.L + config.H + 1, D) if config.pe == "sinusoidal" else None

    # -- helpers -------------------------------------------------------------
    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def _tensor(self, arr) -> Tensor:
        return Tensor(arr, dtype=self.dtype)

    def _add_pe(self, x: Tensor, positions: np.ndarray) -> Tensor:
        if self.config.pe == "sinusoidal":
            return x + self._spe[positions].astype(self.dtype)
        if self.config.pe == "learned":
            return x + self.lpe(positions)
        return x

    @property
    def rope(self) -> bool:
        return self.config.pe == "rope"

    def _stack(self, n: int, cls):
        c = self.config
        return [cls(c.d_model, c.d_ff, c.n_heads, c.d_kv, self._rng, rope=self.rope) for _ in range(n)]

    def attention_modules(self):
        from .nn import MultiHeadAttention
        out = []

        def walk(m):
            for v in vars(m).values():
                if isinstance(v, MultiHeadAttention):
                    out.append(v)
                elif isinstance(v, Module):
                    walk(v)
                elif isinstance(v, list):
                    for item in v:
                        if isinstance(item, Module):
                            walk(item)
        walk(self)
        return out

    def reset_stats(self) -> None:
        for m in self.attention_modules():
            m.score_shapes.clear()

    def attention_score_sizes(self) -> list[tuple]:
        return [s for m in self.attention_modules() for s in m.score_shapes]

    # -- public API ------------------------------------------------------------
    def forward(self, inputs: ModelInputs) -> dict:
        raise NotImplementedError

    def loss(self, batch: WindowBatch) -> Tensor:
        inputs = assemble_inputs(batch, self.config)
        params = self.forward(inputs)
        return self.head.loss(params, batch.future_targets.astype(self.dtype))

    def predict(self, batch: WindowBatch) -> ForecastDistribution:
        """Predictive distribution in normalized scale."""
        with T.no_grad():
            params = self.forward(assemble_inputs(batch, self.config))
        return self.head.to_distribution(params)

    def forecast(self, batch: WindowBatch) -> ForecastDistribution:
        return unnormalize_forecast(self.predict(batch), batch.stats)

    def summary(self) -> dict:
        c = self.config
        return {"variant": c.variant, "d_in": c.d_in, "params": self.num_parameters(),
                "decoder_iterations": self.decoder_iterations}


class MaskedEncoder(ForecastModel):
    def __init__(self, config: ModelConfig, rng):
        super().__init__(config, rng)
        self._rng = rng
        D = config.d_model
        self.in_proj = Linear(config.d_in, D, rng)
        self.mask_emb = Parameter(trunc_normal(rng, (D,)))
        self.layers = self._stack(config.layers, EncoderLayer)
        self.final_ln = LayerNorm(D)
        self.out_proj = Linear(D, self.head.n_out, rng)
        del self._rng

    def encode(self, x_all: np.ndarray) -> Tensor:
        c = self.config
        L, H = c.L, c.H
        self.reset_stats()
        x = self.in_proj(self._tensor(x_all))
        indicator = np.zeros((1, L + H, 1), dtype=self.dtype)
        indicator[:, L:] = 1.0
        x = x + self.mask_emb * indicator
        pos = np.arange(L + H)
        x = self._add_pe(x, pos)
        mask = build_attention_mask(c.attn_mask, L, H)
        for layer in self.layers:
            x = layer(x, mask=mask, pos=pos)
        return self.final_ln(x)

    def forward(self, inputs: ModelInputs) -> dict:
        x_all = np.concatenate([inputs.context, inputs.prediction], axis=1)
        h = self.encode(x_all)
        return self.head.constrain(self.out_proj(h[:, self.config.L:]))


class Encoder(ForecastModel):
    """Encoder over the context only; pooled (mean / cls) or flattened output."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config, rng)
        self._rng = rng
        D = config.d_model
        self.pooling = config.variant.split("_", 1)[1]
        self.in_proj = Linear(config.d_in, D, rng)
        if self.pooling == "cls":
            self.cls_token = Parameter(trunc_normal(rng, (D,)))
        self.layers = self._stack(config.layers, EncoderLayer)
        self.final_ln = LayerNorm(D)
        width = D * config.L if self.pooling == "flatten" else D
        self.out_proj = Linear(width, config.H * self.head.n_out, rng)
        del self._rng

    def forward(self, inputs: ModelInputs) -> dict:
        c = self.config
        B, L, _ = inputs.context.shape
        if self.pooling == "flatten" and L != c.L:
            raise ValueError(f"flatten encoder is built for L={c.L}, got context length {L}")
        self.reset_stats()
        x = self.in_proj(self._tensor(inputs.context))
        n = L
        mask = build_attention_mask(c.attn_mask, L, 0)
        if self.pooling == "cls":
            tok = T.broadcast_to(self.cls_token.reshape(1, 1, -1), (B, 1, c.d_model))
            x = T.concat([tok, x], axis=1)
            n = L + 1
            mask = build_attention_mask(c.attn_mask, n, 0)
            mask[0, :] = True
        pos = np.arange(n)
        x = self._add_pe(x, pos)
        for layer in self.layers:
            x = layer(x, mask=mask, pos=pos)
        x = self.final_ln(x)
        if self.pooling == "mean":
            pooled = x.mean(axis=1)
        elif self.pooling == "cls":
            pooled = x[:, 0]
        else:
            pooled = x.reshape(B, n * c.d_model)
        raw = self.out_proj(pooled).reshape(B, c.H, self.head.n_out)
        return self.head.constrain(raw)


class EncoderDecoder(ForecastModel):
    """Encoder over the context, decoder over the horizon with cross-attention.

    IMS decodes one step at a time from (y_{t-1}, z_t); DMS decodes all steps from z_t.
    """

    def __init__(self, config: ModelConfig, rng):
        super().__init__(config, rng)
        self._rng = rng
        D = config.d_model
        self.ims = config.variant == "enc_dec_ims"
        self.decoder_iterations = config.H if self.ims else 1
        self.enc_proj = Linear(config.d_in, D, rng)
        self.dec_proj = Linear(config.d_in, D, rng)
        self.enc_layers = self._stack(config.layers, EncoderLayer)
        self.enc_ln = LayerNorm(D)
        self.dec_layers = self._stack(config.layers, DecoderLayer)
        self.dec_ln = LayerNorm(D)
        self.out_proj = Linear(D, self.head.n_out, rng)
        self._sample_rng = np.random.default_rng(0)
        del self._rng

    def _encode(self, context: np.ndarray) -> Tensor:
        c = self.config
        x = self.enc_proj(self._tensor(context))
        pos = np.arange(c.L)
        x = self._add_pe(x, pos)
        mask = build_attention_mask(c.attn_mask, c.L, 0)
        for layer in self.enc_layers:
            x = layer(x, mask=mask, pos=pos)
        return self.enc_ln(x)

    def _decoder_mask(self) -> np.ndarray:
        H = self.config.H
        if not self.ims and self.config.attn_mask == "full":
            return np.ones((H, H), bool)
        return np.tril(np.ones((H, H), bool))

    def forward(self, inputs: ModelInputs, mode: str | None = None) -> dict:
        mode = mode or ("ims_train" if self.ims else "dms")
        if (mode == "dms") == self.ims:
            raise ValueError(f"mode {mode!r} does not match variant {self.config.variant!r}")
        if mode == "ims_infer":
            return self._ims_infer(inputs)
        c = self.config
        self.reset_stats()
        memory = self._encode(inputs.context)
        dec_in = inputs.prediction.copy()
        if self.ims:
            dec_in[..., :c.d_y] = inputs.prev_targets
        pos = c.L + np.arange(c.H)
        x = self._add_pe(self.dec_proj(self._tensor(dec_in)), pos)
        mask = self._decoder_mask()
        for layer in self.dec_layers:
            x = layer(x, memory, mask=mask, pos=pos)
        return self.head.constrain(self.out_proj(self.dec_ln(x)))

    def _ims_infer(self, inputs: ModelInputs) -> dict:
        c = self.config
        self.reset_stats()
        memory = self._encode(inputs.context)
        caches = [dict() for _ in self.dec_layers]
        prev = inputs.prev_targets[:, :1].copy()
        steps = []
        for h in range(c.H):
            step = inputs.prediction[:, h:h + 1].copy()
            step[..., :c.d_y] = prev
            pos = np.array([c.L + h])
            x = self._add_pe(self.dec_proj(self._tensor(step)), pos)
            for layer, cache in zip(self.dec_layers, caches):
                x = layer(x, memory, pos=pos, cache=cache)
            params = self.head.constrain(self.out_proj(self.dec_ln(x)))
            steps.append(params)
            dist = self.head.to_distribution(params)
            if c.ims_sample:
                prev = dist.sample(1, self._sample_rng)[0]
            else:
                prev = dist.mean()
            prev = np.asarray(prev, dtype=step.dtype)
        return {k: T.concat([s[k] for s in steps], axis=1) for k in steps[0]}

    def predict(self, batch: WindowBatch) -> ForecastDistribution:
        if not self.ims:
            return super().predict(batch)
        with T.no_grad():
            params = self.forward(assemble_inputs(batch, self.config), mode="ims_infer")
        return self.head.to_distribution(params)


def build_model(config: ModelConfig, seed: int = 0) -> tuple[ForecastModel, int]:
    """Instantiate the variant named in ``config``; returns (model, parameter count)."""
    config.validate()
    rng = np.random.default_rng(seed)
    if config.variant == "masked_encoder":
        model = MaskedEncoder(config, rng)
    elif config.variant.startswith("encoder_"):
        model = Encoder(config, rng)
    elif config.variant.startswith("enc_dec_"):
        model = EncoderDecoder(config, rng)
    else:
        raise ConfigError(f"unknown variant {config.variant!r}")
    return model, model.num_parameters()


def decay_mask(model: Module) -> dict[str, bool]:
    return {name: p.decay for name, p in model.named_parameters()}
