"""Layers shared by every model variant: linear maps, pre-LN blocks, attention, positional encodings."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d), decay=False)
        self.bias = Parameter(np.zeros(d), decay=False)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng):
        self.up = Linear(d_model, d_ff, rng)
        self.down = Linear(d_ff, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


# -- positional information ---------------------------------------------------

def rope_angles(positions: np.ndarray, d_kv: int, base: float = 10000.0) -> np.ndarray:
    if d_kv % 2:
        raise ValueError(f"rope needs an even head dimension, got {d_kv}")
    inv_freq = base ** (-np.arange(0, d_kv, 2) / d_kv)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def rope_rotate(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` (..., T, d_kv) by position * theta_j."""
    d = x.shape[-1]
    ang = rope_angles(positions, d, base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    xd = x.data
    even, odd = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return (dx,)

    return Tensor._make(out, (x,), backward)


def sinusoidal_pe(n_pos: int, d_model: int) -> np.ndarray:
    """Standard sin/cos table: even channels sin, odd channels cos."""
    pos = np.arange(n_pos)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    pe = np.zeros((n_pos, d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


class LearnedPE(Module):
    def __init__(self, max_len: int, d_model: int, rng):
        self.table = Parameter(trunc_normal(rng, (max_len, d_model)))
        self.max_len = max_len

    def forward(self, positions: np.ndarray) -> Tensor:
        positions = np.asarray(positions)
        if positions.max(initial=0) >= self.max_len:
            raise IndexError(f"position {positions.max()} outside learned table of {self.max_len}")
        return self.table[positions]


# -- attention ---------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_kv) + mask_bias) v for q, k, v shaped (..., T, d_kv)."""
    tq, tk = q.shape[-2], k.shape[-2]
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (tq, tk):
            raise ValueError(f"mask shape {mask.shape} does not match scores ({tq}, {tk})")
        bias = np.where(mask, 0.0, -1e9).astype(q.dtype)
    scores = (q * (1.0 / math.sqrt(q.shape[-1]))) @ k.swapaxes(-1, -2)
    return T.softmax(scores, axis=-1, bias=bias) @ v


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, d_kv: int, rng, rope: bool = False):
        inner = n_heads * d_kv
        self.q = Linear(d_model, inner, rng)
        self.k = Linear(d_model, inner, rng)
        self.v = Linear(d_model, inner, rng)
        self.o = Linear(inner, d_model, rng)
        self.n_heads, self.d_kv, self.rope = n_heads, d_kv, rope
        self.score_shapes: list[tuple] = []

    def _split(self, x: Tensor) -> Tensor:
        # (B, T, heads*d_kv) -> (B*heads, T, d_kv)
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d_kv).transpose(0, 2, 1, 3).reshape(b * self.n_heads, t, self.d_kv)

    def forward(self, x: Tensor, source: Tensor | None = None, mask=None,
                q_pos: np.ndarray | None = None, k_pos: np.ndarray | None = None,
                cache: dict | None = None) -> Tensor:
        """Self-attention when ``source`` is None, otherwise cross-attention onto ``source``.

        ``cache`` holds already-projected keys/values; new keys are appended
        for self-attention, reused as-is for cross-attention.
        """
        q = self._split(self.q(x))
        if source is None:
            k, v = self._split(self.k(x)), self._split(self.v(x))
            if self.rope:
                q = rope_rotate(q, q_pos)
                k = rope_rotate(k, q_pos if k_pos is None else k_pos)
            if cache is not None:
                if "k" in cache:
                    k = T.concat([cache["k"], k], axis=1)
                    v = T.concat([cache["v"], v], axis=1)
                cache["k"], cache["v"] = k, v
        else:
            if cache is not None and "k" in cache:
                k, v = cache["k"], cache["v"]
            else:
                k, v = self._split(self.k(source)), self._split(self.v(source))
                if cache is not None:
                    cache["k"], cache["v"] = k, v
        self.score_shapes.append((q.shape[-2], k.shape[-2]))
        out = attention(q, k, v, mask)
        b, t = x.shape[0], x.shape[1]
        out = out.reshape(b, self.n_heads, t, self.d_kv).transpose(0, 2, 1, 3)
        return self.o(out.reshape(b, t, self.n_heads * self.d_kv))


class EncoderLayer(Module):
    def __init__(self, d_model, d_ff, n_heads, d_kv, rng, rope=False):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, d_kv, rng, rope=rope)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def forward(self, x, mask=None, pos=None):
        x = x + self.attn(self.ln1(x), mask=mask, q_pos=pos)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    def __init__(self, d_model, d_ff, n_heads, d_kv, rng, rope=False):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, d_kv, rng, rope=rope)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, d_kv, rng)
        self.ln3 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng)

    def forward(self, x, memory, mask=None, pos=None, k_pos=None, cache=None):
        self_cache = cross_cache = None
        if cache is not None:
            self_cache = cache.setdefault("self", {})
            cross_cache = cache.setdefault("cross", {})
        x = x + self.self_attn(self.ln1(x), mask=mask, q_pos=pos, k_pos=k_pos, cache=self_cache)
        x = x + self.cross_attn(self.ln2(x), source=memory, cache=cross_cache)
        return x + self.ff(self.ln3(x))
