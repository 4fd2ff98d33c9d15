"""Conformer encoder and transformer decoder building blocks.

All activations are batch-first ``(B, T, D)``; masks are boolean ``(B, T)``
with True marking valid frames.
"""

import numpy as np

from ..errors import ContractError, InputTooShortError, ShapeError
from ..numerics import functional as F
from ..numerics.module import Module, ones, xavier_uniform, zeros
from ..numerics.tensor import _wrap

MASK_VALUE = -1e30


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float64):
        self.gamma = ones(d, dtype)
        self.beta = zeros(d, dtype)

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, 1e-5)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, d, dtype=np.float64):
        self.gamma = ones(d, dtype)
        self.beta = zeros(d, dtype)
        self.running_mean = np.zeros(d, dtype)
        self.running_var = np.ones(d, dtype)

    def __call__(self, x, mask=None):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=0.1, eps=1e-5, mask=mask,
        )


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float64):
        self.w = xavier_uniform(rng, d_in, d_out, dtype=dtype)
        self.b = zeros(d_out, dtype) if bias else None

    def __call__(self, x):
        return F.linear(x, self.w, self.b)


class FeedForward(Module):
    def __init__(self, d, units, rng, act="swish", dropout=0.0, dtype=np.float64):
        self.w1 = Linear(d, units, rng, dtype=dtype)
        self.w2 = Linear(units, d, rng, dtype=dtype)
        self.act = act
        self.dropout = dropout
        self.rng = rng

    def __call__(self, x):
        h = F.activation(self.w1(x), self.act)
        h = F.dropout(h, self.dropout, self.rng, self.training)
        return self.w2(h)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces of width d/heads."""

    def __init__(self, d, heads, rng, dropout=0.0, dtype=np.float64):
        if d % heads:
            raise ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = xavier_uniform(rng, d, d, dtype=dtype)
        self.b_q = zeros(d, dtype)
        self.w_k = xavier_uniform(rng, d, d, dtype=dtype)
        self.b_k = zeros(d, dtype)
        self.w_v = xavier_uniform(rng, d, d, dtype=dtype)
        self.b_v = zeros(d, dtype)
        self.w_o = xavier_uniform(rng, d, d, dtype=dtype)
        self.b_o = zeros(d, dtype)
        self.dropout = dropout
        self.rng = rng

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query, memory=None, key_mask=None, causal=False):
        memory = query if memory is None else memory
        b, tq, d = query.shape
        tk = memory.shape[1]
        q = self._split(F.linear(query, self.w_q, self.b_q))
        k = self._split(F.linear(memory, self.w_k, self.b_k))
        v = self._split(F.linear(memory, self.w_v, self.b_v))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.heads))
        blocked = np.zeros((b, 1, tq, tk), dtype=bool)
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (b, tk):
                raise ShapeError(f"attention mask {key_mask.shape} does not cover ({b}, {tk})")
            blocked |= ~key_mask[:, None, None, :]
        if causal:
            blocked |= np.triu(np.ones((tq, tk), dtype=bool), k=1)[None, None]
        if blocked.any():
            scores = F.masked_fill(scores, blocked, MASK_VALUE)
        attn = F.softmax(scores, axis=-1)
        attn = F.dropout(attn, self.dropout, self.rng, self.training)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return F.linear(ctx, self.w_o, self.b_o)


def mhsa(x, params, mask=None):
    """Self-attention of ``x`` (``(T, d)`` or ``(B, T, d)``) with ``params``.

    ``mask`` marks valid positions; masked positions receive zero weight.
    """
    x = _wrap(x)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
        if mask is not None:
            mask = np.asarray(mask, bool)
            if mask.ndim != 1 or len(mask) != x.shape[1]:
                raise ShapeError(f"mask of length {mask.size} does not cover T={x.shape[1]}")
            mask = mask[None]
    out = params(x, key_mask=mask)
    return out.reshape(*out.shape[1:]) if single else out


class ConvModule(Module):
    """Pointwise expand, GLU, depthwise conv, batch norm, Swish, pointwise project."""

    def __init__(self, d, kernel, rng, dtype=np.float64):
        self.pw1 = Linear(d, 2 * d, rng, dtype=dtype)
        self.dw_w = xavier_uniform(rng, kernel, kernel, shape=(d, kernel), dtype=dtype)
        self.dw_b = zeros(d, dtype)
        self.norm = BatchNorm(d, dtype)
        self.pw2 = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x, mask=None):
        h = F.glu(self.pw1(x))
        if mask is not None:
            h = F.where_mask(h, np.asarray(mask)[..., None])
        h = F.conv1d_depthwise(h, self.dw_w, self.dw_b)
        h = F.swish(self.norm(h, mask))
        return self.pw2(h)


def conv_module(x, params, mask=None):
    x = _wrap(x)
    single = x.ndim == 2
    out = params(x.reshape(1, *x.shape) if single else x, mask)
    return out.reshape(*out.shape[1:]) if single else out


class ConformerBlock(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        d = cfg.d_model
        self.ff1_norm = LayerNorm(d, dtype)
        self.ff1 = FeedForward(d, cfg.ff_units, rng, "swish", cfg.dropout, dtype)
        self.mhsa_norm = LayerNorm(d, dtype)
        self.mhsa = MultiHeadAttention(d, cfg.attention_heads, rng, cfg.dropout, dtype)
        self.conv_norm = LayerNorm(d, dtype)
        self.conv = ConvModule(d, cfg.conv_kernel, rng, dtype)
        self.ff2_norm = LayerNorm(d, dtype)
        self.ff2 = FeedForward(d, cfg.ff_units, rng, "swish", cfg.dropout, dtype)
        self.final_norm = LayerNorm(d, dtype)
        self.dropout = cfg.dropout
        self.rng = rng

    def _drop(self, x):
        return F.dropout(x, self.dropout, self.rng, self.training)

    def __call__(self, x, mask=None):
        x = x + self._drop(self.ff1(self.ff1_norm(x))) * 0.5
        x = x + self._drop(self.mhsa(self.mhsa_norm(x), key_mask=mask))
        x = x + self._drop(self.conv(self.conv_norm(x), mask))
        x = x + self._drop(self.ff2(self.ff2_norm(x))) * 0.5
        return self.final_norm(x)


def conformer_block(x, params, mask=None):
    return params(_wrap(x), mask)


def subsampled_length(n):
    """Frames after two stride-2 convolutions (kernel 4, padding 1)."""
    return (np.asarray(n) // 2) // 2


def positional_encoding(t, d, dtype=np.float64):
    pos = np.arange(t)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((t, d), dtype=dtype)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


class Conv2dSubsampling(Module):
    """Two ReLU conv layers (kernel 4, stride 2, padding 1): time and frequency / 4."""

    MIN_FRAMES = 4

    def __init__(self, idim, d, channels, rng, dtype=np.float64):
        self.conv1_w = xavier_uniform(rng, 16, channels * 16, shape=(channels, 1, 4, 4), dtype=dtype)
        self.conv1_b = zeros(channels, dtype)
        self.conv2_w = xavier_uniform(
            rng, channels * 16, channels * 16, shape=(channels, channels, 4, 4), dtype=dtype
        )
        self.conv2_b = zeros(channels, dtype)
        self.out = Linear(channels * ((idim // 2) // 2), d, rng, dtype=dtype)
        self.idim = idim

    def __call__(self, feats, lengths):
        b, t, f = feats.shape
        if f != self.idim:
            raise ShapeError(f"features have dim {f}, model expects {self.idim}")
        if t < self.MIN_FRAMES or np.min(lengths) < self.MIN_FRAMES:
            raise InputTooShortError(
                f"need at least {self.MIN_FRAMES} frames for 4x subsampling, got {int(np.min(lengths))}"
            )
        l1 = np.asarray(lengths) // 2
        x = F.where_mask(feats, (np.arange(t)[None, :] < np.asarray(lengths)[:, None])[:, :, None])
        x = x.reshape(b, 1, t, f)
        x = F.relu(F.conv2d(x, self.conv1_w, self.conv1_b, stride=2, padding=1))
        x = F.where_mask(x, (np.arange(x.shape[2])[None, :] < l1[:, None])[:, None, :, None])
        x = F.relu(F.conv2d(x, self.conv2_w, self.conv2_b, stride=2, padding=1))
        _, c, t2, f2 = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(b, t2, c * f2)
        return self.out(x), l1 // 2


class ConformerEncoder(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        self.subsample = Conv2dSubsampling(cfg.input_dim, cfg.d_model, cfg.channels, rng, dtype)
        self.blocks = [ConformerBlock(cfg, rng, dtype) for _ in range(cfg.encoder_layers)]
        self.d_model = cfg.d_model
        self.dropout = cfg.dropout
        self.rng = rng

    def __call__(self, feats, lengths):
        x, lens = self.subsample(_wrap(feats), lengths)
        t = x.shape[1]
        x = x * np.sqrt(self.d_model) + positional_encoding(t, self.d_model, x.dtype)
        x = F.dropout(x, self.dropout, self.rng, self.training)
        mask = np.arange(t)[None, :] < lens[:, None]
        for blk in self.blocks:
            x = blk(x, mask)
        return x, lens


class DecoderLayer(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        d = cfg.d_model
        self.self_norm = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, cfg.attention_heads, rng, cfg.dropout, dtype)
        self.src_norm = LayerNorm(d, dtype)
        self.src_attn = MultiHeadAttention(d, cfg.attention_heads, rng, cfg.dropout, dtype)
        self.ff_norm = LayerNorm(d, dtype)
        self.ff = FeedForward(d, cfg.ff_units, rng, "relu", cfg.dropout, dtype)
        self.dropout = cfg.dropout
        self.rng = rng

    def _drop(self, x):
        return F.dropout(x, self.dropout, self.rng, self.training)

    def __call__(self, y, y_mask, memory, memory_mask):
        y = y + self._drop(self.self_attn(self.self_norm(y), key_mask=y_mask, causal=True))
        y = y + self._drop(self.src_attn(self.src_norm(y), memory, key_mask=memory_mask))
        return y + self._drop(self.ff(self.ff_norm(y)))


class TransformerDecoder(Module):
    def __init__(self, cfg, rng, dtype=np.float64):
        self.embed = xavier_uniform(rng, cfg.vocab_size, cfg.d_model, dtype=dtype)
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.decoder_layers)]
        self.final_norm = LayerNorm(cfg.d_model, dtype)
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng, dtype=dtype)
        self.d_model = cfg.d_model
        self.vocab_size = cfg.vocab_size
        self.dropout = cfg.dropout
        self.rng = rng

    def __call__(self, memory, memory_lens, ys_in, ys_lens=None):
        ys_in = np.asarray(ys_in, dtype=np.int64)
        if ys_in.ndim == 1:
            ys_in = ys_in[None]
        if ys_in.size and (ys_in.min() < 0 or ys_in.max() >= self.vocab_size):
            raise ContractError(f"token id outside vocabulary of {self.vocab_size}")
        b, length = ys_in.shape
        ys_lens = np.full(b, length) if ys_lens is None else np.asarray(ys_lens)
        y = F.embedding(ys_in, self.embed) * np.sqrt(self.d_model)
        y = y + positional_encoding(length, self.d_model, y.dtype)
        y = F.dropout(y, self.dropout, self.rng, self.training)
        y_mask = np.arange(length)[None, :] < ys_lens[:, None]
        t = memory.shape[1]
        m_mask = np.arange(t)[None, :] < np.asarray(memory_lens)[:, None]
        for layer in self.layers:
            y = layer(y, y_mask, memory, m_mask)
        return self.out(self.final_norm(y))
