"""Composable neural blocks: attention, transformer layers, LSTM cells,
positional encoding, optimizers, and truncated backprop-through-time.

Everything operates on :class:`langnav.autodiff.Tensor`; parameters are held
in a flat registry (name -> Tensor) so checkpointing and disjointness checks
stay trivial. Initialisation is uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from
a Philox stream, replayable bit-for-bit from the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_ones(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Registry(dict):
    """Flat parameter store. Keys are slash-separated paths."""

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self[name] = t
        return t

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


# ---------------------------------------------------------------------------
# Multi-head attention


@dataclass
class MultiHeadAttentionParams:
    """Per-head Q/K/V projections plus the concat-output projection."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor
    n_heads: int
    d_model: int
    d_k: int


def build_mha(reg: Registry, prefix: str, d_model: int, n_heads: int,
              rng: np.random.Generator) -> MultiHeadAttentionParams:
    if d_model % n_heads != 0:
        raise ConfigurationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d_k = d_model // n_heads
    w_q, w_k, w_v = [], [], []
    for h in range(n_heads):
        w_q.append(reg.add(f"{prefix}/wq{h}", init_uniform(rng, (d_model, d_k), d_model)))
        w_k.append(reg.add(f"{prefix}/wk{h}", init_uniform(rng, (d_model, d_k), d_model)))
        w_v.append(reg.add(f"{prefix}/wv{h}", init_uniform(rng, (d_model, d_k), d_model)))
    w_out = reg.add(f"{prefix}/wo", init_uniform(rng, (n_heads * d_k, d_model), n_heads * d_k))
    return MultiHeadAttentionParams(w_q, w_k, w_v, w_out, n_heads, d_model, d_k)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         params: MultiHeadAttentionParams) -> Tensor:
    """Scaled dot-product attention over heads: [Lq,d],[Lk,d],[Lk,d] -> [Lq,d]."""
    if q.shape[-1] != params.d_model:
        raise ConfigurationError(
            f"query dim {q.shape[-1]} != d_model {params.d_model}")
    inv = 1.0 / math.sqrt(params.d_k)
    heads = []
    for h in range(params.n_heads):
        qh = ad.matmul(q, params.w_q[h])
        kh = ad.matmul(k, params.w_k[h])
        vh = ad.matmul(v, params.w_v[h])
        scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), inv)
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    return ad.matmul(ad.concat(heads, axis=-1), params.w_out)


def attention_weights(q: Tensor, k: Tensor, params: MultiHeadAttentionParams) -> list[np.ndarray]:
    """Per-head softmax attention matrices (diagnostic / property tests)."""
    inv = 1.0 / math.sqrt(params.d_k)
    out = []
    with ad.no_grad():
        for h in range(params.n_heads):
            qh = ad.matmul(q, params.w_q[h])
            kh = ad.matmul(k, params.w_k[h])
            scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), inv)
            out.append(ad.softmax(scores, axis=-1).data)
    return out


# ---------------------------------------------------------------------------
# Transformer block (cross-attention encoder layer)


@dataclass
class TransformerBlockParams:
    attn: MultiHeadAttentionParams
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def build_transformer_block(reg: Registry, prefix: str, d_model: int, n_heads: int,
                            d_ff: int, rng: np.random.Generator) -> TransformerBlockParams:
    attn = build_mha(reg, f"{prefix}/attn", d_model, n_heads, rng)
    return TransformerBlockParams(
        attn=attn,
        w_ff1=reg.add(f"{prefix}/ff1_w", init_uniform(rng, (d_model, d_ff), d_model)),
        b_ff1=reg.add(f"{prefix}/ff1_b", init_zeros((d_ff,))),
        w_ff2=reg.add(f"{prefix}/ff2_w", init_uniform(rng, (d_ff, d_model), d_ff)),
        b_ff2=reg.add(f"{prefix}/ff2_b", init_zeros((d_model,))),
        ln1_gain=reg.add(f"{prefix}/ln1_g", init_ones((d_model,))),
        ln1_bias=reg.add(f"{prefix}/ln1_b", init_zeros((d_model,))),
        ln2_gain=reg.add(f"{prefix}/ln2_g", init_ones((d_model,))),
        ln2_bias=reg.add(f"{prefix}/ln2_b", init_zeros((d_model,))),
    )


def feed_forward(x: Tensor, p: TransformerBlockParams) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, p.w_ff1), p.b_ff1))
    return ad.add(ad.matmul(h, p.w_ff2), p.b_ff2)


def transformer_cross_attend(query_seq: Tensor, kv_grid: Tensor,
                             params: TransformerBlockParams) -> Tensor:
    """Cross-attend a query sequence [k,d] over a flattened feature grid [S,d].

    Residual + layer-norm wrap both the attention and feed-forward sublayers;
    the returned context [d] is the mean over the k query positions.
    """
    att = multi_head_attention(query_seq, kv_grid, kv_grid, params.attn)
    z = ad.layer_norm(ad.add(query_seq, att), params.ln1_gain, params.ln1_bias)
    z2 = ad.layer_norm(ad.add(z, feed_forward(z, params)), params.ln2_gain, params.ln2_bias)
    return ad.mean(z2, axis=0)


def positional_encoding(length: int, d: int) -> Tensor:
    """Sinusoidal position table [length,d]: sin on even cols, cos on odd."""
    if d % 2 != 0:
        raise ConfigurationError(f"positional encoding width must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


# ---------------------------------------------------------------------------
# LSTM


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    def detach(self) -> "LstmState":
        return LstmState(self.hidden.detach(), self.cell.detach())


@dataclass
class LstmParams:
    """Fused-gate weights; gate order along columns is [i, f, g, o]."""

    w_x: Tensor  # [d_in, 4*d_h]
    w_h: Tensor  # [d_h, 4*d_h]
    b: Tensor    # [4*d_h]
    d_h: int


def build_lstm(reg: Registry, prefix: str, d_in: int, d_h: int,
               rng: np.random.Generator) -> LstmParams:
    return LstmParams(
        w_x=reg.add(f"{prefix}/wx", init_uniform(rng, (d_in, 4 * d_h), d_in)),
        w_h=reg.add(f"{prefix}/wh", init_uniform(rng, (d_h, 4 * d_h), d_h)),
        b=reg.add(f"{prefix}/b", init_zeros((4 * d_h,))),
        d_h=d_h,
    )


def zero_lstm_state(d_h: int, batch: int = 1) -> LstmState:
    return LstmState(Tensor(np.zeros((batch, d_h))), Tensor(np.zeros((batch, d_h))))


def lstm_step_from_xw(xw: Tensor, state: LstmState, params: LstmParams) -> tuple[Tensor, LstmState]:
    """LSTM cell where the input projection x @ w_x (+optional hoisting) is
    already computed; used to batch the input-side matmul across time."""
    d = params.d_h
    gates = ad.add(ad.add(xw, ad.matmul(state.hidden, params.w_h)), params.b)
    i = ad.sigmoid(ad.narrow(gates, -1, 0, d))
    f = ad.sigmoid(ad.narrow(gates, -1, d, 2 * d))
    g = ad.tanh(ad.narrow(gates, -1, 2 * d, 3 * d))
    o = ad.sigmoid(ad.narrow(gates, -1, 3 * d, 4 * d))
    c = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, LstmState(h, c)


def lstm_step(x: Tensor, state: LstmState, params: LstmParams) -> tuple[Tensor, LstmState]:
    """Standard LSTM cell on a batch of inputs [B,d_in]; output is the new hidden."""
    return lstm_step_from_xw(ad.matmul(x, params.w_x), state, params)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_sequence(xw: Tensor, w_h: Tensor, truncation: int | None = None,
                  init: tuple[np.ndarray, np.ndarray] | None = None):
    """Unrolled LSTM over projected inputs: [T, 4*d_h] -> ([T, d_h], final state).

    ``xw`` already contains x_t @ w_x + b for every step (the input-side
    projection batches across time), so the loop only does the recurrent
    matmul. The whole unroll is one graph node whose backward runs classic
    BPTT and accumulates the recurrent weight gradient as a single matrix
    product; gradient flow across window boundaries is cut every
    ``truncation`` steps (TBPTT). ``init`` is a detached (h, c) carried from
    the previous window; the returned final state is detached numpy.
    Step-by-step equivalence is pinned by tests against lstm_step_from_xw.
    """
    T, four_d = xw.shape
    d = four_d // 4
    xwd = xw.data
    whd = w_h.data
    if init is not None:
        h = init[0].astype(xwd.dtype)
        c = init[1].astype(xwd.dtype)
    else:
        h = np.zeros(d, dtype=xwd.dtype)
        c = np.zeros(d, dtype=xwd.dtype)
    h0 = h.copy()
    gates = np.empty((T, 4 * d), dtype=xwd.dtype)
    cells = np.empty((T, d), dtype=xwd.dtype)
    tanhc = np.empty((T, d), dtype=xwd.dtype)
    hs = np.empty((T, d), dtype=xwd.dtype)
    c_prev = np.empty((T, d), dtype=xwd.dtype)
    for t in range(T):
        raw = xwd[t] + h @ whd
        i = _sig(raw[:d])
        f = _sig(raw[d:2 * d])
        g = np.tanh(raw[2 * d:3 * d])
        o = _sig(raw[3 * d:])
        gates[t, :d], gates[t, d:2 * d], gates[t, 2 * d:3 * d], gates[t, 3 * d:] = i, f, g, o
        c_prev[t] = c
        c = f * c + i * g
        tc = np.tanh(c)
        cells[t] = c
        tanhc[t] = tc
        h = o * tc
        hs[t] = h

    def backward(g_out):
        dgates = np.empty((T, 4 * d), dtype=g_out.dtype)
        dh_carry = np.zeros(d, dtype=g_out.dtype)
        dc_carry = np.zeros(d, dtype=g_out.dtype)
        for t in range(T - 1, -1, -1):
            i, f = gates[t, :d], gates[t, d:2 * d]
            gg, o = gates[t, 2 * d:3 * d], gates[t, 3 * d:]
            tc = tanhc[t]
            dh = g_out[t] + dh_carry
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            dgates[t, :d] = dc * gg * i * (1.0 - i)
            dgates[t, d:2 * d] = dc * c_prev[t] * f * (1.0 - f)
            dgates[t, 2 * d:3 * d] = dc * i * (1.0 - gg * gg)
            dgates[t, 3 * d:] = dh * tc * o * (1.0 - o)
            if truncation is not None and t % truncation == 0:
                dh_carry = np.zeros(d, dtype=g_out.dtype)
                dc_carry = np.zeros(d, dtype=g_out.dtype)
            else:
                dh_carry = dgates[t] @ whd.T
                dc_carry = dc * f
        h_prev = np.concatenate([h0[None, :], hs[:-1]], axis=0)
        return dgates, h_prev.T @ dgates

    out = ad._record(hs, (xw, w_h), backward)
    return out, (hs[-1].copy(), cells[-1].copy())


# ---------------------------------------------------------------------------
# Optimizers


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; state kept per parameter name."""

    def __init__(self, params: dict[str, Tensor], hyper: AdamHyper | None = None):
        self.params = params
        self.hyper = hyper or AdamHyper()
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        h = self.hyper
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            p.data -= h.lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Sgd:
    """Plain gradient descent."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Truncated backpropagation through time


def tbptt_windows(n_steps: int, truncation_length: int) -> list[tuple[int, int]]:
    """Non-overlapping [start, stop) windows covering a sequence."""
    if truncation_length < 1:
        raise ConfigurationError(f"truncation_length must be >= 1, got {truncation_length}")
    return [(s, min(s + truncation_length, n_steps)) for s in range(0, n_steps, truncation_length)]


def tbptt_train(step_fn: Callable, init_state, n_steps: int, truncation_length: int,
                params: dict[str, Tensor]) -> dict:
    """Accumulate parameter gradients over a sequence with truncated BPTT.

    ``step_fn(t, state) -> (loss_piece, new_state)`` builds one step of the
    graph; recurrent state is detached at window boundaries so gradients flow
    at most ``truncation_length`` steps back. Gradients from all windows are
    summed into ``param.grad``. Returns a trace dict with per-window losses.
    """
    state = init_state
    window_losses = []
    for start, stop in tbptt_windows(n_steps, truncation_length):
        with ad.Tape() as tape:
            pieces = []
            for t in range(start, stop):
                piece, state = step_fn(t, state)
                pieces.append(piece)
            total = pieces[0]
            for piece in pieces[1:]:
                total = ad.add(total, piece)
        tape.backward(total)
        window_losses.append(total.item())
        state = state.detach() if hasattr(state, "detach") else state
    return {"window_losses": window_losses, "n_windows": len(window_losses)}
