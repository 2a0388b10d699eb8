"""Navigation policies: the hierarchical cross-modal agent, its ablation
variants, and the flat baselines.

One parameter set + two forward paths share the same math:

* a time-batched teacher-forced path used for training (the whole episode's
  cross-attention runs as large batched matmuls, only the recurrence loops),
* a step-batched closed-loop path used for evaluation (many environments in
  lockstep under ``no_grad``).

The public single-step operations (``high_policy_step``/``low_policy_step``)
wrap the batched code with batch size 1 and are the reference the fast paths
are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigurationError, InputError
from .oracle import VOCAB
from .world import (HighAction, LowAction, N_CELL_CLASSES, Observation,
                    SimParams)

VARIANTS = ("hcm", "seq2seq", "pm", "cma", "hcm_no_vision",
            "hcm_early_fusion", "hcm_flattened")

START_ACTION_ID = len(HighAction)  # embedding row for "no previous action"


@dataclass
class ModelConfig:
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    d_hidden: int = 256
    n_tokens: int = 24
    d_act_embed: int = 16
    vocab_size: int = len(VOCAB)
    rgb_channels: int = N_CELL_CLASSES
    depth_channels: int = 1
    grid_cells: int = 49
    n_high_actions: int = len(HighAction)
    variant: str = "hcm"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; "
                                     f"expected one of {VARIANTS}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class Encoder:
    """One modality stream: channel lift + cross-attention transformer block."""

    lift: Tensor
    block: nn.TransformerBlockParams


@dataclass
class PolicyParams:
    cfg: ModelConfig
    registry: nn.Registry
    pe: Tensor
    embed: Tensor
    w_vis: Tensor
    b_vis: Tensor
    rgb_enc: Encoder | None = None
    depth_enc: Encoder | None = None
    fused_enc: Encoder | None = None
    act_embed: Tensor | None = None
    high_lstm: nn.LstmParams | None = None
    w_act: Tensor | None = None
    b_act: Tensor | None = None
    sub_embed: Tensor | None = None
    low_lstm1: nn.LstmParams | None = None
    low_lstm2: nn.LstmParams | None = None
    w_vel: Tensor | None = None
    b_vel: Tensor | None = None
    w_stop: Tensor | None = None
    b_stop: Tensor | None = None
    flat_lstm1: nn.LstmParams | None = None
    flat_lstm2: nn.LstmParams | None = None
    w_aux: Tensor | None = None
    b_aux: Tensor | None = None
    w_prog: Tensor | None = None
    b_prog: Tensor | None = None

    @property
    def is_hierarchical(self) -> bool:
        return self.cfg.variant in ("hcm", "hcm_no_vision", "hcm_early_fusion")

    @property
    def uses_vision(self) -> bool:
        return self.cfg.variant != "hcm_no_vision"

    @property
    def uses_cross_attention(self) -> bool:
        return self.cfg.variant in ("hcm", "hcm_no_vision", "cma", "hcm_flattened")


def _build_encoder(reg, prefix, channels, cfg, rng) -> Encoder:
    lift = reg.add(f"{prefix}/lift", nn.init_uniform(rng, (channels, cfg.d_model), channels))
    block = nn.build_transformer_block(reg, f"{prefix}/blk", cfg.d_model, cfg.n_heads,
                                       cfg.d_ff, rng)
    return Encoder(lift, block)


def build_params(cfg: ModelConfig, seed: int) -> PolicyParams:
    """Seed-reproducible parameter construction for any variant."""
    cfg.validate()
    rng = ad.make_rng(0x9A12, seed)
    reg = nn.Registry()
    d = cfg.d_model
    p = PolicyParams(
        cfg=cfg,
        registry=reg,
        pe=nn.positional_encoding(cfg.n_tokens, d),
        embed=reg.add("embed/token", nn.init_uniform(rng, (cfg.vocab_size, d), d)),
        w_vis=reg.add("vis/w", nn.init_uniform(
            rng, (cfg.rgb_channels + cfg.depth_channels, d),
            cfg.rgb_channels + cfg.depth_channels)),
        b_vis=reg.add("vis/b", nn.init_zeros((d,))),
    )
    variant = cfg.variant
    n_act = cfg.n_high_actions

    if variant in ("hcm", "hcm_no_vision", "cma", "hcm_flattened"):
        p.rgb_enc = _build_encoder(reg, "rgb", cfg.rgb_channels, cfg, rng)
        p.depth_enc = _build_encoder(reg, "depth", cfg.depth_channels, cfg, rng)
    elif variant == "hcm_early_fusion":
        p.fused_enc = _build_encoder(reg, "fused",
                                     cfg.rgb_channels + cfg.depth_channels, cfg, rng)

    if p.is_hierarchical:
        n_ctx = 1 if variant == "hcm_early_fusion" else 2
        d_high_in = (n_ctx + 1) * d + cfg.d_act_embed
        p.act_embed = reg.add("high/act_embed",
                              nn.init_uniform(rng, (n_act + 1, cfg.d_act_embed), n_act + 1))
        p.high_lstm = nn.build_lstm(reg, "high/lstm", d_high_in, cfg.d_hidden, rng)
        p.w_act = reg.add("high/act_w", nn.init_uniform(rng, (cfg.d_hidden, n_act), cfg.d_hidden))
        p.b_act = reg.add("high/act_b", nn.init_zeros((n_act,)))
        p.sub_embed = reg.add("low/sub_embed",
                              nn.init_uniform(rng, (n_act + 1, cfg.d_act_embed), n_act + 1))
        p.low_lstm1 = nn.build_lstm(reg, "low/lstm1", d + cfg.d_act_embed, cfg.d_hidden, rng)
        p.low_lstm2 = nn.build_lstm(reg, "low/lstm2", cfg.d_hidden, cfg.d_hidden, rng)
        p.w_vel = reg.add("low/vel_w", nn.init_uniform(rng, (cfg.d_hidden + 2, 2), cfg.d_hidden))
        p.b_vel = reg.add("low/vel_b", nn.init_zeros((2,)))
        p.w_stop = reg.add("low/stop_w", nn.init_uniform(rng, (cfg.d_hidden + 2, 1), cfg.d_hidden))
        p.b_stop = reg.add("low/stop_b", nn.init_zeros((1,)))
    else:
        if variant in ("cma", "hcm_flattened"):
            d_flat_in = 3 * d + 2
        else:  # seq2seq, pm: pooled visual features + instruction summary
            d_flat_in = 2 * d + 2
        p.flat_lstm1 = nn.build_lstm(reg, "flat/lstm1", d_flat_in, cfg.d_hidden, rng)
        p.flat_lstm2 = nn.build_lstm(reg, "flat/lstm2", cfg.d_hidden, cfg.d_hidden, rng)
        p.w_vel = reg.add("flat/vel_w", nn.init_uniform(rng, (cfg.d_hidden, 2), cfg.d_hidden))
        p.b_vel = reg.add("flat/vel_b", nn.init_zeros((2,)))
        p.w_stop = reg.add("flat/stop_w", nn.init_uniform(rng, (cfg.d_hidden, 1), cfg.d_hidden))
        p.b_stop = reg.add("flat/stop_b", nn.init_zeros((1,)))
        if variant == "hcm_flattened":
            p.w_aux = reg.add("flat/aux_w", nn.init_uniform(rng, (cfg.d_hidden, n_act), cfg.d_hidden))
            p.b_aux = reg.add("flat/aux_b", nn.init_zeros((n_act,)))
        if variant == "pm":
            p.w_prog = reg.add("flat/prog_w", nn.init_uniform(rng, (cfg.d_hidden, 1), cfg.d_hidden))
            p.b_prog = reg.add("flat/prog_b", nn.init_zeros((1,)))
    return p


_ID_TO_WORD = {i: w for w, i in VOCAB.items()}


def pad_tokens(tokens, n_tokens: int) -> list[int]:
    ids = list(tokens)[:n_tokens]
    return ids + [0] * (n_tokens - len(ids))


def encode_instruction(params: PolicyParams, tokens) -> Tensor:
    """Embedding lookup over a fixed-width (pad/truncate) token window."""
    for t in tokens:
        if not 0 <= int(t) < params.cfg.vocab_size:
            raise InputError(f"token id {t} ({_ID_TO_WORD.get(int(t), '?')}) "
                             f"outside vocabulary of {params.cfg.vocab_size}")
    return ad.embed_lookup(params.embed, pad_tokens(tokens, params.cfg.n_tokens))


# ---------------------------------------------------------------------------
# Batched forward pieces (leading axis = time for training, envs for eval)


def project_queries(params: PolicyParams, enc: Encoder, q2d: Tensor) -> list[Tensor]:
    """Per-head query projections of a single [k,d] query sequence."""
    return [ad.matmul(q2d, w) for w in enc.block.attn.w_q]


def cross_context(params: PolicyParams, enc: Encoder, kv_raw: Tensor,
                  q_seq: Tensor, q_heads: list[Tensor]) -> Tensor:
    """Cross-attended context per batch row: [B,S,C],[B,k,d] -> [B,d].

    Keys/values are lifted through the composed (channel-lift @ head)
    projection, algebraically identical to lifting first.
    """
    cfg = params.cfg
    attn = enc.block.attn
    B, S, C = kv_raw.shape
    k = q_seq.shape[1]
    d = cfg.d_model
    inv = 1.0 / math.sqrt(attn.d_k)
    kv2 = ad.reshape(kv_raw, (B * S, C))
    heads = []
    for h in range(attn.n_heads):
        kh = ad.reshape(ad.matmul(kv2, ad.matmul(enc.lift, attn.w_k[h])), (B, S, attn.d_k))
        vh = ad.reshape(ad.matmul(kv2, ad.matmul(enc.lift, attn.w_v[h])), (B, S, attn.d_k))
        scores = ad.scale(ad.bmm(q_heads[h], ad.transpose_last(kh)), inv)
        heads.append(ad.bmm(ad.softmax(scores, axis=-1), vh))
    cat = ad.concat(heads, axis=-1)
    att_out = ad.reshape(ad.matmul(ad.reshape(cat, (B * k, d)), attn.w_out), (B, k, d))
    blk = enc.block
    z = ad.layer_norm(ad.add(q_seq, att_out), blk.ln1_gain, blk.ln1_bias)
    z2 = ad.reshape(z, (B * k, d))
    ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(z2, blk.w_ff1), blk.b_ff1)),
                          blk.w_ff2), blk.b_ff2)
    z3 = ad.layer_norm(ad.add(z2, ff), blk.ln2_gain, blk.ln2_bias)
    return ad.mean(ad.reshape(z3, (B, k, d)), axis=1)


def visual_summary(params: PolicyParams, pooled: Tensor) -> Tensor:
    """[B, C_r + C_d] mean-pooled channels -> [B,d] projected summary."""
    return ad.add(ad.matmul(pooled, params.w_vis), params.b_vis)


def action_probs(params: PolicyParams, h: Tensor) -> Tensor:
    return ad.softmax(ad.add(ad.matmul(h, params.w_act), params.b_act), axis=-1)


def low_heads(params: PolicyParams, h: Tensor, prev_low: Tensor) -> tuple[Tensor, Tensor]:
    hp = ad.concat([h, prev_low], axis=-1)
    vel = ad.tanh(ad.add(ad.matmul(hp, params.w_vel), params.b_vel))
    stop = ad.sigmoid(ad.add(ad.matmul(hp, params.w_stop), params.b_stop))
    return vel, stop


def flat_heads(params: PolicyParams, h: Tensor) -> tuple[Tensor, Tensor]:
    vel = ad.tanh(ad.add(ad.matmul(h, params.w_vel), params.b_vel))
    stop = ad.sigmoid(ad.add(ad.matmul(h, params.w_stop), params.b_stop))
    return vel, stop


# ---------------------------------------------------------------------------
# Observation tensors


def obs_arrays(obs: Observation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten one observation to (rgb [S,C_r], depth [S,1], pooled [C_r+1])."""
    rgb = obs.rgb.reshape(-1, obs.rgb.shape[-1])
    depth = obs.depth.reshape(-1, 1)
    pooled = np.concatenate([rgb.mean(axis=0), depth.mean(axis=0)])
    return rgb, depth, pooled


def rescale_velocity(vel_norm: np.ndarray, sim: SimParams) -> np.ndarray:
    """[-1,1]^2 head outputs -> (v in [0, v_max], omega in [-w_max, w_max])."""
    v = sim.v_max * (vel_norm[..., 0] + 1.0) / 2.0
    w = sim.omega_max * vel_norm[..., 1]
    return np.stack([v, w], axis=-1)


def normalize_velocity(v: np.ndarray, w: np.ndarray, sim: SimParams) -> np.ndarray:
    return np.stack([2.0 * v / sim.v_max - 1.0, w / sim.omega_max], axis=-1)


# ---------------------------------------------------------------------------
# Spec-level single-step operations (batch of one)


@dataclass
class HighPolicyState:
    lstm: nn.LstmState
    prev_action: int = START_ACTION_ID


@dataclass
class LowPolicyState:
    lstm1: nn.LstmState
    lstm2: nn.LstmState
    prev_low: np.ndarray = field(default_factory=lambda: np.zeros(2))


def init_high_state(params: PolicyParams, batch: int = 1) -> HighPolicyState:
    return HighPolicyState(nn.zero_lstm_state(params.cfg.d_hidden, batch))


def init_low_state(params: PolicyParams, batch: int = 1) -> LowPolicyState:
    return LowPolicyState(nn.zero_lstm_state(params.cfg.d_hidden, batch),
                          nn.zero_lstm_state(params.cfg.d_hidden, batch),
                          np.zeros((batch, 2)))


def _single_obs_context(params: PolicyParams, enc: Encoder, raw: np.ndarray,
                        q_seq3: Tensor, q_heads3: list[Tensor]) -> Tensor:
    kv = Tensor(raw[None, :, :])
    return cross_context(params, enc, kv, q_seq3, q_heads3)


def high_policy_step(obs: Observation, instr: Tensor, prev_a: int,
                     state: HighPolicyState, params: PolicyParams):
    """One decoder step: cross-modal contexts + recurrence -> action probs."""
    cfg = params.cfg
    rgb, depth, pooled = obs_arrays(obs)
    if not params.uses_vision:
        rgb, depth, pooled = np.zeros_like(rgb), np.zeros_like(depth), np.zeros_like(pooled)
    q2d = ad.add(instr, params.pe)
    q3 = ad.reshape(q2d, (1,) + q2d.shape)
    ctxs = []
    if params.fused_enc is not None:
        fused = np.concatenate([rgb, depth], axis=-1)
        qh = [ad.reshape(t, (1,) + t.shape) for t in project_queries(params, params.fused_enc, q2d)]
        ctxs.append(_single_obs_context(params, params.fused_enc, fused, q3, qh))
    else:
        for enc, raw in ((params.rgb_enc, rgb), (params.depth_enc, depth)):
            qh = [ad.reshape(t, (1,) + t.shape) for t in project_queries(params, enc, q2d)]
            ctxs.append(_single_obs_context(params, enc, raw, q3, qh))
    vhat = visual_summary(params, Tensor(pooled[None, :]))
    emb = ad.embed_lookup(params.act_embed, [int(prev_a)])
    x = ad.concat(ctxs + [vhat, emb], axis=-1)
    h, lstm = nn.lstm_step(x, state.lstm, params.high_lstm)
    probs = action_probs(params, h)
    return ad.reshape(probs, (params.cfg.n_high_actions,)), HighPolicyState(lstm, int(prev_a))


def low_policy_step(obs: Observation, subgoal: int, state: LowPolicyState,
                    params: PolicyParams):
    """One imitation step: (v_norm, omega_norm, p_stop) from sub-goal + vision."""
    _, _, pooled = obs_arrays(obs)
    if not params.uses_vision:
        pooled = np.zeros_like(pooled)
    vhat = visual_summary(params, Tensor(pooled[None, :]))
    emb = ad.embed_lookup(params.sub_embed, [int(subgoal)])
    x = ad.concat([vhat, emb], axis=-1)
    h1, s1 = nn.lstm_step(x, state.lstm1, params.low_lstm1)
    h2, s2 = nn.lstm_step(h1, state.lstm2, params.low_lstm2)
    vel, stop = low_heads(params, h2, Tensor(np.asarray(state.prev_low).reshape(1, 2)))
    new_state = LowPolicyState(s1, s2, vel.data[0].astype(np.float64))
    return ad.reshape(vel, (2,)), ad.reshape(stop, (1,)), new_state
