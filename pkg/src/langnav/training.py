"""Joint loss, teacher-forced training loop, and batched closed-loop rollout.

Training processes one episode at a time: the cross-modal encoder runs over
the whole episode as batched matrix products (the batch axis is time), the
two recurrences loop step by step with TBPTT detachment, and a single
backward pass per episode feeds one Adam update.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as M
from . import nn
from . import policies as P
from .autodiff import Tensor
from .errors import ConfigurationError
from .oracle import VOCAB, replay_low_actions
from .world import (HighAction, LowAction, Pose, SimParams, Trajectory,
                    check_collision, clamp_action, render_observation,
                    step_dynamics)


# ---------------------------------------------------------------------------
# Losses


def joint_loss(high_probs: Tensor, low_preds: Tensor, stop_probs: Tensor,
               targets: dict, lam: float) -> Tensor:
    """lam * NLL(high) + (1 - lam) * (sum MSE(vel) + sum BCE(stop)).

    Sums run over time steps; velocity targets are already normalized to the
    [-1, 1] head range. Probabilities are clamped before logs.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"loss weight lambda must be in [0,1], got {lam}")
    ce = nll_loss(high_probs, targets["high"])
    mse = mse_loss(low_preds, targets["vel"])
    bce = bce_loss(stop_probs, targets["stop"])
    return ad.add(ad.scale(ce, lam), ad.scale(ad.add(mse, bce), 1.0 - lam))


def nll_loss(probs: Tensor, class_ids: np.ndarray) -> Tensor:
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(class_ids)), np.asarray(class_ids, dtype=int)] = 1.0
    picked = ad.mul(ad.log(ad.clamp_min(probs, 1e-12)), Tensor(onehot))
    return ad.scale(ad.sum_(picked), -1.0)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(pred, Tensor(target))
    return ad.sum_(ad.mul(diff, diff))


def bce_loss(p: Tensor, y: np.ndarray) -> Tensor:
    yt = Tensor(np.asarray(y, dtype=float))
    one_minus_y = Tensor(1.0 - np.asarray(y, dtype=float))
    log_p = ad.log(ad.clamp_min(p, 1e-12))
    log_q = ad.log(ad.clamp_min(ad.add_const(ad.scale(p, -1.0), 1.0), 1e-12))
    return ad.scale(ad.add(ad.sum_(ad.mul(yt, log_p)), ad.sum_(ad.mul(one_minus_y, log_q))), -1.0)


# ---------------------------------------------------------------------------
# Episode tensors (teacher forcing inputs and targets)


def waypoint_progress(episode, poses) -> np.ndarray:
    """Fraction-of-path-completed target per control step (progress monitor)."""
    from .oracle import WAYPOINT_ADVANCE_M
    wps = episode.waypoints
    last = len(wps) - 1
    idx = 1 if last > 0 else 0
    out = np.zeros((len(episode.low_actions), 1))
    for t in range(len(episode.low_actions)):
        p = poses[t]
        while idx < last and math.hypot(wps[idx][0] - p.x, wps[idx][1] - p.y) < WAYPOINT_ADVANCE_M:
            idx += 1
        out[t, 0] = idx / max(1, last)
    return out


def prepare_episode(episode, world, sim: SimParams) -> dict:
    """Render the observation sequence and assemble training arrays."""
    poses, _ = replay_low_actions(world, episode.start, episode.low_actions, sim)
    T = len(episode.low_actions)
    rgb = np.zeros((T, sim.obs_size ** 2, P.N_CELL_CLASSES), dtype=np.float32)
    depth = np.zeros((T, sim.obs_size ** 2, 1), dtype=np.float32)
    pooled = np.zeros((T, P.N_CELL_CLASSES + 1), dtype=np.float32)
    for t in range(T):
        obs = render_observation(world, poses[t], sim)
        r, d, pool = P.obs_arrays(obs)
        rgb[t], depth[t], pooled[t] = r, d, pool
    y_high = np.asarray(episode.high_actions, dtype=int)
    v = np.array([a[0] for a in episode.low_actions])
    w = np.array([a[1] for a in episode.low_actions])
    y_vel = P.normalize_velocity(v, w, sim)
    y_stop = (y_high == int(HighAction.STOP)).astype(float)[:, None]
    prev_high = np.concatenate([[P.START_ACTION_ID], y_high[:-1]])
    prev_low = np.concatenate([np.zeros((1, 2)), y_vel[:-1]], axis=0)
    return {
        "T": T, "rgb": rgb, "depth": depth, "pooled": pooled,
        "tokens": episode.instruction_tokens,
        "y_high": y_high, "y_vel": y_vel, "y_stop": y_stop,
        "prev_high": prev_high, "prev_low": prev_low,
        "progress": waypoint_progress(episode, poses),
    }


class EpisodeCache:
    """Rendered-episode store shared across epochs (and paraphrases)."""

    def __init__(self, cache: M.WorldCache):
        self.world_cache = cache
        self._data: dict[str, dict] = {}

    def get(self, episode) -> dict:
        key = episode.id.rsplit("-p", 1)[0] + "/" + str(episode.world_ref["seed"])
        if key not in self._data:
            world = self.world_cache.world(episode.world_ref["seed"])
            self._data[key] = prepare_episode(episode, world, self.world_cache.sim)
        data = dict(self._data[key])
        data["tokens"] = episode.instruction_tokens  # paraphrases differ here
        return data


# ---------------------------------------------------------------------------
# Time-batched teacher-forced forward


def _tiled_queries(params: P.PolicyParams, enc, q2d: Tensor, T: int):
    q3 = ad.tile_batch(q2d, T)
    q_heads = [ad.tile_batch(t, T) for t in P.project_queries(params, enc, q2d)]
    return q3, q_heads


def _episode_contexts(params: P.PolicyParams, data: dict):
    """Cross-attended contexts for every time step: list of [T,d] tensors."""
    T = data["T"]
    rgb, depth = data["rgb"], data["depth"]
    if not params.uses_vision:
        rgb, depth = np.zeros_like(rgb), np.zeros_like(depth)
    q2d = ad.add(P.encode_instruction(params, data["tokens"]), params.pe)
    ctxs = []
    if params.fused_enc is not None:
        q3, qh = _tiled_queries(params, params.fused_enc, q2d, T)
        fused = np.concatenate([rgb, depth], axis=-1)
        ctxs.append(P.cross_context(params, params.fused_enc, Tensor(fused), q3, qh))
    elif params.uses_cross_attention:
        for enc, raw in ((params.rgb_enc, rgb), (params.depth_enc, depth)):
            q3, qh = _tiled_queries(params, enc, q2d, T)
            ctxs.append(P.cross_context(params, enc, Tensor(raw), q3, qh))
    return q2d, ctxs


def _stacked_sequence(l1: nn.LstmParams, x: Tensor, carry: dict, key: str,
                      second: nn.LstmParams | None = None):
    """Fused LSTM stack over a window; detached states carried via ``carry``."""
    xw = ad.add(ad.matmul(x, l1.w_x), l1.b)
    h, carry[key + "1"] = nn.lstm_sequence(xw, l1.w_h, init=carry.get(key + "1"))
    if second is not None:
        xw2 = ad.add(ad.matmul(h, second.w_x), second.b)
        h, carry[key + "2"] = nn.lstm_sequence(xw2, second.w_h, init=carry.get(key + "2"))
    return h


def window_loss(params: P.PolicyParams, data: dict, lam: float,
                s: int, e: int, carry: dict) -> Tensor:
    """Teacher-forced loss over control steps [s, e) of one episode."""
    cfg = params.cfg
    T = e - s
    win = {k: (v[s:e] if isinstance(v, np.ndarray) and len(v.shape) and v.shape[0] == data["T"]
               else v) for k, v in data.items() if k != "T"}
    pooled = win["pooled"] if params.uses_vision else np.zeros_like(win["pooled"])
    vhat = P.visual_summary(params, Tensor(pooled))
    q2d, ctxs = _episode_contexts(params, {**win, "T": T})
    targets = {"high": win["y_high"], "vel": win["y_vel"], "stop": win["y_stop"]}

    if params.is_hierarchical:
        prev_emb = ad.embed_lookup(params.act_embed, win["prev_high"])
        x_high = ad.concat(ctxs + [vhat, prev_emb], axis=-1)
        h_high = _stacked_sequence(params.high_lstm, x_high, carry, "high")
        probs = P.action_probs(params, h_high)
        sub_emb = ad.embed_lookup(params.sub_embed, win["y_high"])
        x_low = ad.concat([vhat, sub_emb], axis=-1)
        h_low = _stacked_sequence(params.low_lstm1, x_low, carry, "low",
                                  second=params.low_lstm2)
        vel, stop = P.low_heads(params, h_low, Tensor(win["prev_low"]))
        return joint_loss(probs, vel, stop, targets, lam)

    prev_low = Tensor(win["prev_low"])
    if cfg.variant in ("cma", "hcm_flattened"):
        x = ad.concat(ctxs + [vhat, prev_low], axis=-1)
    else:  # seq2seq, pm
        instr_mean = ad.mean(q2d, axis=0)
        instr_tiled = ad.tile_batch(instr_mean, T)
        x = ad.concat([vhat, instr_tiled, prev_low], axis=-1)
    h = _stacked_sequence(params.flat_lstm1, x, carry, "flat", second=params.flat_lstm2)
    vel, stop = P.flat_heads(params, h)
    base = ad.add(mse_loss(vel, win["y_vel"]), bce_loss(stop, win["y_stop"]))
    if cfg.variant == "hcm_flattened":
        aux = ad.softmax(ad.add(ad.matmul(h, params.w_aux), params.b_aux), axis=-1)
        return joint_loss(aux, vel, stop, targets, lam)
    if cfg.variant == "pm":
        prog = ad.sigmoid(ad.add(ad.matmul(h, params.w_prog), params.b_prog))
        aux = mse_loss(prog, win["progress"])
        return ad.add(base, ad.scale(aux, 0.5 * (1.0 - lam)))
    return base


def episode_loss(params: P.PolicyParams, data: dict, lam: float, tbptt: int) -> Tensor:
    """Whole-episode teacher-forced loss: the sum of TBPTT window losses.

    Recurrent state crosses window boundaries as detached values, so the
    gradient of this sum equals the accumulated per-window TBPTT gradient.
    """
    carry: dict = {}
    total = None
    for s, e in nn.tbptt_windows(data["T"], tbptt):
        piece = window_loss(params, data, lam, s, e, carry)
        total = piece if total is None else ad.add(total, piece)
    return total


# ---------------------------------------------------------------------------
# Batched closed-loop inference


class BatchedAgent:
    """Lockstep inference over B environments under no_grad."""

    def __init__(self, params: P.PolicyParams, sim: SimParams | None = None):
        self.p = params
        self.sim = sim or SimParams()

    def begin(self, tokens_list: list) -> None:
        p = self.p
        B = len(tokens_list)
        self.B = B
        with ad.no_grad():
            qs = [ad.add(P.encode_instruction(p, toks), p.pe) for toks in tokens_list]
            q3 = Tensor(np.stack([q.data for q in qs]))
            self.enc_cache = []
            encs = ([p.fused_enc] if p.fused_enc is not None
                    else ([p.rgb_enc, p.depth_enc] if p.uses_cross_attention else []))
            k, d = p.cfg.n_tokens, p.cfg.d_model
            for enc in encs:
                qh = [ad.reshape(ad.matmul(ad.reshape(q3, (B * k, d)), w), (B, k, enc.block.attn.d_k))
                      for w in enc.block.attn.w_q]
                self.enc_cache.append((enc, q3, qh))
            if not p.uses_cross_attention and not p.fused_enc:
                self.instr_mean = Tensor(np.stack([q.data.mean(axis=0) for q in qs]))
        dh = p.cfg.d_hidden
        self.high_state = nn.zero_lstm_state(dh, B) if p.is_hierarchical else None
        self.s1 = nn.zero_lstm_state(dh, B)
        self.s2 = nn.zero_lstm_state(dh, B)
        self.prev_high = np.full(B, P.START_ACTION_ID, dtype=int)
        self.prev_low = np.zeros((B, 2))

    def act_batch(self, rgb: np.ndarray, depth: np.ndarray, pooled: np.ndarray):
        """rgb [B,S,C], depth [B,S,1], pooled [B,C+1] -> actions and stop flags."""
        p = self.p
        sim = self.sim
        with ad.no_grad():
            if not p.uses_vision:
                rgb = np.zeros_like(rgb)
                depth = np.zeros_like(depth)
                pooled = np.zeros_like(pooled)
            vhat = P.visual_summary(p, Tensor(pooled))
            ctxs = []
            for i, (enc, q3, qh) in enumerate(self.enc_cache):
                raw = (np.concatenate([rgb, depth], axis=-1) if p.fused_enc is not None
                       else (rgb if i == 0 else depth))
                ctxs.append(P.cross_context(p, enc, Tensor(raw), q3, qh))
            if p.is_hierarchical:
                prev_emb = ad.embed_lookup(p.act_embed, self.prev_high)
                x = ad.concat(ctxs + [vhat, prev_emb], axis=-1)
                h, self.high_state = nn.lstm_step(x, self.high_state, p.high_lstm)
                probs = P.action_probs(p, h).data
                sub = probs.argmax(axis=-1)
                sub_emb = ad.embed_lookup(p.sub_embed, sub)
                x_low = ad.concat([vhat, sub_emb], axis=-1)
                h1, self.s1 = nn.lstm_step(x_low, self.s1, p.low_lstm1)
                h2, self.s2 = nn.lstm_step(h1, self.s2, p.low_lstm2)
                vel, stop = P.low_heads(p, h2, Tensor(self.prev_low))
                vel_n, stop_p = vel.data, stop.data[:, 0]
                declared = (sub == int(HighAction.STOP)) & (stop_p > 0.5)
                self.prev_high = sub
            else:
                if p.uses_cross_attention:
                    x = ad.concat(ctxs + [vhat, Tensor(self.prev_low)], axis=-1)
                else:
                    x = ad.concat([vhat, self.instr_mean, Tensor(self.prev_low)], axis=-1)
                h1, self.s1 = nn.lstm_step(x, self.s1, p.flat_lstm1)
                h2, self.s2 = nn.lstm_step(h1, self.s2, p.flat_lstm2)
                vel, stop = P.flat_heads(p, h2)
                vel_n, stop_p = vel.data, stop.data[:, 0]
                declared = stop_p > 0.5
            self.prev_low = vel_n.astype(np.float64)
        actions = P.rescale_velocity(vel_n.astype(np.float64), sim)
        return actions, stop_p.astype(np.float64), declared


class AgentPolicy:
    """Single-environment adapter honouring the run_episode protocol."""

    def __init__(self, params: P.PolicyParams, sim: SimParams | None = None):
        self.agent = BatchedAgent(params, sim)

    def begin_episode(self, tokens):
        self.agent.begin([list(tokens)])

    def act(self, obs):
        rgb, depth, pooled = P.obs_arrays(obs)
        actions, stop_p, declared = self.agent.act_batch(
            rgb[None], depth[None], pooled[None])
        return LowAction(float(actions[0, 0]), float(actions[0, 1])), bool(declared[0])


def run_episodes_batched(params: P.PolicyParams, episodes, cache: M.WorldCache,
                         max_steps: int | None = None) -> list[Trajectory]:
    """Closed-loop rollouts for many episodes in lockstep.

    Matches run_episode semantics per environment: clamp, collision slide,
    declared/kinematic stop, step budget.
    """
    sim = cache.sim
    budget = max_steps if max_steps is not None else sim.max_steps
    agent = BatchedAgent(params, sim)
    agent.begin([ep.instruction_tokens for ep in episodes])
    B = len(episodes)
    worlds = [cache.world(ep.world_ref["seed"]) for ep in episodes]
    poses = [ep.start for ep in episodes]
    trajs = [Trajectory(poses=[ep.start], actions=[]) for ep in episodes]
    alive = np.ones(B, dtype=bool)
    S = sim.obs_size ** 2
    rgb = np.zeros((B, S, P.N_CELL_CLASSES), dtype=np.float64)
    depth = np.zeros((B, S, 1), dtype=np.float64)
    pooled = np.zeros((B, P.N_CELL_CLASSES + 1), dtype=np.float64)
    for _ in range(budget):
        if not alive.any():
            break
        for i in range(B):
            if alive[i]:
                obs = render_observation(worlds[i], poses[i], sim)
                rgb[i], depth[i], pooled[i] = P.obs_arrays(obs)
        actions, stop_p, declared = agent.act_batch(rgb, depth, pooled)
        for i in range(B):
            if not alive[i]:
                continue
            if declared[i]:
                trajs[i].declared_stop = True
                alive[i] = False
                continue
            a = clamp_action(LowAction(float(actions[i, 0]), float(actions[i, 1])), sim)
            cand = step_dynamics(poses[i], a, sim.dt)
            if check_collision(worlds[i], cand, sim.r_robot):
                trajs[i].collisions += 1
                cand = poses[i]
            poses[i] = cand
            trajs[i].poses.append(cand)
            trajs[i].actions.append(a)
            if len(trajs[i].actions) >= sim.n_stop and all(
                    abs(x.v) < sim.v_stop and abs(x.omega) < sim.omega_stop
                    for x in trajs[i].actions[-sim.n_stop:]):
                trajs[i].kinematic_stop = True
                alive[i] = False
    return trajs


def evaluate_params(params: P.PolicyParams, episodes, cache: M.WorldCache,
                    max_steps: int | None = None) -> M.MetricsReport:
    trajs = run_episodes_batched(params, episodes, cache, max_steps)
    rows = [M.score_trajectory(t, ep, cache.world(ep.world_ref["seed"]), cache)
            for t, ep in zip(trajs, episodes)]
    return M.MetricsReport.from_rows(rows)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    variant: str = "hcm"
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-3
    lam: float = 0.5
    tbptt: int = 100
    dtype: str = "float32"
    early_stop_patience: int = 3
    early_stop_eval_n: int = 18
    eval_max_steps: int = 700


def restore_params(params: P.PolicyParams, snapshot: dict[str, np.ndarray]) -> None:
    for name, arr in snapshot.items():
        params.registry[name].data = arr.copy()


def save_checkpoint(path: str, params: P.PolicyParams, meta: dict) -> None:
    arrays = {name: t.data for name, t in params.registry.items()}
    meta = dict(meta)
    meta["model_config"] = asdict(params.cfg)
    ad.save_tensors(path, arrays, meta=meta)


def load_checkpoint(path: str) -> tuple[P.PolicyParams, dict]:
    arrays, meta = ad.load_tensors(path)
    cfg = P.ModelConfig(**meta["model_config"])
    params = P.build_params(cfg, seed=0)
    for name, t in params.registry.items():
        t.data = arrays[name].astype(ad.get_dtype())
    return params, meta


def train_variant(variant: str, splits: dict, cache: M.WorldCache,
                  tcfg: TrainConfig, mcfg: P.ModelConfig | None = None,
                  out_dir: str | None = None, log=print) -> dict:
    """Teacher-forced imitation with per-epoch validation and early stopping.

    Returns a record with the training curve and best validation metrics;
    writes checkpoint.bin + run.json when ``out_dir`` is given.
    """
    prev_dtype = ad.get_dtype().name
    ad.set_dtype(tcfg.dtype)
    try:
        mcfg = mcfg or P.ModelConfig()
        mcfg.variant = variant
        mcfg.validate()
        params = P.build_params(mcfg, tcfg.seed)
        opt = nn.Adam(params.registry, nn.AdamHyper(lr=tcfg.lr))
        ep_cache = EpisodeCache(cache)
        train_eps = splits["train"]
        val_eps = splits["val_seen"][:tcfg.early_stop_eval_n]
        curve = []
        best = {"spl": -1.0, "epoch": -1, "snapshot": None}
        t_start = time.time()
        for epoch in range(tcfg.epochs):
            order = ad.make_rng(0xE90C, tcfg.seed, epoch).permutation(len(train_eps))
            total_loss = 0.0
            total_steps = 0
            for j in order:
                ep = train_eps[int(j)]
                data = ep_cache.get(ep)
                carry: dict = {}
                for s, e in nn.tbptt_windows(data["T"], tcfg.tbptt):
                    opt.zero_grad()
                    with ad.Tape() as tape:
                        loss = window_loss(params, data, tcfg.lam, s, e, carry)
                    if not np.isfinite(loss.data):
                        raise FloatingPointError(
                            f"non-finite loss at epoch {epoch} episode {ep.id} "
                            f"window [{s},{e})")
                    tape.backward(loss)
                    opt.step()
                    total_loss += loss.item()
                total_steps += data["T"]
            report = evaluate_params(params, val_eps, cache, tcfg.eval_max_steps)
            curve.append({"epoch": epoch, "loss": total_loss / max(1, total_steps),
                          "val_seen_sr": report.sr, "val_seen_spl": report.spl})
            log(f"[{variant} seed {tcfg.seed}] epoch {epoch}: "
                f"loss/step {curve[-1]['loss']:.4f} val SR {report.sr:.2f} "
                f"SPL {report.spl:.2f} ({time.time() - t_start:.0f}s)")
            if report.spl > best["spl"] + 1e-9:
                best = {"spl": report.spl, "epoch": epoch,
                        "snapshot": {k: v.data.copy() for k, v in params.registry.items()}}
            elif epoch - best["epoch"] >= tcfg.early_stop_patience:
                break
        if best["snapshot"] is not None:
            restore_params(params, best["snapshot"])
        record = {
            "variant": variant,
            "seed": tcfg.seed,
            "curve": curve,
            "best_epoch": best["epoch"],
            "best_val_seen_spl": best["spl"],
            "train_seconds": time.time() - t_start,
            "vocab_hash": __import__("hashlib").sha256(
                json.dumps(VOCAB, sort_keys=True).encode()).hexdigest()[:16],
        }
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            ckpt = os.path.join(out_dir, "checkpoint.bin")
            save_checkpoint(ckpt, params, {
                "variant": variant, "train_config": asdict(tcfg),
                "vocab_hash": record["vocab_hash"], "curve": curve,
            })
            with open(os.path.join(out_dir, "run.json"), "w") as fh:
                json.dump(record, fh, indent=2, sort_keys=True)
                fh.write("\n")
            record["checkpoint"] = ckpt
        record["params"] = params
        return record
    finally:
        ad.set_dtype(prev_dtype)
