"""Tests for instruction encoding, policy steps, losses, variants, paths."""

import math

import numpy as np
import pytest

from langnav import autodiff as ad
from langnav import nn
from langnav import policies as P
from langnav import training as T
from langnav.autodiff import Tensor
from langnav.errors import ConfigurationError, InputError
from langnav.world import HighAction, Observation

SMALL = dict(d_model=16, n_heads=2, d_ff=24, d_hidden=12, d_act_embed=6, n_tokens=8)


def small_cfg(variant="hcm"):
    return P.ModelConfig(variant=variant, **SMALL)


def small_params(variant="hcm", seed=0):
    return P.build_params(small_cfg(variant), seed)


def rand_obs(seed=0):
    rng = ad.make_rng(0x0B5, seed)
    rgb = np.zeros((7, 7, P.N_CELL_CLASSES))
    idx = rng.integers(0, P.N_CELL_CLASSES, size=(7, 7))
    for i in range(7):
        for j in range(7):
            rgb[i, j, idx[i, j]] = 1.0
    depth = rng.uniform(0, 1, size=(7, 7, 1))
    return Observation(rgb=rgb, depth=depth)


def synth_episode_data(T_steps=6, seed=0, n_tokens=8):
    rng = ad.make_rng(0xDA7A, seed)
    S = 49
    rgb = rng.uniform(0, 1, size=(T_steps, S, P.N_CELL_CLASSES)).astype(np.float64)
    depth = rng.uniform(0, 1, size=(T_steps, S, 1))
    pooled = np.concatenate([rgb.mean(axis=1), depth.mean(axis=1)], axis=1)
    y_high = rng.integers(0, 4, size=T_steps)
    y_vel = rng.uniform(-1, 1, size=(T_steps, 2))
    y_stop = (rng.uniform(size=(T_steps, 1)) > 0.8).astype(float)
    return {
        "T": T_steps, "rgb": rgb, "depth": depth, "pooled": pooled,
        "tokens": list(rng.integers(1, 30, size=5)),
        "y_high": y_high, "y_vel": y_vel, "y_stop": y_stop,
        "prev_high": np.concatenate([[P.START_ACTION_ID], y_high[:-1]]),
        "prev_low": np.concatenate([np.zeros((1, 2)), y_vel[:-1]], axis=0),
        "progress": np.linspace(0, 1, T_steps)[:, None],
    }


# ---------------------------------------------------------------------------
# Instruction encoding


def test_encode_all_pad_rows_equal_pad_embedding():
    p = small_params()
    out = P.encode_instruction(p, [])
    pad_row = p.embed.data[0]
    assert out.shape == (8, 16)
    for row in out.data:
        np.testing.assert_array_equal(row, pad_row)


def test_encode_instruction_pure():
    p = small_params()
    a = P.encode_instruction(p, [3, 5, 7]).data
    b = P.encode_instruction(p, [3, 5, 7]).data
    np.testing.assert_array_equal(a, b)


def test_encode_rejects_out_of_vocabulary():
    p = small_params()
    with pytest.raises(InputError) as exc:
        P.encode_instruction(p, [10 ** 6])
    assert "1000000" in str(exc.value)


def test_encode_gradient_hits_only_looked_up_rows():
    p = small_params()
    tokens = [3, 5, 5]
    with ad.Tape() as tape:
        out = P.encode_instruction(p, tokens)
        loss = ad.sum_(ad.mul(out, out))
    tape.backward(loss)
    g = p.embed.grad
    touched = set(tokens) | {0}  # pad fills the rest of the window
    for row in range(p.cfg.vocab_size):
        if row in touched:
            assert np.any(g[row] != 0.0), row
        else:
            assert np.all(g[row] == 0.0), row


def test_encode_gradient_matches_finite_differences():
    p = small_params()
    tokens = [2, 4]
    with ad.Tape() as tape:
        out = P.encode_instruction(p, tokens)
        loss = ad.sum_(ad.mul(out, out))
    tape.backward(loss)
    analytic = p.embed.grad
    flat = p.embed.data
    for row in (0, 2, 4, 5):
        for col in (0, 3):
            old = flat[row, col]
            flat[row, col] = old + 1e-6
            with ad.no_grad():
                o = P.encode_instruction(p, tokens)
                hi = float((o.data * o.data).sum())
            flat[row, col] = old - 1e-6
            with ad.no_grad():
                o = P.encode_instruction(p, tokens)
                lo = float((o.data * o.data).sum())
            flat[row, col] = old
            num = (hi - lo) / 2e-6
            assert abs(analytic[row, col] - num) / max(1.0, abs(analytic[row, col])) < 1e-6


# ---------------------------------------------------------------------------
# High / low policy steps


def test_high_policy_probs_sum_to_one():
    p = small_params()
    instr = P.encode_instruction(p, [1, 2, 3])
    probs, st = P.high_policy_step(rand_obs(), instr, P.START_ACTION_ID,
                                   P.init_high_state(p), p)
    assert probs.shape == (4,)
    assert abs(float(probs.data.sum()) - 1.0) < 1e-9
    probs2, _ = P.high_policy_step(rand_obs(1), instr, 0, st, p)
    assert abs(float(probs2.data.sum()) - 1.0) < 1e-9


def test_high_policy_zero_head_uniform():
    p = small_params()
    p.w_act.data[:] = 0.0
    p.b_act.data[:] = 0.0
    instr = P.encode_instruction(p, [1, 2])
    probs, _ = P.high_policy_step(rand_obs(), instr, 0, P.init_high_state(p), p)
    np.testing.assert_allclose(probs.data, 0.25, atol=1e-12)


def test_low_policy_zero_heads():
    p = small_params()
    for t in (p.w_vel, p.b_vel, p.w_stop, p.b_stop):
        t.data[:] = 0.0
    vel, stop, _ = P.low_policy_step(rand_obs(), 0, P.init_low_state(p), p)
    np.testing.assert_allclose(vel.data, 0.0, atol=1e-12)
    assert abs(float(stop.data[0]) - 0.5) < 1e-12


def test_low_policy_output_ranges_many_random_params():
    p = small_params()
    rng = ad.make_rng(0xFA11)
    obs = rand_obs()
    st = P.init_low_state(p)
    for trial in range(1000):
        for t in (p.w_vel, p.b_vel, p.w_stop, p.b_stop):
            t.data = rng.normal(scale=5.0, size=t.shape)
        vel, stop, _ = P.low_policy_step(obs, int(rng.integers(4)), st, p)
        assert np.all(vel.data >= -1.0) and np.all(vel.data <= 1.0)
        assert 0.0 <= float(stop.data[0]) <= 1.0


def test_policy_steps_end_to_end_gradcheck():
    # two teacher-forced steps through both policies and the joint loss
    p = small_params(seed=1)
    data = synth_episode_data(T_steps=2, seed=2, n_tokens=8)

    def loss_value():
        with ad.no_grad():
            return T.episode_loss(p, data, 0.5, 100).item()

    for name in ("rgb/lift", "high/lstm/wh", "low/vel_w", "vis/w",
                 "rgb/blk/attn/wq0", "depth/blk/ff1_w", "low/sub_embed"):
        tensor = p.registry[name]
        for q in p.registry.values():
            q.grad = None
        with ad.Tape() as tape:
            loss = T.episode_loss(p, data, 0.5, 100)
        tape.backward(loss)
        analytic = tensor.grad.reshape(-1)
        flat = tensor.data.reshape(-1)
        rng = ad.make_rng(0x6AD, abs(hash(name)) % 2 ** 31)
        for i in rng.permutation(flat.size)[:10]:
            old = flat[i]
            flat[i] = old + 1e-5
            hi = loss_value()
            flat[i] = old - 1e-5
            lo = loss_value()
            flat[i] = old
            num = (hi - lo) / 2e-5
            assert abs(analytic[i] - num) / max(1.0, abs(analytic[i])) < 1e-4, name


# ---------------------------------------------------------------------------
# Joint loss


def test_joint_loss_perfect_predictions_near_zero():
    probs = Tensor(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    vel = Tensor(np.array([[0.3, -0.2], [0.1, 0.0]]))
    stop = Tensor(np.array([[1e-12], [1.0 - 1e-12]]))
    targets = {"high": np.array([0, 1]), "vel": vel.data.copy(),
               "stop": np.array([[0.0], [1.0]])}
    loss = T.joint_loss(probs, vel, stop, targets, 0.5)
    assert abs(loss.item()) < 1e-9


def test_joint_loss_lambda_one_ignores_low_targets():
    probs = Tensor(np.array([[0.7, 0.1, 0.1, 0.1]]))
    vel = Tensor(np.array([[0.5, 0.5]]))
    stop = Tensor(np.array([[0.3]]))
    t1 = {"high": np.array([0]), "vel": np.array([[0.5, 0.5]]), "stop": np.array([[0.0]])}
    t2 = {"high": np.array([0]), "vel": np.array([[-0.9, 0.2]]), "stop": np.array([[1.0]])}
    a = T.joint_loss(probs, vel, stop, t1, 1.0).item()
    b = T.joint_loss(probs, vel, stop, t2, 1.0).item()
    assert a == b


def test_joint_loss_hand_computed_case():
    probs = Tensor(np.array([[0.5, 0.5, 0.0, 0.0]]))
    vel = Tensor(np.array([[0.1, 0.0]]))
    stop = Tensor(np.array([[0.5]]))
    targets = {"high": np.array([0]), "vel": np.array([[0.0, 0.0]]),
               "stop": np.array([[0.0]])}
    loss = T.joint_loss(probs, vel, stop, targets, 0.5).item()
    expected = 0.5 * (-math.log(0.5)) + 0.5 * (0.01 + (-math.log(0.5)))
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.698) < 1e-3


def test_joint_loss_rejects_bad_lambda():
    probs = Tensor(np.ones((1, 4)) / 4)
    vel = Tensor(np.zeros((1, 2)))
    stop = Tensor(np.full((1, 1), 0.5))
    targets = {"high": np.array([0]), "vel": np.zeros((1, 2)), "stop": np.zeros((1, 1))}
    with pytest.raises(ConfigurationError):
        T.joint_loss(probs, vel, stop, targets, 1.5)


# ---------------------------------------------------------------------------
# Variants


def test_unknown_variant_rejected():
    with pytest.raises(ConfigurationError):
        P.ModelConfig(variant="flat_earth").validate()


@pytest.mark.parametrize("variant", P.VARIANTS)
def test_variant_builds_trains_and_acts(variant):
    p = small_params(variant, seed=2)
    data = synth_episode_data(T_steps=5, seed=3)
    carry = {}
    with ad.Tape() as tape:
        loss = T.window_loss(p, data, 0.5, 0, 5, carry)
    assert np.isfinite(loss.item())
    tape.backward(loss)
    agent = T.BatchedAgent(p)
    agent.begin([[1, 2, 3], [4, 5]])
    rng = ad.make_rng(9)
    rgb = rng.uniform(0, 1, size=(2, 49, P.N_CELL_CLASSES))
    depth = rng.uniform(0, 1, size=(2, 49, 1))
    pooled = np.concatenate([rgb.mean(1), depth.mean(1)], axis=1)
    actions, stop_p, declared = agent.act_batch(rgb, depth, pooled)
    assert actions.shape == (2, 2) and np.all(np.isfinite(actions))
    assert np.all(actions[:, 0] >= 0.0)
    assert stop_p.shape == (2,) and declared.shape == (2,)


def test_rgb_depth_parameters_disjoint():
    p = small_params("hcm")
    rgb_names = {k for k in p.registry if k.startswith("rgb/")}
    depth_names = {k for k in p.registry if k.startswith("depth/")}
    assert rgb_names and depth_names and not (rgb_names & depth_names)
    rgb_ids = {id(p.registry[k]) for k in rgb_names}
    depth_ids = {id(p.registry[k]) for k in depth_names}
    assert not (rgb_ids & depth_ids)


def test_no_vision_ignores_observations():
    p = small_params("hcm_no_vision")
    agent = T.BatchedAgent(p)
    agent.begin([[1, 2]])
    rng = ad.make_rng(4)
    rgb1 = rng.uniform(0, 1, size=(1, 49, P.N_CELL_CLASSES))
    out1 = agent.act_batch(rgb1, rng.uniform(0, 1, (1, 49, 1)),
                           rng.uniform(0, 1, (1, P.N_CELL_CLASSES + 1)))
    agent2 = T.BatchedAgent(p)
    agent2.begin([[1, 2]])
    out2 = agent2.act_batch(np.zeros_like(rgb1), np.zeros((1, 49, 1)),
                            np.zeros((1, P.N_CELL_CLASSES + 1)))
    np.testing.assert_array_equal(out1[0], out2[0])


def test_subgoal_channel_is_only_high_to_low_path():
    p = small_params("hcm", seed=5)
    p.sub_embed.data[:] = 0.0
    obs = rand_obs(7)
    rgb, depth, pooled = P.obs_arrays(obs)

    def low_outputs():
        agent = T.BatchedAgent(p)
        agent.begin([[1, 2, 3]])
        actions, stop_p, _ = agent.act_batch(rgb[None], depth[None], pooled[None])
        return actions.copy(), stop_p.copy()

    before = low_outputs()
    rng = ad.make_rng(0xD00D)
    for name, t in p.registry.items():
        if name.startswith(("high/", "rgb/", "depth/", "embed/")):
            t.data = rng.normal(size=t.shape)
    after = low_outputs()
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])


def test_batched_training_path_matches_step_ops():
    # teacher-forced probs/velocities from the fused path vs public step ops
    p = small_params("hcm", seed=6)
    data = synth_episode_data(T_steps=5, seed=8)
    with ad.no_grad():
        carry = {}
        vhat = P.visual_summary(p, Tensor(data["pooled"]))
        q2d, ctxs = T._episode_contexts(p, data)
        prev_emb = ad.embed_lookup(p.act_embed, data["prev_high"])
        x_high = ad.concat(ctxs + [vhat, prev_emb], axis=-1)
        h_high = T._stacked_sequence(p.high_lstm, x_high, carry, "high")
        probs_batch = P.action_probs(p, h_high).data
        sub_emb = ad.embed_lookup(p.sub_embed, data["y_high"])
        x_low = ad.concat([vhat, sub_emb], axis=-1)
        h_low = T._stacked_sequence(p.low_lstm1, x_low, carry, "low", second=p.low_lstm2)
        vel_b, stop_b = P.low_heads(p, h_low, Tensor(data["prev_low"]))

    hs = P.init_high_state(p)
    ls = P.init_low_state(p)
    with ad.no_grad():
        instr = P.encode_instruction(p, data["tokens"])
        for t in range(5):
            obs = Observation(rgb=data["rgb"][t].reshape(7, 7, -1),
                              depth=data["depth"][t].reshape(7, 7, 1))
            pr, hs = P.high_policy_step(obs, instr, int(data["prev_high"][t]), hs, p)
            np.testing.assert_allclose(pr.data, probs_batch[t], atol=1e-9)
            ls.prev_low = data["prev_low"][t]
            v, sp, ls = P.low_policy_step(obs, int(data["y_high"][t]), ls, p)
            np.testing.assert_allclose(v.data, vel_b.data[t], atol=1e-9)
            np.testing.assert_allclose(sp.data, stop_b.data[t], atol=1e-9)


def test_checkpoint_roundtrip_preserves_behavior(tmp_path):
    p = small_params("hcm", seed=7)
    path = tmp_path / "ckpt.bin"
    T.save_checkpoint(str(path), p, {"variant": "hcm"})
    p2, meta = T.load_checkpoint(str(path))
    assert meta["variant"] == "hcm"
    obs = rand_obs(11)
    rgb, depth, pooled = P.obs_arrays(obs)
    a1 = T.BatchedAgent(p)
    a1.begin([[1, 2]])
    a2 = T.BatchedAgent(p2)
    a2.begin([[1, 2]])
    o1 = a1.act_batch(rgb[None], depth[None], pooled[None])
    o2 = a2.act_batch(rgb[None], depth[None], pooled[None])
    np.testing.assert_array_equal(o1[0], o2[0])
    np.testing.assert_array_equal(o1[1], o2[1])


def test_episode_loss_equals_sum_of_window_losses():
    p = small_params("hcm", seed=9)
    data = synth_episode_data(T_steps=7, seed=10)
    with ad.no_grad():
        full = T.episode_loss(p, data, 0.5, 3).item()
        carry = {}
        parts = [T.window_loss(p, data, 0.5, s, e, carry).item()
                 for s, e in nn.tbptt_windows(7, 3)]
    assert abs(full - sum(parts)) < 1e-9
