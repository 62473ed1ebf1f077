"""Policy network, GAE, and clipped-update tests against independent oracles."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillchain import minicraft as mc
from skillchain.policy import (
    OBS_DIM,
    AdamState,
    Expert,
    GaeConfig,
    NetConfig,
    PolicyParams,
    PpoConfig,
    RolloutBuffer,
    allocate_expert,
    compute_gae,
    encode_observation,
    forward,
    forward_batch,
    init_params,
    load_params,
    ppo_loss_and_grads,
    ppo_update,
    save_params,
    _clip_grads,
    _iter_tensors,
)

SMALL = NetConfig(obs_dim=6, n_actions=4, hidden=5, dtype="float64")


def small_params(seed=0, n_skills=2, config=SMALL):
    params = init_params(config, seed=seed)
    for skill_id in range(n_skills):
        params = allocate_expert(params, skill_id)
    return params


def make_buffer(rng, t_len, n_env, obs_dim, n_actions, n_skills=2):
    """Random well-formed buffer: boundaries close every done or skill switch."""
    skills = rng.integers(0, n_skills, (t_len, n_env)).astype(np.int32)
    dones = rng.random((t_len, n_env)) < 0.15
    boundaries = dones.copy()
    if t_len > 1:
        boundaries[:-1] |= skills[1:] != skills[:-1]
    return RolloutBuffer(
        obs=rng.standard_normal((t_len, n_env, obs_dim)).astype(np.float32),
        skill_ids=skills,
        actions=rng.integers(0, n_actions, (t_len, n_env)).astype(np.int32),
        log_probs=np.log(rng.uniform(0.05, 0.9, (t_len, n_env))).astype(np.float32),
        values=rng.standard_normal((t_len, n_env)).astype(np.float32),
        rewards=rng.standard_normal((t_len, n_env)).astype(np.float32),
        dones=dones,
        boundaries=boundaries,
    )


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam, cut_boundaries=None):
    """Scalar reverse recursion, one env.  cut_boundaries additionally zeroes
    the lambda carry at segment ends (the truncated variant)."""
    t_len = len(rewards)
    adv = [0.0] * t_len
    carry = 0.0
    next_value = bootstrap
    for t in range(t_len - 1, -1, -1):
        if cut_boundaries is not None and cut_boundaries[t]:
            carry = 0.0  # segment ends at t: drop the lambda carry from t+1
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    return np.array(adv)


def forward_oracle(params, x, skill_id):
    """Pure-python forward pass (no numpy linear algebra)."""
    expert = params.experts[skill_id]
    h = list(x)
    for w, b in list(params.shared) + list(expert.hidden):
        h = [
            math.tanh(sum(h[i] * w[i][j] for i in range(len(h))) + b[j])
            for j in range(w.shape[1])
        ]
    logits = [
        sum(h[i] * expert.actor[0][i][j] for i in range(len(h)))
        + expert.actor[1][j]
        for j in range(expert.actor[0].shape[1])
    ]
    value = (
        sum(h[i] * expert.critic[0][i][0] for i in range(len(h)))
        + expert.critic[1][0]
    )
    top = max(logits)
    exps = [math.exp(z - top) for z in logits]
    total = sum(exps)
    return [e / total for e in exps], value


# --- encoding ------------------------------------------------------------------


def test_encoding_layout_and_range():
    state, obs = mc.reset(11)
    x = encode_observation(obs)
    assert x.shape == (OBS_DIM,)
    assert x.dtype == np.float32
    # one-hot map block: exactly one hot entry per cell
    cells = x[: 63 * mc.N_MAP_CODES].reshape(63, mc.N_MAP_CODES)
    assert (cells.sum(axis=1) == 1.0).all()
    assert ((cells == 0.0) | (cells == 1.0)).all()
    # facing block is one-hot
    assert x[-4:].sum() == 1.0
    assert np.abs(x).max() <= 2.0


def test_encoding_distinguishes_facing():
    state, obs = mc.reset(11)
    turned = dataclasses.replace(obs, facing=(obs.facing + 1) % 4)
    assert not np.array_equal(encode_observation(obs), encode_observation(turned))


# --- forward -------------------------------------------------------------------


def test_forward_requires_allocated_expert():
    params = small_params(n_skills=1)
    with pytest.raises(KeyError):
        forward(params, np.zeros(SMALL.obs_dim), 5)


def test_zero_actor_head_gives_uniform_distribution():
    params = small_params()
    expert = params.experts[0]
    zeroed = Expert(
        hidden=expert.hidden,
        actor=(np.zeros_like(expert.actor[0]), np.zeros_like(expert.actor[1])),
        critic=expert.critic,
    )
    params = dataclasses.replace(params, experts={**params.experts, 0: zeroed})
    probs, _ = forward(params, np.ones(SMALL.obs_dim), 0)
    assert np.allclose(probs, 1.0 / SMALL.n_actions)


def test_fresh_actor_head_is_near_uniform():
    params = init_params(seed=4)
    params = allocate_expert(params, 0)
    state, obs = mc.reset(4)
    probs, _ = forward(params, obs, 0)
    assert np.abs(probs - 1.0 / len(probs)).max() < 0.05


def test_forward_matches_reference_oracle():
    rng = np.random.default_rng(9)
    for case in range(10):
        params = small_params(seed=case, n_skills=2)
        x = rng.standard_normal(SMALL.obs_dim)
        skill_id = case % 2
        probs, value = forward(params, x, skill_id)
        want_probs, want_value = forward_oracle(params, x, skill_id)
        assert np.allclose(probs, want_probs, atol=1e-9)
        assert abs(value - want_value) < 1e-9


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_softmax_normalized_within_1e_6(seed):
    rng = np.random.default_rng(seed)
    params = small_params(seed=seed % 100, n_skills=1)
    probs, _ = forward(params, rng.standard_normal(SMALL.obs_dim) * 10, 0)
    assert (probs > 0).all()
    assert abs(probs.sum() - 1.0) <= 1e-6


def test_forward_batch_consistent_with_single():
    params = small_params(seed=2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, SMALL.obs_dim))
    probs, values = forward_batch(params, x, 1)
    for i in range(5):
        p_one, v_one = forward(params, x[i], 1)
        assert np.allclose(probs[i], p_one)
        assert np.isclose(values[i], v_one)


# --- allocation -----------------------------------------------------------------


def test_allocate_is_deterministic_and_order_free():
    base = init_params(SMALL, seed=7)
    ab = allocate_expert(allocate_expert(base, 0), 1)
    ba = allocate_expert(allocate_expert(base, 1), 0)
    for (key_a, ten_a), (key_b, ten_b) in zip(
        _iter_tensors(ab), _iter_tensors(ba)
    ):
        assert key_a == key_b
        assert np.array_equal(ten_a, ten_b)


def test_allocate_rejects_double_allocation():
    params = small_params(n_skills=1)
    with pytest.raises(ValueError):
        allocate_expert(params, 0)


def test_allocate_leaves_existing_experts_bit_unchanged():
    params = small_params(n_skills=2)
    before = {key: tensor.tobytes() for key, tensor in _iter_tensors(params)}
    grown = allocate_expert(params, 2)
    for key, tensor in _iter_tensors(grown):
        if key in before:
            assert tensor.tobytes() == before[key]
    x = np.ones(SMALL.obs_dim)
    assert np.array_equal(forward(params, x, 0)[0], forward(grown, x, 0)[0])


def test_allocation_count_tracks_skill_roster():
    params = init_params(SMALL, seed=0)
    roster = []
    for skill_id in (3, 1, 4):
        roster.append(skill_id)
        params = allocate_expert(params, skill_id)
        assert sorted(params.experts) == sorted(roster)


def test_orthogonal_init_gains():
    config = NetConfig(obs_dim=40, n_actions=8, hidden=32, dtype="float64")
    params = allocate_expert(init_params(config, seed=1), 0)
    w_shared = params.shared[0][0]
    # orthogonal columns scaled by the gain: W^T W = gain^2 * I
    gram = w_shared.T @ w_shared
    assert np.allclose(gram, 2.0 * np.eye(config.hidden), atol=1e-8)
    actor_w = params.experts[0].actor[0]
    assert np.allclose(actor_w.T @ actor_w, 1e-4 * np.eye(8), atol=1e-10)
    critic_w = params.experts[0].critic[0]
    assert np.isclose(np.linalg.norm(critic_w), 1.0)


# --- rollout buffer --------------------------------------------------------------


def test_buffer_rejects_done_without_boundary():
    dones = np.array([[False], [True], [False]])
    boundaries = np.zeros((3, 1), dtype=bool)
    with pytest.raises(ValueError):
        RolloutBuffer(
            obs=np.zeros((3, 1, 4), dtype=np.float32),
            skill_ids=np.zeros((3, 1), dtype=np.int32),
            actions=np.zeros((3, 1), dtype=np.int32),
            log_probs=np.zeros((3, 1), dtype=np.float32),
            values=np.zeros((3, 1), dtype=np.float32),
            rewards=np.zeros((3, 1), dtype=np.float32),
            dones=dones,
            boundaries=boundaries,
        )


def test_buffer_rejects_skill_switch_without_boundary():
    skills = np.array([[0], [0], [1]], dtype=np.int32)
    with pytest.raises(ValueError):
        RolloutBuffer(
            obs=np.zeros((3, 1, 4), dtype=np.float32),
            skill_ids=skills,
            actions=np.zeros((3, 1), dtype=np.int32),
            log_probs=np.zeros((3, 1), dtype=np.float32),
            values=np.zeros((3, 1), dtype=np.float32),
            rewards=np.zeros((3, 1), dtype=np.float32),
            dones=np.zeros((3, 1), dtype=bool),
            boundaries=np.zeros((3, 1), dtype=bool),
        )


# --- GAE -------------------------------------------------------------------------


def test_gae_toy_three_step():
    buf = RolloutBuffer(
        obs=np.zeros((3, 1, 4), dtype=np.float32),
        skill_ids=np.zeros((3, 1), dtype=np.int32),
        actions=np.zeros((3, 1), dtype=np.int32),
        log_probs=np.zeros((3, 1), dtype=np.float32),
        values=np.zeros((3, 1), dtype=np.float32),
        rewards=np.array([[0.0], [0.0], [1.0]], dtype=np.float32),
        dones=np.zeros((3, 1), dtype=bool),
        boundaries=np.zeros((3, 1), dtype=bool),
    )
    adv, ret = compute_gae(buf, GaeConfig(gamma=0.5, lam=0.5), np.zeros(1))
    assert np.allclose(adv.ravel(), [0.0625, 0.25, 1.0])
    assert np.allclose(ret, adv)  # values are zero


def test_gae_zero_rewards_zero_values():
    rng = np.random.default_rng(1)
    buf = make_buffer(rng, 12, 3, 4, 4)
    buf.rewards[:] = 0.0
    buf.values[:] = 0.0
    adv, ret = compute_gae(buf, GaeConfig(), np.zeros(3))
    assert np.allclose(adv, 0.0)
    assert np.allclose(ret, 0.0)


def test_gae_matches_hand_recursion_on_100_random_buffers():
    rng = np.random.default_rng(42)
    for _ in range(100):
        t_len = int(rng.integers(1, 16))
        n_env = int(rng.integers(1, 4))
        buf = make_buffer(rng, t_len, n_env, 3, 4)
        bootstrap = rng.standard_normal(n_env)
        cfg = GaeConfig(gamma=float(rng.uniform(0, 1)), lam=float(rng.uniform(0, 1)))
        adv, ret = compute_gae(buf, cfg, bootstrap)
        for env in range(n_env):
            want = gae_oracle(
                buf.rewards[:, env].astype(np.float64),
                buf.values[:, env].astype(np.float64),
                buf.dones[:, env],
                bootstrap[env],
                cfg.gamma,
                cfg.lam,
            )
            assert np.abs(adv[:, env] - want).max() <= 1e-10
            assert np.abs(
                ret[:, env] - (want + buf.values[:, env])
            ).max() <= 1e-10


def test_gae_propagates_across_boundaries_not_dones():
    """Credit earned after a skill handoff flows back to the earlier skill;
    credit after an episode end does not."""
    rng = np.random.default_rng(7)
    cfg = GaeConfig(gamma=0.99, lam=0.8)
    for _ in range(100):
        t_len = int(rng.integers(4, 14))
        cut = int(rng.integers(1, t_len - 1))
        skills = np.zeros((t_len, 1), dtype=np.int32)
        skills[cut + 1 :] = 1
        boundaries = np.zeros((t_len, 1), dtype=bool)
        boundaries[cut] = True
        rewards = np.zeros((t_len, 1), dtype=np.float32)
        rewards[cut + 1 :] = rng.uniform(0.1, 1.0, (t_len - cut - 1, 1))
        values = np.zeros((t_len, 1), dtype=np.float32)
        values[: cut + 1] = rng.standard_normal((cut + 1, 1))
        buf = RolloutBuffer(
            obs=np.zeros((t_len, 1, 3), dtype=np.float32),
            skill_ids=skills,
            actions=np.zeros((t_len, 1), dtype=np.int32),
            log_probs=np.zeros((t_len, 1), dtype=np.float32),
            values=values,
            rewards=rewards,
            dones=np.zeros((t_len, 1), dtype=bool),
            boundaries=boundaries,
        )
        adv, _ = compute_gae(buf, cfg, np.zeros(1))
        truncated = gae_oracle(
            rewards[:, 0].astype(np.float64),
            values[:, 0].astype(np.float64),
            buf.dones[:, 0],
            0.0,
            cfg.gamma,
            cfg.lam,
            cut_boundaries=boundaries[:, 0],
        )
        # skill 0's steps strictly gain from skill 1's rewards
        assert (adv[: cut + 1, 0] > truncated[: cut + 1] + 1e-12).all()
        # a done at the same spot blocks the propagation entirely
        done_buf = dataclasses.replace(buf)
        done_buf.dones[cut] = True
        adv_done, _ = compute_gae(done_buf, cfg, np.zeros(1))
        want_done = gae_oracle(
            rewards[:, 0].astype(np.float64),
            values[:, 0].astype(np.float64),
            done_buf.dones[:, 0],
            0.0,
            cfg.gamma,
            cfg.lam,
        )
        assert np.abs(adv_done[:, 0] - want_done).max() <= 1e-10


# --- update ----------------------------------------------------------------------


def test_gradients_match_finite_differences_on_20_configs():
    ppo = PpoConfig()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        config = NetConfig(
            obs_dim=6,
            n_actions=4,
            hidden=5,
            n_shared=int(rng.integers(0, 3)),
            n_expert=int(rng.integers(1, 3)),
            dtype="float64",
        )
        params = small_params(seed=seed, n_skills=2, config=config)
        m = 7
        batch = {
            "obs": rng.standard_normal((m, config.obs_dim)),
            "skill_ids": rng.integers(0, 2, m).astype(np.int32),
            "actions": rng.integers(0, config.n_actions, m).astype(np.int32),
            "log_probs": np.log(rng.uniform(0.1, 0.9, m)),
            "advantages": rng.standard_normal(m),
            "returns": rng.standard_normal(m),
        }
        _, grads, _ = ppo_loss_and_grads(params, batch, ppo)
        tensors = dict(_iter_tensors(params))
        pick = np.random.default_rng(seed + 1000)
        for key, grad in grads.items():
            flat = tensors[key].reshape(-1)
            for idx in pick.choice(flat.size, min(4, flat.size), replace=False):
                step = 1e-6
                orig = flat[idx]
                flat[idx] = orig + step
                up, _, _ = ppo_loss_and_grads(params, batch, ppo)
                flat[idx] = orig - step
                down, _, _ = ppo_loss_and_grads(params, batch, ppo)
                flat[idx] = orig
                fd = (up - down) / (2 * step)
                an = grad.reshape(-1)[idx]
                # floor keeps finite-difference noise out of the denominator
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
                assert rel <= 1e-4, (key, idx, fd, an)


def test_ratio_one_surrogate_is_vanilla_policy_gradient():
    """With old log-probs equal to the current policy's, the clipped
    surrogate reduces to mean(advantage) and its gradient to the plain
    policy gradient -mean(adv * dlogpi)."""
    rng = np.random.default_rng(3)
    params = small_params(seed=3, n_skills=1)
    m = 6
    obs = rng.standard_normal((m, SMALL.obs_dim))
    actions = rng.integers(0, SMALL.n_actions, m).astype(np.int32)
    probs, _ = forward_batch(params, obs, 0)
    log_probs = np.log(probs[np.arange(m), actions])
    adv = rng.standard_normal(m)
    batch = {
        "obs": obs,
        "skill_ids": np.zeros(m, dtype=np.int32),
        "actions": actions,
        "log_probs": log_probs,
        "advantages": adv,
        "returns": rng.standard_normal(m),
    }
    cfg = PpoConfig(entropy_coef=0.0, value_coef=0.0)
    loss, grads, stats = ppo_loss_and_grads(params, batch, cfg)
    assert np.isclose(stats["policy_loss"], -adv.mean())

    # vanilla policy gradient via finite differences of log pi alone
    tensors = dict(_iter_tensors(params))
    for key in (("actor", 0, "W"), ("shared", 0, "W")):
        flat = tensors[key].reshape(-1)
        for idx in np.random.default_rng(5).choice(flat.size, 5, replace=False):
            step = 1e-6
            orig = flat[idx]

            def logp():
                p, _ = forward_batch(params, obs, 0)
                return np.log(p[np.arange(m), actions])

            flat[idx] = orig + step
            up = logp()
            flat[idx] = orig - step
            down = logp()
            flat[idx] = orig
            dlogp = (up - down) / (2 * step)
            want = -(adv * dlogp).mean()
            have = grads[key].reshape(-1)[idx]
            assert abs(want - have) <= 1e-6 * max(1.0, abs(want))


def test_update_on_empty_buffer_is_identity():
    params = small_params()
    out, _ = ppo_update(params, RolloutBuffer.empty(SMALL.obs_dim), PpoConfig())
    assert out is params


def test_bandit_update_increases_rewarded_action_probability():
    params = small_params(n_skills=1)
    obs = np.ones((1, 1, SMALL.obs_dim), dtype=np.float32)
    probs, value = forward(params, obs[0, 0], 0)
    action = 2
    buf = RolloutBuffer(
        obs=obs,
        skill_ids=np.zeros((1, 1), dtype=np.int32),
        actions=np.array([[action]], dtype=np.int32),
        log_probs=np.array([[np.log(probs[action])]], dtype=np.float32),
        values=np.array([[value]], dtype=np.float32),
        rewards=np.array([[1.0]], dtype=np.float32),
        dones=np.array([[True]]),
        boundaries=np.array([[True]]),
    )
    cfg = PpoConfig(learning_rate=0.01, minibatches=1)
    updated, _ = ppo_update(params, buf, cfg)
    assert forward(updated, obs[0, 0], 0)[0][action] > probs[action]


def test_update_touches_only_present_experts():
    params = small_params(n_skills=3)
    rng = np.random.default_rng(0)
    buf = make_buffer(rng, 32, 2, SMALL.obs_dim, SMALL.n_actions, n_skills=2)
    before = {key: tensor.tobytes() for key, tensor in _iter_tensors(params)}
    updated, _ = ppo_update(params, buf, PpoConfig(minibatches=4))
    after = dict(_iter_tensors(updated))
    for key, tensor in after.items():
        blob = tensor.tobytes()
        if key[0] != "shared" and key[1] == 2:
            assert blob == before[key], f"absent expert changed: {key}"
        else:
            assert blob != before[key], f"present tensor unchanged: {key}"


def test_update_aborts_on_non_finite_loss():
    params = small_params(n_skills=1)
    buf = make_buffer(
        np.random.default_rng(1), 8, 1, SMALL.obs_dim, SMALL.n_actions, n_skills=1
    )
    buf.rewards[3] = np.inf
    with np.errstate(invalid="ignore"):
        with pytest.raises(RuntimeError, match="non-finite"):
            ppo_update(params, buf, PpoConfig())


def test_gradient_norm_clipping():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
    _clip_grads(grads, 1.0)
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    assert np.isclose(total, 1.0, atol=1e-9)
    assert np.allclose(grads["a"], np.array([3.0, 4.0]) / 13.0, atol=1e-9)
    small = {"a": np.array([0.3])}
    _clip_grads(small, 1.0)
    assert np.allclose(small["a"], [0.3])


def test_update_is_deterministic():
    rng = np.random.default_rng(8)
    buf = make_buffer(rng, 16, 2, SMALL.obs_dim, SMALL.n_actions)
    one, _ = ppo_update(small_params(seed=1), buf, PpoConfig(), seed=5)
    two, _ = ppo_update(small_params(seed=1), buf, PpoConfig(), seed=5)
    for (_, ten_a), (_, ten_b) in zip(_iter_tensors(one), _iter_tensors(two)):
        assert np.array_equal(ten_a, ten_b)


def test_adam_state_persists_across_updates():
    rng = np.random.default_rng(4)
    buf = make_buffer(rng, 8, 1, SMALL.obs_dim, SMALL.n_actions, n_skills=1)
    params = small_params(n_skills=1)
    params, opt = ppo_update(params, buf, PpoConfig())
    assert isinstance(opt, AdamState) and opt.moments
    steps = {t for (_, _, t) in opt.moments.values()}
    assert steps == {PpoConfig().epochs * PpoConfig().minibatches}


# --- persistence ------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    params = small_params(seed=6, n_skills=2)
    path = tmp_path / "params.npz"
    save_params(str(path), params)
    loaded = load_params(str(path), expected=SMALL)
    assert loaded.config == params.config
    for (key_a, ten_a), (key_b, ten_b) in zip(
        _iter_tensors(params), _iter_tensors(loaded)
    ):
        assert key_a == key_b
        assert np.array_equal(ten_a, ten_b)
        assert ten_a.dtype == ten_b.dtype


def test_load_refuses_config_hash_mismatch(tmp_path):
    params = small_params()
    path = tmp_path / "params.npz"
    save_params(str(path), params)
    other = NetConfig(obs_dim=6, n_actions=4, hidden=7, dtype="float64")
    with pytest.raises(ValueError, match="hash"):
        load_params(str(path), expected=other)


def test_load_refuses_unknown_version(tmp_path):
    import io
    import json

    params = small_params()
    path = tmp_path / "params.npz"
    save_params(str(path), params)
    with np.load(str(path)) as data:
        payload = {name: data[name] for name in data.files}
    meta = json.loads(bytes(payload["meta"]).decode())
    meta["version"] = 99
    payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())
    with pytest.raises(ValueError, match="version"):
        load_params(str(path))
