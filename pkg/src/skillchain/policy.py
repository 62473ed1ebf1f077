"""Mixture-of-experts policy with hand-derived gradients.

One shared tanh backbone feeds per-skill experts, each a small tanh MLP
with a softmax actor head and a scalar critic head.  The update rule is
clipped policy gradient with GAE advantages; all gradients are derived by
hand (the model is a few affine layers), so the module depends on nothing
beyond numpy and stays cheap to verify against finite differences.
"""

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .minicraft import (
    ITEMS,
    LOCAL_COLS,
    LOCAL_ROWS,
    N_MAP_CODES,
    OFFSET_BLOCKS,
    Action,
    Observation,
)

__all__ = [
    "GaeConfig",
    "NetConfig",
    "OBS_DIM",
    "PolicyParams",
    "PpoConfig",
    "RolloutBuffer",
    "allocate_expert",
    "compute_gae",
    "encode_batch",
    "encode_observation",
    "forward",
    "forward_batch",
    "init_params",
    "load_params",
    "ppo_loss_and_grads",
    "ppo_update",
    "save_params",
]

N_ACTIONS = len(Action)

_N_CELLS = LOCAL_ROWS * LOCAL_COLS
_N_FACINGS = 4
OBS_DIM = (
    _N_CELLS * N_MAP_CODES        # one-hot local map
    + len(ITEMS)                  # inventory counts / 9
    + 4                           # intrinsics / 9
    + len(OFFSET_BLOCKS) * 2      # nearest-block offsets / 30
    + _N_FACINGS                  # one-hot facing
)

_INV_BASE = _N_CELLS * N_MAP_CODES
_INTR_BASE = _INV_BASE + len(ITEMS)
_OFF_BASE = _INTR_BASE + 4
_FACE_BASE = _OFF_BASE + len(OFFSET_BLOCKS) * 2


def encode_observation(obs: Observation, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Flatten an Observation into the policy's float32 input vector."""
    if out is None:
        out = np.zeros(OBS_DIM, dtype=np.float32)
    codes = obs.local_map.reshape(-1).astype(np.int64)
    out[np.arange(_N_CELLS) * N_MAP_CODES + codes] = 1.0
    np.divide(np.minimum(obs.inventory, 18), 9.0,
              out=out[_INV_BASE:_INV_BASE + len(ITEMS)], casting="unsafe")
    np.divide(obs.intrinsics, 9.0, out=out[_INTR_BASE:_INTR_BASE + 4],
              casting="unsafe")
    np.divide(obs.offsets.reshape(-1), 30.0,
              out=out[_OFF_BASE:_FACE_BASE], casting="unsafe")
    out[_FACE_BASE + obs.facing] = 1.0
    return out


def encode_batch(observations: Sequence[Observation]) -> np.ndarray:
    out = np.zeros((len(observations), OBS_DIM), dtype=np.float32)
    for i, obs in enumerate(observations):
        encode_observation(obs, out[i])
    return out


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    """Network shape.  Total hidden depth stays at `n_shared + n_expert`."""

    obs_dim: int = OBS_DIM
    n_actions: int = N_ACTIONS
    hidden: int = 128
    n_shared: int = 1
    n_expert: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.n_shared <= 3:
            raise ValueError("n_shared must be in [0, 3]")
        if self.n_expert < 0:
            raise ValueError("n_expert must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    epochs: int = 4
    minibatches: int = 8
    learning_rate: float = 2.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("coefficients must be >= 0")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be >= 1")


# --- parameters ---------------------------------------------------------------

Affine = Tuple[np.ndarray, np.ndarray]   # (W: in x out, b: out)


@dataclass(frozen=True)
class Expert:
    hidden: Tuple[Affine, ...]
    actor: Affine
    critic: Affine


@dataclass(frozen=True)
class PolicyParams:
    config: NetConfig
    seed: int
    shared: Tuple[Affine, ...]
    experts: Dict[int, Expert] = field(default_factory=dict)

    def validate(self) -> None:
        for tensor in _iter_tensors(self):
            if not np.isfinite(tensor[1]).all():
                raise ValueError(f"non-finite weights in {tensor[0]}")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float,
                dtype) -> np.ndarray:
    a = rng.standard_normal((n_in, n_out))
    transpose = n_in < n_out
    if transpose:
        a = a.T
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if transpose:
        q = q.T
    return (gain * q[:n_in, :n_out]).astype(dtype)


def _affine(rng: np.random.Generator, n_in: int, n_out: int, gain: float,
            dtype) -> Affine:
    return _orthogonal(rng, n_in, n_out, gain, dtype), np.zeros(n_out, dtype=dtype)


def init_params(config: NetConfig = NetConfig(), seed: int = 0) -> PolicyParams:
    """Backbone only; experts are allocated on demand per skill."""
    rng = np.random.default_rng([seed, 0x5EED])
    dtype = config.np_dtype
    shared = []
    n_in = config.obs_dim
    for _ in range(config.n_shared):
        shared.append(_affine(rng, n_in, config.hidden, np.sqrt(2.0), dtype))
        n_in = config.hidden
    return PolicyParams(config=config, seed=seed, shared=tuple(shared))


def allocate_expert(params: PolicyParams, skill_id: int) -> PolicyParams:
    """New expert for `skill_id`; deterministic in (seed, skill_id) alone,
    so allocation order never changes the weights.  Existing experts are
    the same arrays, bit for bit."""
    if skill_id in params.experts:
        raise ValueError(f"expert {skill_id} already allocated")
    config = params.config
    dtype = config.np_dtype
    rng = np.random.default_rng([params.seed, 0xE84E87, skill_id])
    n_in = config.obs_dim if config.n_shared == 0 else config.hidden
    hidden = []
    for _ in range(config.n_expert):
        hidden.append(_affine(rng, n_in, config.hidden, np.sqrt(2.0), dtype))
        n_in = config.hidden
    expert = Expert(
        hidden=tuple(hidden),
        actor=_affine(rng, n_in, config.n_actions, 0.01, dtype),
        critic=_affine(rng, n_in, 1, 1.0, dtype),
    )
    experts = dict(params.experts)
    experts[skill_id] = expert
    return replace(params, experts=experts)


def _iter_tensors(params: PolicyParams):
    for i, (w, b) in enumerate(params.shared):
        yield ("shared", i, "W"), w
        yield ("shared", i, "b"), b
    for skill_id in sorted(params.experts):
        expert = params.experts[skill_id]
        for j, (w, b) in enumerate(expert.hidden):
            yield ("expert", skill_id, j, "W"), w
            yield ("expert", skill_id, j, "b"), b
        yield ("actor", skill_id, "W"), expert.actor[0]
        yield ("actor", skill_id, "b"), expert.actor[1]
        yield ("critic", skill_id, "W"), expert.critic[0]
        yield ("critic", skill_id, "b"), expert.critic[1]


# --- forward ------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _forward_cached(params: PolicyParams, x: np.ndarray, skill_id: int):
    """Returns (probs, values, cache) for a (B, obs_dim) batch."""
    if skill_id not in params.experts:
        raise KeyError(f"skill {skill_id} has no allocated expert")
    expert = params.experts[skill_id]
    activations = [x]
    h = x
    for w, b in params.shared:
        h = np.tanh(h @ w + b)
        activations.append(h)
    for w, b in expert.hidden:
        h = np.tanh(h @ w + b)
        activations.append(h)
    logits = h @ expert.actor[0] + expert.actor[1]
    values = (h @ expert.critic[0] + expert.critic[1])[:, 0]
    probs = _softmax(logits)
    return probs, values, activations


def forward(params: PolicyParams, obs, skill_id: int) -> Tuple[np.ndarray, float]:
    """Action distribution and value for one observation (or encoded vector)."""
    if isinstance(obs, Observation):
        x = encode_observation(obs)
    else:
        x = np.asarray(obs)
    x = x.astype(params.config.np_dtype, copy=False).reshape(1, -1)
    probs, values, _ = _forward_cached(params, x, skill_id)
    return probs[0], float(values[0])


def forward_batch(params: PolicyParams, x: np.ndarray, skill_id: int):
    """(probs, values) for an already-encoded (B, obs_dim) batch."""
    x = x.astype(params.config.np_dtype, copy=False)
    probs, values, _ = _forward_cached(params, x, skill_id)
    return probs, values


# --- rollout buffer -------------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Time-major (T, N) arrays for N parallel environments.

    `dones[t, n]` marks that env n's episode ended at step t; `boundaries`
    marks the final step of a skill segment.  A done always ends the
    segment, so dones imply boundaries.
    """

    obs: np.ndarray          # (T, N, obs_dim) float32
    skill_ids: np.ndarray    # (T, N) int32
    actions: np.ndarray      # (T, N) int32
    log_probs: np.ndarray    # (T, N) float32
    values: np.ndarray       # (T, N) float32
    rewards: np.ndarray      # (T, N) float32
    dones: np.ndarray        # (T, N) bool
    boundaries: np.ndarray   # (T, N) bool

    def __post_init__(self):
        t, n = self.rewards.shape
        if self.obs.shape[:2] != (t, n):
            raise ValueError("obs shape mismatch")
        for name in ("skill_ids", "actions", "log_probs", "values", "dones",
                     "boundaries"):
            if getattr(self, name).shape != (t, n):
                raise ValueError(f"{name} shape mismatch")
        if bool((self.dones & ~self.boundaries).any()):
            raise ValueError("every done step must close its skill segment")
        if t > 1:
            switched = self.skill_ids[1:] != self.skill_ids[:-1]
            uncovered = switched & ~self.boundaries[:-1]
            if bool(uncovered.any()):
                raise ValueError("skill change without a boundary flag")

    @property
    def n_steps(self) -> int:
        return int(self.rewards.size)

    @staticmethod
    def empty(obs_dim: int) -> "RolloutBuffer":
        return RolloutBuffer(
            obs=np.zeros((0, 1, obs_dim), dtype=np.float32),
            skill_ids=np.zeros((0, 1), dtype=np.int32),
            actions=np.zeros((0, 1), dtype=np.int32),
            log_probs=np.zeros((0, 1), dtype=np.float32),
            values=np.zeros((0, 1), dtype=np.float32),
            rewards=np.zeros((0, 1), dtype=np.float32),
            dones=np.zeros((0, 1), dtype=bool),
            boundaries=np.zeros((0, 1), dtype=bool),
        )


def compute_gae(
    buffer: RolloutBuffer,
    cfg: GaeConfig,
    bootstrap: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Advantages and returns, time-major.

    The recursion runs straight through skill boundaries (credit flows back
    into the skill that set up the reward) and resets at episode ends:

        delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
        A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    """
    t_len, n_env = buffer.rewards.shape
    bootstrap = np.asarray(bootstrap, dtype=np.float64).reshape(n_env)
    values = buffer.values.astype(np.float64)
    rewards = buffer.rewards.astype(np.float64)
    not_done = ~buffer.dones

    advantages = np.zeros((t_len, n_env), dtype=np.float64)
    carry = np.zeros(n_env, dtype=np.float64)
    next_values = bootstrap
    for t in range(t_len - 1, -1, -1):
        live = not_done[t].astype(np.float64)
        delta = rewards[t] + cfg.gamma * next_values * live - values[t]
        carry = delta + cfg.gamma * cfg.lam * live * carry
        advantages[t] = carry
        next_values = values[t]
    returns = advantages + values
    return advantages, returns


# --- loss and gradients ---------------------------------------------------------

def _zeros_like_params(params: PolicyParams, skills: Sequence[int]):
    grads: Dict[tuple, np.ndarray] = {}
    for key, tensor in _iter_tensors(params):
        if key[0] == "shared" or key[1] in skills:
            grads[key] = np.zeros_like(tensor)
    return grads


def ppo_loss_and_grads(
    params: PolicyParams,
    batch: Dict[str, np.ndarray],
    cfg: PpoConfig,
):
    """Clipped-surrogate loss over one minibatch, with analytic gradients.

    batch keys: obs (M, obs_dim), skill_ids, actions, log_probs, advantages,
    returns (all (M,)).  Gradients cover the backbone and every expert that
    appears in the minibatch; other experts are untouched.
    """
    config = params.config
    dtype = config.np_dtype
    obs = batch["obs"].astype(dtype, copy=False)
    skills = batch["skill_ids"]
    actions = batch["actions"]
    old_log_probs = batch["log_probs"].astype(dtype, copy=False)
    advantages = batch["advantages"].astype(dtype, copy=False)
    returns = batch["returns"].astype(dtype, copy=False)
    m_total = obs.shape[0]

    present = sorted(set(int(s) for s in skills))
    grads = _zeros_like_params(params, present)

    total_pg = 0.0
    total_v = 0.0
    total_ent = 0.0
    n_shared = config.n_shared

    for skill_id in present:
        rows = np.nonzero(skills == skill_id)[0]
        x = obs[rows]
        acts = actions[rows]
        adv = advantages[rows]
        old_lp = old_log_probs[rows]
        ret = returns[rows]

        probs, values, cache = _forward_cached(params, x, skill_id)
        expert = params.experts[skill_id]
        m = rows.shape[0]

        eps = 1e-12
        row_idx = np.arange(m)
        p_act = probs[row_idx, acts]
        log_p = np.log(np.maximum(probs, eps))
        log_p_act = log_p[row_idx, acts]
        ratio = np.exp(log_p_act - old_lp)

        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
        surrogate = np.minimum(unclipped, clipped)
        total_pg += -surrogate.sum()

        entropy = -(probs * log_p).sum(axis=1)
        total_ent += entropy.sum()

        v_err = values - ret
        total_v += 0.5 * (v_err ** 2).sum()

        # d(loss)/d(logits): policy term flows only where the unclipped
        # branch is active (or the clip is inactive, where both agree)
        active = (unclipped <= clipped) | (
            (ratio >= 1.0 - cfg.clip) & (ratio <= 1.0 + cfg.clip)
        )
        coeff = np.where(active, -adv * ratio, 0.0) / m_total
        one_hot = np.zeros_like(probs)
        one_hot[row_idx, acts] = 1.0
        d_logits = coeff[:, None] * (one_hot - probs)
        # entropy bonus: d(-c*H)/d(logits) = c * p * (log p + H)
        d_logits += cfg.entropy_coef / m_total * probs * (
            log_p + entropy[:, None]
        )
        d_values = cfg.value_coef * v_err / m_total

        h_last = cache[-1]
        grads[("actor", skill_id, "W")] += h_last.T @ d_logits
        grads[("actor", skill_id, "b")] += d_logits.sum(axis=0)
        grads[("critic", skill_id, "W")] += h_last.T @ d_values[:, None]
        grads[("critic", skill_id, "b")] += np.array(
            [d_values.sum()], dtype=dtype
        )

        d_h = d_logits @ expert.actor[0].T + d_values[:, None] @ expert.critic[0].T
        layers = list(params.shared) + list(expert.hidden)
        for depth in range(len(layers) - 1, -1, -1):
            w, _ = layers[depth]
            h_out = cache[depth + 1]
            h_in = cache[depth]
            d_pre = d_h * (1.0 - h_out ** 2)
            if depth >= n_shared:
                key_w = ("expert", skill_id, depth - n_shared, "W")
                key_b = ("expert", skill_id, depth - n_shared, "b")
            else:
                key_w = ("shared", depth, "W")
                key_b = ("shared", depth, "b")
            grads[key_w] += h_in.T @ d_pre
            grads[key_b] += d_pre.sum(axis=0)
            d_h = d_pre @ w.T

    loss = (total_pg + cfg.value_coef * total_v
            - cfg.entropy_coef * total_ent) / m_total
    stats = {
        "loss": float(loss),
        "policy_loss": float(total_pg / m_total),
        "value_loss": float(total_v / m_total),
        "entropy": float(total_ent / m_total),
    }
    return loss, grads, stats


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    moments: Dict[tuple, Tuple[np.ndarray, np.ndarray, int]] = field(
        default_factory=dict
    )


def _clip_grads(grads: Dict[tuple, np.ndarray], max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale


def _adam_step(
    tensors: Dict[tuple, np.ndarray],
    grads: Dict[tuple, np.ndarray],
    state: AdamState,
    cfg: PpoConfig,
    lr: float,
) -> Dict[tuple, np.ndarray]:
    out = {}
    for key, theta in tensors.items():
        g = grads[key]
        m, v, t = state.moments.get(
            key, (np.zeros_like(theta), np.zeros_like(theta), 0)
        )
        t += 1
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * (g * g)
        m_hat = m / (1.0 - cfg.adam_beta1 ** t)
        v_hat = v / (1.0 - cfg.adam_beta2 ** t)
        out[key] = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        state.moments[key] = (m, v, t)
    return out


def _rebuild_params(params: PolicyParams, updated: Dict[tuple, np.ndarray]) -> PolicyParams:
    def pick(key, current):
        return updated.get(key, current)

    shared = tuple(
        (pick(("shared", i, "W"), w), pick(("shared", i, "b"), b))
        for i, (w, b) in enumerate(params.shared)
    )
    experts = {}
    for skill_id, expert in params.experts.items():
        hidden = tuple(
            (pick(("expert", skill_id, j, "W"), w),
             pick(("expert", skill_id, j, "b"), b))
            for j, (w, b) in enumerate(expert.hidden)
        )
        actor = (pick(("actor", skill_id, "W"), expert.actor[0]),
                 pick(("actor", skill_id, "b"), expert.actor[1]))
        critic = (pick(("critic", skill_id, "W"), expert.critic[0]),
                  pick(("critic", skill_id, "b"), expert.critic[1]))
        experts[skill_id] = Expert(hidden=hidden, actor=actor, critic=critic)
    return replace(params, experts=experts, shared=shared)


def ppo_update(
    params: PolicyParams,
    buffer: RolloutBuffer,
    cfg: PpoConfig,
    gae: GaeConfig = GaeConfig(),
    bootstrap: Optional[np.ndarray] = None,
    opt_state: Optional[AdamState] = None,
    lr_scale: float = 1.0,
    seed: int = 0,
) -> Tuple[PolicyParams, AdamState]:
    """Epochs of shuffled minibatch steps over the flattened buffer.

    Only experts whose segments appear in the buffer change; everything
    else, including their optimizer moments, stays bit-identical.
    """
    if opt_state is None:
        opt_state = AdamState()
    if buffer.n_steps == 0:
        return params, opt_state

    t_len, n_env = buffer.rewards.shape
    if bootstrap is None:
        bootstrap = np.zeros(n_env, dtype=np.float64)
    advantages, returns = compute_gae(buffer, gae, bootstrap)

    flat = {
        "obs": buffer.obs.reshape(-1, buffer.obs.shape[-1]),
        "skill_ids": buffer.skill_ids.reshape(-1),
        "actions": buffer.actions.reshape(-1),
        "log_probs": buffer.log_probs.reshape(-1),
        "advantages": advantages.reshape(-1),
        "returns": returns.reshape(-1),
    }
    n_total = flat["skill_ids"].shape[0]
    rng = np.random.default_rng([seed, n_total])
    lr = cfg.learning_rate * lr_scale

    current = params
    for _ in range(cfg.epochs):
        order = rng.permutation(n_total)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            batch = {key: arr[chunk] for key, arr in flat.items()}
            if cfg.normalize_advantages and chunk.size > 1:
                adv = batch["advantages"]
                batch["advantages"] = (adv - adv.mean()) / (adv.std() + 1e-8)
            loss, grads, _ = ppo_loss_and_grads(current, batch, cfg)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss!r} in ppo_update; aborting"
                )
            _clip_grads(grads, cfg.max_grad_norm)
            touched = {key: tensor for key, tensor in _iter_tensors(current)
                       if key in grads}
            updated = _adam_step(touched, grads, opt_state, cfg, lr)
            current = _rebuild_params(current, updated)
    current.validate()
    return current, opt_state


# --- persistence -------------------------------------------------------------------

_CONTAINER_VERSION = 1


def config_hash(config: NetConfig) -> str:
    payload = json.dumps(
        {
            "obs_dim": config.obs_dim,
            "n_actions": config.n_actions,
            "hidden": config.hidden,
            "n_shared": config.n_shared,
            "n_expert": config.n_expert,
            "dtype": config.dtype,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_params(path: str, params: PolicyParams) -> None:
    """Versioned binary container with an embedded config hash."""
    meta = {
        "version": _CONTAINER_VERSION,
        "hash": config_hash(params.config),
        "config": {
            "obs_dim": params.config.obs_dim,
            "n_actions": params.config.n_actions,
            "hidden": params.config.hidden,
            "n_shared": params.config.n_shared,
            "n_expert": params.config.n_expert,
            "dtype": params.config.dtype,
        },
        "seed": params.seed,
        "experts": sorted(params.experts),
    }
    arrays = {}
    for key, tensor in _iter_tensors(params):
        arrays["/".join(str(part) for part in key)] = tensor
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    with open(path, "wb") as handle:
        handle.write(buf.getvalue())


def load_params(path: str, expected: Optional[NetConfig] = None) -> PolicyParams:
    """Load a container; refuses silently incompatible files."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != _CONTAINER_VERSION:
            raise ValueError(f"unsupported container version {meta.get('version')}")
        config = NetConfig(**meta["config"])
        if meta["hash"] != config_hash(config):
            raise ValueError("container hash does not match its own config")
        if expected is not None and config_hash(expected) != meta["hash"]:
            raise ValueError(
                "config hash mismatch: expected "
                f"{config_hash(expected)[:12]}, file has {meta['hash'][:12]}"
            )
        params = init_params(config, meta["seed"])
        shared = tuple(
            (data[f"shared/{i}/W"], data[f"shared/{i}/b"])
            for i in range(config.n_shared)
        )
        experts = {}
        for skill_id in meta["experts"]:
            hidden = tuple(
                (data[f"expert/{skill_id}/{j}/W"], data[f"expert/{skill_id}/{j}/b"])
                for j in range(config.n_expert)
            )
            experts[skill_id] = Expert(
                hidden=hidden,
                actor=(data[f"actor/{skill_id}/W"], data[f"actor/{skill_id}/b"]),
                critic=(data[f"critic/{skill_id}/W"], data[f"critic/{skill_id}/b"]),
            )
    return replace(params, shared=shared, experts=experts)
