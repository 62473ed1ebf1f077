"""Curriculum orchestration: plan, train one skill at a time, refine.

The outer loop plans toward the goal, picks the first untrained skill in
plan order, and trains it with `train_skill`: prerequisite options run
to their gains, the environment state is checkpointed the first time the
target's preconditions hold, and episodes restart from that frontier
with probability alpha_reset.  Updates are joint - every expert whose
segments appear in a rollout gets gradients, so prerequisite policies
keep learning while the target trains.  Successful target episodes feed
count refinement; a refinement that changes the operator aborts the
skill, swaps the revised document into the library, and restarts it with
a fresh expert head.  A monolithic PPO baseline shares the environment
batch and budget accounting for comparison runs.
"""

import collections
import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import (
    Deque,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .abstraction import (
    HAS,
    AbstractState,
    Key,
    VocabularySpec,
    abstract_state,
    entails,
)
from .minicraft import (
    OFFSET_BLOCKS,
    EnvState,
    RecipeConfig,
    default_config,
    observe,
    reset,
    restore,
    serialize,
    step,
)
from .operators import Operator, SkillLibrary, SkillStatus
from .planner import Goal, NoPlanError, Plan, plan, prerequisite_plan
from .policy import (
    AdamState,
    GaeConfig,
    NetConfig,
    PolicyParams,
    PpoConfig,
    RolloutBuffer,
    allocate_expert,
    encode_batch,
    encode_observation,
    forward_batch,
    init_params,
    ppo_update,
    save_params,
)
from .refine import (
    Refinement,
    Trajectory,
    TrajectoryRecorder,
    failure_refine,
    llm_refine,
    mechanical_refine,
    write_trajectory_log,
)

# Training episode seeds stay below this bound; evaluation seeds start at it.
_EVAL_SEED_BASE = 1 << 31

_OFFSET_ROW = {block.name.lower(): i for i, block in enumerate(OFFSET_BLOCKS)}

_BASELINE_ID = 0


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the curriculum loop and per-skill training."""

    total_frames: int = 2_000_000
    alpha_reset: float = 0.9
    alpha_grad: float = 0.30
    goal_threshold: float = 0.99
    skill_frame_fraction: float = 0.10
    analysis_k: int = 10
    failure_trigger: float = 0.02
    eval_episodes: int = 256
    success_window: int = 200
    min_graduation_episodes: int = 50
    option_step_cap: int = 300
    n_envs: int = 8
    horizon: int = 128
    refine: bool = True
    backend: str = "mechanical"

    def __post_init__(self):
        if self.total_frames < 0:
            raise ValueError("total_frames must be >= 0")
        if not 0.0 <= self.alpha_reset <= 1.0:
            raise ValueError("alpha_reset must be in [0, 1]")
        for name in ("alpha_grad", "goal_threshold", "skill_frame_fraction",
                     "failure_trigger"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")
        for name in ("analysis_k", "eval_episodes", "success_window",
                     "min_graduation_episodes", "option_step_cap", "n_envs",
                     "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backend not in ("mechanical", "llm"):
            raise ValueError("backend must be mechanical or llm")

    @property
    def skill_budget(self) -> int:
        return int(self.total_frames * self.skill_frame_fraction)


@dataclass
class SkillRunState:
    """Mutable bookkeeping for one train_skill call."""

    name: str
    checkpoints: List[Optional[bytes]]
    window: Deque[bool]
    prereq_window: Deque[bool]
    verified: bool = False
    frames: int = 0
    target_frames: int = 0
    prereq_frames: int = 0
    prereq_units: int = 0
    episodes: int = 0
    restores: int = 0
    refinements: int = 0
    successes: List[Trajectory] = field(default_factory=list)
    failures: Deque[Trajectory] = field(default_factory=lambda: collections.deque(maxlen=16))
    failed_options: Deque[str] = field(default_factory=lambda: collections.deque(maxlen=64))
    count_analysis_done: bool = False
    failure_analysis_done: bool = False

    def success_rate(self) -> float:
        if not self.window:
            return 0.0
        return sum(self.window) / len(self.window)

    def prereq_rate(self) -> float:
        if not self.prereq_window:
            return 1.0
        return sum(self.prereq_window) / len(self.prereq_window)

    def target_fraction(self) -> float:
        return self.target_frames / max(1, self.frames)


@dataclass
class SkillOutcome:
    kind: str                      # graduated | refine | budget | prereq_regression
    state: SkillRunState
    revised: Optional[Operator] = None
    refinement: Optional[Refinement] = None
    failing_prereq: Optional[str] = None


@dataclass(frozen=True)
class EvalReport:
    """Success statistics over fresh evaluation seeds."""

    n_episodes: int
    successes: int
    first_failures: Mapping[str, int]

    @property
    def rate(self) -> float:
        return self.successes / max(1, self.n_episodes)

    @property
    def stderr(self) -> float:
        p = self.rate
        return float(np.sqrt(p * (1.0 - p) / max(1, self.n_episodes)))


@dataclass
class CurriculumResult:
    library: SkillLibrary
    params: PolicyParams
    opt_state: AdamState
    trained: bool
    frames: int
    events: List[dict]
    metrics: List[dict]
    eval_report: Optional[EvalReport]
    report: dict


@dataclass
class BaselineResult:
    params: PolicyParams
    frames: int
    metrics: List[dict]
    eval_report: EvalReport


class MetricsWriter:
    """Append-only metrics stream; rows are kept in memory and optionally
    mirrored to a CSV file."""

    COLUMNS = ("frames", "skill", "train_success", "eval_success",
               "target_frame_fraction", "restores", "refinements")

    def __init__(self, path: Optional[str] = None):
        self.rows: List[dict] = []
        self._handle = None
        self._writer = None
        if path is not None:
            self._handle = open(path, "w", encoding="utf-8", newline="")
            self._writer = csv.writer(self._handle)
            self._writer.writerow(self.COLUMNS)

    def row(self, frames: int, skill: str, train_success: float,
            eval_success: Optional[float], target_frame_fraction: float,
            restores: int, refinements: int) -> None:
        entry = {
            "frames": int(frames),
            "skill": skill,
            "train_success": round(float(train_success), 6),
            "eval_success": None if eval_success is None else round(float(eval_success), 6),
            "target_frame_fraction": round(float(target_frame_fraction), 6),
            "restores": int(restores),
            "refinements": int(refinements),
        }
        self.rows.append(entry)
        if self._writer is not None:
            self._writer.writerow([
                entry["frames"], entry["skill"],
                f"{entry['train_success']:.6f}",
                "" if entry["eval_success"] is None else f"{entry['eval_success']:.6f}",
                f"{entry['target_frame_fraction']:.6f}",
                entry["restores"], entry["refinements"],
            ])

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            self._writer = None


# ---------------------------------------------------------------------------
# reward and option views


@dataclass(frozen=True)
class _OptionView:
    """Cached per-operator facts the rollout loop needs every step."""

    name: str
    skill_id: int
    primary: Key
    sparse_subject: Optional[str]   # inventory item when primary is a has: fact
    sparse_need: int
    dense_row: Optional[int]
    dense_coef: float
    pre_demand: Dict[Key, int]


def _primary_gain_key(op: Operator) -> Key:
    if op.reward is not None:
        return op.reward.sparse_gain_key
    return sorted(op.gain)[0]


def _option_view(op: Operator, skill_id: int) -> _OptionView:
    primary = _primary_gain_key(op)
    sparse_subject = primary[1] if primary[0] == HAS else None
    sparse_need = max(1, op.gain[primary].at(1)) if primary in op.gain else 1
    dense_row = None
    dense_coef = 0.0
    if op.reward is not None and op.reward.dense_target is not None:
        dense_row = _OFFSET_ROW.get(op.reward.dense_target)
        dense_coef = op.reward.dense_coefficient
    pre = {k: e.at(1) for k, e in op.requirements.items() if e.at(1) > 0}
    return _OptionView(op.name, skill_id, primary, sparse_subject,
                       sparse_need, dense_row, dense_coef, pre)


def _dense_distance(obs, row: Optional[int]) -> Optional[int]:
    if row is None:
        return None
    dr, dc = int(obs.offsets[row, 0]), int(obs.offsets[row, 1])
    if dr == 30 and dc == 30:   # absent sentinel
        return None
    return abs(dr) + abs(dc)


def _flatten_plan(p: Plan) -> List[str]:
    names: List[str] = []
    for s in p.steps:
        names.extend([s.op_name] * s.multiplicity)
    return names


class _Slot:
    """One parallel environment and its place in the episode state machine."""

    __slots__ = ("idx", "env", "obs", "z", "seed", "queue", "qpos",
                 "opt_steps", "opt_base", "in_target", "recorder",
                 "prev_dist", "reached_pre", "episode")

    def __init__(self, idx: int):
        self.idx = idx
        self.env: Optional[EnvState] = None
        self.obs = None
        self.z: Optional[AbstractState] = None
        self.seed = 0
        self.queue: List[str] = []
        self.qpos = 0
        self.opt_steps = 0
        self.opt_base = 0
        self.in_target = False
        self.recorder: Optional[TrajectoryRecorder] = None
        self.prev_dist: Optional[int] = None
        self.reached_pre = False
        self.episode = 0

    def current_option(self, target: str) -> str:
        return target if self.in_target else self.queue[self.qpos]


# ---------------------------------------------------------------------------
# the run context


class _Run:
    """Shared mutable state for one training run (curriculum or baseline)."""

    def __init__(
        self,
        library: SkillLibrary,
        cfg: TrainConfig,
        net: NetConfig,
        gae: GaeConfig,
        ppo: PpoConfig,
        recipe: RecipeConfig,
        vocab: VocabularySpec,
        seed: int,
        params: Optional[PolicyParams] = None,
        opt_state: Optional[AdamState] = None,
        metrics: Optional[MetricsWriter] = None,
        out_dir: Optional[str] = None,
    ):
        self.library = library
        self.cfg = cfg
        self.net = net
        self.gae = gae
        self.ppo = ppo
        self.recipe = recipe
        self.vocab = vocab
        self.seed = seed
        self.params = params if params is not None else init_params(net, seed)
        self.opt_state = opt_state if opt_state is not None else AdamState()
        self.metrics = metrics if metrics is not None else MetricsWriter()
        self.out_dir = out_dir
        self.frames = 0
        self.last_eval: Optional[float] = None
        self.skill_ids: Dict[str, int] = {
            op.name: i + 1 for i, op in enumerate(library.operators())
        }
        self._seed_rng = np.random.default_rng([seed, 0x5EED5])
        self._restore_rng = np.random.default_rng([seed, 0xF0A7])
        self._action_rng = np.random.default_rng([seed, 0xAC710])
        self._update_count = 0

    def next_train_seed(self) -> int:
        return int(self._seed_rng.integers(0, _EVAL_SEED_BASE))

    def sample_action(self, probs: np.ndarray) -> int:
        u = float(self._action_rng.random())
        idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        return min(idx, len(probs) - 1)

    def restore_roll(self) -> bool:
        return float(self._restore_rng.random()) < self.cfg.alpha_reset

    def ensure_expert(self, skill_id: int) -> None:
        if skill_id not in self.params.experts:
            self.params = allocate_expert(self.params, skill_id)

    def drop_expert(self, skill_id: int) -> None:
        """Reinitialize one expert head: new (deterministic) weights and
        cleared optimizer moments; backbone and siblings untouched."""
        experts = dict(self.params.experts)
        experts.pop(skill_id, None)
        self.params = dataclasses.replace(self.params, experts=experts)
        for key in [k for k in self.opt_state.moments if len(k) >= 2 and k[1] == skill_id
                    and k[0] in ("expert", "actor", "critic")]:
            del self.opt_state.moments[key]
        self.ensure_expert(skill_id)

    def update(self, buffer: RolloutBuffer, bootstrap: np.ndarray) -> None:
        self._update_count += 1
        self.params, self.opt_state = ppo_update(
            self.params, buffer, self.ppo, self.gae,
            bootstrap=bootstrap, opt_state=self.opt_state,
            seed=self.seed + self._update_count,
        )

    def write_artifact(self, name: str, text: str) -> None:
        if self.out_dir is not None:
            with open(os.path.join(self.out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(text)

    def write_trajectories(self, skill: str, tag: str, trajectories: Sequence[Trajectory]) -> None:
        if self.out_dir is not None and trajectories:
            folder = os.path.join(self.out_dir, "trajectories")
            os.makedirs(folder, exist_ok=True)
            write_trajectory_log(os.path.join(folder, f"{skill}_{tag}.jsonl"), trajectories)


# ---------------------------------------------------------------------------
# train one skill


def _refine_with_backend(cfg: TrainConfig, op: Operator, trajectories: Sequence[Trajectory]) -> Refinement:
    if cfg.backend == "llm":
        return llm_refine(op, trajectories)
    return mechanical_refine(op, trajectories)


def train_skill(run: _Run, target_name: str, is_goal: bool = False) -> SkillOutcome:
    """Train one skill to its graduation threshold.

    Prerequisite options execute in plan order until the target's
    preconditions hold (checkpointing that state), then the target runs
    to its gain or the option step cap.  Episode ends restore the
    frontier with probability alpha_reset.  Returns early with a revised
    operator when trajectory analysis changes the document.
    """
    cfg = run.cfg
    lib = run.library
    target = lib.get(target_name)
    sid = run.skill_ids[target_name]
    run.ensure_expert(sid)

    active = lib.active()
    prereq = prerequisite_plan(active, target, AbstractState(), run.vocab)
    queue_template = _flatten_plan(prereq)
    for name in dict.fromkeys(queue_template):
        if lib.status(name) is not SkillStatus.TRAINED:
            raise RuntimeError(
                f"schedule violation: {target_name} needs untrained {name}"
            )
    views = {target_name: _option_view(target, sid)}
    for name in queue_template:
        if name not in views:
            views[name] = _option_view(lib.get(name), run.skill_ids[name])
        run.ensure_expert(run.skill_ids[name])

    st = SkillRunState(
        name=target_name,
        checkpoints=[None] * cfg.n_envs,
        window=collections.deque(maxlen=cfg.success_window),
        prereq_window=collections.deque(maxlen=cfg.success_window),
        failures=collections.deque(maxlen=max(cfg.analysis_k, 4)),
    )
    target_view = views[target_name]
    threshold = cfg.goal_threshold if is_goal else cfg.alpha_grad

    slots = [_Slot(i) for i in range(cfg.n_envs)]
    for slot in slots:
        _fresh_episode(run, st, slot, queue_template, target_view)

    obs_dim = run.net.obs_dim
    while True:
        if run.frames >= cfg.total_frames or st.frames >= cfg.skill_budget:
            return SkillOutcome("budget", st)

        horizon, n = cfg.horizon, cfg.n_envs
        b_obs = np.zeros((horizon, n, obs_dim), dtype=np.float32)
        b_sid = np.zeros((horizon, n), dtype=np.int32)
        b_act = np.zeros((horizon, n), dtype=np.int32)
        b_logp = np.zeros((horizon, n), dtype=np.float32)
        b_val = np.zeros((horizon, n), dtype=np.float32)
        b_rew = np.zeros((horizon, n), dtype=np.float32)
        b_done = np.zeros((horizon, n), dtype=bool)
        b_bound = np.zeros((horizon, n), dtype=bool)

        for t in range(horizon):
            x = encode_batch([slot.obs for slot in slots])
            probs = np.zeros((n, run.net.n_actions), dtype=np.float64)
            values = np.zeros(n, dtype=np.float64)
            groups: Dict[int, List[int]] = {}
            for i, slot in enumerate(slots):
                groups.setdefault(views[slot.current_option(target_name)].skill_id, []).append(i)
            for gsid, idxs in groups.items():
                p, v = forward_batch(run.params, x[idxs], gsid)
                probs[idxs] = p
                values[idxs] = v
            for i, slot in enumerate(slots):
                view = views[slot.current_option(target_name)]
                action = run.sample_action(probs[i])
                env_next, obs_next, info = step(slot.env, action)
                z_next = abstract_state(env_next, run.vocab)
                reward, inc = _option_reward(slot, view, env_next, obs_next, z_next)
                run.frames += 1
                st.frames += 1
                if slot.in_target:
                    st.target_frames += 1
                    slot.recorder.observe(action, z_next, blocked=info["blocked"])
                else:
                    st.prereq_frames += 1
                    st.prereq_units += max(0, inc)
                slot.opt_steps += 1

                b_obs[t, i] = x[i]
                b_sid[t, i] = view.skill_id
                b_act[t, i] = action
                b_logp[t, i] = np.log(max(probs[i, action], 1e-30))
                b_val[t, i] = values[i]
                b_rew[t, i] = reward

                done, _, boundary = _advance_slot(
                    run, st, slot, view, target_view, env_next, obs_next,
                    z_next, info, inc, queue_template,
                )
                b_done[t, i] = done
                b_bound[t, i] = boundary or done

        bootstrap = np.zeros(n, dtype=np.float64)
        x = encode_batch([slot.obs for slot in slots])
        groups = {}
        for i, slot in enumerate(slots):
            groups.setdefault(views[slot.current_option(target_name)].skill_id, []).append(i)
        for gsid, idxs in groups.items():
            _, v = forward_batch(run.params, x[idxs], gsid)
            bootstrap[idxs] = v

        buffer = RolloutBuffer(
            obs=b_obs, skill_ids=b_sid, actions=b_act, log_probs=b_logp,
            values=b_val, rewards=b_rew, dones=b_done, boundaries=b_bound,
        )
        run.update(buffer, bootstrap)

        run.metrics.row(
            frames=run.frames, skill=target_name,
            train_success=st.success_rate(), eval_success=run.last_eval,
            target_frame_fraction=st.target_fraction(),
            restores=st.restores, refinements=st.refinements,
        )

        if cfg.refine and not st.count_analysis_done and len(st.successes) >= cfg.analysis_k:
            refinement = _refine_with_backend(cfg, target, st.successes[: cfg.analysis_k])
            run.write_trajectories(target_name, f"analysis{st.refinements}", st.successes[: cfg.analysis_k])
            if refinement.changed:
                st.refinements += 1
                return SkillOutcome("refine", st, revised=refinement.apply(target),
                                    refinement=refinement)
            st.count_analysis_done = True
        if (cfg.refine and not st.failure_analysis_done
                and len(st.window) == cfg.success_window
                and st.success_rate() < cfg.failure_trigger and st.failures):
            refinement = failure_refine(target, list(st.failures), lib.operators())
            run.write_trajectories(target_name, f"failures{st.refinements}", list(st.failures))
            if refinement.changed:
                st.refinements += 1
                return SkillOutcome("refine", st, revised=refinement.apply(target),
                                    refinement=refinement)
            st.failure_analysis_done = True
        if (queue_template and len(st.prereq_window) == cfg.success_window
                and st.prereq_rate() < cfg.failure_trigger):
            modal = collections.Counter(st.failed_options).most_common(1)
            return SkillOutcome("prereq_regression", st,
                                failing_prereq=modal[0][0] if modal else None)
        if (len(st.window) >= cfg.min_graduation_episodes
                and st.success_rate() >= threshold):
            return SkillOutcome("graduated", st)


def _option_reward(slot: _Slot, view: _OptionView, env_next: EnvState,
                   obs_next, z_next: AbstractState) -> Tuple[float, int]:
    """Sparse per-unit gain plus potential-based distance shaping."""
    if view.sparse_subject is not None:
        inc = env_next.inventory_count(view.sparse_subject) - slot.env.inventory_count(view.sparse_subject)
    else:
        inc = z_next.count(view.primary) - slot.z.count(view.primary)
    reward = float(max(0, inc))
    d_new = _dense_distance(obs_next, view.dense_row)
    if inc <= 0 and view.dense_row is not None:
        if slot.prev_dist is not None and d_new is not None:
            reward += view.dense_coef * (slot.prev_dist - d_new)
    slot.prev_dist = d_new
    return reward, inc


def _option_met(slot: _Slot, view: _OptionView, env_next: EnvState,
                z_next: AbstractState) -> bool:
    """The option's declared gain is on hand for this application."""
    if view.sparse_subject is not None:
        return (env_next.inventory_count(view.sparse_subject) - slot.opt_base
                >= view.sparse_need)
    return z_next.count(view.primary) >= 1


def _advance_slot(
    run: _Run,
    st: SkillRunState,
    slot: _Slot,
    view: _OptionView,
    target_view: _OptionView,
    env_next: EnvState,
    obs_next,
    z_next: AbstractState,
    info: dict,
    inc: int,
    queue_template: List[str],
) -> Tuple[bool, bool, bool]:
    """Move one slot through option/episode transitions.

    Returns (done, success, boundary) flags for the step just taken.
    """
    cfg = run.cfg
    option_met = _option_met(slot, view, env_next, z_next)
    slot.env, slot.obs, slot.z = env_next, obs_next, z_next
    boundary = False

    if slot.in_target:
        if option_met:
            _end_episode(run, st, slot, queue_template, target_view, success=True)
            return True, True, True
        if info["done"] or slot.opt_steps >= cfg.option_step_cap:
            _end_episode(run, st, slot, queue_template, target_view, success=False)
            return True, False, True
        return False, False, False

    # prerequisite phase
    if option_met:
        boundary = True
        slot.qpos += 1
        slot.opt_steps = 0
        slot.prev_dist = None
        if slot.qpos < len(slot.queue):
            nxt = slot.queue[slot.qpos]
            subject = _view_subject(run, nxt)
            slot.opt_base = env_next.inventory_count(subject) if subject else 0
    if entails(z_next, target_view.pre_demand):
        _enter_target(run, st, slot, target_view, checkpoint=True)
        return False, False, True
    if info["done"] or (not option_met and slot.opt_steps >= cfg.option_step_cap) \
            or slot.qpos >= len(slot.queue):
        st.failed_options.append(view.name)
        _end_episode(run, st, slot, queue_template, target_view, success=False,
                     prereq_failure=True)
        return True, False, True
    return False, False, boundary


def _view_subject(run: _Run, name: str) -> Optional[str]:
    primary = _primary_gain_key(run.library.get(name))
    return primary[1] if primary[0] == HAS else None


def _enter_target(run: _Run, st: SkillRunState, slot: _Slot,
                  target_view: _OptionView, checkpoint: bool) -> None:
    slot.in_target = True
    slot.opt_steps = 0
    slot.prev_dist = None
    slot.opt_base = (
        slot.env.inventory_count(target_view.sparse_subject)
        if target_view.sparse_subject else 0
    )
    slot.recorder = TrajectoryRecorder(st.name, slot.z, episode=st.episodes, seed=slot.seed)
    if checkpoint:
        # fresh episodes refresh the frontier; restores reuse the old bytes
        st.checkpoints[slot.idx] = serialize(slot.env)
        st.verified = True
        st.prereq_window.append(True)


def _end_episode(run: _Run, st: SkillRunState, slot: _Slot,
                 queue_template: List[str], target_view: _OptionView,
                 success: bool, prereq_failure: bool = False) -> None:
    st.episodes += 1
    st.window.append(success)
    if prereq_failure:
        st.prereq_window.append(False)
    if slot.recorder is not None:
        trajectory = slot.recorder.finish(
            success, terminal_intrinsics=slot.env.intrinsics
        )
        if success:
            if len(st.successes) < run.cfg.analysis_k:
                st.successes.append(trajectory)
        else:
            st.failures.append(trajectory)
        slot.recorder = None

    checkpoint = st.checkpoints[slot.idx]
    if checkpoint is not None and run.restore_roll():
        env = restore(checkpoint)
        z = abstract_state(env, run.vocab)
        if not entails(z, target_view.pre_demand):
            raise RuntimeError(
                f"frontier checkpoint for {st.name} no longer entails its preconditions"
            )
        st.restores += 1
        slot.env, slot.obs, slot.z = env, observe(env), z
        slot.queue = []
        slot.qpos = 0
        _enter_target(run, st, slot, target_view, checkpoint=False)
    else:
        _fresh_episode(run, st, slot, queue_template, target_view)


def _fresh_episode(run: _Run, st: SkillRunState, slot: _Slot,
                   queue_template: List[str], target_view: _OptionView) -> None:
    slot.seed = run.next_train_seed()
    env, obs = reset(slot.seed, run.recipe)
    slot.env, slot.obs = env, obs
    slot.z = abstract_state(env, run.vocab)
    slot.queue = list(queue_template)
    slot.qpos = 0
    slot.opt_steps = 0
    slot.in_target = False
    slot.recorder = None
    slot.prev_dist = None
    if entails(slot.z, target_view.pre_demand):
        _enter_target(run, st, slot, target_view, checkpoint=True)
    elif slot.queue:
        subject = _view_subject(run, slot.queue[0])
        slot.opt_base = env.inventory_count(subject) if subject else 0
    else:
        # nothing to run and preconditions unmet: impossible plan
        raise RuntimeError(f"empty prerequisite plan cannot reach Pre({st.name})")


# ---------------------------------------------------------------------------
# curriculum


def _plan_order(p: Plan) -> List[str]:
    return list(dict.fromkeys(s.op_name for s in p.steps))


def run_curriculum(
    library: Union[SkillLibrary, Sequence[Operator]],
    goal: Union[Goal, Mapping],
    cfg: TrainConfig,
    *,
    net: NetConfig = NetConfig(),
    gae: GaeConfig = GaeConfig(),
    ppo: PpoConfig = PpoConfig(),
    recipe: Optional[RecipeConfig] = None,
    vocab: VocabularySpec,
    seed: int = 0,
    params: Optional[PolicyParams] = None,
    opt_state: Optional[AdamState] = None,
    out_dir: Optional[str] = None,
    evaluate_result: bool = True,
) -> CurriculumResult:
    """Plan toward the goal and train skills in dependency order.

    Prerequisite policies are shared state: their experts keep receiving
    joint updates while later skills train, so merging updated policies
    back is implicit.  Refinement restarts swap the revised operator into
    the library and reinitialize only the target's expert head.
    """
    if not isinstance(library, SkillLibrary):
        library = SkillLibrary(library)
    goal = goal if isinstance(goal, Goal) else Goal.of(goal)
    recipe = recipe if recipe is not None else default_config()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsWriter(
        None if out_dir is None else os.path.join(out_dir, "metrics.csv")
    )
    run = _Run(library, cfg, net, gae, ppo, recipe, vocab, seed,
               params=params, opt_state=opt_state, metrics=metrics,
               out_dir=out_dir)
    from .operators import serialize_manifest   # local to avoid cycle noise
    run.write_artifact("manifest_initial.yaml", serialize_manifest(library.operators()))

    events: List[dict] = []
    trained = False
    failure: Optional[str] = None
    regressions = 0
    while True:
        if run.frames >= cfg.total_frames:
            failure = "total frame budget exhausted"
            break
        try:
            goal_plan = plan(library.active(), AbstractState(), goal, run.vocab)
        except NoPlanError as exc:
            failure = f"unsolvable: {exc}"
            break
        order = _plan_order(goal_plan)
        if not order:
            trained = True
            break
        target = next((n for n in order if library.status(n) is not SkillStatus.TRAINED), None)
        if target is None:
            trained = True
            break
        outcome = train_skill(run, target, is_goal=(target == order[-1]))
        events.append({
            "event": outcome.kind,
            "skill": target,
            "frames": run.frames,
            "skill_frames": outcome.state.frames,
            "episodes": outcome.state.episodes,
            "restores": outcome.state.restores,
            "train_success": round(outcome.state.success_rate(), 6),
            "target_frame_fraction": round(outcome.state.target_fraction(), 6),
            "prereq_frames": outcome.state.prereq_frames,
            "prereq_units": outcome.state.prereq_units,
            "evidence": outcome.refinement.evidence if outcome.refinement else None,
            "failing_prereq": outcome.failing_prereq,
        })
        if outcome.kind == "graduated":
            library.mark(target, SkillStatus.TRAINED)
        elif outcome.kind == "refine":
            library.replace(outcome.revised)
            run.drop_expert(run.skill_ids[target])
            run.write_artifact(
                f"manifest_refined_{len(events)}.yaml",
                serialize_manifest(library.operators()),
            )
        elif outcome.kind == "prereq_regression":
            regressions += 1
            if outcome.failing_prereq is None or regressions > 2 * len(run.skill_ids):
                failure = f"persistent prerequisite failure while training {target}"
                break
            library.mark(outcome.failing_prereq, SkillStatus.UNTRAINED)
        else:   # budget
            failure = f"skill {target} exhausted its frame budget"
            break

    eval_report = None
    if evaluate_result and cfg.total_frames > 0:
        eval_report = evaluate(library, run.params, goal, cfg, recipe=recipe,
                               vocab=vocab, skill_ids=run.skill_ids, seed=seed)
        run.last_eval = eval_report.rate
        run.metrics.row(
            frames=run.frames, skill="(final)",
            train_success=0.0 if not events else events[-1]["train_success"],
            eval_success=eval_report.rate, target_frame_fraction=0.0,
            restores=0, refinements=0,
        )

    report = {
        "trained": trained,
        "failure": failure,
        "frames": run.frames,
        "events": events,
        "skills": {
            name: library.status(name).value for name in run.skill_ids
        },
        "prereq_frames": sum(e["prereq_frames"] for e in events),
        "prereq_units": sum(e["prereq_units"] for e in events),
        "refinements": sum(1 for e in events if e["event"] == "refine"),
        "eval_success": None if eval_report is None else eval_report.rate,
    }
    if out_dir is not None:
        run.write_artifact("report.json", json.dumps(report, indent=2))
        run.write_artifact("manifest_final.yaml", serialize_manifest(library.operators()))
        save_params(os.path.join(out_dir, "params.npz"), run.params)
    metrics.close()
    return CurriculumResult(
        library=library, params=run.params, opt_state=run.opt_state,
        trained=trained, frames=run.frames, events=events,
        metrics=metrics.rows, eval_report=eval_report, report=report,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    library: SkillLibrary,
    params: PolicyParams,
    goal: Union[Goal, Mapping],
    cfg: TrainConfig,
    *,
    recipe: RecipeConfig,
    vocab: VocabularySpec,
    skill_ids: Optional[Dict[str, int]] = None,
    seed: int = 0,
    n_episodes: Optional[int] = None,
    record_failures: bool = False,
) -> EvalReport:
    """Success rate over fresh seeds, executing the goal plan's options.

    Evaluation seeds sit in a range training never draws from.  The same
    config and seed always replay the same episodes.
    """
    goal = goal if isinstance(goal, Goal) else Goal.of(goal)
    demand = goal.demand()
    if skill_ids is None:
        skill_ids = {op.name: i + 1 for i, op in enumerate(library.operators())}
    n_episodes = n_episodes if n_episodes is not None else cfg.eval_episodes
    try:
        goal_plan = plan(library.active(), AbstractState(), goal, vocab)
    except NoPlanError:
        return EvalReport(n_episodes, 0, {})
    queue = _flatten_plan(goal_plan)
    views = {}
    local = params
    for name in dict.fromkeys(queue):
        views[name] = _option_view(library.get(name), skill_ids[name])
        if skill_ids[name] not in local.experts:
            local = allocate_expert(local, skill_ids[name])

    successes = 0
    first_failures: collections.Counter = collections.Counter()
    for episode in range(n_episodes):
        rng = np.random.default_rng([seed, 0xEBA1, episode])
        env, obs = reset(_EVAL_SEED_BASE + episode, recipe)
        z = abstract_state(env, vocab)
        ok = entails(z, demand)
        for name in queue:
            if ok:
                break
            view = views[name]
            base = env.inventory_count(view.sparse_subject) if view.sparse_subject else 0
            met = False
            for _ in range(cfg.option_step_cap):
                x = encode_observation(obs)
                probs, _ = forward_batch(local, x.reshape(1, -1), view.skill_id)
                u = float(rng.random())
                action = min(int(np.searchsorted(np.cumsum(probs[0]), u, side="right")),
                             len(probs[0]) - 1)
                env, obs, _ = step(env, action)
                z = abstract_state(env, vocab)
                if entails(z, demand):
                    ok = True
                    break
                if view.sparse_subject is not None:
                    met = env.inventory_count(view.sparse_subject) - base >= view.sparse_need
                else:
                    met = z.count(view.primary) >= 1
                if met or env.done:
                    break
            if not ok and (not met or env.done):
                if record_failures:
                    first_failures[name] += 1
                break
        if ok:
            successes += 1
    return EvalReport(n_episodes, successes, dict(first_failures))


# ---------------------------------------------------------------------------
# monolithic baseline


def run_baseline(
    goal: Union[Goal, Mapping],
    cfg: TrainConfig,
    *,
    net: NetConfig = NetConfig(),
    gae: GaeConfig = GaeConfig(),
    ppo: PpoConfig = PpoConfig(),
    recipe: Optional[RecipeConfig] = None,
    vocab: VocabularySpec,
    seed: int = 0,
    out_dir: Optional[str] = None,
) -> BaselineResult:
    """Monolithic PPO: one expert, reward for every first-time achievement.

    Same frame budget, environment batch, and evaluation protocol as the
    curriculum, with no planner, options, or checkpoints.
    """
    goal = goal if isinstance(goal, Goal) else Goal.of(goal)
    demand = goal.demand()
    recipe = recipe if recipe is not None else default_config()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    metrics = MetricsWriter(
        None if out_dir is None else os.path.join(out_dir, "metrics.csv")
    )
    params = allocate_expert(init_params(net, seed), _BASELINE_ID)
    opt_state = AdamState()
    seed_rng = np.random.default_rng([seed, 0x5EED5])
    action_rng = np.random.default_rng([seed, 0xAC710])
    window: Deque[bool] = collections.deque(maxlen=cfg.success_window)

    envs: List[EnvState] = []
    observations = []
    reached = []
    for _ in range(cfg.n_envs):
        env, obs = reset(int(seed_rng.integers(0, _EVAL_SEED_BASE)), recipe)
        envs.append(env)
        observations.append(obs)
        reached.append(False)

    frames = 0
    update_count = 0
    obs_dim = net.obs_dim
    while frames < cfg.total_frames:
        horizon, n = cfg.horizon, cfg.n_envs
        b_obs = np.zeros((horizon, n, obs_dim), dtype=np.float32)
        b_act = np.zeros((horizon, n), dtype=np.int32)
        b_logp = np.zeros((horizon, n), dtype=np.float32)
        b_val = np.zeros((horizon, n), dtype=np.float32)
        b_rew = np.zeros((horizon, n), dtype=np.float32)
        b_done = np.zeros((horizon, n), dtype=bool)
        for t in range(horizon):
            x = encode_batch(observations)
            probs, values = forward_batch(params, x, _BASELINE_ID)
            for i in range(n):
                u = float(action_rng.random())
                action = min(int(np.searchsorted(np.cumsum(probs[i]), u, side="right")),
                             net.n_actions - 1)
                env, obs, info = step(envs[i], action)
                frames += 1
                b_obs[t, i] = x[i]
                b_act[t, i] = action
                b_logp[t, i] = np.log(max(probs[i, action], 1e-30))
                b_val[t, i] = values[i]
                b_rew[t, i] = float(len(info["unlocked"]))
                if not reached[i] and entails(abstract_state(env, vocab), demand):
                    reached[i] = True
                if info["done"]:
                    b_done[t, i] = True
                    window.append(reached[i])
                    env, obs = reset(int(seed_rng.integers(0, _EVAL_SEED_BASE)), recipe)
                    reached[i] = False
                envs[i], observations[i] = env, obs
        x = encode_batch(observations)
        _, bootstrap = forward_batch(params, x, _BASELINE_ID)
        buffer = RolloutBuffer(
            obs=b_obs,
            skill_ids=np.full((horizon, n), _BASELINE_ID, dtype=np.int32),
            actions=b_act, log_probs=b_logp, values=b_val, rewards=b_rew,
            dones=b_done, boundaries=b_done.copy(),
        )
        update_count += 1
        params, opt_state = ppo_update(params, buffer, ppo, gae,
                                       bootstrap=bootstrap, opt_state=opt_state,
                                       seed=seed + update_count)
        metrics.row(frames=frames, skill="baseline",
                    train_success=(sum(window) / len(window)) if window else 0.0,
                    eval_success=None, target_frame_fraction=1.0,
                    restores=0, refinements=0)

    eval_report = _baseline_eval(params, demand, cfg, recipe, vocab, seed)
    metrics.row(frames=frames, skill="baseline", train_success=0.0,
                eval_success=eval_report.rate, target_frame_fraction=1.0,
                restores=0, refinements=0)
    metrics.close()
    return BaselineResult(params=params, frames=frames, metrics=metrics.rows,
                          eval_report=eval_report)


def _baseline_eval(params, demand, cfg, recipe, vocab, seed) -> EvalReport:
    successes = 0
    for episode in range(cfg.eval_episodes):
        rng = np.random.default_rng([seed, 0xEBA1, episode])
        env, obs = reset(_EVAL_SEED_BASE + episode, recipe)
        ok = False
        while not env.done and not ok:
            x = encode_observation(obs)
            probs, _ = forward_batch(params, x.reshape(1, -1), _BASELINE_ID)
            u = float(rng.random())
            action = min(int(np.searchsorted(np.cumsum(probs[0]), u, side="right")),
                         len(probs[0]) - 1)
            env, obs, _ = step(env, action)
            if entails(abstract_state(env, vocab), demand):
                ok = True
        if ok:
            successes += 1
    return EvalReport(cfg.eval_episodes, successes, {})


# ---------------------------------------------------------------------------
# recipe-shift continuation


@dataclass
class ShiftReport:
    post_shift: EvalReport
    retrained: Optional[str]
    continuation: CurriculumResult

    @property
    def recovered_rate(self) -> float:
        report = self.continuation.eval_report
        return 0.0 if report is None else report.rate


def clone_library(library: SkillLibrary) -> SkillLibrary:
    copy = SkillLibrary()
    for op in library.operators():
        copy.add(op, library.status(op.name))
    return copy


def continue_after_shift(
    library: SkillLibrary,
    params: PolicyParams,
    opt_state: AdamState,
    goal: Union[Goal, Mapping],
    cfg: TrainConfig,
    *,
    shifted_recipe: RecipeConfig,
    net: NetConfig = NetConfig(),
    gae: GaeConfig = GaeConfig(),
    ppo: PpoConfig = PpoConfig(),
    vocab: VocabularySpec,
    seed: int = 0,
    out_dir: Optional[str] = None,
) -> ShiftReport:
    """Hot-swap the recipe book and keep training where success collapsed.

    Post-shift evaluation names the option that now fails first; that
    skill is marked untrained and the curriculum resumes on the shifted
    world with trajectory analysis re-armed, keeping all other policies
    and the shared backbone.
    """
    goal = goal if isinstance(goal, Goal) else Goal.of(goal)
    skill_ids = {op.name: i + 1 for i, op in enumerate(library.operators())}
    post = evaluate(library, params, goal, cfg, recipe=shifted_recipe,
                    vocab=vocab, skill_ids=skill_ids, seed=seed,
                    record_failures=True)
    lib = clone_library(library)
    retrained = None
    if post.first_failures:
        retrained = max(sorted(post.first_failures), key=lambda k: post.first_failures[k])
        lib.mark(retrained, SkillStatus.UNTRAINED)
    continuation = run_curriculum(
        lib, goal, cfg, net=net, gae=gae, ppo=ppo, recipe=shifted_recipe,
        vocab=vocab, seed=seed + 1, params=params, opt_state=opt_state,
        out_dir=out_dir,
    )
    return ShiftReport(post_shift=post, retrained=retrained,
                       continuation=continuation)
