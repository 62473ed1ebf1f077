"""Trajectory evidence and operator refinement.

Executed options leave a trail of abstract states.  This module records
those trails (change-compressed, one JSON line per episode), and turns
them back into corrected operator documents: successful episodes tighten
resource counts, failed episodes suggest missing prerequisites, and an
optional HTTP endpoint can rewrite the document wholesale with the
mechanical result standing by as fallback.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

from .abstraction import (
    BOOLEAN_FAMILIES,
    AbstractState,
    Key,
    format_key,
    parse_key,
)
from .operators import (
    ManifestError,
    Operator,
    ResourceExpr,
    operator_to_entry,
    parse_manifest,
    parse_operator,
)

logger = logging.getLogger("skillchain.refine")

# Sentinel action id for the initial snapshot, which precedes any action.
START_ACTION = -1

INTRINSIC_NAMES = ("health", "food", "drink", "energy")

# Starvation is the only intrinsic death with an item remedy.
_INTRINSIC_REMEDY: Dict[str, Key] = {"food": ("has", "apple")}

_BLOCKED_REASON_FAMILY = {
    "missing_tool": "has",
    "missing_input": "has",
    "missing_station": "placed",
}

ENDPOINT_URL_VAR = "SKILLCHAIN_LLM_ENDPOINT"
ENDPOINT_TOKEN_VAR = "SKILLCHAIN_LLM_TOKEN"


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class TrajectoryStep:
    """One abstract-state change: the action id and the state after it."""

    action: int
    state: AbstractState


@dataclass(frozen=True)
class Trajectory:
    """Change-compressed abstract trace of one option execution.

    ``steps[0]`` is the snapshot at initiation (action ``START_ACTION``);
    every later entry records an action whose effect changed the abstract
    state.  An episode whose actions never change the abstraction
    therefore has exactly one step.
    """

    skill: str
    episode: int
    seed: int
    success: bool
    action_count: int
    steps: Tuple[TrajectoryStep, ...]
    terminal_intrinsics: Optional[Mapping[str, int]] = None
    last_blocked: Optional[Mapping[str, object]] = None

    def __post_init__(self):
        if not self.steps:
            raise ValueError("trajectory needs at least the initial snapshot")
        if self.steps[0].action != START_ACTION:
            raise ValueError("steps[0] must be the initial snapshot")
        for prev, cur in zip(self.steps, self.steps[1:]):
            if prev.state == cur.state:
                raise ValueError("consecutive steps must differ")

    @property
    def z_start(self) -> AbstractState:
        return self.steps[0].state

    @property
    def z_end(self) -> AbstractState:
        return self.steps[-1].state


class TrajectoryRecorder:
    """Accumulates one option execution into a :class:`Trajectory`.

    Call :meth:`observe` after every primitive action with the resulting
    abstract state; only changes are stored.  Blocked-action diagnostics
    from the environment are kept (last one wins) for failure analysis.
    """

    def __init__(self, skill: str, z_start: AbstractState, episode: int = 0, seed: int = 0):
        self.skill = skill
        self.episode = episode
        self.seed = seed
        self._steps: List[TrajectoryStep] = [TrajectoryStep(START_ACTION, z_start)]
        self._actions = 0
        self._blocked: Optional[Dict[str, object]] = None

    def observe(self, action: int, state: AbstractState, blocked: Optional[Mapping[str, object]] = None) -> None:
        self._actions += 1
        if blocked is not None:
            self._blocked = dict(blocked)
        if state != self._steps[-1].state:
            self._steps.append(TrajectoryStep(int(action), state))

    def finish(self, success: bool, terminal_intrinsics: Optional[object] = None) -> Trajectory:
        intrinsics: Optional[Dict[str, int]] = None
        if terminal_intrinsics is not None:
            if isinstance(terminal_intrinsics, Mapping):
                intrinsics = {str(k): int(v) for k, v in terminal_intrinsics.items()}
            else:
                values = [int(v) for v in terminal_intrinsics]
                if len(values) != len(INTRINSIC_NAMES):
                    raise ValueError(f"expected {len(INTRINSIC_NAMES)} intrinsics, got {len(values)}")
                intrinsics = dict(zip(INTRINSIC_NAMES, values))
        return Trajectory(
            skill=self.skill,
            episode=self.episode,
            seed=self.seed,
            success=bool(success),
            action_count=self._actions,
            steps=tuple(self._steps),
            terminal_intrinsics=intrinsics,
            last_blocked=self._blocked,
        )


def _facts_to_text(state: AbstractState) -> Dict[str, int]:
    return {format_key(k): v for k, v in sorted(state.canonical())}


def trajectory_to_line(traj: Trajectory) -> str:
    """One-line JSON: the start snapshot plus per-step changed counts."""
    steps = []
    prev = traj.z_start
    for step in traj.steps[1:]:
        delta: Dict[str, int] = {}
        for key in set(prev.keys()) | set(step.state.keys()):
            # New absolute count, zero included, so removal is explicit.
            if step.state.count(key) != prev.count(key):
                delta[format_key(key)] = step.state.count(key)
        steps.append([step.action, dict(sorted(delta.items()))])
        prev = step.state
    doc = {
        "skill": traj.skill,
        "episode": traj.episode,
        "seed": traj.seed,
        "success": traj.success,
        "actions": traj.action_count,
        "start": _facts_to_text(traj.z_start),
        "steps": steps,
        "end": _facts_to_text(traj.z_end),
        "intrinsics": dict(traj.terminal_intrinsics) if traj.terminal_intrinsics else None,
        "blocked": dict(traj.last_blocked) if traj.last_blocked else None,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def trajectory_from_line(line: str) -> Trajectory:
    doc = json.loads(line)
    facts = {parse_key(k): int(v) for k, v in doc["start"].items()}
    steps = [TrajectoryStep(START_ACTION, AbstractState(facts))]
    for action, delta in doc["steps"]:
        for text, count in delta.items():
            key = parse_key(text)
            if int(count) == 0:
                facts.pop(key, None)
            else:
                facts[key] = int(count)
        steps.append(TrajectoryStep(int(action), AbstractState(facts)))
    end = {parse_key(k): int(v) for k, v in doc["end"].items()}
    if steps[-1].state != AbstractState(end):
        raise ValueError("trajectory line is inconsistent: replayed end state differs")
    return Trajectory(
        skill=doc["skill"],
        episode=int(doc["episode"]),
        seed=int(doc["seed"]),
        success=bool(doc["success"]),
        action_count=int(doc["actions"]),
        steps=tuple(steps),
        terminal_intrinsics=doc.get("intrinsics"),
        last_blocked=doc.get("blocked"),
    )


def write_trajectory_log(path: str, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(trajectory_to_line(traj) + "\n")


def read_trajectory_log(path: str) -> List[Trajectory]:
    out: List[Trajectory] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trajectory_from_line(line))
    return out


# ---------------------------------------------------------------------------
# Refinement results


@dataclass(frozen=True)
class Refinement:
    """Proposed replacement maps for one operator, with provenance text."""

    op_name: str
    requirements: Mapping[Key, ResourceExpr]
    consumption: Mapping[Key, ResourceExpr]
    gain: Mapping[Key, ResourceExpr]
    changed: bool
    evidence: str

    def apply(self, op: Operator) -> Operator:
        """New operator with the refined maps; invariants re-checked."""
        if op.name != self.op_name:
            raise ValueError(f"refinement for {self.op_name} applied to {op.name}")
        return dataclasses.replace(
            op,
            requirements=dict(self.requirements),
            consumption=dict(self.consumption),
            gain=dict(self.gain),
        )


def _unchanged(op: Operator, evidence: str) -> Refinement:
    return Refinement(
        op_name=op.name,
        requirements=dict(op.requirements),
        consumption=dict(op.consumption),
        gain=dict(op.gain),
        changed=False,
        evidence=evidence,
    )


def _expr_text(e: ResourceExpr) -> str:
    return e.text() if e.per_unit else str(e.fixed)


def _diff_text(label: str, old: Mapping[Key, ResourceExpr], new: Mapping[Key, ResourceExpr]) -> List[str]:
    notes = []
    for key in sorted(set(old) | set(new)):
        before, after = old.get(key), new.get(key)
        if before == after:
            continue
        name = format_key(key)
        if before is None:
            notes.append(f"{label} {name}: + {_expr_text(after)}")
        elif after is None:
            notes.append(f"{label} {name}: {_expr_text(before)} dropped")
        else:
            notes.append(f"{label} {name}: {_expr_text(before)} -> {_expr_text(after)}")
    return notes


# ---------------------------------------------------------------------------
# Mechanical refinement from successful episodes


def _check_success_set(op: Operator, trajectories: Sequence[Trajectory]) -> None:
    if not trajectories:
        raise ValueError(f"no trajectories for {op.name}")
    for traj in trajectories:
        if traj.skill != op.name:
            raise ValueError(f"trajectory for {traj.skill} mixed into {op.name}")
        if not traj.success:
            raise ValueError(f"count refinement needs successful episodes ({op.name})")


def _gross_decrements(traj: Trajectory) -> Dict[Key, int]:
    """Total amount removed per counted key, pickups not offsetting."""
    dec: Dict[Key, int] = {}
    prev = traj.z_start
    for step in traj.steps[1:]:
        for key in prev.keys():
            if key[0] in BOOLEAN_FAMILIES:
                continue
            drop = prev.count(key) - step.state.count(key)
            if drop > 0:
                dec[key] = dec.get(key, 0) + drop
        prev = step.state
    return dec


def _endpoint_decrements(traj: Trajectory) -> Dict[Key, int]:
    """Start-minus-end per counted key; blind to mid-episode churn."""
    dec: Dict[Key, int] = {}
    for key, count in traj.z_start.items():
        if key[0] in BOOLEAN_FAMILIES:
            continue
        drop = count - traj.z_end.count(key)
        if drop > 0:
            dec[key] = drop
    return dec


def _primary_gain_key(op: Operator) -> Key:
    if op.reward is not None:
        return op.reward.sparse_gain_key
    return sorted(op.gain)[0]


def _shaped(template: Optional[ResourceExpr], amount: int) -> ResourceExpr:
    # Keep the prior's affine shape: per-application amounts stay per
    # application, one-off setup costs stay fixed.  New keys default to
    # per application, the conservative reading of one-shot evidence.
    if template is not None and template.per_unit == 0:
        return ResourceExpr(0, amount)
    return ResourceExpr(amount, 0)


def _refit_counts(
    op: Operator,
    trajectories: Sequence[Trajectory],
    extract: Callable[[Trajectory], Dict[Key, int]],
    method: str,
) -> Refinement:
    _check_success_set(op, trajectories)

    consumed: Dict[Key, int] = {}
    for traj in trajectories:
        for key, amount in extract(traj).items():
            consumed[key] = max(consumed.get(key, 0), amount)

    new_req: Dict[Key, ResourceExpr] = {}
    new_cons: Dict[Key, ResourceExpr] = {}
    # Only keys the document already declares are refit.  Exploratory
    # policies shed stock incidentally (planting a sapling mid-gather);
    # treating every decrement as a dependency would poison the plan.
    # Genuinely missing prerequisites surface through failure analysis.
    for key in sorted(set(op.requirements) | set(op.consumption)):
        observed = consumed.get(key, 0)
        prior_req = op.requirements.get(key)
        prior_cons = op.consumption.get(key)
        if observed == 0:
            # No evidence against the prior's hold-only requirement; keep
            # it verbatim (this is what protects tool prerequisites).
            if prior_req is not None:
                new_req[key] = prior_req
            continue
        template = prior_cons if prior_cons is not None else prior_req
        fitted = _shaped(template, observed)
        new_cons[key] = fitted
        if prior_cons is not None:
            # Preserve the prior's hold-over-consume margin as a flat
            # surcharge on top of the refitted consumption.
            margin = prior_req.at(1) - prior_cons.at(1)
            new_req[key] = ResourceExpr(fitted.per_unit, fitted.fixed + margin)
        elif prior_req is not None:
            new_req[key] = _shaped(template, max(observed, prior_req.at(1)))
        else:
            new_req[key] = fitted

    primary = _primary_gain_key(op)
    new_gain: Dict[Key, ResourceExpr] = {}
    for key in sorted(op.gain):
        if key[0] in BOOLEAN_FAMILIES:
            observed = min(min(t.z_end.count(key), 1) for t in trajectories)
        else:
            observed = min(t.z_end.count(key) - t.z_start.count(key) for t in trajectories)
        if observed <= 0:
            if key == primary:
                raise ValueError(f"evidence refutes the primary gain {format_key(key)} of {op.name}")
            continue
        new_gain[key] = _shaped(op.gain[key], observed)

    notes = (
        _diff_text("requirement", op.requirements, new_req)
        + _diff_text("consumption", op.consumption, new_cons)
        + _diff_text("gain", op.gain, new_gain)
    )
    changed = bool(notes)
    summary = f"{method}, {len(trajectories)} successful episodes: " + (
        "; ".join(notes) if notes else "no changes"
    )
    return Refinement(
        op_name=op.name,
        requirements=new_req,
        consumption=new_cons,
        gain=new_gain,
        changed=changed,
        evidence=summary,
    )


def mechanical_refine(op: Operator, trajectories: Sequence[Trajectory]) -> Refinement:
    """Tighten counts to the full per-step evidence.

    Consumption per key is the worst observed gross decrement, so stock
    gathered mid-episode and then spent still counts toward what the
    skill needs on hand.  Requirements keep the prior's hold margin on
    top of that, unconsumed requirement keys survive untouched, and gains
    shrink to the worst observed net increase on the declared keys.
    """
    return _refit_counts(op, trajectories, _gross_decrements, "mechanical")


def endpoint_refine(op: Operator, trajectories: Sequence[Trajectory]) -> Refinement:
    """Like :func:`mechanical_refine` but from endpoint differences only.

    Deliberately weaker: an episode that starts with two iron, picks up a
    third, and crafts with all three shows a drop of two, not three.
    Kept as a regression foil for the per-step accounting.
    """
    return _refit_counts(op, trajectories, _endpoint_decrements, "endpoint")


# ---------------------------------------------------------------------------
# Failure-driven refinement


def _failure_cause(traj: Trajectory) -> Optional[Tuple[str, Key]]:
    """Classify one failed episode as (kind, missing key), if identifiable."""
    intrinsics = traj.terminal_intrinsics
    if intrinsics is not None and intrinsics.get("health", 1) <= 0:
        for name, key in _INTRINSIC_REMEDY.items():
            if intrinsics.get(name, 1) <= 0:
                return ("death", key)
        return None
    blocked = traj.last_blocked
    if blocked is not None:
        family = _BLOCKED_REASON_FAMILY.get(str(blocked.get("reason")))
        needs = blocked.get("needs")
        if family is not None and needs:
            return ("blocked", (family, str(needs)))
    return None


def failure_refine(
    op: Operator,
    trajectories: Sequence[Trajectory],
    library: Sequence[Operator],
) -> Refinement:
    """Add the prerequisite implied by the dominant failure mode.

    Deaths point at survival items (starvation means food on hand),
    blocked actions point at the tool, station, or input the environment
    named.  The suggestion must be producible by some library skill, and
    it lands in the requirements only: an unconsumed key for tools and
    stations, a bumped floor if the key is already required.
    """
    if not trajectories:
        raise ValueError(f"no trajectories for {op.name}")
    for traj in trajectories:
        if traj.skill != op.name:
            raise ValueError(f"trajectory for {traj.skill} mixed into {op.name}")
        if traj.success:
            raise ValueError(f"failure refinement needs failed episodes ({op.name})")

    votes: Dict[Tuple[str, Key], int] = {}
    for traj in trajectories:
        cause = _failure_cause(traj)
        if cause is not None:
            votes[cause] = votes.get(cause, 0) + 1
    if not votes:
        return _unchanged(op, f"{len(trajectories)} failures, no identifiable cause")

    # Dominant cause; ties break toward blocked actions, then by key, so
    # the outcome never depends on trajectory order.
    (kind, key), count = min(
        votes.items(), key=lambda item: (-item[1], item[0][0] != "blocked", item[0][1])
    )
    name = format_key(key)
    origin = f"{count}/{len(trajectories)} failures {'died without' if kind == 'death' else 'blocked on'} {name}"

    producible = any(
        other.name != op.name and other.gain.get(key, ResourceExpr(0, 0)).at(1) > 0
        for other in library
    )
    if not producible:
        return _unchanged(op, f"{origin}, but no library skill gains it")

    prior = op.requirements.get(key)
    if prior is not None and prior.at(1) >= 1 and key[0] in BOOLEAN_FAMILIES:
        return _unchanged(op, f"{origin}, already required")
    new_req = dict(op.requirements)
    if prior is None:
        new_req[key] = ResourceExpr(0, 1)
    else:
        new_req[key] = ResourceExpr(prior.per_unit, prior.fixed + 1)
    return Refinement(
        op_name=op.name,
        requirements=new_req,
        consumption=dict(op.consumption),
        gain=dict(op.gain),
        changed=True,
        evidence=f"{origin}; requirement {name}: "
        + (f"+ {_expr_text(new_req[key])}" if prior is None else f"{_expr_text(prior)} -> {_expr_text(new_req[key])}"),
    )


# ---------------------------------------------------------------------------
# HTTP-backed refinement and proposal


@dataclass(frozen=True)
class EndpointConfig:
    """Where to send refinement prompts; token is optional."""

    url: str
    token: Optional[str] = None
    timeout: float = 30.0

    @classmethod
    def from_env(cls) -> Optional["EndpointConfig"]:
        url = os.environ.get(ENDPOINT_URL_VAR, "").strip()
        if not url:
            return None
        return cls(url=url, token=os.environ.get(ENDPOINT_TOKEN_VAR) or None)


def http_transport(config: EndpointConfig, payload: dict) -> dict:
    """POST JSON, return the decoded JSON reply.  Raises on any failure."""
    import requests

    headers = {"Content-Type": "application/json"}
    if config.token:
        headers["Authorization"] = f"Bearer {config.token}"
    reply = requests.post(config.url, json=payload, headers=headers, timeout=config.timeout)
    reply.raise_for_status()
    return reply.json()


def render_refine_prompt(op: Operator, trajectories: Sequence[Trajectory]) -> str:
    lines = [
        "You maintain a library of crafting skills, each described by a",
        "document with requirements (stock that must be on hand), consumption",
        "(stock spent per application), and gain (stock produced).",
        "",
        "Current document:",
        json.dumps(operator_to_entry(op), indent=2, sort_keys=True),
        "",
        "Recorded executions (one JSON line each; steps list the changed",
        "counts after each action):",
    ]
    lines += [trajectory_to_line(t) for t in trajectories]
    lines += [
        "",
        "Correct the counts so the document matches the recorded evidence.",
        "Keep every requirement you cannot disprove, especially tools and",
        "stations, and never add consumption for a key that is not required.",
        'Reply with JSON: {"operator": {...corrected document...}}.',
    ]
    return "\n".join(lines)


def render_propose_prompt(document: str) -> str:
    lines = [
        "Read the following notes about a crafting world and write one skill",
        "document per distinct recipe or gathering action you can identify.",
        "Each document needs name, requirements, consumption, and gain maps;",
        "counts may be fixed integers or per-application terms like '2*n'.",
        "",
        document,
        "",
        'Reply with JSON: {"operators": [{...}, ...]}.',
    ]
    return "\n".join(lines)


def _validated_reply(op: Operator, reply: dict) -> Tuple[Dict[Key, ResourceExpr], Dict[Key, ResourceExpr], Dict[Key, ResourceExpr]]:
    entry = reply.get("operator")
    if not isinstance(entry, dict):
        raise ManifestError("reply lacks an operator document")
    entry = dict(entry)
    entry.setdefault("name", op.name)
    refined = parse_operator(entry, path=f"reply for {op.name}")
    if refined.name != op.name:
        raise ManifestError(f"reply renamed {op.name} to {refined.name}")
    for key, prior in op.requirements.items():
        # Hold-only requirements (tools, stations) cannot be disproved by
        # count evidence, so a reply dropping one is rejected outright.
        if key not in op.consumption and refined.requirements.get(key, ResourceExpr(0, 0)).at(1) < prior.at(1):
            raise ManifestError(f"reply weakened the unconsumed requirement {format_key(key)}")
    primary = _primary_gain_key(op)
    if refined.gain.get(primary, ResourceExpr(0, 0)).at(1) <= 0:
        raise ManifestError(f"reply dropped the primary gain {format_key(primary)}")
    return dict(refined.requirements), dict(refined.consumption), dict(refined.gain)


def llm_refine(
    op: Operator,
    trajectories: Sequence[Trajectory],
    config: Optional[EndpointConfig] = None,
    transport: Optional[Callable[[EndpointConfig, dict], dict]] = None,
) -> Refinement:
    """Ask an HTTP endpoint to rewrite the document; fall back mechanically.

    The reply must parse as an operator, keep the name, keep every
    unconsumed requirement at least as strong, and keep the primary gain.
    Any transport, parse, or validation failure logs the cause and returns
    the mechanical refinement instead.
    """
    _check_success_set(op, trajectories)
    config = config or EndpointConfig.from_env()
    if config is None:
        return _fallback(op, trajectories, "no endpoint configured")
    send = transport or http_transport
    try:
        reply = send(config, {"prompt": render_refine_prompt(op, trajectories)})
        new_req, new_cons, new_gain = _validated_reply(op, reply)
    except Exception as exc:
        return _fallback(op, trajectories, f"{type(exc).__name__}: {exc}")
    changed = (
        new_req != dict(op.requirements)
        or new_cons != dict(op.consumption)
        or new_gain != dict(op.gain)
    )
    notes = (
        _diff_text("requirement", op.requirements, new_req)
        + _diff_text("consumption", op.consumption, new_cons)
        + _diff_text("gain", op.gain, new_gain)
    )
    summary = f"endpoint, {len(trajectories)} successful episodes: " + (
        "; ".join(notes) if notes else "no changes"
    )
    return Refinement(op.name, new_req, new_cons, new_gain, changed, summary)


def _fallback(op: Operator, trajectories: Sequence[Trajectory], cause: str) -> Refinement:
    logger.warning("llm refinement for %s fell back to mechanical: %s", op.name, cause)
    mech = mechanical_refine(op, trajectories)
    return dataclasses.replace(mech, evidence=f"fallback ({cause}); {mech.evidence}")


def propose(
    document: str,
    backend: str = "manifest",
    config: Optional[EndpointConfig] = None,
    transport: Optional[Callable[[EndpointConfig, dict], dict]] = None,
) -> List[Operator]:
    """Turn a skill document into candidate operators.

    The manifest backend parses the document directly.  The llm backend
    sends it to the configured endpoint and parses the structured reply;
    candidates from either route still face library validation.
    """
    if backend == "manifest":
        return parse_manifest(document)
    if backend == "llm":
        config = config or EndpointConfig.from_env()
        if config is None:
            raise ValueError(f"llm backend needs {ENDPOINT_URL_VAR} or an explicit config")
        send = transport or http_transport
        reply = send(config, {"prompt": render_propose_prompt(document)})
        entries = reply.get("operators")
        if not isinstance(entries, list):
            raise ManifestError("reply lacks an operator list")
        return [parse_operator(e, path=f"operators[{i}]") for i, e in enumerate(entries)]
    raise ValueError(f"unknown proposal backend: {backend}")
