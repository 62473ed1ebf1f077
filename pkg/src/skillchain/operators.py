"""Skill operators over abstract states, and their validation.

An operator names a skill and declares, per fact key, affine resource
expressions in the multiplicity n: requirements (must hold to start),
consumption (subtracted on success), and gain (added on success).
Durable tools sit in requirements but never in consumption.  Operators
whose gains are transient (walk away and the fact is gone) carry an
ephemeral flag; planning substitutes their requirements for the fact.
"""

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml

from .abstraction import (
    BOOLEAN_FAMILIES,
    HAS,
    AbstractState,
    Key,
    VocabularySpec,
    apply_delta,
    entails,
    format_key,
    parse_key,
    shortfall,
)

DEFAULT_REACH_DEPTH = 16
MAX_MULTIPLICITY = 64

_EXPR_RE = re.compile(
    r"^\s*(?:lambda\s+n\s*:)?\s*"
    r"(?:(?P<a>\d+)\s*\*\s*n|(?P<bare_n>n))?"
    r"\s*(?:(?P<plus>\+)\s*)?(?P<b>\d+)?\s*$"
)


class ManifestError(ValueError):
    """Raised on malformed operator documents; message carries the field path."""


class NotEntailedError(ValueError):
    """Raised when applying an operator whose requirements do not hold."""

    def __init__(self, op_name: str, missing: Dict[Key, int]):
        self.op_name = op_name
        self.missing = missing
        listed = ", ".join(
            f"{format_key(k)} short {v}" for k, v in sorted(missing.items())
        )
        super().__init__(f"{op_name}: requirements not entailed ({listed})")


@dataclass(frozen=True)
class ResourceExpr:
    """Affine count expression a*n + b over the multiplicity n >= 1."""

    per_unit: int = 0
    fixed: int = 0

    def __post_init__(self):
        if self.per_unit < 0 or self.fixed < 0:
            raise ValueError(f"negative coefficients in {self.text()}")

    def at(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"multiplicity must be >= 1, got {n}")
        return self.per_unit * n + self.fixed

    def dominates(self, other: "ResourceExpr") -> bool:
        """True iff self(n) >= other(n) for every n >= 1."""
        return self.per_unit >= other.per_unit and self.at(1) >= other.at(1)

    def text(self) -> str:
        if self.per_unit and self.fixed:
            return f"{self.per_unit}*n + {self.fixed}"
        if self.per_unit:
            return f"{self.per_unit}*n"
        return str(self.fixed)

    @staticmethod
    def parse(value) -> "ResourceExpr":
        if isinstance(value, ResourceExpr):
            return value
        if isinstance(value, bool):
            raise ValueError(f"expected count expression, got {value!r}")
        if isinstance(value, int):
            if value < 0:
                raise ValueError(f"negative count {value}")
            return ResourceExpr(0, value)
        if not isinstance(value, str):
            raise ValueError(f"expected count expression, got {value!r}")
        m = _EXPR_RE.match(value)
        if not m or (m.group("plus") and m.group("b") is None):
            raise ValueError(f"cannot parse count expression {value!r}")
        a = m.group("a")
        per_unit = int(a) if a else (1 if m.group("bare_n") else 0)
        b = m.group("b")
        fixed = int(b) if b else 0
        if per_unit == 0 and fixed == 0 and not m.group("bare_n") and b is None:
            raise ValueError(f"cannot parse count expression {value!r}")
        return ResourceExpr(per_unit, fixed)


@dataclass(frozen=True)
class RewardSpec:
    """Per-step reward shape for training one skill.

    sparse_gain_key: fact key whose per-step count increase pays +1 each.
    dense_target: optional block subject; closing distance to its nearest
    instance pays dense_coefficient per cell, gated off on steps where the
    sparse term fired.
    """

    sparse_gain_key: Key
    dense_target: Optional[str] = None
    dense_coefficient: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.dense_coefficient <= 0.01):
            raise ValueError(
                f"dense_coefficient must lie in [0, 0.01], got {self.dense_coefficient}"
            )


@dataclass(frozen=True)
class Operator:
    name: str
    requirements: Mapping[Key, ResourceExpr]
    consumption: Mapping[Key, ResourceExpr]
    gain: Mapping[Key, ResourceExpr]
    ephemeral: bool = False
    reward: Optional[RewardSpec] = None
    budget: Optional[int] = None

    def __post_init__(self):
        if not self.name or not re.match(r"^[A-Za-z][A-Za-z0-9_]*$", self.name):
            raise ValueError(f"bad operator name {self.name!r}")
        if not self.gain:
            raise ValueError(f"{self.name}: gain must be nonempty")
        if not any(expr.at(1) > 0 for expr in self.gain.values()):
            raise ValueError(f"{self.name}: gain must add at least one fact")
        for key, expr in self.consumption.items():
            if key[0] in BOOLEAN_FAMILIES:
                raise ValueError(
                    f"{self.name}: cannot consume boolean fact {format_key(key)}"
                )
            req = self.requirements.get(key)
            if req is None:
                raise ValueError(
                    f"{self.name}: consumption of {format_key(key)} "
                    "has no matching requirement"
                )
            if not req.dominates(expr):
                raise ValueError(
                    f"{self.name}: consumption of {format_key(key)} "
                    f"({expr.text()}) exceeds requirement ({req.text()})"
                )
        if self.budget is not None and self.budget <= 0:
            raise ValueError(f"{self.name}: budget must be positive")
        if self.reward is not None and self.reward.sparse_gain_key not in self.gain:
            raise ValueError(
                f"{self.name}: reward key "
                f"{format_key(self.reward.sparse_gain_key)} is not a gain key"
            )

    def check_vocab(self, vocab: VocabularySpec) -> None:
        for label, mapping in (
            ("requirements", self.requirements),
            ("consumption", self.consumption),
            ("gain", self.gain),
        ):
            for key in mapping:
                try:
                    vocab.check_key(key)
                except ValueError as exc:
                    raise ValueError(f"{self.name}.{label}: {exc}") from exc
                if label == "consumption" and vocab.is_tool_key(key):
                    raise ValueError(
                        f"{self.name}: durable tool {format_key(key)} "
                        "cannot be consumed"
                    )

    def requirements_at(self, n: int) -> Dict[Key, int]:
        return {k: e.at(n) for k, e in self.requirements.items() if e.at(n) > 0}

    def consumption_at(self, n: int) -> Dict[Key, int]:
        return {k: e.at(n) for k, e in self.consumption.items() if e.at(n) > 0}

    def gain_at(self, n: int) -> Dict[Key, int]:
        return {k: e.at(n) for k, e in self.gain.items() if e.at(n) > 0}


def apply_effects(
    state: AbstractState,
    op: Operator,
    n: int = 1,
    vocab: Optional[VocabularySpec] = None,
) -> AbstractState:
    """Apply one operator at multiplicity n to an abstract ledger state."""
    demand = op.requirements_at(n)
    if not entails(state, demand):
        raise NotEntailedError(op.name, shortfall(state, demand))
    return apply_delta(state, op.consumption_at(n), op.gain_at(n), vocab)


def max_applicable(op: Operator, state: AbstractState, cap: int = MAX_MULTIPLICITY) -> int:
    """Largest multiplicity whose requirements the state entails (0 if none)."""
    best = cap
    for key, expr in op.requirements.items():
        have = state.count(key)
        if expr.per_unit == 0:
            if have < expr.fixed:
                return 0
            continue
        n = (have - expr.fixed) // expr.per_unit
        if n < 1:
            return 0
        best = min(best, n)
    return max(best, 0)


class SkillStatus(enum.Enum):
    UNTRAINED = "untrained"
    TRAINED = "trained"
    REFUTED = "refuted"


class SkillLibrary:
    """Ordered operator collection with per-skill training status."""

    def __init__(self, operators: Iterable[Operator] = ()):
        self._ops: Dict[str, Operator] = {}
        self._status: Dict[str, SkillStatus] = {}
        for op in operators:
            self.add(op)

    def add(self, op: Operator, status: SkillStatus = SkillStatus.UNTRAINED) -> None:
        if op.name in self._ops:
            raise ValueError(f"duplicate operator {op.name}")
        self._ops[op.name] = op
        self._status[op.name] = status

    def replace(self, op: Operator) -> None:
        """Swap in a refined operator, keeping position and resetting status."""
        if op.name not in self._ops:
            raise KeyError(op.name)
        self._ops[op.name] = op
        self._status[op.name] = SkillStatus.UNTRAINED

    def get(self, name: str) -> Operator:
        return self._ops[name]

    def __contains__(self, name: str) -> bool:
        return name in self._ops

    def __len__(self) -> int:
        return len(self._ops)

    def operators(self) -> List[Operator]:
        return list(self._ops.values())

    def active(self) -> List[Operator]:
        """Operators available to the planner (refuted ones are excluded)."""
        return [
            op
            for name, op in self._ops.items()
            if self._status[name] is not SkillStatus.REFUTED
        ]

    def status(self, name: str) -> SkillStatus:
        return self._status[name]

    def mark(self, name: str, status: SkillStatus) -> None:
        if name not in self._ops:
            raise KeyError(name)
        self._status[name] = status

    def trained_names(self) -> List[str]:
        return [n for n, s in self._status.items() if s is SkillStatus.TRAINED]


def substitute_ephemeral(
    demand: Mapping[Key, int],
    library: Iterable[Operator],
    _visiting: Optional[frozenset] = None,
) -> Dict[Key, int]:
    """Replace transient facts in a demand by their producers' requirements.

    A demand key gained by exactly one ephemeral operator is removed and
    that operator's own (recursively substituted) requirements are summed
    into the demand; counted keys add, boolean keys merge by max.
    """
    ops = list(library)
    producers: Dict[Key, List[Operator]] = {}
    for op in ops:
        if op.ephemeral:
            for key in op.gain:
                producers.setdefault(key, []).append(op)
    visiting = _visiting or frozenset()
    out: Dict[Key, int] = {}

    def merge(key: Key, count: int) -> None:
        if key[0] in BOOLEAN_FAMILIES:
            out[key] = max(out.get(key, 0), min(count, 1))
        else:
            out[key] = out.get(key, 0) + count

    for key, need in sorted(demand.items()):
        if need <= 0:
            continue
        made_by = producers.get(key, [])
        if not made_by:
            merge(key, need)
            continue
        if len(made_by) > 1:
            names = ", ".join(sorted(p.name for p in made_by))
            raise ValueError(
                f"fact {format_key(key)} has multiple ephemeral producers: {names}"
            )
        producer = made_by[0]
        if producer.name in visiting:
            raise ValueError(
                f"ephemeral substitution cycle through {producer.name}"
            )
        per_app = producer.gain[key].at(1)
        apps = 1 if key[0] in BOOLEAN_FAMILIES else -(-need // max(per_app, 1))
        inner = substitute_ephemeral(
            producer.requirements_at(apps),
            ops,
            visiting | {producer.name},
        )
        for ikey, icount in inner.items():
            merge(ikey, icount)
    return {k: v for k, v in out.items() if v > 0}


def reachable_facts(
    library: Iterable[Operator],
    init: AbstractState,
    depth: int = DEFAULT_REACH_DEPTH,
    vocab: Optional[VocabularySpec] = None,
) -> Dict[Key, int]:
    """Optimistic per-key count bound after up to `depth` application rounds.

    Each round fires every operator against the previous round's bound at
    multiplicity 1 and at its largest feasible multiplicity, subtracting
    consumption along that operator's own application; results merge by
    pointwise max.  Per-key totals are affine in the multiplicity, so the
    two endpoints cover every multiplicity between them.  The result is a
    superset of anything truly reachable in `depth` plan steps.
    """
    bound: Dict[Key, int] = dict(init.items())
    ops = list(library)

    def cap(key: Key, count: int) -> int:
        if vocab is not None:
            return min(count, vocab.ceiling(key))
        if key[0] in BOOLEAN_FAMILIES:
            return min(count, 1)
        return min(count, 10 * MAX_MULTIPLICITY)

    for _ in range(depth):
        state = AbstractState(bound)
        nxt = dict(bound)
        changed = False
        for op in ops:
            top = max_applicable(op, state)
            if top < 1:
                continue
            for n in {1, top}:
                after = apply_delta(state, op.consumption_at(n), {})
                for key, amount in op.gain_at(n).items():
                    total = cap(key, after.count(key) + amount)
                    if total > nxt.get(key, 0):
                        nxt[key] = total
                        changed = True
        bound = nxt
        if not changed:
            break
    return {k: v for k, v in bound.items() if v > 0}


@dataclass(frozen=True)
class Rejection:
    op: Operator
    check: str
    reason: str


def validate_feasibility(
    op: Operator,
    accepted: Sequence[Operator],
    init: AbstractState,
    depth: int = DEFAULT_REACH_DEPTH,
    vocab: Optional[VocabularySpec] = None,
) -> Optional[str]:
    """None if requirements(op, 1) are reachable via accepted skills, else why."""
    demand = substitute_ephemeral(op.requirements_at(1), accepted)
    bound = reachable_facts(accepted, init, depth, vocab)
    missing = {
        key: need - bound.get(key, 0)
        for key, need in demand.items()
        if bound.get(key, 0) < need
    }
    if missing:
        listed = ", ".join(
            f"{format_key(k)} short {v}" for k, v in sorted(missing.items())
        )
        return f"requirements unreachable: {listed}"
    return None


def validate_novelty(op: Operator, accepted: Sequence[Operator]) -> Optional[str]:
    """None if some gain is not already covered, else the covering op's name."""
    for other in accepted:
        if other.name == op.name:
            continue
        if all(
            key in other.gain and other.gain[key].dominates(expr)
            for key, expr in op.gain.items()
        ):
            return f"gain covered by {other.name}"
    return None


def validate_library(
    candidates: Sequence[Operator],
    init: AbstractState,
    depth: int = DEFAULT_REACH_DEPTH,
    vocab: Optional[VocabularySpec] = None,
) -> Tuple[List[Operator], List[Rejection]]:
    """Filter candidates to feasible, novel operators.

    Runs to a fixpoint so document order cannot starve an operator whose
    prerequisites appear later.  Idempotent: validating an already
    validated library accepts everything.
    """
    if vocab is not None:
        for op in candidates:
            op.check_vocab(vocab)
    accepted: List[Operator] = []
    remaining = list(candidates)
    last_reason: Dict[str, Rejection] = {}
    while True:
        progressed = False
        still: List[Operator] = []
        for op in remaining:
            why = validate_feasibility(op, accepted, init, depth, vocab)
            if why is not None:
                last_reason[op.name] = Rejection(op, "feasibility", why)
                still.append(op)
                continue
            why = validate_novelty(op, accepted)
            if why is not None:
                last_reason[op.name] = Rejection(op, "novelty", why)
                continue
            accepted.append(op)
            last_reason.pop(op.name, None)
            progressed = True
        remaining = still
        if not progressed:
            break
    rejections = [last_reason[op.name] for op in candidates if op.name in last_reason]
    return accepted, rejections


# --- operator documents -------------------------------------------------

_OP_FIELDS = {
    "name",
    "requirements",
    "consumption",
    "gain",
    "ephemeral",
    "reward",
    "budget",
}


def _parse_expr_map(raw, path: str) -> Dict[Key, ResourceExpr]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: expected a mapping, got {type(raw).__name__}")
    out: Dict[Key, ResourceExpr] = {}
    for text, value in raw.items():
        try:
            key = parse_key(str(text))
            out[key] = ResourceExpr.parse(value)
        except ValueError as exc:
            raise ManifestError(f"{path}.{text}: {exc}") from exc
    return out


def parse_operator(entry: dict, path: str = "operator") -> Operator:
    if not isinstance(entry, dict):
        raise ManifestError(f"{path}: expected a mapping")
    unknown = set(entry) - _OP_FIELDS
    if unknown:
        raise ManifestError(f"{path}: unknown fields {sorted(unknown)}")
    name = entry.get("name")
    if not isinstance(name, str):
        raise ManifestError(f"{path}.name: required string")
    reward = None
    raw_reward = entry.get("reward")
    if raw_reward is not None:
        if not isinstance(raw_reward, dict):
            raise ManifestError(f"{path}.reward: expected a mapping")
        extra = set(raw_reward) - {"sparse_gain", "dense_target", "dense_coefficient"}
        if extra:
            raise ManifestError(f"{path}.reward: unknown fields {sorted(extra)}")
        if "sparse_gain" not in raw_reward:
            raise ManifestError(f"{path}.reward.sparse_gain: required")
        try:
            reward = RewardSpec(
                sparse_gain_key=parse_key(str(raw_reward["sparse_gain"])),
                dense_target=raw_reward.get("dense_target"),
                dense_coefficient=float(raw_reward.get("dense_coefficient", 0.01)),
            )
        except ValueError as exc:
            raise ManifestError(f"{path}.reward: {exc}") from exc
    budget = entry.get("budget")
    if budget is not None and (not isinstance(budget, int) or isinstance(budget, bool)):
        raise ManifestError(f"{path}.budget: expected an integer")
    ephemeral = entry.get("ephemeral", False)
    if not isinstance(ephemeral, bool):
        raise ManifestError(f"{path}.ephemeral: expected a boolean")
    try:
        return Operator(
            name=name,
            requirements=_parse_expr_map(entry.get("requirements"), f"{path}.requirements"),
            consumption=_parse_expr_map(entry.get("consumption"), f"{path}.consumption"),
            gain=_parse_expr_map(entry.get("gain"), f"{path}.gain"),
            ephemeral=ephemeral,
            reward=reward,
            budget=budget,
        )
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def parse_manifest(text: str) -> List[Operator]:
    """Parse an operator manifest document (one operator or an `operators` list)."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest is not valid YAML: {exc}") from exc
    if doc is None:
        return []
    if isinstance(doc, dict) and "operators" in doc:
        entries = doc["operators"]
        if not isinstance(entries, list):
            raise ManifestError("operators: expected a list")
    elif isinstance(doc, dict):
        entries = [doc]
    else:
        raise ManifestError("manifest root must be a mapping")
    ops = []
    names = set()
    for i, entry in enumerate(entries):
        op = parse_operator(entry, path=f"operators[{i}]")
        if op.name in names:
            raise ManifestError(f"operators[{i}]: duplicate name {op.name}")
        names.add(op.name)
        ops.append(op)
    return ops


def operator_to_entry(op: Operator) -> dict:
    entry: Dict[str, object] = {"name": op.name}
    for label, mapping in (
        ("requirements", op.requirements),
        ("consumption", op.consumption),
        ("gain", op.gain),
    ):
        if mapping:
            entry[label] = {
                format_key(k): (e.text() if e.per_unit else e.fixed)
                for k, e in sorted(mapping.items())
            }
    if op.ephemeral:
        entry["ephemeral"] = True
    if op.reward is not None:
        reward: Dict[str, object] = {
            "sparse_gain": format_key(op.reward.sparse_gain_key)
        }
        if op.reward.dense_target is not None:
            reward["dense_target"] = op.reward.dense_target
        reward["dense_coefficient"] = op.reward.dense_coefficient
        entry["reward"] = reward
    if op.budget is not None:
        entry["budget"] = op.budget
    return entry


def serialize_manifest(ops: Sequence[Operator]) -> str:
    doc = {"operators": [operator_to_entry(op) for op in ops]}
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)
