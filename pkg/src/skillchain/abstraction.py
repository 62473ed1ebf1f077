"""Counted-predicate abstraction over environment states.

An abstract state is a sparse multiset of facts: `has(wood) = 5`,
`placed(table) = 1`, `near(furnace) = 1`.  Keys are (family, subject)
pairs; `placed` and `near` are boolean families whose counts clamp to 1.
Entailment is pointwise count comparison.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

Key = Tuple[str, str]

HAS = "has"
PLACED = "placed"
NEAR = "near"
FAMILIES = (HAS, PLACED, NEAR)
BOOLEAN_FAMILIES = frozenset((PLACED, NEAR))

DEFAULT_CEILING = 64


def parse_key(text: str) -> Key:
    """Parse a fact key from its text form.

    Bare names are inventory facts: "wood" -> ("has", "wood").  Boolean
    families are prefixed: "near:table" -> ("near", "table").
    """
    if ":" in text:
        family, subject = text.split(":", 1)
    else:
        family, subject = HAS, text
    family = family.strip()
    subject = subject.strip()
    if family not in FAMILIES:
        raise ValueError(f"unknown predicate family {family!r} in key {text!r}")
    if not subject:
        raise ValueError(f"empty subject in key {text!r}")
    return (family, subject)


def format_key(key: Key) -> str:
    family, subject = key
    if family == HAS:
        return subject
    return f"{family}:{subject}"


@dataclass(frozen=True)
class VocabularySpec:
    """Registered predicate vocabulary with per-subject count ceilings.

    subjects: inventory subjects valid under `has`.
    placeable: subjects valid under `placed` and `near`.
    tools: durable `has` subjects (never consumed by any operator).
    ceilings: max count per `has` subject; boolean families always cap at 1.
    """

    subjects: Tuple[str, ...]
    placeable: Tuple[str, ...]
    tools: frozenset = frozenset()
    ceilings: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name, cap in self.ceilings.items():
            if cap <= 0:
                raise ValueError(f"ceiling for {name!r} must be positive, got {cap}")
        unknown_tools = set(self.tools) - set(self.subjects)
        if unknown_tools:
            raise ValueError(f"tools not in subjects: {sorted(unknown_tools)}")

    def check_key(self, key: Key) -> None:
        family, subject = key
        if family == HAS:
            if subject not in self.subjects:
                raise ValueError(f"unknown inventory subject {subject!r}")
        elif family in BOOLEAN_FAMILIES:
            if subject not in self.placeable:
                raise ValueError(f"unknown {family} subject {subject!r}")
        else:
            raise ValueError(f"unknown predicate family {family!r}")

    def ceiling(self, key: Key) -> int:
        family, subject = key
        if family in BOOLEAN_FAMILIES:
            return 1
        return int(self.ceilings.get(subject, DEFAULT_CEILING))

    def is_tool_key(self, key: Key) -> bool:
        return key[0] == HAS and key[1] in self.tools

    def all_keys(self) -> Tuple[Key, ...]:
        keys = [(HAS, s) for s in self.subjects]
        for family in (PLACED, NEAR):
            keys.extend((family, s) for s in self.placeable)
        return tuple(keys)


class AbstractState:
    """Immutable sparse fact map; zero-count entries are never stored."""

    __slots__ = ("_facts", "_hash")

    def __init__(self, facts: Optional[Mapping[Key, int]] = None):
        clean: Dict[Key, int] = {}
        if facts:
            for key, count in facts.items():
                count = int(count)
                if count < 0:
                    raise ValueError(f"negative count {count} for {format_key(key)}")
                if count == 0:
                    continue
                if key[0] in BOOLEAN_FAMILIES:
                    count = 1
                clean[key] = count
        self._facts = clean
        self._hash = hash(frozenset(clean.items()))

    def count(self, key: Key) -> int:
        return self._facts.get(key, 0)

    def items(self) -> Iterator[Tuple[Key, int]]:
        return iter(self._facts.items())

    def keys(self) -> Iterator[Key]:
        return iter(self._facts.keys())

    def to_dict(self) -> Dict[Key, int]:
        return dict(self._facts)

    def __len__(self) -> int:
        return len(self._facts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AbstractState):
            return NotImplemented
        return self._facts == other._facts

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        inner = ", ".join(
            f"{format_key(k)}={v}" for k, v in sorted(self._facts.items())
        )
        return f"AbstractState({{{inner}}})"

    def canonical(self) -> Tuple[Tuple[Key, int], ...]:
        """Sorted fact tuple, usable as a dict key in search frontiers."""
        return tuple(sorted(self._facts.items()))


def entails(state: AbstractState, demand: Mapping[Key, int]) -> bool:
    """True iff every demanded count is met pointwise."""
    for key, need in demand.items():
        if need > 0 and state.count(key) < need:
            return False
    return True


def shortfall(state: AbstractState, demand: Mapping[Key, int]) -> Dict[Key, int]:
    """Unsatisfied demand entries mapped to the missing amount."""
    missing = {}
    for key, need in demand.items():
        have = state.count(key)
        if have < need:
            missing[key] = need - have
    return missing


def apply_delta(
    state: AbstractState,
    subtract: Mapping[Key, int],
    add: Mapping[Key, int],
    vocab: Optional[VocabularySpec] = None,
) -> AbstractState:
    """Subtract then add counts; clamps added counts at vocabulary ceilings."""
    facts = state.to_dict()
    for key, amount in subtract.items():
        if amount == 0:
            continue
        have = facts.get(key, 0)
        if have < amount:
            raise ValueError(
                f"cannot subtract {amount} from {format_key(key)}={have}"
            )
        left = have - amount
        if left:
            facts[key] = left
        else:
            facts.pop(key, None)
    for key, amount in add.items():
        if amount == 0:
            continue
        total = facts.get(key, 0) + amount
        if vocab is not None:
            total = min(total, vocab.ceiling(key))
        if key[0] in BOOLEAN_FAMILIES:
            total = min(total, 1)
        facts[key] = total
    return AbstractState(facts)


def abstract_state(env_state, vocab: VocabularySpec) -> AbstractState:
    """Map a concrete environment state to its fact multiset.

    The environment exposes three views: an inventory mapping, the set of
    block subjects present anywhere on the map (placed), and the set of
    block subjects within Chebyshev distance 1 of the agent (near).
    """
    facts: Dict[Key, int] = {}
    for subject, count in env_state.inventory_counts().items():
        if count > 0 and subject in vocab.subjects:
            facts[(HAS, subject)] = min(int(count), vocab.ceiling((HAS, subject)))
    for subject in env_state.placed_subjects():
        if subject in vocab.placeable:
            facts[(PLACED, subject)] = 1
    for subject in env_state.near_subjects():
        if subject in vocab.placeable:
            facts[(NEAR, subject)] = 1
    return AbstractState(facts)


class FactLayout:
    """Fixed slot order for fact vectors, for batched numeric checks.

    Vector layout: all `has` subjects, then `placed` flags, then `near`
    flags, in vocabulary order.
    """

    def __init__(self, vocab: VocabularySpec):
        self.vocab = vocab
        self.keys: Tuple[Key, ...] = vocab.all_keys()
        self.index: Dict[Key, int] = {k: i for i, k in enumerate(self.keys)}
        self.size = len(self.keys)
        caps = [vocab.ceiling(k) for k in self.keys]
        self.ceilings = np.asarray(caps, dtype=np.int32)

    def demand_vector(self, demand: Mapping[Key, int]) -> np.ndarray:
        vec = np.zeros(self.size, dtype=np.int32)
        for key, count in demand.items():
            vec[self.index[key]] = count
        return vec

    def state_vector(self, state: AbstractState) -> np.ndarray:
        vec = np.zeros(self.size, dtype=np.int32)
        for key, count in state.items():
            idx = self.index.get(key)
            if idx is not None:
                vec[idx] = count
        return vec

    def to_state(self, vec: np.ndarray) -> AbstractState:
        return AbstractState(
            {self.keys[i]: int(v) for i, v in enumerate(vec) if v > 0}
        )
