"""Shared test fixtures: tiny operator builders and independent oracles."""

import random
from typing import Dict, List, Optional, Sequence, Tuple

from skillchain.abstraction import (
    BOOLEAN_FAMILIES,
    AbstractState,
    Key,
    VocabularySpec,
    parse_key,
)
from skillchain.operators import (
    Operator,
    ResourceExpr,
    RewardSpec,
    apply_effects,
    max_applicable,
)


def expr(value) -> ResourceExpr:
    return ResourceExpr.parse(value)


def exprs(mapping: Dict[str, object]) -> Dict[Key, ResourceExpr]:
    return {parse_key(k): expr(v) for k, v in mapping.items()}


def op(
    name: str,
    req: Optional[Dict[str, object]] = None,
    cons: Optional[Dict[str, object]] = None,
    gain: Optional[Dict[str, object]] = None,
    eph: bool = False,
    reward: Optional[RewardSpec] = None,
    budget: Optional[int] = None,
) -> Operator:
    return Operator(
        name=name,
        requirements=exprs(req or {}),
        consumption=exprs(cons or {}),
        gain=exprs(gain or {"token": 1}),
        ephemeral=eph,
        reward=reward,
        budget=budget,
    )


def state(facts: Dict[str, int]) -> AbstractState:
    return AbstractState({parse_key(k): v for k, v in facts.items()})


def exhaustive_max_counts(
    ops: Sequence[Operator],
    init: AbstractState,
    depth: int,
    n_cap: int,
    vocab: Optional[VocabularySpec] = None,
) -> Dict[Key, int]:
    """Per-key max count over every folded operator sequence of <= depth steps.

    Brute-force oracle: enumerates all (operator, multiplicity) sequences.
    """
    best: Dict[Key, int] = {}

    def note(s: AbstractState) -> None:
        for key, count in s.items():
            if count > best.get(key, 0):
                best[key] = count

    def walk(s: AbstractState, left: int) -> None:
        note(s)
        if left == 0:
            return
        for o in ops:
            top = min(max_applicable(o, s), n_cap)
            for n in range(1, top + 1):
                walk(apply_effects(s, o, n, vocab), left - 1)

    walk(init, depth)
    return best


def oracle_substitute(demand: Dict[Key, int], ops: Sequence[Operator]) -> Dict[Key, int]:
    """Independent recursive expansion of transient facts in a demand."""
    producers: Dict[Key, Operator] = {}
    for o in ops:
        if o.ephemeral:
            for key in o.gain:
                assert key not in producers, "ambiguous fixture"
                producers[key] = o

    def merge_into(acc: Dict[Key, int], extra: Dict[Key, int]) -> None:
        for key, count in extra.items():
            if key[0] in BOOLEAN_FAMILIES:
                acc[key] = max(acc.get(key, 0), min(count, 1))
            else:
                acc[key] = acc.get(key, 0) + count

    def expand(key: Key, need: int) -> Dict[Key, int]:
        if need <= 0:
            return {}
        producer = producers.get(key)
        if producer is None:
            return {key: need}
        if key[0] in BOOLEAN_FAMILIES:
            apps = 1
        else:
            per = max(producer.gain[key].at(1), 1)
            apps = -(-need // per)
        acc: Dict[Key, int] = {}
        for rkey, rexpr in sorted(producer.requirements.items()):
            merge_into(acc, expand(rkey, rexpr.at(apps)))
        return acc

    out: Dict[Key, int] = {}
    for key, need in sorted(demand.items()):
        merge_into(out, expand(key, need))
    return out


def oracle_min_cost(
    ops: Sequence[Operator],
    init: AbstractState,
    demand: Dict[Key, int],
    vocab: Optional[VocabularySpec],
    cost_bound: int,
) -> Optional[int]:
    """Exhaustive iterative-deepening search over folded applications.

    Cost of one (operator, multiplicity) step is the multiplicity; returns
    the smallest total cost whose sequence reaches the demand, or None.
    """
    from skillchain.abstraction import entails

    def dfs(s: AbstractState, left: int, memo: set) -> bool:
        if entails(s, demand):
            return True
        if left == 0:
            return False
        token = (s.canonical(), left)
        if token in memo:
            return False
        memo.add(token)
        for o in ops:
            top = min(max_applicable(o, s), left)
            for n in range(1, top + 1):
                if dfs(apply_effects(s, o, n, vocab), left - n, memo):
                    return True
        return False

    for budget in range(cost_bound + 1):
        if dfs(init, budget, set()):
            return budget
    return None


def random_planning_case(
    rng: random.Random, vocab: VocabularySpec
) -> Optional[Tuple[List[Operator], AbstractState, Dict[Key, int]]]:
    """Random <=5-operator library plus a goal solvable in <=8 applications."""
    keys = ["wood", "stone", "iron", "coal", "token"]
    ops: List[Operator] = []
    for i in range(rng.randint(2, 5)):
        gain_key = rng.choice(keys)
        req: Dict[str, object] = {}
        cons: Dict[str, object] = {}
        for k in rng.sample(keys, rng.randint(0, 2)):
            if k == gain_key:
                continue
            amount = rng.randint(1, 2)
            req[k] = f"{amount}*n" if rng.random() < 0.6 else amount
            if rng.random() < 0.7:
                cons[k] = req[k]
        if rng.random() < 0.3:
            req["placed:table"] = 1
        gain: Dict[str, object] = {gain_key: f"{rng.randint(1, 2)}*n"}
        if rng.random() < 0.2:
            gain["placed:table"] = 1
        ops.append(op(f"Op{i}", req=req, cons=cons, gain=gain))
    s = AbstractState()
    for _ in range(rng.randint(1, 8)):
        applicable = [o for o in ops if max_applicable(o, s) >= 1]
        if not applicable:
            break
        s = apply_effects(s, rng.choice(applicable), 1, vocab)
    facts = list(s.items())
    if not facts:
        return None
    goal: Dict[Key, int] = {}
    for key, count in rng.sample(facts, rng.randint(1, min(2, len(facts)))):
        goal[key] = rng.randint(1, count)
    return ops, AbstractState(), goal


def random_substitution_case(
    rng: random.Random,
) -> Tuple[Dict[Key, int], List[Operator]]:
    """A random DAG of ephemeral producers plus a demand against it."""
    leaves = ["wood", "stone", "iron", "coal"]
    n_eph = rng.randint(1, 4)
    ops: List[Operator] = []
    boolean_facts: List[str] = []
    for i in range(n_eph):
        fact = f"near:site{i}"
        req: Dict[str, object] = {}
        for leaf in rng.sample(leaves, rng.randint(1, 3)):
            if rng.random() < 0.5:
                req[leaf] = f"{rng.randint(1, 4)}*n"
            else:
                req[leaf] = rng.randint(1, 5)
        if boolean_facts and rng.random() < 0.6:
            req[rng.choice(boolean_facts)] = 1
        ops.append(
            op(f"Build{i}", req=req, gain={fact: 1}, eph=True)
        )
        boolean_facts.append(fact)
    demand: Dict[Key, int] = {}
    for leaf in rng.sample(leaves, rng.randint(0, 2)):
        demand[parse_key(leaf)] = rng.randint(1, 4)
    for fact in rng.sample(boolean_facts, rng.randint(1, len(boolean_facts))):
        demand[parse_key(fact)] = 1
    return demand, ops
