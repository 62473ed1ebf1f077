"""Minimum-cost planning over the abstract fact ledger.

Plan cost is the total number of operator applications; repeated
applications of one operator fold into a single step with a multiplicity
(GetWood at n=7 is one step of cost 7).  Ties break toward fewer steps,
then lexicographically over the step list, so identical inputs always
yield the identical plan.

The search is A* under an admissible lower bound computed on a relaxed
ledger that ignores consumption, so optimality is preserved while deep
prerequisite chains stop exploding the frontier.
"""

import heapq
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .abstraction import (
    AbstractState,
    Key,
    VocabularySpec,
    entails,
    format_key,
    parse_key,
)
from .operators import (
    DEFAULT_REACH_DEPTH,
    MAX_MULTIPLICITY,
    Operator,
    apply_effects,
    max_applicable,
    reachable_facts,
    substitute_ephemeral,
)

DEFAULT_COST_CAP = 512

_INF = float("inf")


class NoPlanError(Exception):
    """Raised when no plan reaches the goal; lists the facts that failed."""

    def __init__(self, goal: Mapping[Key, int], unsatisfiable: Sequence[Key], note: str):
        self.goal = dict(goal)
        self.unsatisfiable = list(unsatisfiable)
        listed = ", ".join(format_key(k) for k in self.unsatisfiable) or "none"
        super().__init__(f"no plan: {note} (unsatisfiable facts: {listed})")


@dataclass(frozen=True)
class Goal:
    """Demanded fact counts, kept in a canonical sorted order."""

    facts: Tuple[Tuple[Key, int], ...]

    @staticmethod
    def of(demand: Mapping) -> "Goal":
        items = []
        for key, count in demand.items():
            if isinstance(key, str):
                key = parse_key(key)
            count = int(count)
            if count < 0:
                raise ValueError(f"negative goal count for {format_key(key)}")
            if count > 0:
                items.append((key, count))
        return Goal(tuple(sorted(items)))

    def demand(self) -> Dict[Key, int]:
        return dict(self.facts)

    def __str__(self) -> str:
        return ", ".join(f"{format_key(k)}>={v}" for k, v in self.facts)


@dataclass(frozen=True, order=True)
class PlanStep:
    op_name: str
    multiplicity: int

    def __str__(self) -> str:
        if self.multiplicity == 1:
            return self.op_name
        return f"{self.op_name}({self.multiplicity})"


@dataclass(frozen=True)
class Plan:
    steps: Tuple[PlanStep, ...]
    cost: int
    ledger: Tuple[AbstractState, ...]  # states before/after each step

    def __str__(self) -> str:
        return " -> ".join(str(s) for s in self.steps) if self.steps else "<empty>"

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class _BoundTables:
    """Static relaxation tables shared by the admissible cost-to-go bounds."""

    producers: Mapping[Key, tuple]  # key -> ((rate, req1 pairs), ...)
    pairs: Tuple[Tuple[Key, int], ...]  # closure of queried (key, threshold)
    caps: Mapping[Key, int]  # per-key clamp that keeps the bounds exact
    groups: Mapping[Key, Key]  # key -> producer-group representative
    group_cons: Mapping[Key, tuple]  # group -> ((key, per_unit, fixed), ...)


def _bound_tables(ops: Sequence[Operator], demand: Mapping[Key, int]) -> _BoundTables:
    producers: Dict[Key, list] = {}
    for o in ops:
        req1 = tuple(
            sorted((k, e.at(1)) for k, e in o.requirements.items() if e.at(1) > 0)
        )
        for key, expr in o.gain.items():
            rate = expr.per_unit + expr.fixed
            if rate > 0:
                producers.setdefault(key, []).append((rate, req1))
    pairs: set = set()
    expanded: set = set()
    frontier = list(demand.items())
    while frontier:
        key, threshold = frontier.pop()
        pairs.add((key, threshold))
        if key in expanded:
            continue
        expanded.add(key)
        for _, req1 in producers.get(key, ()):
            frontier.extend(req1)
    ordered_pairs = tuple(sorted(pairs))
    caps: Dict[Key, int] = {}
    for key, threshold in ordered_pairs:
        caps[key] = max(caps.get(key, 0), threshold)

    # union keys gained by a common operator; one application only ever
    # advances a single group, so per-group floors sum without recounting
    parent: Dict[Key, Key] = {}

    def find(key: Key) -> Key:
        root = key
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(key, key) != key:
            parent[key], key = root, parent[key]
        return root

    members: Dict[Key, list] = {}
    for o in ops:
        gained = [k for k, e in o.gain.items() if e.per_unit + e.fixed > 0]
        for key in gained[1:]:
            parent[find(key)] = find(gained[0])
    for o in ops:
        gained = [k for k, e in o.gain.items() if e.per_unit + e.fixed > 0]
        members.setdefault(find(gained[0]), []).append(o)
    groups = {key: find(key) for key in producers}

    # per group: a consumption rate no split of its firings can undershoot,
    # taking mins across member operators separately for each expr part
    group_cons: Dict[Key, tuple] = {}
    for group, ops_in in members.items():
        consumed: set = set()
        for o in ops_in:
            consumed.update(k for k, e in o.consumption.items() if e.at(1) > 0)
        rows = []
        for key in sorted(consumed):
            per_unit = min(
                (o.consumption[key].per_unit if key in o.consumption else 0)
                for o in ops_in
            )
            fixed = min(
                (o.consumption[key].fixed if key in o.consumption else 0)
                for o in ops_in
            )
            if per_unit > 0 or fixed > 0:
                rows.append((key, per_unit, fixed))
        if rows:
            group_cons[group] = tuple(rows)

    # grow clamps to the largest supply the flow pass can ever demand, so
    # clamped counts and true counts always produce the same bound
    top_floor: Dict[Key, int] = {}
    for key, threshold in ordered_pairs:
        if key in groups:
            group = groups[key]
            top_floor[group] = max(top_floor.get(group, 0), threshold)
    supply: Dict[Key, int] = dict(demand)
    for group, firings in top_floor.items():
        for key, per_unit, fixed in group_cons.get(group, ()):
            extra = per_unit * firings + (fixed if firings else 0)
            supply[key] = supply.get(key, 0) + extra
    for key, worst in supply.items():
        if key in caps:
            caps[key] = max(caps[key], worst)

    frozen = {key: tuple(rows) for key, rows in producers.items()}
    return _BoundTables(frozen, ordered_pairs, caps, groups, group_cons)


def _demand_lower_bound(
    counts: Mapping[Key, int],
    pairs: Tuple[Tuple[Key, int], ...],
    producers: Mapping[Key, list],
    demand: Mapping[Key, int],
) -> float:
    """Admissible cost-to-go: max over demanded facts of a relaxed bound.

    For each (key, threshold) pair the bound is the larger of two safe
    underestimates: applications needed at the best gain rate across all
    producers, and one application after the cheapest producer's own
    startup facts.  Summing the two re-counts applications whenever one
    operator feeds both sides, so only the max is taken.
    """
    best = {}
    rate_bound = {}
    for key, threshold in pairs:
        have = counts.get(key, 0)
        if have >= threshold:
            best[(key, threshold)] = 0
            continue
        rates = [rate for rate, _ in producers.get(key, ())]
        if not rates:
            best[(key, threshold)] = _INF
            continue
        rate_bound[(key, threshold)] = -(-(threshold - have) // max(rates))
        best[(key, threshold)] = _INF
    changed = True
    while changed:
        changed = False
        for pair in pairs:
            current = best[pair]
            if current == 0:
                continue
            floor = rate_bound.get(pair)
            if floor is None:
                continue
            startup = _INF
            for _, req1 in producers.get(pair[0], ()):
                worst = 0
                for needed in req1:
                    value = best.get(needed, _INF)
                    if value > worst:
                        worst = value
                        if worst >= startup:
                            break
                if worst + 1 < startup:
                    startup = worst + 1
            candidate = max(floor, startup)
            if candidate < current:
                best[pair] = candidate
                changed = True
    result = 0
    for key, threshold in demand.items():
        value = best.get((key, threshold), _INF)
        if value > result:
            result = value
    return result


def _group_floor_sum(
    counts: Mapping[Key, int], demand: Mapping[Key, int], tables: _BoundTables
) -> Tuple[float, float]:
    """Admissible cost-to-go: summed application floors over producer groups.

    Walks the facts every remaining plan must still reach, starting from the
    demand and recursing through the startup needs of keys with a single
    producer (that producer must fire, so its needs are unavoidable).  Each
    unmet fact puts an application floor on its producer group; floors from
    different groups count disjoint applications, so they add up.  A second
    pass charges the consumption those forced firings imply: stock spent on
    them must be produced over again before the demand can survive.

    Returns the sums before and after the consumption pass.  The first drops
    by at most one per application unit; the second is tighter but can fall
    faster, so only the first may justify cutting a multiplicity scan short.
    """
    producers = tables.producers
    floors: Dict[Key, int] = {}
    seen: set = set()
    stack = list(demand.items())
    while stack:
        key, threshold = stack.pop()
        if (key, threshold) in seen:
            continue
        seen.add((key, threshold))
        have = counts.get(key, 0)
        if have >= threshold:
            continue
        plist = producers.get(key)
        if not plist:
            return _INF, _INF
        rate = max(r for r, _ in plist)
        floor = -(-(threshold - have) // rate)
        group = tables.groups[key]
        if floor > floors.get(group, 0):
            floors[group] = floor
        if len(plist) == 1:
            stack.extend(plist[0][1])
    steady_sum = sum(floors.values())

    supply: Dict[Key, int] = dict(demand)
    for group, firings in floors.items():
        for key, per_unit, fixed in tables.group_cons.get(group, ()):
            supply[key] = supply.get(key, 0) + per_unit * firings + fixed
    for key, total in supply.items():
        have = counts.get(key, 0)
        if total <= have:
            continue
        plist = producers.get(key)
        if not plist:
            return steady_sum, _INF
        rate = max(r for r, _ in plist)
        floor = -(-(total - have) // rate)
        group = tables.groups[key]
        if floor > floors.get(group, 0):
            floors[group] = floor
    return steady_sum, sum(floors.values())


def _useful_multiplicities(
    op: Operator, state: AbstractState, vocab: Optional[VocabularySpec]
) -> range:
    """Multiplicities worth trying: 1 up to feasibility or gain saturation."""
    top = max_applicable(op, state, cap=MAX_MULTIPLICITY)
    if top < 1:
        return range(0)
    saturate = 1
    for key, expr in op.gain.items():
        ceiling = vocab.ceiling(key) if vocab else MAX_MULTIPLICITY
        have = state.count(key)
        if expr.per_unit > 0 and have < ceiling:
            need = -(-(ceiling - have - expr.fixed) // expr.per_unit)
            saturate = max(saturate, min(need, MAX_MULTIPLICITY))
    return range(1, min(top, saturate) + 1)


def _descent_cost(
    ordered: Sequence[Operator],
    init: AbstractState,
    demand: Mapping[Key, int],
    vocab: Optional[VocabularySpec],
    cost_to_go,
    cost_cap: int,
    pop_limit: int = 256,
) -> float:
    """Cost of the first plan found by chasing the bound downhill; not
    necessarily minimal, just a cheap cap for the exact search."""
    heap: List[tuple] = [(cost_to_go(init), 0, 0, init)]
    seen = {init.canonical()}
    pops = 0
    while heap and pops < pop_limit:
        _, cost, _, state = heapq.heappop(heap)
        pops += 1
        if entails(state, demand):
            return cost
        if cost >= cost_cap:
            continue
        for op in ordered:
            for n in _useful_multiplicities(op, state, vocab):
                child = apply_effects(state, op, n, vocab)
                child_key = child.canonical()
                if child_key in seen:
                    continue
                remaining = cost_to_go(child)
                if remaining == _INF:
                    continue
                seen.add(child_key)
                heapq.heappush(heap, (remaining, cost + n, len(seen), child))
    return _INF


def plan(
    ops: Sequence[Operator],
    init: AbstractState,
    goal: Goal,
    vocab: Optional[VocabularySpec] = None,
    cost_cap: int = DEFAULT_COST_CAP,
    reach_depth: int = DEFAULT_REACH_DEPTH,
) -> Plan:
    """Minimum-cost operator sequence from init to a state entailing the goal."""
    demand = goal.demand()
    if entails(init, demand):
        return Plan((), 0, (init,))

    bound = reachable_facts(ops, init, reach_depth, vocab)
    unreachable = [k for k, need in demand.items() if bound.get(k, 0) < need]
    if unreachable:
        raise NoPlanError(demand, sorted(unreachable), "goal facts unreachable")

    ordered = sorted(ops, key=lambda o: o.name)
    tables = _bound_tables(ordered, demand)
    relevant = tuple(sorted(tables.caps))
    bound_cache: Dict[tuple, Tuple[float, float]] = {}

    def bounds_of(state: AbstractState) -> Tuple[float, float]:
        # counts above a key's largest queried supply are equivalent, so
        # clamping gives the cache a small, dense domain
        profile = tuple(min(state.count(k), tables.caps[k]) for k in relevant)
        cached = bound_cache.get(profile)
        if cached is None:
            counts = dict(zip(relevant, profile))
            chain = _demand_lower_bound(counts, tables.pairs, tables.producers, demand)
            steady, flowed = _group_floor_sum(counts, demand, tables)
            cached = (max(chain, steady), max(chain, flowed))
            bound_cache[profile] = cached
        return cached

    def cost_to_go(state: AbstractState) -> float:
        return bounds_of(state)[1]

    if cost_to_go(init) == _INF:
        counts = {k: init.count(k) for k in relevant}
        stuck = [
            k
            for k, need in demand.items()
            if _demand_lower_bound(counts, tables.pairs, tables.producers, {k: need})
            == _INF
        ]
        raise NoPlanError(demand, sorted(stuck), "goal facts unreachable")

    # a quick bound-guided descent gives a plan cost that caps the search;
    # any feasible cost works, the exact search below never returns worse
    upper = _descent_cost(ordered, init, demand, vocab, cost_to_go, cost_cap)
    # multiplicity scans stop early only for operators whose consumption is
    # pure per-unit: only then does a longer step keep its own startup facts
    # satisfied, which the steady bound's monotonicity argument needs
    steady_ok = {
        o.name: all(e.fixed == 0 for e in o.consumption.values()) for o in ordered
    }

    # rank = (cost, step count, step list); lexicographically smaller wins,
    # so equal-cost plans prefer fewer folded steps, then operator names.
    # The heap orders by cost plus the admissible bound; goal states have a
    # zero bound, so the first goal popped is still the rank-minimal plan.
    best: Dict[tuple, tuple] = {init.canonical(): (0, 0, ())}
    heap: List[tuple] = [(cost_to_go(init), 0, 0, (), init)]

    while heap:
        _, cost, n_steps, path, state = heapq.heappop(heap)
        state_key = state.canonical()
        if (cost, n_steps, path) > best.get(state_key, (cost, n_steps, path)):
            continue
        if entails(state, demand):
            ledger = [init]
            replay = init
            for step in path:
                replay = apply_effects(
                    replay, next(o for o in ordered if o.name == step.op_name),
                    step.multiplicity, vocab,
                )
                ledger.append(replay)
            return Plan(tuple(path), cost, tuple(ledger))
        if cost >= cost_cap:
            continue
        for op in ordered:
            scan_break = steady_ok[op.name]
            for n in _useful_multiplicities(op, state, vocab):
                child = apply_effects(state, op, n, vocab)
                steady, remaining = bounds_of(child)
                if scan_break and cost + n + steady > upper:
                    break
                if remaining == _INF or cost + n + remaining > upper:
                    continue
                child_key = child.canonical()
                child_path = path + (PlanStep(op.name, n),)
                child_rank = (cost + n, n_steps + 1, child_path)
                seen = best.get(child_key)
                if seen is not None and seen <= child_rank:
                    continue
                best[child_key] = child_rank
                heapq.heappush(heap, (cost + n + remaining, *child_rank, child))

    raise NoPlanError(demand, sorted(demand), "search exhausted")


def prerequisite_plan(
    ops: Sequence[Operator],
    target: Operator,
    init: AbstractState,
    vocab: Optional[VocabularySpec] = None,
    cost_cap: int = DEFAULT_COST_CAP,
) -> Plan:
    """Plan to a state entailing the target's startup requirements.

    Transient requirement facts are replaced by their producers' own
    requirements before planning, so the goal reflects persistent stock.
    """
    demand = substitute_ephemeral(target.requirements_at(1), ops)
    return plan(ops, init, Goal.of(demand), vocab, cost_cap)
