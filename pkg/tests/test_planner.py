import random

import pytest

from helpers import op, oracle_min_cost, random_planning_case, state
from skillchain.abstraction import AbstractState, VocabularySpec, entails, parse_key
from skillchain.operators import SkillLibrary, SkillStatus, apply_effects
from skillchain.planner import Goal, NoPlanError, Plan, PlanStep, plan, prerequisite_plan

VOCAB = VocabularySpec(
    subjects=(
        "wood",
        "stone",
        "iron",
        "coal",
        "token",
        "wood_pickaxe",
        "stone_pickaxe",
    ),
    placeable=("table", "furnace"),
    tools=frozenset({"wood_pickaxe", "stone_pickaxe"}),
    ceilings={
        "wood": 64,
        "stone": 64,
        "iron": 16,
        "coal": 16,
        "token": 8,
        "wood_pickaxe": 1,
        "stone_pickaxe": 1,
    },
)


def stone_pickaxe_library():
    return [
        op("GetWood", gain={"wood": "1*n"}),
        op(
            "PlaceTable",
            req={"wood": 4},
            cons={"wood": 4},
            gain={"placed:table": 1},
        ),
        op(
            "MakeWoodPickaxe",
            req={"wood": "2*n", "placed:table": 1},
            cons={"wood": "2*n"},
            gain={"wood_pickaxe": 1},
        ),
        op("GetStone", req={"wood_pickaxe": 1}, gain={"stone": "1*n"}),
        op(
            "MakeStonePickaxe",
            req={"wood": "1*n", "stone": "3*n", "wood_pickaxe": 1, "placed:table": 1},
            cons={"wood": "1*n", "stone": "3*n"},
            gain={"stone_pickaxe": 1},
        ),
    ]


def test_worked_example_plan():
    result = plan(
        stone_pickaxe_library(), state({}), Goal.of({"stone_pickaxe": 1}), VOCAB
    )
    assert [str(s) for s in result.steps] == [
        "GetWood(7)",
        "PlaceTable",
        "MakeWoodPickaxe",
        "GetStone(3)",
        "MakeStonePickaxe",
    ]
    assert result.cost == 13
    assert entails(result.ledger[-1], {parse_key("stone_pickaxe"): 1})


def test_plan_ledger_replays():
    lib = stone_pickaxe_library()
    result = plan(lib, state({}), Goal.of({"stone_pickaxe": 1}), VOCAB)
    by_name = {o.name: o for o in lib}
    z = result.ledger[0]
    for step, expected in zip(result.steps, result.ledger[1:]):
        z = apply_effects(z, by_name[step.op_name], step.multiplicity, VOCAB)
        assert z == expected


def test_empty_plan_when_goal_holds():
    result = plan(
        stone_pickaxe_library(), state({"wood": 3}), Goal.of({"wood": 2}), VOCAB
    )
    assert result.steps == ()
    assert result.cost == 0


def test_no_plan_lists_unsatisfiable_facts():
    with pytest.raises(NoPlanError) as err:
        plan(stone_pickaxe_library(), state({}), Goal.of({"iron": 1}), VOCAB)
    assert err.value.unsatisfiable == [parse_key("iron")]
    assert "iron" in str(err.value)


def test_goal_beyond_ceiling_is_unsatisfiable():
    with pytest.raises(NoPlanError):
        plan(stone_pickaxe_library(), state({}), Goal.of({"wood": 200}), VOCAB)


def test_refuted_operators_never_planned():
    lib = SkillLibrary(stone_pickaxe_library())
    lib.mark("GetWood", SkillStatus.REFUTED)
    with pytest.raises(NoPlanError):
        plan(lib.active(), state({}), Goal.of({"stone_pickaxe": 1}), VOCAB)


def test_plan_deterministic_under_input_order():
    goal = Goal.of({"stone_pickaxe": 1})
    a = plan(stone_pickaxe_library(), state({}), goal, VOCAB)
    b = plan(list(reversed(stone_pickaxe_library())), state({}), goal, VOCAB)
    assert a.steps == b.steps
    assert str(a) == str(b)


def test_prerequisite_plan_reaches_requirements():
    lib = stone_pickaxe_library()
    target = op(
        "MakeIronPickaxe",
        req={
            "wood": "2*n",
            "stone": "1*n",
            "stone_pickaxe": 1,
            "placed:table": 1,
        },
        cons={"wood": "1*n", "stone": "1*n"},
        gain={"token": 1},
    )
    result = prerequisite_plan(lib, target, state({}), VOCAB)
    final = result.ledger[-1]
    assert final.count(parse_key("wood")) >= 2
    assert final.count(parse_key("stone")) >= 1
    assert final.count(parse_key("stone_pickaxe")) >= 1
    assert final.count(parse_key("placed:table")) >= 1


def test_prerequisite_plan_substitutes_ephemeral():
    place = op("PlaceTable", req={"wood": 4}, gain={"near:table": 1}, eph=True)
    gather_wood = op("GatherWood", gain={"wood": "1*n"})
    gather_iron = op("GatherIron", gain={"iron": "1*n"})
    target = op(
        "CraftPickaxe",
        req={"wood": 2, "iron": 1, "near:table": 1},
        cons={"wood": 2, "iron": 1},
        gain={"wood_pickaxe": 1},
    )
    result = prerequisite_plan([place, gather_wood, gather_iron], target, state({}))
    final = result.ledger[-1]
    assert final.count(parse_key("wood")) >= 6
    assert final.count(parse_key("iron")) >= 1
    assert result.cost == 7


def test_goal_parsing():
    g = Goal.of({"diamond": 1, "near:table": 1, "wood": 0})
    assert g.demand() == {parse_key("diamond"): 1, parse_key("near:table"): 1}
    with pytest.raises(ValueError):
        Goal.of({"wood": -1})


FUZZ_VOCAB = VocabularySpec(
    subjects=("wood", "stone", "iron", "coal", "token"),
    placeable=("table",),
    ceilings={"wood": 8, "stone": 8, "iron": 8, "coal": 8, "token": 8},
)


def test_plan_cost_matches_exhaustive_oracle():
    rng = random.Random(20260814)
    solved = 0
    while solved < 500:
        case = random_planning_case(rng, FUZZ_VOCAB)
        if case is None:
            continue
        ops, init, goal = case
        want = oracle_min_cost(ops, init, goal, FUZZ_VOCAB, cost_bound=8)
        if want is None:
            continue
        result = plan(ops, init, Goal.of(goal), FUZZ_VOCAB)
        assert result.cost == want, (goal, [o.name for o in ops], str(result))
        assert entails(result.ledger[-1], goal)
        assert result.cost == sum(s.multiplicity for s in result.steps)
        solved += 1
