import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillchain.abstraction import (
    HAS,
    NEAR,
    PLACED,
    AbstractState,
    FactLayout,
    VocabularySpec,
    abstract_state,
    apply_delta,
    entails,
    format_key,
    parse_key,
    shortfall,
)

VOCAB = VocabularySpec(
    subjects=("wood", "stone", "iron", "coal", "wood_pickaxe"),
    placeable=("table", "furnace"),
    tools=frozenset({"wood_pickaxe"}),
    ceilings={"wood": 9, "stone": 9, "iron": 9, "coal": 9, "wood_pickaxe": 1},
)


class FakeEnvState:
    def __init__(self, inventory, placed, near):
        self._inv = inventory
        self._placed = placed
        self._near = near

    def inventory_counts(self):
        return dict(self._inv)

    def placed_subjects(self):
        return list(self._placed)

    def near_subjects(self):
        return list(self._near)


def test_parse_key_roundtrip():
    assert parse_key("wood") == (HAS, "wood")
    assert parse_key("near:table") == (NEAR, "table")
    assert parse_key("placed:furnace") == (PLACED, "furnace")
    for text in ("wood", "near:table", "placed:furnace"):
        assert format_key(parse_key(text)) == text


def test_parse_key_rejects_unknown_family():
    with pytest.raises(ValueError):
        parse_key("holding:wood")
    with pytest.raises(ValueError):
        parse_key("near:")


def test_abstract_state_walk():
    env = FakeEnvState({"wood": 5, "stone": 0}, ["table"], ["table"])
    z = abstract_state(env, VOCAB)
    assert z.to_dict() == {
        (HAS, "wood"): 5,
        (PLACED, "table"): 1,
        (NEAR, "table"): 1,
    }


def test_abstract_state_drops_zero_and_unknown():
    env = FakeEnvState({"wood": 0, "lapis": 3}, [], ["shrine"])
    z = abstract_state(env, VOCAB)
    assert len(z) == 0


def test_abstract_clamps_to_ceiling():
    env = FakeEnvState({"wood": 50}, [], [])
    z = abstract_state(env, VOCAB)
    assert z.count((HAS, "wood")) == 9


def test_zero_counts_never_stored():
    z = AbstractState({(HAS, "wood"): 0, (HAS, "stone"): 2})
    assert (HAS, "wood") not in z.to_dict()
    assert z.count((HAS, "wood")) == 0


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        AbstractState({(HAS, "wood"): -1})


def test_boolean_family_clamps():
    z = AbstractState({(PLACED, "table"): 3, (NEAR, "table"): 2})
    assert z.count((PLACED, "table")) == 1
    assert z.count((NEAR, "table")) == 1


def test_entails_pointwise():
    z = AbstractState({(HAS, "wood"): 5, (PLACED, "table"): 1})
    assert entails(z, {(HAS, "wood"): 3})
    assert entails(z, {(HAS, "wood"): 5, (PLACED, "table"): 1})
    assert not entails(z, {(HAS, "wood"): 6})
    assert not entails(z, {(NEAR, "table"): 1})
    assert entails(z, {})


def test_shortfall_reports_missing():
    z = AbstractState({(HAS, "wood"): 2})
    miss = shortfall(z, {(HAS, "wood"): 5, (HAS, "iron"): 1})
    assert miss == {(HAS, "wood"): 3, (HAS, "iron"): 1}


def test_apply_delta_subtract_then_add():
    z = AbstractState({(HAS, "wood"): 2, (HAS, "iron"): 1, (HAS, "coal"): 1})
    z2 = apply_delta(
        z,
        {(HAS, "wood"): 1, (HAS, "iron"): 1, (HAS, "coal"): 1},
        {(HAS, "wood_pickaxe"): 1},
        VOCAB,
    )
    assert z2.to_dict() == {(HAS, "wood"): 1, (HAS, "wood_pickaxe"): 1}


def test_apply_delta_underflow_raises():
    z = AbstractState({(HAS, "wood"): 1})
    with pytest.raises(ValueError):
        apply_delta(z, {(HAS, "wood"): 2}, {}, VOCAB)


def test_apply_delta_respects_ceiling():
    z = AbstractState({(HAS, "wood"): 8})
    z2 = apply_delta(z, {}, {(HAS, "wood"): 5}, VOCAB)
    assert z2.count((HAS, "wood")) == 9


def test_vocab_rejects_bad_entries():
    with pytest.raises(ValueError):
        VocabularySpec(subjects=("wood",), placeable=(), ceilings={"wood": 0})
    with pytest.raises(ValueError):
        VocabularySpec(subjects=("wood",), placeable=(), tools=frozenset({"axe"}))
    with pytest.raises(ValueError):
        VOCAB.check_key((HAS, "lapis"))
    with pytest.raises(ValueError):
        VOCAB.check_key((NEAR, "wood"))


# hypothesis strategies over the fixed test vocabulary

fact_counts = st.fixed_dictionaries(
    {},
    optional={
        (HAS, "wood"): st.integers(0, 9),
        (HAS, "stone"): st.integers(0, 9),
        (HAS, "iron"): st.integers(0, 9),
        (PLACED, "table"): st.integers(0, 1),
        (NEAR, "table"): st.integers(0, 1),
    },
)


@given(fact_counts)
def test_state_equality_and_hash_ignore_zero_entries(facts):
    z1 = AbstractState(facts)
    z2 = AbstractState({k: v for k, v in facts.items() if v > 0})
    assert z1 == z2
    assert hash(z1) == hash(z2)
    assert all(v > 0 for _, v in z1.items())


@given(fact_counts)
def test_entailment_reflexive(facts):
    z = AbstractState(facts)
    assert entails(z, z.to_dict())


@given(fact_counts, fact_counts)
def test_entailment_matches_pointwise_oracle(a, b):
    za = AbstractState(a)
    demand = {k: v for k, v in b.items() if v > 0}
    expected = all(za.count(k) >= v for k, v in demand.items())
    assert entails(za, demand) == expected


@given(fact_counts, st.integers(0, 5))
def test_adding_preserves_entailment(facts, extra):
    z = AbstractState(facts)
    bigger = apply_delta(z, {}, {(HAS, "wood"): extra}, VOCAB)
    assert entails(bigger, z.to_dict())


@given(fact_counts)
def test_fact_layout_roundtrip(facts):
    layout = FactLayout(VOCAB)
    z = AbstractState(facts)
    vec = layout.state_vector(z)
    assert layout.to_state(vec) == z
    assert vec.shape == (layout.size,)
    assert np.all(vec >= 0)


def test_fact_layout_demand_matches_entails():
    layout = FactLayout(VOCAB)
    z = AbstractState({(HAS, "wood"): 4, (NEAR, "table"): 1})
    demand = {(HAS, "wood"): 3, (NEAR, "table"): 1}
    vec = layout.state_vector(z)
    dvec = layout.demand_vector(demand)
    assert bool(np.all(vec >= dvec)) == entails(z, demand)
