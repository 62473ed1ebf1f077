"""Run-configuration loading: includes, bundled refs, overrides, errors."""

import dataclasses

import pytest
import yaml

from skillchain.config import (
    DEFAULT_VOCAB,
    SCENARIOS,
    ConfigError,
    bundled_text,
    load_run_config,
    load_scenario,
    recipe_config_from_doc,
    run_config_from_doc,
)
from skillchain.minicraft import default_config
from skillchain.operators import parse_manifest

MINIMAL = {
    "goal": {"wood": 1},
    "manifest": {
        "operators": [
            {"name": "CollectWood", "requirements": {}, "consumption": {},
             "gain": {"wood": "1*n"}},
        ]
    },
}


def test_minimal_doc_resolves():
    rc = run_config_from_doc(MINIMAL)
    assert rc.goal == {"wood": 1}
    assert rc.seed == 0
    assert rc.label == "run"
    ops = parse_manifest(rc.manifest_text)
    assert [op.name for op in ops] == ["CollectWood"]
    assert rc.recipes == default_config()
    assert rc.shift is None


def test_goal_required():
    with pytest.raises(ConfigError, match="goal"):
        run_config_from_doc({"manifest": "bundled:true_manifest.yaml"})


def test_goal_counts_positive():
    doc = dict(MINIMAL, goal={"wood": 0})
    with pytest.raises(ConfigError, match="goal.wood"):
        run_config_from_doc(doc)


def test_unknown_top_level_field_named():
    doc = dict(MINIMAL, horizon=128)
    with pytest.raises(ConfigError, match="horizon"):
        run_config_from_doc(doc)


def test_unknown_train_field_named():
    doc = dict(MINIMAL, train={"total_frames": 10, "minibatch": 4})
    with pytest.raises(ConfigError, match="train.minibatch"):
        run_config_from_doc(doc)


def test_unknown_recipe_scalar_rejected():
    with pytest.raises(ConfigError, match="recipes.gravity"):
        recipe_config_from_doc({"gravity": 3})


def test_bundled_manifest_reference():
    doc = dict(MINIMAL, manifest="bundled:true_manifest.yaml")
    rc = run_config_from_doc(doc)
    names = [op.name for op in parse_manifest(rc.manifest_text)]
    assert "CraftIronPickaxe" in names


def test_bundled_missing_file_errors():
    with pytest.raises(ConfigError, match="no_such_file"):
        bundled_text("no_such_file.yaml")


def test_recipe_override_merges_per_recipe():
    cfg = recipe_config_from_doc({
        "recipes": {"iron_pickaxe": {
            "requires": {"wood": 2, "iron": 2, "coal": 1, "stone_pickaxe": 1},
            "consumes": {"wood": 1, "iron": 2, "coal": 1},
        }},
        "food_period": 200,
    })
    recipe = cfg.recipes["iron_pickaxe"]
    assert recipe.consumes["iron"] == 2
    # untouched fields come from the canonical book
    assert recipe.output == "iron_pickaxe"
    assert recipe.stations == ("table", "furnace")
    assert cfg.food_period == 200
    assert cfg.drink_period == default_config().drink_period


def test_recipe_override_validates():
    with pytest.raises(ConfigError, match="recipes"):
        recipe_config_from_doc({"recipes": {"iron_pickaxe": {"consumes": {"iron": 99}}}})


def test_shift_block_splits_budget_and_recipes():
    doc = dict(
        MINIMAL,
        recipes={"food_period": 160},
        shift={
            "total_frames": 500,
            "recipes": {"iron_pickaxe": {
                "requires": {"wood": 2, "iron": 2, "coal": 1, "stone_pickaxe": 1},
                "consumes": {"wood": 1, "iron": 2, "coal": 1},
            }},
        },
    )
    rc = run_config_from_doc(doc)
    assert rc.shift_frames == 500
    assert rc.recipes.recipes["iron_pickaxe"].consumes["iron"] == 1
    assert rc.shift.recipes["iron_pickaxe"].consumes["iron"] == 2
    # base overrides carry into the shifted config
    assert rc.shift.food_period == 160


def test_backend_key_feeds_train_config():
    doc = dict(MINIMAL, backend="llm")
    assert run_config_from_doc(doc).train.backend == "llm"
    doc = dict(MINIMAL, backend="llm", train={"backend": "mechanical"})
    assert run_config_from_doc(doc).train.backend == "mechanical"


def test_include_merging(tmp_path):
    (tmp_path / "base.yaml").write_text(yaml.safe_dump({
        "seed": 3,
        "train": {"total_frames": 100, "n_envs": 2},
    }))
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({
        "include": ["base.yaml"],
        "goal": {"wood": 1},
        "manifest": "bundled:true_manifest.yaml",
        "train": {"total_frames": 999},
    }))
    rc = load_run_config(str(tmp_path / "run.yaml"))
    assert rc.seed == 3
    assert rc.train.total_frames == 999    # including file wins
    assert rc.train.n_envs == 2            # untouched include value survives


def test_relative_manifest_path(tmp_path):
    (tmp_path / "ops.yaml").write_text(bundled_text("true_manifest.yaml"))
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({
        "goal": {"stone": 1},
        "manifest": "ops.yaml",
    }))
    rc = load_run_config(str(tmp_path / "run.yaml"))
    assert "CollectStone" in rc.manifest_text


def test_all_scenarios_load():
    for name in SCENARIOS:
        rc = load_scenario(name)
        assert rc.label == name
        assert rc.train.total_frames > 0
        assert parse_manifest(rc.manifest_text)


def test_unknown_scenario():
    with pytest.raises(ConfigError, match="nope"):
        load_scenario("nope")


def test_ood_scenario_shifts_iron():
    rc = load_scenario("ood_iron")
    assert rc.shift is not None and rc.shift_frames > 0
    before = rc.recipes.recipes["iron_pickaxe"].consumes["iron"]
    after = rc.shift.recipes["iron_pickaxe"].consumes["iron"]
    assert (before, after) == (1, 2)


def test_default_vocab_covers_bundled_manifests():
    for name in ("true_manifest.yaml", "prior_manifest.yaml"):
        for op in parse_manifest(bundled_text(name)):
            op.check_vocab(DEFAULT_VOCAB)


def test_run_config_is_frozen():
    rc = run_config_from_doc(MINIMAL)
    with pytest.raises(dataclasses.FrozenInstanceError):
        rc.seed = 5
