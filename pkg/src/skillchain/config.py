"""Declarative run configuration and the bundled desk-scale scenarios.

A run file is YAML: a goal, a manifest reference, optional recipe
overrides, and sub-tables for the training, advantage, optimizer, and
network knobs.  Files can pull shared fragments in with ``include:``;
values in the including file win.  ``bundled:<name>`` resolves against
the package's data directory, every other path against the file that
mentions it.
"""

import dataclasses
import os
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Mapping, Optional, Tuple

import yaml

from .abstraction import VocabularySpec
from .minicraft import ITEMS, Recipe, RecipeConfig, default_config
from .policy import GaeConfig, NetConfig, PpoConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad run configuration; the message names the offending field."""


DEFAULT_VOCAB = VocabularySpec(
    subjects=ITEMS,
    placeable=("table", "furnace", "plant"),
    tools=frozenset({"wood_pickaxe", "stone_pickaxe", "iron_pickaxe"}),
)

SCENARIOS: Tuple[str, ...] = ("collect_wood", "chain3", "diamond", "ood_iron")


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs, resolved and validated."""

    seed: int
    goal: Dict[str, int]
    manifest_text: str
    recipes: RecipeConfig
    train: TrainConfig
    gae: GaeConfig
    ppo: PpoConfig
    net: NetConfig
    shift: Optional[RecipeConfig] = None
    shift_frames: int = 0
    label: str = "run"

    def __post_init__(self):
        if not self.goal:
            raise ConfigError("goal: at least one fact is required")
        for key, count in self.goal.items():
            if count <= 0:
                raise ConfigError(f"goal.{key}: count must be positive")


def bundled_text(name: str) -> str:
    """Contents of a file shipped in the package data directory."""
    try:
        return resources.files("skillchain").joinpath("data", name).read_text()
    except FileNotFoundError:
        raise ConfigError(f"no bundled file named {name!r}") from None


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _load_doc(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    base_dir = os.path.dirname(os.path.abspath(path))
    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        if inc.startswith("bundled:"):
            inc_doc = yaml.safe_load(bundled_text(inc[len("bundled:"):])) or {}
        else:
            inc_doc = _load_doc(os.path.join(base_dir, inc))
        merged = _deep_merge(merged, inc_doc)
    return _deep_merge(merged, doc)


def _dataclass_from(cls, doc: Mapping, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def recipe_config_from_doc(doc: Mapping) -> RecipeConfig:
    """The canonical recipe book with per-field overrides applied.

    ``recipes`` entries merge per recipe (an override may change just
    ``consumes``); ``placements`` and ``spawn_densities`` merge per key;
    scalar knobs replace outright.
    """
    base = default_config()
    scalars = {}
    recipes = dict(base.recipes)
    placements = {k: dict(v) for k, v in base.placements.items()}
    densities = dict(base.spawn_densities)
    known = {f.name for f in dataclasses.fields(RecipeConfig)}
    for key, value in doc.items():
        if key == "recipes":
            for name, fields in value.items():
                current = recipes.get(name)
                entry = {
                    "output": current.output if current else name,
                    "requires": dict(current.requires) if current else {},
                    "consumes": dict(current.consumes) if current else {},
                    "stations": tuple(current.stations) if current else (),
                }
                for fname, fval in fields.items():
                    if fname not in entry:
                        raise ConfigError(f"recipes.{name}.{fname}: unknown field")
                    entry[fname] = tuple(fval) if fname == "stations" else fval
                recipes[name] = Recipe(**entry)
        elif key == "placements":
            for name, costs in value.items():
                placements[name] = dict(costs)
        elif key == "spawn_densities":
            densities.update(value)
        elif key in known:
            scalars[key] = value
        else:
            raise ConfigError(f"recipes.{key}: unknown field")
    config = dataclasses.replace(
        base,
        recipes=recipes,
        placements=placements,
        spawn_densities=densities,
        **scalars,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(f"recipes: {exc}") from exc
    return config


def _resolve_manifest(ref, base_dir: str) -> str:
    if isinstance(ref, dict):
        return yaml.safe_dump(ref, sort_keys=False)
    if not isinstance(ref, str) or not ref:
        raise ConfigError("manifest: expected a path or an inline mapping")
    if ref.startswith("bundled:"):
        return bundled_text(ref[len("bundled:"):])
    path = os.path.join(base_dir, ref)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"manifest: cannot read {path}: {exc}") from exc


def run_config_from_doc(doc: Mapping, base_dir: str = ".") -> RunConfig:
    doc = dict(doc)
    known = {
        "seed", "goal", "manifest", "recipes", "train", "gae", "ppo", "net",
        "backend", "shift", "label",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    if "goal" not in doc or not isinstance(doc["goal"], dict):
        raise ConfigError("goal: a mapping of fact counts is required")
    if "manifest" not in doc:
        raise ConfigError("manifest: required")
    goal = {str(k): int(v) for k, v in doc["goal"].items()}
    manifest_text = _resolve_manifest(doc["manifest"], base_dir)
    recipe_doc = doc.get("recipes", {}) or {}
    recipes = recipe_config_from_doc(recipe_doc)
    train_doc = dict(doc.get("train", {}) or {})
    if "backend" in doc:
        train_doc.setdefault("backend", doc["backend"])
    shift = None
    shift_frames = 0
    if doc.get("shift") is not None:
        shift_doc = dict(doc["shift"])
        shift_frames = int(shift_doc.pop("total_frames", 0))
        shift = recipe_config_from_doc(_deep_merge(recipe_doc, shift_doc))
    return RunConfig(
        seed=int(doc.get("seed", 0)),
        goal=goal,
        manifest_text=manifest_text,
        recipes=recipes,
        train=_dataclass_from(TrainConfig, train_doc, "train"),
        gae=_dataclass_from(GaeConfig, doc.get("gae", {}) or {}, "gae"),
        ppo=_dataclass_from(PpoConfig, doc.get("ppo", {}) or {}, "ppo"),
        net=_dataclass_from(NetConfig, doc.get("net", {}) or {}, "net"),
        shift=shift,
        shift_frames=shift_frames,
        label=str(doc.get("label", "run")),
    )


def load_run_config(path: str) -> RunConfig:
    return run_config_from_doc(_load_doc(path), os.path.dirname(os.path.abspath(path)))


def load_scenario(name: str) -> RunConfig:
    """One of the bundled experiment setups, by short name."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; pick from {', '.join(SCENARIOS)}")
    doc = yaml.safe_load(bundled_text(f"scenario_{name}.yaml"))
    return run_config_from_doc(doc, base_dir=".")
