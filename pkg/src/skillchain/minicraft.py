"""Desk-scale seeded crafting gridworld.

A 32x32 tile world with gatherable resources, craftable tools, placeable
stations, and survival intrinsics.  States are immutable values: `step`
returns a fresh state, so checkpointing is plain serialization and batches
can run in any order.  All randomness flows through an integer RNG stored
in the state, which keeps full-episode replay byte-identical.
"""

import pickle
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

__all__ = [
    "Action",
    "Block",
    "CheckpointError",
    "EnvState",
    "ITEMS",
    "MOB_CODE",
    "Observation",
    "Recipe",
    "RecipeConfig",
    "VOID_CODE",
    "batch_step",
    "default_config",
    "observe",
    "read_replay",
    "reset",
    "restore",
    "serialize",
    "step",
    "write_replay",
]


class Block(IntEnum):
    GRASS = 0
    WATER = 1
    STONE = 2
    TREE = 3
    COAL = 4
    IRON = 5
    DIAMOND = 6
    TABLE = 7
    FURNACE = 8
    PATH = 9
    LAVA = 10
    PLANT = 11
    RIPE_PLANT = 12


VOID_CODE = len(Block)       # out-of-bounds tiles in the local map
MOB_CODE = len(Block) + 1    # hostile mob overlay in the local map
N_MAP_CODES = len(Block) + 2

ITEMS: Tuple[str, ...] = (
    "wood",
    "stone",
    "coal",
    "iron",
    "diamond",
    "sapling",
    "apple",
    "wood_pickaxe",
    "stone_pickaxe",
    "iron_pickaxe",
)
_ITEM_INDEX = {name: i for i, name in enumerate(ITEMS)}

# Block types worth steering toward; terrain (grass/path) carries no signal.
OFFSET_BLOCKS: Tuple[Block, ...] = (
    Block.WATER,
    Block.STONE,
    Block.TREE,
    Block.COAL,
    Block.IRON,
    Block.DIAMOND,
    Block.TABLE,
    Block.FURNACE,
    Block.LAVA,
    Block.PLANT,
    Block.RIPE_PLANT,
)

WALKABLE: FrozenSet[int] = frozenset((Block.GRASS, Block.PATH))

INTRINSIC_NAMES: Tuple[str, ...] = ("health", "food", "drink", "energy")
INTRINSIC_MAX = 9


class Action(IntEnum):
    MOVE_UP = 0
    MOVE_DOWN = 1
    MOVE_LEFT = 2
    MOVE_RIGHT = 3
    INTERACT = 4
    PLACE_TABLE = 5
    PLACE_FURNACE = 6
    PLACE_PLANT = 7
    CRAFT_WOOD_PICKAXE = 8
    CRAFT_STONE_PICKAXE = 9
    CRAFT_IRON_PICKAXE = 10
    EAT = 11
    DRINK = 12
    SLEEP = 13
    NOOP = 14


# facing: 0 up, 1 down, 2 left, 3 right (row-major, row 0 at top)
_FACING_DELTAS: Tuple[Tuple[int, int], ...] = ((-1, 0), (1, 0), (0, -1), (0, 1))
_MOVE_FACING = {
    Action.MOVE_UP: 0,
    Action.MOVE_DOWN: 1,
    Action.MOVE_LEFT: 2,
    Action.MOVE_RIGHT: 3,
}

# gather table: faced block -> (item, required tool or None, block afterward)
_GATHER: Dict[int, Tuple[str, Optional[str], int]] = {
    Block.TREE: ("wood", None, Block.TREE),
    Block.STONE: ("stone", "wood_pickaxe", Block.PATH),
    Block.COAL: ("coal", "wood_pickaxe", Block.PATH),
    Block.IRON: ("iron", "stone_pickaxe", Block.PATH),
    Block.DIAMOND: ("diamond", "iron_pickaxe", Block.PATH),
    Block.RIPE_PLANT: ("apple", None, Block.PLANT),
}

ACHIEVEMENTS: Tuple[str, ...] = (
    "collect_wood",
    "collect_stone",
    "collect_coal",
    "collect_iron",
    "collect_diamond",
    "collect_sapling",
    "collect_apple",
    "place_table",
    "place_furnace",
    "place_plant",
    "make_wood_pickaxe",
    "make_stone_pickaxe",
    "make_iron_pickaxe",
    "eat",
    "drink",
    "sleep",
    "defeat_mob",
)

_COLLECT_ACHIEVEMENTS = frozenset(a for a in ACHIEVEMENTS if a.startswith("collect_"))

_CHECKPOINT_MAGIC = b"minicraft-checkpoint"
_CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when checkpoint bytes cannot be decoded."""


# --- integer RNG ------------------------------------------------------------
# xorshift64* on a u64 carried inside EnvState; splitmix64 perturbs the seed
# so seed 0 is usable.

_U64 = (1 << 64) - 1


def _rng_seed(seed: int) -> int:
    s = (seed + 0x9E3779B97F4A7C15) & _U64
    s = ((s ^ (s >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    s = ((s ^ (s >> 27)) * 0x94D049BB133111EB) & _U64
    s ^= s >> 31
    return s or 0x9E3779B97F4A7C15


def _rng_next(state: int) -> Tuple[int, int]:
    s = state
    s ^= s >> 12
    s = (s ^ (s << 25)) & _U64
    s ^= s >> 27
    return (s * 0x2545F4914F6CDD1D) & _U64, s


def _rng_below(state: int, n: int) -> Tuple[int, int]:
    value, state = _rng_next(state)
    return (value * n) >> 64, state


def _rng_chance(state: int, probability: float) -> Tuple[bool, int]:
    value, state = _rng_next(state)
    return value < int(probability * (1 << 64)), state


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    """One craftable item: inventory gate, consumed inputs, stations."""

    output: str
    requires: Dict[str, int]
    consumes: Dict[str, int]
    stations: Tuple[str, ...] = ()

    def validate(self) -> None:
        if self.output not in _ITEM_INDEX:
            raise ValueError(f"recipe output {self.output!r} is not a registered item")
        for table in (self.requires, self.consumes):
            for name, count in table.items():
                if name not in _ITEM_INDEX:
                    raise ValueError(f"recipe input {name!r} is not a registered item")
                if count < 0:
                    raise ValueError(f"recipe count for {name!r} must be >= 0")
        for name, count in self.consumes.items():
            if count > self.requires.get(name, 0):
                raise ValueError(
                    f"recipe consumes {count} {name!r} but requires only "
                    f"{self.requires.get(name, 0)}"
                )
        for station in self.stations:
            if station not in ("table", "furnace"):
                raise ValueError(f"unknown station {station!r}")

    def to_tuple(self) -> tuple:
        return (
            self.output,
            tuple(sorted(self.requires.items())),
            tuple(sorted(self.consumes.items())),
            tuple(self.stations),
        )


@dataclass(frozen=True)
class RecipeConfig:
    """World recipe book plus generation and survival knobs.

    Recipe edits (for distribution-shift runs) are plain field changes; the
    rest of the dynamics never consults anything outside this object.
    """

    recipes: Dict[str, Recipe] = field(default_factory=dict)
    placements: Dict[str, Dict[str, int]] = field(default_factory=dict)
    spawn_densities: Dict[str, float] = field(default_factory=dict)
    plant_maturation_steps: int = 150
    sapling_probability: float = 0.1
    apple_probability: float = 0.05
    map_size: int = 32
    step_cap: int = 2000
    food_period: int = 80
    drink_period: int = 60
    energy_period: int = 100
    starve_period: int = 5
    regen_period: int = 30
    restore_amount: int = 6
    hostile: bool = False
    mob_damage: int = 1
    mob_hp: int = 2
    mob_period: int = 2

    def validate(self) -> None:
        for recipe in self.recipes.values():
            recipe.validate()
        for kind, costs in self.placements.items():
            if kind not in ("table", "furnace", "plant"):
                raise ValueError(f"unknown placement {kind!r}")
            for name, count in costs.items():
                if name not in _ITEM_INDEX or count < 0:
                    raise ValueError(f"bad placement cost {name!r}={count}")
        for kind, density in self.spawn_densities.items():
            if kind not in Block.__members__ and kind.upper() not in Block.__members__:
                raise ValueError(f"unknown spawn block {kind!r}")
            if not 0.0 <= density <= 1.0:
                raise ValueError(f"density for {kind!r} outside [0, 1]")
        if self.plant_maturation_steps < 1:
            raise ValueError("plant_maturation_steps must be >= 1")
        if self.map_size < 8:
            raise ValueError("map_size must be >= 8")
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")

    def to_tuple(self) -> tuple:
        return (
            tuple((k, r.to_tuple()) for k, r in sorted(self.recipes.items())),
            tuple((k, tuple(sorted(v.items()))) for k, v in sorted(self.placements.items())),
            tuple(sorted(self.spawn_densities.items())),
            self.plant_maturation_steps,
            self.sapling_probability,
            self.apple_probability,
            self.map_size,
            self.step_cap,
            self.food_period,
            self.drink_period,
            self.energy_period,
            self.starve_period,
            self.regen_period,
            self.restore_amount,
            self.hostile,
            self.mob_damage,
            self.mob_hp,
            self.mob_period,
        )

    @staticmethod
    def from_tuple(data: tuple) -> "RecipeConfig":
        (recipes, placements, densities, maturation, sapling_p, apple_p, map_size,
         step_cap, food_p, drink_p, energy_p, starve_p, regen_p, restore,
         hostile, mob_damage, mob_hp, mob_period) = data
        return RecipeConfig(
            recipes={
                k: Recipe(out, dict(req), dict(cons), tuple(stations))
                for k, (out, req, cons, stations) in recipes
            },
            placements={k: dict(v) for k, v in placements},
            spawn_densities=dict(densities),
            plant_maturation_steps=maturation,
            sapling_probability=sapling_p,
            apple_probability=apple_p,
            map_size=map_size,
            step_cap=step_cap,
            food_period=food_p,
            drink_period=drink_p,
            energy_period=energy_p,
            starve_period=starve_p,
            regen_period=regen_p,
            restore_amount=restore,
            hostile=hostile,
            mob_damage=mob_damage,
            mob_hp=mob_hp,
            mob_period=mob_period,
        )


def default_config(**overrides) -> RecipeConfig:
    """Canonical recipe book used by the bundled scenarios."""
    config = RecipeConfig(
        recipes={
            "wood_pickaxe": Recipe(
                output="wood_pickaxe",
                requires={"wood": 2},
                consumes={"wood": 2},
                stations=("table",),
            ),
            "stone_pickaxe": Recipe(
                output="stone_pickaxe",
                requires={"wood": 1, "stone": 3},
                consumes={"wood": 1, "stone": 3},
                stations=("table",),
            ),
            "iron_pickaxe": Recipe(
                output="iron_pickaxe",
                requires={"wood": 2, "iron": 1, "coal": 1, "stone_pickaxe": 1},
                consumes={"wood": 1, "iron": 1, "coal": 1},
                stations=("table", "furnace"),
            ),
        },
        placements={
            "table": {"wood": 4},
            "furnace": {"stone": 2},
            "plant": {"sapling": 1},
        },
        spawn_densities={
            "tree": 0.07,
            "stone": 0.055,
            "coal": 0.02,
            "iron": 0.012,
            "diamond": 0.002,
            "water": 0.015,
            "lava": 0.002,
        },
    )
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


# --- state ------------------------------------------------------------------

@dataclass(frozen=True)
class EnvState:
    """Immutable world snapshot; `step` builds the successor."""

    config: RecipeConfig
    grid: np.ndarray                     # int8 (size, size)
    agent_row: int
    agent_col: int
    facing: int
    inventory: np.ndarray                # int32 (len(ITEMS),)
    intrinsics: np.ndarray               # int32 (4,): health, food, drink, energy
    timers: np.ndarray                   # int32 (2,): starve, regen counters
    step_count: int
    rng_state: int
    plants: Tuple[Tuple[Tuple[int, int], int], ...]   # ((row, col), age), sorted
    achievements: FrozenSet[str]
    mob_pos: Optional[Tuple[int, int]] = None
    mob_hp: int = 0
    mob_timer: int = 0
    # derived cache of tracked block positions; never serialized or compared
    _tracked: Optional[tuple] = field(
        default=None, init=False, compare=False, repr=False
    )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return self._value_tuple() == other._value_tuple()

    def __hash__(self) -> int:
        return hash(self._value_tuple())

    def _value_tuple(self) -> tuple:
        return (
            self.config.to_tuple(),
            self.grid.tobytes(),
            self.agent_row,
            self.agent_col,
            self.facing,
            self.inventory.tobytes(),
            self.intrinsics.tobytes(),
            self.timers.tobytes(),
            self.step_count,
            self.rng_state,
            self.plants,
            tuple(sorted(self.achievements)),
            self.mob_pos,
            self.mob_hp,
            self.mob_timer,
        )

    # -- views consumed by the symbolic layer --

    def inventory_counts(self) -> Dict[str, int]:
        return {
            name: int(count)
            for name, count in zip(ITEMS, self.inventory)
            if count > 0
        }

    def placed_subjects(self) -> Set[str]:
        subjects = set()
        if (self.grid == Block.TABLE).any():
            subjects.add("table")
        if (self.grid == Block.FURNACE).any():
            subjects.add("furnace")
        if ((self.grid == Block.PLANT) | (self.grid == Block.RIPE_PLANT)).any():
            subjects.add("plant")
        return subjects

    def near_subjects(self) -> Set[str]:
        size = self.config.map_size
        r0 = max(0, self.agent_row - 1)
        r1 = min(size, self.agent_row + 2)
        c0 = max(0, self.agent_col - 1)
        c1 = min(size, self.agent_col + 2)
        window = self.grid[r0:r1, c0:c1]
        return {
            Block(code).name.lower()
            for code in np.unique(window)
            if code not in (Block.GRASS, Block.PATH)
        }

    def inventory_count(self, item: str) -> int:
        return int(self.inventory[_ITEM_INDEX[item]])

    @property
    def health(self) -> int:
        return int(self.intrinsics[0])

    @property
    def done(self) -> bool:
        return self.health <= 0 or self.step_count >= self.config.step_cap


@dataclass(frozen=True)
class Observation:
    """Egocentric view: local codes, holdings, intrinsics, nearest-block cues."""

    local_map: np.ndarray        # int8 (7, 9) of map codes
    inventory: np.ndarray        # int32 (len(ITEMS),)
    intrinsics: np.ndarray       # int32 (4,)
    offsets: np.ndarray          # int32 (len(OFFSET_BLOCKS), 2), (30, 30) if absent
    facing: int


LOCAL_ROWS = 7
LOCAL_COLS = 9
ABSENT_OFFSET = 30

# lookup table: block code -> row in Observation.offsets, -1 untracked
_OFFSET_LUT = np.full(N_MAP_CODES, -1, dtype=np.int8)
for _i, _b in enumerate(OFFSET_BLOCKS):
    _OFFSET_LUT[int(_b)] = _i
_RANK_ABSENT = 1 << 30
_LOCAL_VOID = np.full((LOCAL_ROWS, LOCAL_COLS), VOID_CODE, dtype=np.int8)
_OFFSETS_ABSENT = np.full((len(OFFSET_BLOCKS), 2), ABSENT_OFFSET, dtype=np.int32)
_RANKS_ABSENT = np.full(len(OFFSET_BLOCKS), _RANK_ABSENT, dtype=np.int32)


def _tracked_positions(state: EnvState) -> tuple:
    """(rows, cols, offset-row indices) for every tracked block; memoized."""
    cached = state._tracked
    if cached is None:
        idx = _OFFSET_LUT[state.grid]
        rows, cols = np.nonzero(idx >= 0)
        cached = (rows.astype(np.int32), cols.astype(np.int32),
                  idx[rows, cols].astype(np.intp))
        object.__setattr__(state, "_tracked", cached)
    return cached


# --- world generation -------------------------------------------------------

_SPAWN_ORDER: Tuple[Tuple[str, Block], ...] = (
    ("water", Block.WATER),
    ("tree", Block.TREE),
    ("stone", Block.STONE),
    ("coal", Block.COAL),
    ("iron", Block.IRON),
    ("diamond", Block.DIAMOND),
    ("lava", Block.LAVA),
)


def _reachable_mask(grid: np.ndarray, start: Tuple[int, int]) -> np.ndarray:
    size = grid.shape[0]
    mask = np.zeros_like(grid, dtype=bool)
    if grid[start] not in WALKABLE:
        return mask
    stack = [start]
    mask[start] = True
    while stack:
        r, c = stack.pop()
        for dr, dc in _FACING_DELTAS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < size and 0 <= nc < size and not mask[nr, nc] \
                    and grid[nr, nc] in WALKABLE:
                mask[nr, nc] = True
                stack.append((nr, nc))
    return mask


def _adjacent_to_reachable(mask: np.ndarray, r: int, c: int) -> bool:
    size = mask.shape[0]
    return any(
        0 <= r + dr < size and 0 <= c + dc < size and mask[r + dr, c + dc]
        for dr, dc in _FACING_DELTAS
    )


# minimum counts per map so every chain link exists even on unlucky seeds
_MIN_COUNTS: Tuple[Tuple[Block, int], ...] = (
    (Block.TREE, 4),
    (Block.STONE, 12),
    (Block.COAL, 3),
    (Block.IRON, 4),
    (Block.DIAMOND, 1),
)


def _generate_world(seed: int, config: RecipeConfig) -> Tuple[np.ndarray, int, int, int]:
    rng = _rng_seed(seed)
    for _ in range(8):
        grid, spawn, rng, ok = _try_generate(rng, config)
        if ok:
            return grid, spawn[0], spawn[1], rng
    # statistically unreachable with the default densities
    return grid, spawn[0], spawn[1], rng


def _try_generate(
    rng: int, config: RecipeConfig
) -> Tuple[np.ndarray, Tuple[int, int], int, bool]:
    size = config.map_size
    grid = np.full((size, size), Block.GRASS, dtype=np.int8)
    grid[0, :] = Block.WATER
    grid[-1, :] = Block.WATER
    grid[:, 0] = Block.WATER
    grid[:, -1] = Block.WATER

    jitter_r, rng = _rng_below(rng, 5)
    jitter_c, rng = _rng_below(rng, 5)
    spawn = (size // 2 - 2 + jitter_r, size // 2 - 2 + jitter_c)

    # one draw per cell against cumulative density thresholds; a 3x3
    # clearing around spawn keeps the agent out of enclosures
    scale = 1 << 64
    thresholds: List[Tuple[int, Block]] = []
    acc = 0.0
    for kind, block in _SPAWN_ORDER:
        acc += config.spawn_densities.get(kind, 0.0)
        thresholds.append((int(acc * scale), block))
    for r in range(1, size - 1):
        for c in range(1, size - 1):
            if max(abs(r - spawn[0]), abs(c - spawn[1])) <= 1:
                continue
            value, rng = _rng_next(rng)
            for cutoff, block in thresholds:
                if value < cutoff:
                    if block == Block.LAVA and \
                            max(abs(r - spawn[0]), abs(c - spawn[1])) < 6:
                        break
                    grid[r, c] = block
                    break

    def reachable_grass(mask: np.ndarray) -> List[Tuple[int, int]]:
        return [
            (r, c)
            for r in range(1, size - 1)
            for c in range(1, size - 1)
            if grid[r, c] == Block.GRASS and mask[r, c] and (r, c) != spawn
        ]

    # every resource must be mineable: adjacent to a cell walkable from spawn
    resource_codes = {b for _, b in _SPAWN_ORDER}
    for _ in range(8):
        mask = _reachable_mask(grid, spawn)
        misplaced = [
            (r, c)
            for r in range(1, size - 1)
            for c in range(1, size - 1)
            if grid[r, c] in resource_codes
            and not _adjacent_to_reachable(mask, r, c)
        ]
        if not misplaced:
            break
        blocks = [Block(grid[cell]) for cell in misplaced]
        for cell in misplaced:
            grid[cell] = Block.GRASS
        open_cells = reachable_grass(_reachable_mask(grid, spawn))
        for block in blocks:
            if not open_cells:
                break
            pick, rng = _rng_below(rng, len(open_cells))
            grid[open_cells.pop(pick)] = block
    else:
        mask = _reachable_mask(grid, spawn)
        for r in range(1, size - 1):
            for c in range(1, size - 1):
                if grid[r, c] in resource_codes \
                        and not _adjacent_to_reachable(mask, r, c):
                    grid[r, c] = Block.GRASS

    for block, minimum in _MIN_COUNTS:
        while int((grid == block).sum()) < minimum:
            candidates = reachable_grass(_reachable_mask(grid, spawn))
            if not candidates:
                return grid, spawn, rng, False
            pick, rng = _rng_below(rng, len(candidates))
            grid[candidates[pick]] = block

    mask = _reachable_mask(grid, spawn)
    open_enough = int(mask.sum()) >= ((size - 2) * (size - 2)) // 3
    all_mineable = all(
        _adjacent_to_reachable(mask, r, c)
        for r in range(1, size - 1)
        for c in range(1, size - 1)
        if grid[r, c] in resource_codes
    )
    return grid, spawn, rng, open_enough and all_mineable


def reset(seed: int, config: Optional[RecipeConfig] = None) -> Tuple[EnvState, Observation]:
    """Deterministic world from seed: full intrinsics, empty inventory."""
    if config is None:
        config = default_config()
    config.validate()
    grid, row, col, rng = _generate_world(seed, config)

    mob_pos: Optional[Tuple[int, int]] = None
    mob_hp = 0
    if config.hostile:
        mask = _reachable_mask(grid, (row, col))
        lairs = [
            (r, c)
            for r in range(grid.shape[0])
            for c in range(grid.shape[1])
            if mask[r, c] and max(abs(r - row), abs(c - col)) >= 8
        ]
        if lairs:
            pick, rng = _rng_below(rng, len(lairs))
            mob_pos = lairs[pick]
            mob_hp = config.mob_hp

    state = EnvState(
        config=config,
        grid=grid,
        agent_row=row,
        agent_col=col,
        facing=1,
        inventory=np.zeros(len(ITEMS), dtype=np.int32),
        intrinsics=np.full(4, INTRINSIC_MAX, dtype=np.int32),
        timers=np.zeros(2, dtype=np.int32),
        step_count=0,
        rng_state=rng,
        plants=(),
        achievements=frozenset(),
        mob_pos=mob_pos,
        mob_hp=mob_hp,
        mob_timer=0,
    )
    return state, observe(state)


# --- observation ------------------------------------------------------------

def observe(state: EnvState) -> Observation:
    """Build the egocentric view.  Arrays are views or freshly owned; the
    inventory/intrinsics arrays are shared with the (immutable) state and
    must not be written."""
    size = state.config.map_size
    local = _LOCAL_VOID.copy()
    r0 = state.agent_row - LOCAL_ROWS // 2
    c0 = state.agent_col - LOCAL_COLS // 2
    src_r0, src_c0 = max(r0, 0), max(c0, 0)
    src_r1 = min(r0 + LOCAL_ROWS, size)
    src_c1 = min(c0 + LOCAL_COLS, size)
    local[src_r0 - r0:src_r1 - r0, src_c0 - c0:src_c1 - c0] = \
        state.grid[src_r0:src_r1, src_c0:src_c1]
    if state.mob_pos is not None:
        mr, mc = state.mob_pos
        if r0 <= mr < r0 + LOCAL_ROWS and c0 <= mc < c0 + LOCAL_COLS:
            local[mr - r0, mc - c0] = MOB_CODE

    # one vectorized pass: rank packs (distance, dr, dc) so the minimum per
    # tracked type is the lexicographically closest block
    offsets = _OFFSETS_ABSENT.copy()
    rows, cols, codes = _tracked_positions(state)
    if rows.size:
        dr = rows - state.agent_row
        dc = cols - state.agent_col
        dist = np.maximum(np.abs(dr), np.abs(dc))
        rank = (dist << 12) + ((dr + 32) << 6) + (dc + 32)
        best = _RANKS_ABSENT.copy()
        np.minimum.at(best, codes, rank)
        for i, value in enumerate(best.tolist()):
            if value >= _RANK_ABSENT:
                continue
            br = ((value >> 6) & 63) - 32
            bc = (value & 63) - 32
            if br > ABSENT_OFFSET:
                br = ABSENT_OFFSET
            elif br < -ABSENT_OFFSET:
                br = -ABSENT_OFFSET
            if bc > ABSENT_OFFSET:
                bc = ABSENT_OFFSET
            elif bc < -ABSENT_OFFSET:
                bc = -ABSENT_OFFSET
            offsets[i, 0] = br
            offsets[i, 1] = bc

    return Observation(
        local_map=local,
        inventory=state.inventory,
        intrinsics=state.intrinsics,
        offsets=offsets,
        facing=state.facing,
    )


# --- dynamics ---------------------------------------------------------------

def _faced_cell(state: EnvState) -> Optional[Tuple[int, int]]:
    dr, dc = _FACING_DELTAS[state.facing]
    r, c = state.agent_row + dr, state.agent_col + dc
    size = state.config.map_size
    if 0 <= r < size and 0 <= c < size:
        return r, c
    return None


def _near_stations(state: EnvState) -> Set[str]:
    size = state.config.map_size
    r0 = max(0, state.agent_row - 1)
    r1 = min(size, state.agent_row + 2)
    c0 = max(0, state.agent_col - 1)
    c1 = min(size, state.agent_col + 2)
    window = state.grid[r0:r1, c0:c1]
    stations = set()
    if (window == Block.TABLE).any():
        stations.add("table")
    if (window == Block.FURNACE).any():
        stations.add("furnace")
    return stations


def step(state: EnvState, action: int) -> Tuple[EnvState, Observation, dict]:
    """One transition.  Ineffective-but-legal actions advance time only.

    info keys: done, death (cause or None), gained ({item: count}),
    unlocked (new achievements), blocked (None, or a dict naming the failed
    action and what was missing).
    """
    try:
        action = Action(action)
    except ValueError:
        raise ValueError(f"invalid action id {action!r}") from None
    if state.done:
        raise ValueError("episode is over; reset or restore first")

    config = state.config
    grid = state.grid
    inventory = state.inventory
    intrinsics = state.intrinsics
    row, col, facing = state.agent_row, state.agent_col, state.facing
    rng = state.rng_state
    plants = state.plants
    mob_pos, mob_hp, mob_timer = state.mob_pos, state.mob_hp, state.mob_timer

    gained: Dict[str, int] = {}
    unlocked: List[str] = []
    blocked: Optional[dict] = None
    death: Optional[str] = None

    def unlock(name: str) -> None:
        if name not in state.achievements and name not in unlocked:
            unlocked.append(name)

    def gain(item: str, count: int = 1) -> None:
        nonlocal inventory
        if inventory is state.inventory:
            inventory = inventory.copy()
        inventory[_ITEM_INDEX[item]] += count
        gained[item] = gained.get(item, 0) + count
        if f"collect_{item}" in _COLLECT_ACHIEVEMENTS:
            unlock(f"collect_{item}")

    def spend(costs: Dict[str, int]) -> None:
        nonlocal inventory
        if inventory is state.inventory:
            inventory = inventory.copy()
        for item, count in costs.items():
            inventory[_ITEM_INDEX[item]] -= count

    def holdings_cover(table: Dict[str, int]) -> Optional[str]:
        for item, count in table.items():
            if inventory[_ITEM_INDEX[item]] < count:
                return item
        return None

    def set_block(r: int, c: int, block: Block) -> None:
        nonlocal grid
        if grid is state.grid:
            grid = grid.copy()
        grid[r, c] = block

    def bump_intrinsic(index: int, amount: int) -> None:
        nonlocal intrinsics
        if intrinsics is state.intrinsics:
            intrinsics = intrinsics.copy()
        intrinsics[index] = min(INTRINSIC_MAX, max(0, int(intrinsics[index]) + amount))

    if action in _MOVE_FACING:
        facing = _MOVE_FACING[action]
        dr, dc = _FACING_DELTAS[facing]
        nr, nc = row + dr, col + dc
        size = config.map_size
        if 0 <= nr < size and 0 <= nc < size and (nr, nc) != mob_pos:
            target = grid[nr, nc]
            if target == Block.LAVA:
                row, col = nr, nc
                death = "lava"
            elif target in WALKABLE:
                row, col = nr, nc

    elif action == Action.INTERACT:
        cell = _faced_cell(state)
        if cell == mob_pos and mob_pos is not None:
            mob_hp -= 1
            if mob_hp <= 0:
                mob_pos, mob_hp, mob_timer = None, 0, 0
                unlock("defeat_mob")
        elif cell is not None:
            block = Block(grid[cell])
            if block in _GATHER:
                item, tool, leftover = _GATHER[block]
                if tool is not None and inventory[_ITEM_INDEX[tool]] < 1:
                    blocked = {
                        "action": "interact",
                        "reason": "missing_tool",
                        "needs": tool,
                        "block": block.name.lower(),
                    }
                else:
                    gain(item)
                    if leftover != block:
                        set_block(cell[0], cell[1], leftover)
                        if block == Block.RIPE_PLANT:
                            plants = tuple(sorted(plants + ((cell, 0),)))
                    if block == Block.TREE:
                        drop, rng = _rng_chance(rng, config.apple_probability)
                        if drop:
                            gain("apple")
            elif block == Block.GRASS:
                hit, rng = _rng_chance(rng, config.sapling_probability)
                if hit:
                    gain("sapling")

    elif action in (Action.PLACE_TABLE, Action.PLACE_FURNACE, Action.PLACE_PLANT):
        kind = {
            Action.PLACE_TABLE: "table",
            Action.PLACE_FURNACE: "furnace",
            Action.PLACE_PLANT: "plant",
        }[action]
        costs = config.placements.get(kind, {})
        cell = _faced_cell(state)
        placeable = (Block.GRASS,) if kind == "plant" else (Block.GRASS, Block.PATH)
        missing = holdings_cover(costs)
        if missing is not None:
            blocked = {
                "action": f"place_{kind}",
                "reason": "missing_input",
                "needs": missing,
                "block": kind,
            }
        elif cell is not None and grid[cell] in placeable and cell != mob_pos:
            spend(costs)
            block = {"table": Block.TABLE, "furnace": Block.FURNACE, "plant": Block.PLANT}[kind]
            set_block(cell[0], cell[1], block)
            if kind == "plant":
                plants = tuple(sorted(plants + ((cell, 0),)))
            unlock(f"place_{kind}")

    elif action in (Action.CRAFT_WOOD_PICKAXE, Action.CRAFT_STONE_PICKAXE,
                    Action.CRAFT_IRON_PICKAXE):
        name = {
            Action.CRAFT_WOOD_PICKAXE: "wood_pickaxe",
            Action.CRAFT_STONE_PICKAXE: "stone_pickaxe",
            Action.CRAFT_IRON_PICKAXE: "iron_pickaxe",
        }[action]
        recipe = config.recipes.get(name)
        if recipe is None:
            blocked = {"action": f"craft_{name}", "reason": "no_recipe", "needs": name}
        else:
            stations = _near_stations(state)
            missing_station = next(
                (s for s in recipe.stations if s not in stations), None
            )
            missing_input = holdings_cover(recipe.requires)
            if missing_station is not None:
                blocked = {
                    "action": f"craft_{name}",
                    "reason": "missing_station",
                    "needs": missing_station,
                }
            elif missing_input is not None:
                blocked = {
                    "action": f"craft_{name}",
                    "reason": "missing_input",
                    "needs": missing_input,
                }
            else:
                spend(recipe.consumes)
                gain(recipe.output)
                unlock(f"make_{name}")

    elif action == Action.EAT:
        if inventory[_ITEM_INDEX["apple"]] >= 1:
            spend({"apple": 1})
            bump_intrinsic(1, config.restore_amount)
            unlock("eat")
        else:
            blocked = {"action": "eat", "reason": "missing_input", "needs": "apple"}

    elif action == Action.DRINK:
        cell = _faced_cell(state)
        if cell is not None and grid[cell] == Block.WATER:
            bump_intrinsic(2, config.restore_amount)
            unlock("drink")

    elif action == Action.SLEEP:
        bump_intrinsic(3, config.restore_amount)
        unlock("sleep")

    # -- time passes: growth, hunger, regeneration, the mob --

    if plants:
        grown = []
        keep = []
        for (cell, age) in plants:
            age += 1
            if age >= config.plant_maturation_steps and grid[cell] == Block.PLANT:
                grown.append(cell)
            else:
                keep.append((cell, age))
        for cell in grown:
            set_block(cell[0], cell[1], Block.RIPE_PLANT)
        plants = tuple(keep)

    # decay schedules derive from the step counter; only the starve and
    # regen counters (condition-dependent) live in state
    step_count = state.step_count + 1
    for index, period in ((1, config.food_period), (2, config.drink_period),
                          (3, config.energy_period)):
        if step_count % period == 0:
            bump_intrinsic(index, -1)

    timers = state.timers
    if int(intrinsics[1]) == 0 or int(intrinsics[2]) == 0 or int(intrinsics[3]) == 0:
        timers = timers.copy()
        timers[0] += 1
        if timers[0] >= config.starve_period:
            timers[0] = 0
            bump_intrinsic(0, -1)
            if death is None and int(intrinsics[0]) <= 0:
                death = "starvation"
    elif timers[0]:
        timers = timers.copy()
        timers[0] = 0

    if int(intrinsics[0]) < INTRINSIC_MAX and int(intrinsics[1]) > 0 \
            and int(intrinsics[2]) > 0 and int(intrinsics[3]) > 0:
        if timers is state.timers:
            timers = timers.copy()
        timers[1] += 1
        if timers[1] >= config.regen_period:
            timers[1] = 0
            bump_intrinsic(0, 1)
    elif timers[1]:
        if timers is state.timers:
            timers = timers.copy()
        timers[1] = 0

    if mob_pos is not None and death is None:
        mob_timer += 1
        if mob_timer >= config.mob_period:
            mob_timer = 0
            mr, mc = mob_pos
            if max(abs(mr - row), abs(mc - col)) <= 1:
                bump_intrinsic(0, -config.mob_damage)
                if int(intrinsics[0]) <= 0:
                    death = "mob"
            else:
                # greedy approach: best walkable neighbor that does not
                # increase distance, ranked so ties break deterministically
                here = max(abs(mr - row), abs(mc - col))
                candidates = sorted(
                    (max(abs(mr + dr - row), abs(mc + dc - col)),
                     mr + dr, mc + dc)
                    for dr, dc in _FACING_DELTAS
                    if (mr + dr, mc + dc) != (row, col)
                    and grid[mr + dr, mc + dc] in WALKABLE
                )
                if candidates and candidates[0][0] <= here:
                    mob_pos = (candidates[0][1], candidates[0][2])

    if death == "lava":
        if intrinsics is state.intrinsics:
            intrinsics = intrinsics.copy()
        intrinsics[0] = 0

    achievements = state.achievements | frozenset(unlocked) if unlocked \
        else state.achievements

    new_state = EnvState(
        config=config,
        grid=grid,
        agent_row=row,
        agent_col=col,
        facing=facing,
        inventory=inventory,
        intrinsics=intrinsics,
        timers=timers,
        step_count=step_count,
        rng_state=rng,
        plants=plants,
        achievements=achievements,
        mob_pos=mob_pos,
        mob_hp=mob_hp,
        mob_timer=mob_timer,
    )
    if grid is state.grid:
        object.__setattr__(new_state, "_tracked", state._tracked)
    info = {
        "done": new_state.done,
        "death": death,
        "gained": gained,
        "unlocked": unlocked,
        "blocked": blocked,
    }
    return new_state, observe(new_state), info


def batch_step(
    states: Sequence[EnvState],
    actions: Sequence[int],
) -> List[Tuple[EnvState, Observation, dict]]:
    """Elementwise `step`; states are values so order cannot matter."""
    if len(states) != len(actions):
        raise ValueError(
            f"batch length mismatch: {len(states)} states, {len(actions)} actions"
        )
    return [step(state, action) for state, action in zip(states, actions)]


# --- checkpoints ------------------------------------------------------------

def serialize(state: EnvState) -> bytes:
    """Canonical byte encoding; equal states give equal bytes."""
    payload = (_CHECKPOINT_MAGIC, _CHECKPOINT_VERSION, state._value_tuple())
    return pickle.dumps(payload, protocol=4)


def restore(checkpoint: bytes) -> EnvState:
    try:
        magic, version, data = pickle.loads(checkpoint)
    except Exception as exc:
        raise CheckpointError(f"cannot decode checkpoint: {exc}") from exc
    if magic != _CHECKPOINT_MAGIC:
        raise CheckpointError("not a minicraft checkpoint")
    if version != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        (config_data, grid_bytes, row, col, facing, inv_bytes, intr_bytes,
         timer_bytes, step_count, rng_state, plants, achievements,
         mob_pos, mob_hp, mob_timer) = data
        config = RecipeConfig.from_tuple(config_data)
        size = config.map_size
        return EnvState(
            config=config,
            grid=np.frombuffer(grid_bytes, dtype=np.int8).reshape(size, size).copy(),
            agent_row=row,
            agent_col=col,
            facing=facing,
            inventory=np.frombuffer(inv_bytes, dtype=np.int32).copy(),
            intrinsics=np.frombuffer(intr_bytes, dtype=np.int32).copy(),
            timers=np.frombuffer(timer_bytes, dtype=np.int32).copy(),
            step_count=step_count,
            rng_state=rng_state,
            plants=tuple((tuple(cell), age) for cell, age in plants),
            achievements=frozenset(achievements),
            mob_pos=tuple(mob_pos) if mob_pos is not None else None,
            mob_hp=mob_hp,
            mob_timer=mob_timer,
        )
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from exc


# --- replay files -----------------------------------------------------------

def write_replay(path: str, seed: int, actions: Iterable[int]) -> None:
    """Line-oriented replay: header, seed, then one action name per line."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("minicraft-replay v1\n")
        handle.write(f"seed {seed}\n")
        for action in actions:
            handle.write(Action(action).name.lower() + "\n")


def read_replay(path: str) -> Tuple[int, List[int]]:
    with open(path, "r", encoding="utf-8") as handle:
        lines = [line.strip() for line in handle if line.strip()]
    if not lines or lines[0] != "minicraft-replay v1":
        raise ValueError(f"{path}: not a minicraft replay file")
    if len(lines) < 2 or not lines[1].startswith("seed "):
        raise ValueError(f"{path}: missing seed line")
    seed = int(lines[1].split(" ", 1)[1])
    actions = [int(Action[name.upper()]) for name in lines[2:]]
    return seed, actions
