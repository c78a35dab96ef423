"""Obstacle worlds, disk sensing, dilation and random benchmark maps.

Obstacles are circles (spheres in 3D) and axis-aligned boxes. All geometric
queries go through a signed distance: negative inside, zero on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import ContractError

__all__ = [
    "Circle",
    "Box",
    "ObstacleMap",
    "SensedSet",
    "InfeasibleMapError",
    "MapGenConfig",
    "sense",
    "obstacle_distances",
    "min_obstacle_distance",
    "augment",
    "collision",
    "random_map",
    "save_map",
    "load_map",
]


class InfeasibleMapError(RuntimeError):
    pass


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float

    def signed_distance(self, pos: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pos - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def signed_distance(self, pos: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        q = np.maximum(lo - pos, pos - hi)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class ObstacleMap:
    bounds_lo: tuple
    bounds_hi: tuple
    start: tuple
    goal: tuple
    goal_radius: float
    circles: tuple = ()
    boxes: tuple = ()

    def __post_init__(self):
        dim = len(self.bounds_lo)
        if dim not in (2, 3) or len(self.bounds_hi) != dim:
            raise ContractError("world bounds must be 2D or 3D")
        for ob in self.obstacles:
            pts = [ob.center] if isinstance(ob, Circle) else [ob.lo, ob.hi]
            if any(len(p) != dim for p in pts):
                raise ContractError("obstacle dimension does not match the world")

    @property
    def dim(self) -> int:
        return len(self.bounds_lo)

    @property
    def obstacles(self) -> tuple:
        return tuple(self.circles) + tuple(self.boxes)

    def signed_distances(self, pos, indices=None) -> np.ndarray:
        """``(n_obstacles, ...)`` signed distances from ``pos``."""
        pos = np.asarray(pos, float)
        obs = self.obstacles
        idx = range(len(obs)) if indices is None else indices
        out = [obs[i].signed_distance(pos) for i in idx]
        return np.array(out) if out else np.full((0,) + pos.shape[:-1], np.inf)


@dataclass(frozen=True)
class SensedSet:
    radius: float
    indices: tuple = ()

    def __post_init__(self):
        if self.radius < 0:
            raise ContractError("sensing radius must be >= 0")


def sense(obmap: ObstacleMap, sensed: SensedSet, tracker_e) -> tuple[SensedSet, bool]:
    """Add every obstacle whose nearest point lies within the sensing radius."""
    if not obmap.obstacles:
        return sensed, False
    d = obmap.signed_distances(np.asarray(tracker_e, float))
    hits = set(np.flatnonzero(d <= sensed.radius).tolist())
    new = hits.difference(sensed.indices)
    if not new:
        return sensed, False
    return replace(sensed, indices=tuple(sorted(set(sensed.indices) | new))), True


def obstacle_distances(obmap: ObstacleMap, sensed: SensedSet, pos) -> np.ndarray:
    return obmap.signed_distances(pos, sensed.indices)


def min_obstacle_distance(obmap: ObstacleMap, sensed: SensedSet, pos) -> float:
    """Distance to the nearest sensed obstacle; 0 inside one, +inf if none sensed."""
    if not sensed.indices:
        return float("inf")
    return max(float(obstacle_distances(obmap, sensed, np.asarray(pos, float)).min()), 0.0)


def augment(obmap: ObstacleMap, sensed: SensedSet, r_aug: float):
    """Predicate ``pos -> True`` iff pos is within ``r_aug`` (strictly) of a sensed obstacle."""
    if r_aug < 0:
        raise ContractError("r_aug must be >= 0")
    indices = tuple(sensed.indices)

    def occupied(pos):
        pos = np.asarray(pos, float)
        if not indices:
            return np.zeros(pos.shape[:-1], bool) if pos.ndim > 1 else False
        hit = (obmap.signed_distances(pos, indices) < r_aug).any(axis=0)
        return hit if pos.ndim > 1 else bool(hit)

    return occupied


def collision(obmap: ObstacleMap, pos) -> bool:
    """True iff ``pos`` is strictly inside any true obstacle."""
    if not obmap.obstacles:
        return False
    return bool((obmap.signed_distances(np.asarray(pos, float)) < 0).any())


# --- random maps ---------------------------------------------------------------


@dataclass(frozen=True)
class MapGenConfig:
    bounds_lo: tuple = (0.0, 0.0)
    bounds_hi: tuple = (40.0, 40.0)
    start: tuple = (4.0, 4.0)
    goal: tuple = (36.0, 36.0)
    goal_radius: float = 1.0
    circle_radius: tuple = (1.0, 2.5)
    box_half: tuple = (0.75, 2.0)
    box_fraction: float = 0.3
    margin: float = 1.0
    max_attempts: int = 1000


def _all_free(obmap: ObstacleMap) -> SensedSet:
    return SensedSet(radius=0.0, indices=tuple(range(len(obmap.obstacles))))


def random_map(seed: int, n_obstacles: int, steb_radius: float,
               cfg: MapGenConfig = MapGenConfig()) -> ObstacleMap:
    """Seeded random world that is feasible for a planner dilated by ``steb_radius``."""
    from .planning import PlanGrid, PlanningInfeasibleError, plan

    if n_obstacles < 0:
        raise ContractError("n_obstacles must be >= 0")
    rng = np.random.default_rng(seed)
    lo = np.asarray(cfg.bounds_lo, float) + cfg.margin
    hi = np.asarray(cfg.bounds_hi, float) - cfg.margin
    dim = len(lo)
    for _ in range(cfg.max_attempts):
        circles, boxes = [], []
        for _ in range(n_obstacles):
            c = rng.uniform(lo, hi)
            if rng.uniform() < cfg.box_fraction:
                half = rng.uniform(*cfg.box_half, size=dim)
                boxes.append(Box(tuple(c - half), tuple(c + half)))
            else:
                circles.append(Circle(tuple(c), float(rng.uniform(*cfg.circle_radius))))
        obmap = ObstacleMap(cfg.bounds_lo, cfg.bounds_hi, cfg.start, cfg.goal, cfg.goal_radius,
                            tuple(circles), tuple(boxes))
        if not obmap.obstacles:
            return obmap
        d_start = obmap.signed_distances(np.asarray(cfg.start, float))
        d_goal = obmap.signed_distances(np.asarray(cfg.goal, float))
        if d_start.min() < 2 * steb_radius or d_goal.min() <= cfg.goal_radius + steb_radius:
            continue
        grid = PlanGrid.build(obmap, augment(obmap, _all_free(obmap), steb_radius), steb_radius / 2)
        try:
            plan(grid, cfg.start, cfg.goal)
        except PlanningInfeasibleError:
            continue
        return obmap
    raise InfeasibleMapError(f"no feasible map after {cfg.max_attempts} attempts (seed {seed})")


# --- map files -------------------------------------------------------------------

_MAGIC = "# PFASTRACK-MAP 1"


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in np.atleast_1d(v))


def save_map(obmap: ObstacleMap, path) -> None:
    lines = [
        _MAGIC,
        f"bounds {_fmt(obmap.bounds_lo)} {_fmt(obmap.bounds_hi)}",
        f"start {_fmt(obmap.start)}",
        f"goal {_fmt(obmap.goal)} {obmap.goal_radius!r}",
    ]
    lines += [f"circle {_fmt(c.center)} {c.radius!r}" for c in obmap.circles]
    lines += [f"box {_fmt(b.lo)} {_fmt(b.hi)}" for b in obmap.boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_map(path) -> ObstacleMap:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ContractError(f"{path}: not a map file")
    fields: dict = {"circles": [], "boxes": []}
    for line in lines[1:]:
        if not line.strip() or line.startswith("#"):
            continue
        key, *vals = line.split()
        v = [float(x) for x in vals]
        if key == "bounds":
            half = len(v) // 2
            fields["bounds_lo"], fields["bounds_hi"] = tuple(v[:half]), tuple(v[half:])
        elif key == "start":
            fields["start"] = tuple(v)
        elif key == "goal":
            fields["goal"], fields["goal_radius"] = tuple(v[:-1]), v[-1]
        elif key == "circle":
            fields["circles"].append(Circle(tuple(v[:-1]), v[-1]))
        elif key == "box":
            half = len(v) // 2
            fields["boxes"].append(Box(tuple(v[:half]), tuple(v[half:])))
        else:
            raise ContractError(f"{path}: unknown record {key!r}")
    fields["circles"], fields["boxes"] = tuple(fields["circles"]), tuple(fields["boxes"])
    return ObstacleMap(**fields)
