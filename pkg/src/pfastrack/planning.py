"""Grid A* over the dilated obstacle map and raw-path bookkeeping.

Planner positions live on a node lattice ``lo + i * resolution``. Moves go to
any of the 3^d - 1 neighbours; a multi-axis move is allowed only when every
node of the unit cell it crosses is free, so diagonal steps never cut a
corner of the dilated set.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from .dynamics import ContractError

__all__ = [
    "PlanningInfeasibleError",
    "PlanGrid",
    "RawPath",
    "plan",
    "densify",
    "step_along",
    "nearest_path_index",
    "nearest_path_state",
]


class PlanningInfeasibleError(RuntimeError):
    pass


@dataclass
class PlanGrid:
    lo: np.ndarray
    resolution: float
    occupied: np.ndarray  # bool, one entry per lattice node
    predicate: object = None

    @classmethod
    def build(cls, obmap, predicate, resolution: float, steb_radius: float | None = None) -> "PlanGrid":
        if steb_radius is not None and resolution > steb_radius / 2 + 1e-12:
            raise ContractError(f"resolution {resolution} exceeds half the sTEB radius {steb_radius}")
        lo = np.asarray(obmap.bounds_lo, float)
        hi = np.asarray(obmap.bounds_hi, float)
        counts = np.floor((hi - lo) / resolution + 1e-9).astype(int) + 1
        axes = [lo[i] + resolution * np.arange(counts[i]) for i in range(len(lo))]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        occ = np.asarray(predicate(pts.reshape(-1, len(lo))), bool).reshape(tuple(counts))
        return cls(lo=lo, resolution=float(resolution), occupied=occ, predicate=predicate)

    @property
    def shape(self) -> tuple:
        return self.occupied.shape

    def node_of(self, pos) -> tuple:
        idx = np.rint((np.asarray(pos, float) - self.lo) / self.resolution).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            raise PlanningInfeasibleError(f"position {pos} is outside the planning grid")
        return tuple(int(i) for i in idx)

    def position(self, node) -> np.ndarray:
        return self.lo + self.resolution * np.asarray(node, float)


def _neighbour_moves(dim: int):
    moves = []
    for off in itertools.product((-1, 0, 1), repeat=dim):
        if any(off):
            # nodes of the unit cell spanned by the move (excluding the origin)
            cell = [c for c in itertools.product(*[(0, o) if o else (0,) for o in off]) if any(c)]
            moves.append((off, float(np.sqrt(sum(o * o for o in off))), cell))
    return moves


def _astar(occupied: np.ndarray, start: tuple, goal: tuple, free_override: set):
    shape = occupied.shape
    dim = len(shape)
    moves = _neighbour_moves(dim)
    flat = lambda n: int(np.ravel_multi_index(n, shape))
    goal_arr = np.array(goal, float)

    def free(n):
        return n in free_override or not occupied[n]

    def inside(n):
        return all(0 <= n[i] < shape[i] for i in range(dim))

    h = lambda n: float(np.sqrt(((np.array(n, float) - goal_arr) ** 2).sum()))
    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), flat(start), start)]
    closed = set()
    while heap:
        _, _, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1], g[goal]
        closed.add(node)
        for off, cost, cell in moves:
            nb = tuple(node[i] + off[i] for i in range(dim))
            if not inside(nb) or nb in closed:
                continue
            if not all(free(tuple(node[i] + c[i] for i in range(dim))) for c in cell):
                continue
            cand = g[node] + cost
            if cand < g.get(nb, np.inf) - 1e-12:
                g[nb] = cand
                parent[nb] = node
                heapq.heappush(heap, (cand + h(nb), flat(nb), nb))
    return None, np.inf


def densify(points: np.ndarray, spacing: float) -> np.ndarray:
    """Insert evenly spaced points so consecutive waypoints are at most ``spacing`` apart."""
    pts = np.atleast_2d(np.asarray(points, float))
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing - 1e-9)))
        out.extend(a + (b - a) * (k / n) for k in range(1, n + 1))
    return np.array(out)


@dataclass
class RawPath:
    waypoints: np.ndarray
    cursor: int = 0
    cost: float = 0.0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, float))
        if len(self.waypoints) == 0:
            raise ContractError("empty path")

    @property
    def remaining(self) -> np.ndarray:
        return self.waypoints[self.cursor:]

    @property
    def final(self) -> np.ndarray:
        return self.waypoints[-1]


def plan(grid: PlanGrid, start, goal) -> RawPath:
    """8-connected (3^d - 1 in general) A* from ``start`` to ``goal``.

    Start and goal snap to their nearest lattice nodes; a snapped node that is
    occupied is still accepted when the exact position itself is free.
    """
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    override = set()
    for pos in (start, goal):
        node = grid.node_of(pos)
        if grid.occupied[node]:
            if grid.predicate is not None and not grid.predicate(pos):
                override.add(node)
            else:
                raise PlanningInfeasibleError(f"position {pos} is inside the dilated obstacle set")
    s, gnode = grid.node_of(start), grid.node_of(goal)
    nodes, cost = _astar(grid.occupied, s, gnode, override)
    if nodes is None:
        raise PlanningInfeasibleError(f"no path from {start} to {goal}")
    if np.allclose(start, goal):
        return RawPath(start[None, :].copy(), cost=0.0)
    pts = [grid.position(n) for n in nodes]
    pts[0] = start
    if len(pts) == 1:
        pts.append(goal)
    else:
        pts[-1] = goal
    return RawPath(densify(np.array(pts), grid.resolution), cost=cost * grid.resolution)


def _axis_interval(d0, d1, bound):
    """lam range in [0, 1] where |d0 + lam * (d1 - d0)| <= bound for every axis."""
    lo, hi = 0.0, 1.0
    for a, b, c in zip(d0, d1, bound):
        slope = b - a
        if abs(slope) < 1e-15:
            if abs(a) > c + 1e-12:
                return 1.0, 0.0
            continue
        l1, l2 = (-c - a) / slope, (c - a) / slope
        lo, hi = max(lo, min(l1, l2)), min(hi, max(l1, l2))
    return lo, hi


def _project(path: RawPath, p) -> tuple[int, float]:
    """Closest point of the unconsumed polyline, as ``(segment index, lam)``."""
    w = path.waypoints
    first = max(path.cursor - 1, 0)
    if len(w) - first == 1:
        return first, 0.0
    a, b = w[first:-1], w[first + 1:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-300)
    lam = np.clip(((p - a) * ab).sum(1) / denom, 0.0, 1.0)
    d = np.linalg.norm(a + lam[:, None] * ab - p, axis=1)
    k = int(np.argmin(d))
    return first + k, float(lam[k])


def step_along(path: RawPath, p_cur, beta, dt: float) -> np.ndarray:
    """Advance along the path as far as the per-axis bound ``|dp_i| <= beta_i * dt`` allows."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    w = path.waypoints
    p_cur = np.asarray(p_cur, float)
    bound = np.broadcast_to(np.asarray(beta, float) * dt, p_cur.shape)
    if len(w) == 1:
        target = w[0]
        path.cursor = 0
        return p_cur + np.clip(target - p_cur, -bound, bound)
    seg, lam = _project(path, p_cur)
    start = w[seg] + lam * (w[seg + 1] - w[seg])
    if np.any(np.abs(start - p_cur) > bound + 1e-12):
        # off the path by more than one step: head straight for the projection
        return p_cur + np.clip(start - p_cur, -bound, bound)
    point = start
    while True:
        a, b = point - p_cur, w[seg + 1] - p_cur
        _, hi = _axis_interval(a, b, bound)
        if hi >= 1.0 - 1e-12:
            point = w[seg + 1]
            if seg + 2 >= len(w):
                path.cursor = len(w) - 1
                return point.copy()
            seg += 1
            continue
        point = point + max(hi, 0.0) * (w[seg + 1] - point)
        path.cursor = seg + 1
        return point


def nearest_path_index(path: RawPath, e) -> int:
    rem = path.remaining
    d = np.linalg.norm(rem - np.asarray(e, float), axis=1)
    return path.cursor + int(np.argmin(d))


def nearest_path_state(path: RawPath, e) -> np.ndarray:
    """Unconsumed waypoint closest to ``e``; ties go to the earlier waypoint."""
    return path.waypoints[nearest_path_index(path, e)].copy()
