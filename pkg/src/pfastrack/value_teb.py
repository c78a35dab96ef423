"""Value sources, tracking-error-bound levels and planner-space radii.

A value source answers ``query(r, beta)`` and ``grad(r, beta)`` for either a
family of grid slices or a trained network. On top of it this module finds
the minimal level of each slice, the radius of the bound in the planner
(error) coordinates, and a monotone table of bounds over a beta grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .dynamics import ContractError, ControlAffineRelSys
from .grid_solver import ValueFamily, ValueSlice, interp_gradient, interp_value

log = logging.getLogger(__name__)

__all__ = [
    "EmptyLevelSetError",
    "ValueSource",
    "GridValueSource",
    "FunctionValueSource",
    "Teb",
    "TebTable",
    "teb_level",
    "dteb_radius",
    "membership",
    "build_teb_table",
    "save_teb_table",
    "load_teb_table",
]

N_SCAN = 100_000
N_DESCENT = 100


class EmptyLevelSetError(ValueError):
    pass


class ValueSource(Protocol):
    kind: str
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    error_dims: tuple
    r_mins: np.ndarray
    r_maxs: np.ndarray
    periodic_dims: tuple

    def query(self, r, beta): ...

    def grad(self, r, beta): ...


class GridValueSource:
    """Grid-backed source over a family of beta slices.

    A beta between stored slices is answered by the next slice up. Values are
    nondecreasing in beta, so this errs on the conservative side.
    """

    kind = "grid"

    def __init__(self, family: ValueFamily, sys: ControlAffineRelSys):
        self.family = family
        self.sys = sys
        self.beta_lo = np.asarray(family.betas[0], float)
        self.beta_hi = np.asarray(family.betas[-1], float)
        self.error_dims = tuple(sys.error_dims)
        g = family.grid
        self.r_mins = np.asarray(g.mins, float)
        self.r_maxs = np.asarray(g.maxs, float)
        self.periodic_dims = tuple(i for i, p in enumerate(g.periodic) if p)
        self._keys = np.array([np.asarray(b, float) for b in family.betas])

    def slice_for(self, beta) -> ValueSlice:
        b = np.broadcast_to(np.asarray(beta, float), self._keys.shape[1:])
        if np.any(b < self.beta_lo - 1e-9) or np.any(b > self.beta_hi + 1e-9):
            raise ContractError(f"beta {b} outside the solved range [{self.beta_lo}, {self.beta_hi}]")
        for k, key in enumerate(self._keys):
            if np.all(key >= b - 1e-9):
                return self.family.slices[k]
        return self.family.slices[-1]

    def query(self, r, beta):
        return interp_value(self.slice_for(beta), r)

    def grad(self, r, beta):
        return interp_gradient(self.slice_for(beta), r)

    def kappa(self, beta) -> float:
        """Interpolation slack: 2 * (largest spacing) * (max gradient norm)."""
        vs = self.slice_for(beta)
        lip = float(np.max(np.linalg.norm(vs.gradients, axis=0)))
        return 2.0 * float(np.max(vs.grid.spacing)) * lip


@dataclass
class FunctionValueSource:
    """Source built from plain callables; handy for synthetic value functions."""

    fn: Callable
    grad_fn: Callable
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    error_dims: tuple
    r_mins: np.ndarray
    r_maxs: np.ndarray
    periodic_dims: tuple = ()
    kind: str = field(default="function", init=False)

    def query(self, r, beta):
        return self.fn(np.asarray(r, float), beta)

    def grad(self, r, beta):
        return self.grad_fn(np.asarray(r, float), beta)


@dataclass(frozen=True)
class Teb:
    beta: np.ndarray
    level: float
    radius: float


@dataclass
class TebTable:
    betas: list
    entries: list
    delta_beta: float
    epsilon: float
    policy: str = "nested"
    raw_radii: list = field(default_factory=list)
    kappas: list = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise ContractError("a TEB table needs at least one entry")
        radii = [e.radius for e in self.entries]
        if any(b < a for a, b in zip(radii[:-1], radii[1:])):
            raise ContractError("TEB radii must be nondecreasing along the beta grid")

    @property
    def steb(self) -> Teb:
        return self.entries[0]

    @property
    def beta_lo(self) -> np.ndarray:
        return np.asarray(self.entries[0].beta)

    @property
    def beta_hi(self) -> np.ndarray:
        return np.asarray(self.entries[-1].beta)

    @property
    def radii(self) -> np.ndarray:
        return np.array([e.radius for e in self.entries])

    def index_of(self, beta) -> int:
        b = np.asarray(beta, float)
        for k, e in enumerate(self.entries):
            if np.allclose(e.beta, b, atol=1e-9):
                return k
        raise ContractError(f"beta {b} is not on the table grid")

    def kappa(self, k: int) -> float:
        return self.kappas[k] if self.kappas else 0.0


def _error_norm(r, error_dims) -> np.ndarray:
    return np.linalg.norm(np.asarray(r)[..., list(error_dims)], axis=-1)


def _uniform(source, n: int, rng) -> np.ndarray:
    r = rng.uniform(source.r_mins, source.r_maxs, size=(n, len(source.r_mins)))
    for i in source.periodic_dims:
        r[:, i] = rng.uniform(-np.pi, np.pi, size=n)
    return r


def _clip(source, r):
    r = np.clip(r, source.r_mins, source.r_maxs)
    for i in source.periodic_dims:
        r[:, i] = (r[:, i] + np.pi) % (2 * np.pi) - np.pi
    return r


def _sampled_min(source, beta, n: int, seed: int, n_descent: int = N_DESCENT, n_starts: int = 64) -> float:
    rng = np.random.default_rng(seed)
    r = _uniform(source, n, rng)
    v = np.asarray(source.query(r, beta))
    best = float(v.min())
    starts = r[np.argsort(v)[:n_starts]]
    vals = np.asarray(source.query(starts, beta))
    step = np.full(len(starts), 0.05 * float(np.max(source.r_maxs - source.r_mins)))
    for _ in range(n_descent):
        g = np.asarray(source.grad(starts, beta))
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        cand = _clip(source, starts - step[:, None] * g / np.maximum(norm, 1e-12))
        cv = np.asarray(source.query(cand, beta))
        better = cv < vals
        starts[better], vals[better] = cand[better], cv[better]
        step = np.where(better, step * 1.2, step * 0.5)
    return min(best, float(vals.min()))


def _level_range(source, beta, seed: int = 0) -> tuple[float, float]:
    if isinstance(source, GridValueSource):
        vs = source.slice_for(beta)
        return float(vs.values.min()), float(vs.values.max())
    v = np.asarray(source.query(_uniform(source, N_SCAN, np.random.default_rng(seed)), beta))
    return float(v.min()), float(v.max())


def default_epsilon(source) -> float:
    """0.02 of the value range at the lowest beta."""
    lo, hi = _level_range(source, source.beta_lo)
    return 0.02 * (hi - lo)


def teb_level(source, beta=None, eps: float | None = None, n: int = N_SCAN, seed: int = 0) -> float:
    """Minimal value over the extents at ``beta`` (default: lowest beta) plus ``eps``."""
    beta = source.beta_lo if beta is None else beta
    eps = default_epsilon(source) if eps is None else float(eps)
    if isinstance(source, GridValueSource):
        return float(source.slice_for(beta).values.min()) + eps
    return _sampled_min(source, beta, n, seed) + eps


def _refine_outward(source, beta, level, members, n_bisect: int = 30):
    """Bisect along the error direction from each member towards the extents."""
    e_idx = list(source.error_dims)
    best = 0.0
    for r in members:
        e = r[e_idx]
        ne = np.linalg.norm(e)
        if ne == 0:
            continue
        bound = np.where(e < 0, source.r_mins[e_idx], source.r_maxs[e_idx])
        with np.errstate(divide="ignore"):
            lim = np.where(e != 0, bound / np.where(e != 0, e, 1.0), np.inf)
        hi_s = float(np.min(lim))
        lo_s = 1.0
        cand = r.copy()
        cand[e_idx] = e * hi_s
        if source.query(cand, beta) <= level:
            best = max(best, ne * hi_s)
            continue
        for _ in range(n_bisect):
            mid = 0.5 * (lo_s + hi_s)
            cand[e_idx] = e * mid
            if source.query(cand, beta) <= level:
                lo_s = mid
            else:
                hi_s = mid
        best = max(best, ne * lo_s)
    return best


def dteb_radius(source, beta, level: float, n: int = N_SCAN, seed: int = 0, n_refine: int = 32) -> float:
    """Largest error norm over the sublevel set ``{r : V(r; beta) <= level}``."""
    if isinstance(source, GridValueSource):
        vs = source.slice_for(beta)
        pts = vs.grid.points()
        inside = vs.values <= level
        if not inside.any():
            raise EmptyLevelSetError(f"level {level:.6g} is below the slice minimum {vs.v_min:.6g}")
        return float(_error_norm(pts[inside], source.error_dims).max())
    r = _uniform(source, n, np.random.default_rng(seed))
    v = np.asarray(source.query(r, beta))
    inside = v <= level
    if not inside.any():
        raise EmptyLevelSetError(f"no sampled state reaches level {level:.6g}")
    members = r[inside]
    norms = _error_norm(members, source.error_dims)
    raw = float(norms.max())
    top = members[np.argsort(norms)[::-1][:n_refine]]
    return max(raw, _refine_outward(source, beta, level, top))


def membership(source, r, beta, level: float):
    v = source.query(r, beta)
    return v <= level if np.ndim(v) else bool(v <= level)


def _beta_grid(source, delta_beta: float) -> list[np.ndarray]:
    if delta_beta <= 0:
        raise ContractError("delta_beta must be positive")
    lo, hi = np.asarray(source.beta_lo, float), np.asarray(source.beta_hi, float)
    span = float(np.max(hi - lo))
    n = int(np.floor(span / delta_beta + 1e-9))
    grid = [np.minimum(lo + k * delta_beta, hi) for k in range(n + 1)]
    if np.any(grid[-1] < hi - 1e-9):
        grid.append(hi.copy())
    return grid


def _nested_level(source, beta_prev, level_prev, beta, seed: int) -> float:
    """Max of V(.; beta) over the previous bound, so bounds nest as beta grows."""
    if isinstance(source, GridValueSource):
        prev = source.slice_for(beta_prev).values
        cur = source.slice_for(beta).values
        return float(cur[prev <= level_prev].max())
    r = _uniform(source, N_SCAN, np.random.default_rng(seed))
    inside = np.asarray(source.query(r, beta_prev)) <= level_prev
    return float(np.asarray(source.query(r[inside], beta)).max()) if inside.any() else -np.inf


def build_teb_table(source, delta_beta: float, eps: float | None = None, policy: str = "nested",
                    seed: int = 0) -> TebTable:
    """Table of bounds on the beta grid from the lowest to the highest beta.

    ``policy="minimal"`` uses each slice's own minimum plus ``eps``.
    ``policy="nested"`` additionally raises each level so that the previous
    bound lies inside it; a tracker inside the bound for a smaller beta is then
    inside the bound for any larger one.
    Radii are replaced by their running maximum.
    """
    if policy not in ("nested", "minimal"):
        raise ContractError(f"unknown level policy {policy!r}")
    eps = default_epsilon(source) if eps is None else float(eps)
    betas = _beta_grid(source, delta_beta)
    levels, raw = [], []
    for k, b in enumerate(betas):
        level = teb_level(source, b, eps, seed=seed)
        if policy == "nested" and k > 0:
            level = max(level, _nested_level(source, betas[k - 1], levels[-1], b, seed))
        levels.append(level)
        raw.append(dteb_radius(source, b, level, seed=seed))
    radii = np.maximum.accumulate(raw)
    entries = [Teb(beta=b, level=float(lv), radius=float(rd)) for b, lv, rd in zip(betas, levels, radii)]
    kappas = [source.kappa(b) for b in betas] if hasattr(source, "kappa") else []
    table = TebTable(betas=betas, entries=entries, delta_beta=float(delta_beta), epsilon=eps,
                     policy=policy, raw_radii=[float(x) for x in raw], kappas=kappas)
    log.info("TEB table: %s", ", ".join(f"{e.beta[0]:.3g}->{e.radius:.3f}" for e in entries))
    return table


# --- text serialization -------------------------------------------------------

_MAGIC = "# PFASTRACK-TEB-TABLE 1"


def render_teb_table(table: TebTable) -> str:
    lines = [
        _MAGIC,
        f"# policy={table.policy} epsilon={table.epsilon!r} delta_beta={table.delta_beta!r}",
        "# beta... level radius raw_radius kappa",
    ]
    for k, e in enumerate(table.entries):
        vals = [*map(repr, map(float, e.beta)), repr(e.level), repr(e.radius),
                repr(table.raw_radii[k] if table.raw_radii else e.radius), repr(table.kappa(k))]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def save_teb_table(table: TebTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(render_teb_table(table))


def load_teb_table(path) -> TebTable:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ContractError(f"{path}: not a TEB table")
    meta = dict(kv.split("=", 1) for kv in lines[1][2:].split())
    entries, raw, kappas, betas = [], [], [], []
    for line in lines[3:]:
        if not line.strip():
            continue
        vals = [float(x) for x in line.split()]
        beta = np.array(vals[:-4])
        level, radius, rr, kap = vals[-4:]
        betas.append(beta)
        entries.append(Teb(beta=beta, level=level, radius=radius))
        raw.append(rr)
        kappas.append(kap)
    return TebTable(betas=betas, entries=entries, delta_beta=float(meta["delta_beta"]),
                    epsilon=float(meta["epsilon"]), policy=meta["policy"], raw_radii=raw, kappas=kappas)
