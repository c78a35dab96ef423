"""Benchmark harness: fixed, two-level, parameterized and MPPI baselines.

Every baseline sees the same map for a given run index. Runs may fan out to
worker processes; results are always folded back in run-index order.
"""
from __future__ import annotations

import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from xml.sax.saxutils import escape

import numpy as np

from .dynamics import ContractError, ControlAffineRelSys, wrap_periodic
from .environment import MapGenConfig, ObstacleMap, SensedSet, augment, collision, random_map, sense
from .online import OnlineConfig, StepLog, StepRecord, initial_relative_state, run
from .planning import PlanGrid, PlanningInfeasibleError, nearest_path_index, plan
from .value_teb import TebTable

__all__ = [
    "MppiConfig",
    "BenchConfig",
    "RunResult",
    "BenchReport",
    "run_mppi",
    "run_baseline",
    "run_bench",
    "aggregate",
    "render_table",
    "render_rows",
    "beta_color",
    "render_svg",
]

BASELINES = ("F", "MF", "PF", "MPPI")
LABELS = {"F": "F", "MF": "MF-simplified", "PF": "PF", "MPPI": "MPPI"}


@dataclass(frozen=True)
class MppiConfig:
    samples: int = 256
    horizon: float = 1.0
    steps: int = 20
    temperature: float = 1.0
    noise_scale: float = 0.3
    control_weight: float = 0.01
    ref_speed: float | None = None  # default: top planner speed bound


@dataclass(frozen=True)
class BenchConfig:
    n_runs: int = 20
    seed_base: int = 0
    baselines: tuple = BASELINES
    n_obstacles: int = 8
    map_gen: MapGenConfig = MapGenConfig()
    online: OnlineConfig = OnlineConfig()
    mppi: MppiConfig = MppiConfig()
    workers: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ContractError("n_runs must be >= 1")
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ContractError(f"unknown baselines {sorted(bad)}")


@dataclass
class RunResult:
    baseline: str
    run_index: int
    map_seed: int
    outcome: str
    time: float
    steps: int
    invariant_violations: int
    mean_beta: float
    log: StepLog | None = field(default=None, repr=False)


@dataclass
class BenchReport:
    rows: list
    summary: dict
    convention: str = "solution time = mean over runs that reached the goal"


# --- MPPI stand-in -------------------------------------------------------------


def _tracker_deriv(sys: ControlAffineRelSys, s, u):
    # Absolute tracker dynamics: the relative system with the planner input at zero.
    return sys.drift(s) + np.einsum("...nm,...m->...n", sys.tracker_matrix(s), u)


def _rollout(sys, s0, U, dt):
    """Euler rollouts; ``U`` is ``(K, H, m)``; returns positions ``(K, H, n_p)``."""
    s = np.broadcast_to(s0, (U.shape[0], len(s0))).copy()
    out = np.empty(U.shape[:2] + (len(sys.error_dims),))
    for h in range(U.shape[1]):
        s = s + dt * _tracker_deriv(sys, s, U[:, h])
        out[:, h] = s[:, list(sys.error_dims)]
    return out


def _reference(path_pts, start_idx, e, speed, dt, steps):
    """Points ahead on the path at arc lengths speed * dt * k from the nearest waypoint."""
    pts = path_pts[start_idx:]
    if len(pts) == 1:
        return np.repeat(pts, steps, axis=0)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    want = np.minimum(speed * dt * np.arange(1, steps + 1), arc[-1])
    return np.stack([np.interp(want, arc, pts[:, i]) for i in range(pts.shape[1])], axis=1)


def run_mppi(sys: ControlAffineRelSys, table: TebTable, obmap: ObstacleMap, cfg: OnlineConfig,
             mcfg: MppiConfig, seed: int, r0=None) -> tuple[StepLog, str]:
    """Sampling tracker following the raw (undilated) A* path over sensed obstacles."""
    rng = np.random.default_rng(seed)
    steb = table.steb
    goal_tol = steb.radius if cfg.goal_tol is None else cfg.goal_tol
    res = steb.radius / 2 if cfg.plan_resolution is None else cfg.plan_resolution
    sensing = 2 * table.entries[-1].radius if cfg.sensing_radius is None else cfg.sensing_radius
    speed = float(np.max(table.beta_hi)) if mcfg.ref_speed is None else mcfg.ref_speed
    e_idx = list(sys.error_dims)
    goal = np.asarray(obmap.goal, float)
    p0 = np.asarray(obmap.start, float)
    r0 = np.zeros(sys.n_r) if r0 is None else np.asarray(r0, float)
    s = r0 + sys.Q @ p0
    lo, hi = sys.tracker_bounds.lo, sys.tracker_bounds.hi
    sigma = mcfg.noise_scale * np.maximum(np.abs(lo), np.abs(hi))
    hdt = mcfg.horizon / mcfg.steps
    U = np.zeros((mcfg.steps, len(lo)))
    sensed, path = SensedSet(radius=sensing), None
    log_ = StepLog()
    beta = np.asarray(table.beta_hi, float)
    for k in range(int(round(cfg.max_time / cfg.dt))):
        events = []
        e = s[e_idx]
        sensed, newly = sense(obmap, sensed, e)
        if newly or path is None:
            if newly:
                events.append("sensed")
            grid = PlanGrid.build(obmap, augment(obmap, sensed, 0.0), res)
            try:
                path = plan(grid, e, goal)
            except PlanningInfeasibleError:
                log_.outcome = "stalled"
                return log_, "stalled"
            events.append("replanned")
        idx = nearest_path_index(path, e)
        path.cursor = idx
        ref = _reference(path.waypoints, idx, e, speed, hdt, mcfg.steps)
        eps = rng.standard_normal((mcfg.samples,) + U.shape) * sigma
        cand = np.clip(U[None] + eps, lo, hi)
        pos = _rollout(sys, s, cand, hdt)
        cost = ((pos - ref[None]) ** 2).sum(axis=(1, 2)) + mcfg.control_weight * (cand ** 2).sum(axis=(1, 2))
        w = np.exp(-(cost - cost.min()) / mcfg.temperature)
        U = (w[:, None, None] * cand).sum(0) / w.sum()
        u = U[0].copy()
        U = np.vstack([U[1:], U[-1:]])
        n_sub = max(1, int(round(cfg.dt / 0.01)))
        for _ in range(n_sub):
            s = s + (cfg.dt / n_sub) * _tracker_deriv(sys, s, u)
        s = wrap_periodic(sys, s)
        t = (k + 1) * cfg.dt
        e = s[e_idx]
        outcome = ""
        if collision(obmap, e):
            events.append("collision")
            outcome = "collided"
        elif np.linalg.norm(e - goal) <= goal_tol:
            events.append("goal")
            outcome = "reached"
        log_.append(StepRecord(t=t, s=s.copy(), p=path.waypoints[idx].copy(), beta=beta.copy(),
                               d_obs=float("nan"), value=float("nan"), level=float("nan"), events=tuple(events)))
        if outcome:
            log_.outcome = outcome
            return log_, outcome
    log_.outcome = "timeout"
    return log_, "timeout"


# --- running ---------------------------------------------------------------------

_ASSETS: dict = {}


def run_baseline(kind: str, obmap: ObstacleMap, map_seed: int, run_index: int, assets: dict,
                 cfg: BenchConfig, keep_log: bool = False) -> RunResult:
    missing = {"sys", "table", "source"} - set(assets)
    if missing:
        raise ContractError(f"missing benchmark assets: {sorted(missing)}")
    sys, table, source = assets["sys"], assets["table"], assets["source"]
    online = replace(cfg.online, seed=cfg.online.seed + run_index)
    if kind == "MPPI":
        r0 = initial_relative_state(source, table.beta_lo)
        log_, outcome = run_mppi(sys, table, obmap, online, cfg.mppi, seed=online.seed, r0=r0)
    elif kind in ("F", "MF", "PF"):
        log_, outcome = run(sys, table, source, obmap, replace(online, mode=kind))
    else:
        raise ContractError(f"unknown baseline {kind!r}")
    t = log_.records[-1].t if log_.records else 0.0
    betas = log_.betas
    return RunResult(baseline=kind, run_index=run_index, map_seed=map_seed, outcome=outcome, time=t,
                     steps=len(log_), invariant_violations=log_.count("invariant"),
                     mean_beta=float(betas.max(axis=1).mean()) if len(betas) else float("nan"),
                     log=log_ if keep_log else None)


def _bench_job(args):
    kind, i, cfg = args
    seed = cfg.seed_base + i
    steb = _ASSETS["table"].steb.radius
    obmap = random_map(seed, cfg.n_obstacles, steb, cfg.map_gen)
    return run_baseline(kind, obmap, seed, i, _ASSETS, cfg)


def run_bench(assets: dict, cfg: BenchConfig) -> list[RunResult]:
    """All baselines on ``cfg.n_runs`` seeded maps; results ordered by (run, baseline)."""
    _ASSETS.clear()
    _ASSETS.update(assets)
    jobs = [(kind, i, cfg) for i in range(cfg.n_runs) for kind in cfg.baselines]
    if cfg.workers <= 1:
        return [_bench_job(j) for j in jobs]
    # fork so workers inherit the (unpicklable) system closures
    with ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("fork")) as pool:
        return list(pool.map(_bench_job, jobs))


# --- reporting -------------------------------------------------------------------


def aggregate(runs: list[RunResult]) -> BenchReport:
    if not runs:
        raise ContractError("cannot aggregate an empty run list")
    summary = {}
    for kind in dict.fromkeys(r.baseline for r in runs):
        rs = [r for r in runs if r.baseline == kind]
        n = len(rs)
        frac = lambda o: 100.0 * sum(r.outcome == o for r in rs) / n
        times = [r.time for r in rs if r.outcome == "reached"]
        summary[kind] = {
            "runs": n,
            "reached": frac("reached"),
            "collided": frac("collided"),
            "timeout": frac("timeout"),
            "stalled": frac("stalled"),
            "time": float(np.mean(times)) if times else float("nan"),
            "invariant_violations": sum(r.invariant_violations for r in rs),
        }
    return BenchReport(rows=list(runs), summary=summary)


def _num(x: float, nd: int = 2) -> str:
    return "n/a" if math.isnan(x) else f"{x:.{nd}f}"


def render_table(report: BenchReport) -> str:
    kinds = list(report.summary)
    width = max(14, *(len(LABELS.get(k, k)) + 2 for k in kinds))
    lines = [f"# {report.convention}", "metric".ljust(24) + "".join(LABELS.get(k, k).rjust(width) for k in kinds)]
    rows = [("Reached Goal (%)", "reached", 0), ("Obstacle Collision (%)", "collided", 0),
            ("Timeout (%)", "timeout", 0), ("Stalled (%)", "stalled", 0), ("Solution Time (s)", "time", 2)]
    for label, key, nd in rows:
        lines.append(label.ljust(24) + "".join(_num(report.summary[k][key], nd).rjust(width) for k in kinds))
    return "\n".join(lines) + "\n"


def render_rows(report: BenchReport) -> str:
    out = ["baseline,run,map_seed,outcome,time,steps,invariant_violations,mean_beta"]
    for r in report.rows:
        out.append(f"{r.baseline},{r.run_index},{r.map_seed},{r.outcome},{r.time!r},{r.steps},"
                   f"{r.invariant_violations},{r.mean_beta!r}")
    return "\n".join(out) + "\n"


# --- SVG -------------------------------------------------------------------------

BAND_COLORS = {"low": "#1f5fd6", "medium": "#8e3fb5", "high": "#d62f2f"}


def beta_color(beta) -> str:
    b = float(np.max(beta))
    if b <= 0.5:
        return BAND_COLORS["low"]
    if b <= 1.0:
        return BAND_COLORS["medium"]
    return BAND_COLORS["high"]


def render_svg(log_: StepLog, obmap: ObstacleMap, table: TebTable, error_dims=(0, 1), scale: float = 20.0) -> str:
    lo = np.asarray(obmap.bounds_lo, float)[:2]
    hi = np.asarray(obmap.bounds_hi, float)[:2]
    w, h = (hi - lo) * scale
    X = lambda x: (x - lo[0]) * scale
    Y = lambda y: (hi[1] - y) * scale
    f = lambda v: f"{v:.3f}"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{f(w)}" height="{f(h)}" viewBox="0 0 {f(w)} {f(h)}">',
        f'<rect x="0" y="0" width="{f(w)}" height="{f(h)}" fill="white" stroke="black"/>',
    ]
    for c in obmap.circles:
        parts.append(f'<circle cx="{f(X(c.center[0]))}" cy="{f(Y(c.center[1]))}" r="{f(c.radius * scale)}" '
                     f'fill="#555555"/>')
    for b in obmap.boxes:
        parts.append(f'<rect x="{f(X(b.lo[0]))}" y="{f(Y(b.hi[1]))}" width="{f((b.hi[0] - b.lo[0]) * scale)}" '
                     f'height="{f((b.hi[1] - b.lo[1]) * scale)}" fill="#555555"/>')
    parts.append(f'<circle cx="{f(X(obmap.goal[0]))}" cy="{f(Y(obmap.goal[1]))}" '
                 f'r="{f(obmap.goal_radius * scale)}" fill="none" stroke="#2a9d3a" stroke-width="2"/>')
    parts.append(f'<circle cx="{f(X(obmap.start[0]))}" cy="{f(Y(obmap.start[1]))}" r="3" fill="black"/>')
    recs = log_.records
    if recs:
        ed = list(error_dims)
        pts = [r.s[ed] for r in recs]
        colors = [beta_color(r.beta) for r in recs]
        start = 0
        for i in range(1, len(recs) + 1):
            if i == len(recs) or colors[i] != colors[start]:
                seg = pts[max(start - 1, 0):i]
                coords = " ".join(f"{f(X(p[0]))},{f(Y(p[1]))}" for p in seg)
                parts.append(f'<polyline points="{coords}" fill="none" stroke="{colors[start]}" stroke-width="2"/>')
                start = i
        last = recs[-1]
        pe, te = last.p, last.s[ed]
        # bound of the smallest table entry covering the last applied beta
        k = next((i for i, e in enumerate(table.entries) if np.all(e.beta >= np.asarray(last.beta) - 1e-9)),
                 len(table.entries) - 1)
        parts.append(f'<circle cx="{f(X(pe[0]))}" cy="{f(Y(pe[1]))}" r="{f(table.steb.radius * scale)}" '
                     f'fill="none" stroke="#2a9d3a" stroke-width="1.5"/>')
        parts.append(f'<circle cx="{f(X(pe[0]))}" cy="{f(Y(pe[1]))}" r="{f(table.entries[k].radius * scale)}" '
                     f'fill="none" stroke="#f08c00" stroke-width="1.5"/>')
        sensing = 2 * table.entries[-1].radius
        parts.append(f'<circle cx="{f(X(te[0]))}" cy="{f(Y(te[1]))}" r="{f(sensing * scale)}" fill="none" '
                     f'stroke="#888888" stroke-dasharray="6,4"/>')
        parts.append(f"<!-- outcome: {escape(log_.outcome)} -->")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
