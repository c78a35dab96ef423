"""Online planning loop with a parameterized tracking error bound.

Each iteration senses obstacles, picks the largest planner speed bound whose
bound radius fits in half the obstacle clearance, replans on new information,
moves (or resets) the planner and applies the safety tracking controller.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ContractError, ControlAffineRelSys, adversarial_disturbance, optimal_tracker_control, rk4_step
from .environment import ObstacleMap, SensedSet, augment, collision, min_obstacle_distance, sense
from .planning import PlanGrid, PlanningInfeasibleError, RawPath, nearest_path_index, plan, step_along
from .value_teb import GridValueSource, Teb, TebTable

log = logging.getLogger(__name__)

__all__ = [
    "SafetyStallError",
    "OnlineConfig",
    "OnlineState",
    "StepRecord",
    "StepLog",
    "relative_state",
    "query_planner_control",
    "adjust_planner_control",
    "initial_relative_state",
    "run",
]

OUTCOMES = ("reached", "collided", "timeout", "stalled")


class SafetyStallError(RuntimeError):
    pass


@dataclass(frozen=True)
class OnlineConfig:
    dt: float = 0.05
    max_time: float = 300.0
    goal_tol: float | None = None  # default: sTEB radius
    plan_resolution: float | None = None  # default: sTEB radius / 2
    sensing_radius: float | None = None  # default: 2 x radius at the top beta
    reset_attempts: int = 500
    max_stall_steps: int = 40
    seed: int = 0
    mode: str = "PF"  # PF, F or MF
    disturbance: str = "zero"  # zero or adversarial

    def __post_init__(self):
        if self.dt <= 0 or self.max_time <= 0:
            raise ContractError("dt and max_time must be positive")
        if self.mode not in ("PF", "F", "MF"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.disturbance not in ("zero", "adversarial"):
            raise ContractError(f"unknown disturbance mode {self.disturbance!r}")


@dataclass
class OnlineState:
    s: np.ndarray
    p: np.ndarray
    beta_old: np.ndarray
    replan_flag: int
    path: RawPath | None
    K: Teb | None
    sensed: SensedSet
    t: float
    rng: np.random.Generator


@dataclass
class StepRecord:
    t: float
    s: np.ndarray
    p: np.ndarray
    beta: np.ndarray
    d_obs: float
    value: float
    level: float
    events: tuple = ()


@dataclass
class StepLog:
    records: list = field(default_factory=list)
    outcome: str = ""

    def append(self, rec: StepRecord) -> None:
        if self.records and not rec.t > self.records[-1].t:
            raise ContractError("step log timestamps must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def betas(self) -> np.ndarray:
        return np.array([r.beta for r in self.records])

    def count(self, event: str) -> int:
        return sum(event in r.events for r in self.records)

    def to_text(self) -> str:
        """Comma-separated rows; floats in round-trip repr so equal runs give equal bytes."""
        buf = io.StringIO()
        if not self.records:
            buf.write(f"# outcome={self.outcome}\n")
            return buf.getvalue()
        r0 = self.records[0]
        cols = (["t"] + [f"s{i}" for i in range(len(r0.s))] + [f"p{i}" for i in range(len(r0.p))]
                + [f"beta{i}" for i in range(len(r0.beta))] + ["d_obs", "value", "level", "events"])
        buf.write(f"# outcome={self.outcome}\n")
        buf.write(",".join(cols) + "\n")
        for r in self.records:
            nums = [r.t, *r.s, *r.p, *r.beta, r.d_obs, r.value, r.level]
            buf.write(",".join(repr(float(x)) for x in nums) + "," + "|".join(r.events) + "\n")
        return buf.getvalue()


def relative_state(sys: ControlAffineRelSys, s, p) -> np.ndarray:
    """r = s - Q p (the state transform is the identity for every builtin system)."""
    s = np.asarray(s, float)
    p = np.asarray(p, float)
    if s.shape[-1] != sys.n_r or p.shape[-1] != sys.Q.shape[1]:
        raise ContractError("tracker/planner dimensions do not match the system")
    return s - p @ sys.Q.T


def query_planner_control(table: TebTable, d_obs: float) -> tuple[np.ndarray, Teb]:
    """Largest beta on the table whose bound radius is below half the clearance."""
    if table.steb.radius >= d_obs / 2:
        return np.asarray(table.beta_lo, float).copy(), table.steb
    k = 0
    while k + 1 < len(table.entries) and table.entries[k + 1].radius < d_obs / 2:
        k += 1
    e = table.entries[k]
    return np.asarray(e.beta, float).copy(), e


def _sample_disk(rng, center, radius):
    d = len(center)
    direction = rng.standard_normal(d)
    direction /= max(np.linalg.norm(direction), 1e-300)
    return center + radius * rng.uniform() ** (1.0 / d) * direction


def adjust_planner_control(sys: ControlAffineRelSys, source, state: OnlineState, beta_query, p_star, K: Teb,
                           aug_predicate, dt: float, attempts: int = 500):
    """Returns ``(p_next, replan_flag, event)``.

    ``event`` is ``"step"`` for an ordinary step along the path, ``"snap"``
    when the planner jumps to ``p_star`` and ``"reset"`` for a sampled reset.
    """
    beta_query = np.asarray(beta_query, float)
    if np.all(beta_query >= state.beta_old - 1e-12):
        return step_along(state.path, state.p, beta_query, dt), 0, "step"
    if source.query(relative_state(sys, state.s, p_star), beta_query) <= K.level:
        return np.asarray(p_star, float).copy(), 0, "snap"
    e = state.s[list(sys.error_dims)]
    for _ in range(attempts):
        cand = _sample_disk(state.rng, e, K.radius)
        if aug_predicate(cand):
            continue
        if source.query(relative_state(sys, state.s, cand), beta_query) <= K.level:
            return cand, 1, "reset"
    raise SafetyStallError(f"no admissible planner reset after {attempts} draws")


def initial_relative_state(source, beta) -> np.ndarray:
    """State with the smallest value at ``beta`` (a grid node for grid sources)."""
    if isinstance(source, GridValueSource):
        vs = source.slice_for(beta)
        pts = vs.grid.points().reshape(-1, len(vs.grid.counts))
        return pts[int(np.argmin(vs.values.ravel()))].copy()
    rng = np.random.default_rng(0)
    r = rng.uniform(source.r_mins, source.r_maxs, size=(100_000, len(source.r_mins)))
    return r[int(np.argmin(source.query(r, beta)))].copy()


def _mf_query(table: TebTable, d_obs: float):
    top = table.entries[-1]
    if top.radius < d_obs / 2:
        return np.asarray(top.beta, float).copy(), top
    return np.asarray(table.beta_lo, float).copy(), table.steb


def run(sys: ControlAffineRelSys, table: TebTable, source, obmap: ObstacleMap, cfg: OnlineConfig = OnlineConfig(),
        r0=None) -> tuple[StepLog, str]:
    """Simulate one planning episode from ``obmap.start`` to ``obmap.goal``."""
    steb = table.steb
    goal_tol = steb.radius if cfg.goal_tol is None else cfg.goal_tol
    res = steb.radius / 2 if cfg.plan_resolution is None else cfg.plan_resolution
    sensing = 2 * table.entries[-1].radius if cfg.sensing_radius is None else cfg.sensing_radius
    e_idx = list(sys.error_dims)
    goal = np.asarray(obmap.goal, float)
    p0 = np.asarray(obmap.start, float)
    r0 = initial_relative_state(source, table.beta_lo) if r0 is None else np.asarray(r0, float)
    if source.query(r0, table.beta_lo) > steb.level:
        raise ContractError("initial relative state must lie inside the sTEB")
    state = OnlineState(s=r0 + sys.Q @ p0, p=p0.copy(), beta_old=np.asarray(table.beta_hi, float).copy(),
                        replan_flag=1, path=None, K=None, sensed=SensedSet(radius=sensing), t=0.0,
                        rng=np.random.default_rng(cfg.seed))
    log_ = StepLog()
    n_steps = int(round(cfg.max_time / cfg.dt))
    stall_steps = 0
    force_low = False
    arrived = False  # planner reached the last waypoint: finish the approach at the lowest beta
    mf_choice = None
    for k in range(n_steps):
        events = []
        e = state.s[e_idx]
        state.sensed, newly = sense(obmap, state.sensed, e)
        if newly:
            events.append("sensed")
        d_obs = min_obstacle_distance(obmap, state.sensed, e)
        beta_old = state.beta_old
        replanning = newly or state.replan_flag == 1
        arrived = arrived or (state.path is not None and np.allclose(state.p, state.path.final))
        if cfg.mode == "F" or force_low or arrived:
            beta_q, K = np.asarray(table.beta_lo, float).copy(), steb
        elif cfg.mode == "MF":
            if replanning or mf_choice is None:
                mf_choice = _mf_query(table, d_obs)
            beta_q, K = mf_choice
        else:
            beta_q, K = query_planner_control(table, d_obs)
        force_low = False
        aug = augment(obmap, state.sensed, steb.radius)
        if replanning:
            grid = PlanGrid.build(obmap, aug, res)
            try:
                state.path = plan(grid, state.p, goal)
            except PlanningInfeasibleError as exc:
                log.info("planning failed at t=%.2f: %s", state.t, exc)
                log_.outcome = "stalled"
                return log_, log_.outcome
            state.replan_flag = 0
            events.append("replanned")
        p_star = state.path.waypoints[nearest_path_index(state.path, e)]
        try:
            p_next, flag, kind = adjust_planner_control(sys, source, state, beta_q, p_star, K, aug, cfg.dt,
                                                        cfg.reset_attempts)
            stall_steps = 0
        except SafetyStallError:
            # the bound could not shrink: the planner waits under the previous bound
            beta_q = np.asarray(state.beta_old, float).copy()
            K = table.entries[table.index_of(beta_q)]
            p_next, flag, kind = state.p.copy(), 1, "stall"
            force_low = True
            stall_steps += 1
        if kind in ("snap", "reset"):
            events.append(kind)
            if kind == "snap":
                state.path.cursor = nearest_path_index(state.path, e)
        elif kind == "stall":
            events.append("stall")
        state.replan_flag = flag
        # planner moves from p_from to p_next over dt; jumps are instantaneous
        p_from = state.p if kind == "step" else p_next
        u_p = (p_next - p_from) / cfg.dt
        r = relative_state(sys, state.s, p_from)
        grad = source.grad(r, beta_q)
        u_s = optimal_tracker_control(sys, r, grad, beta_q)
        d = adversarial_disturbance(sys, r, grad) if cfg.disturbance == "adversarial" else np.zeros(sys.m_d)
        r_next = rk4_step(sys, r, u_s, u_p, d, cfg.dt)
        state.s = r_next + sys.Q @ p_next
        state.p = np.asarray(p_next, float)
        state.beta_old = beta_q
        state.K = K
        state.t = (k + 1) * cfg.dt
        value = float(source.query(r_next, beta_q))
        kappa = table.kappa(table.index_of(beta_q))
        if value > K.level + kappa:
            events.append("invariant")
        e = state.s[e_idx]
        outcome = ""
        if collision(obmap, e):
            events.append("collision")
            outcome = "collided"
        elif np.linalg.norm(e - goal) <= goal_tol:
            events.append("goal")
            outcome = "reached"
        elif stall_steps >= cfg.max_stall_steps:
            outcome = "stalled"
        log_.append(StepRecord(t=state.t, s=state.s.copy(), p=state.p.copy(), beta=beta_q.copy(), d_obs=d_obs,
                               value=value, level=K.level, events=tuple(events)))
        if outcome:
            log_.outcome = outcome
            return log_, outcome
    log_.outcome = "timeout"
    return log_, "timeout"
