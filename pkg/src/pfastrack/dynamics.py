"""Relative dynamics in control-affine form.

A relative system has the form

    r_dot = f(r) + S(r) u_s + P(r) u_p + D(r) d

with box-bounded tracker input ``u_s``, planner input ``u_p`` and disturbance
``d``.  The planner box depends on a parameter vector ``beta`` (the planner
speed bound), by default ``[-beta_j, +beta_j]`` on every planner axis.

All state-valued callables take arrays with the state on the last axis, so a
single definition serves point queries, whole grids and training batches.
The Hamiltonian helpers only use arithmetic and ``abs`` and therefore also
work on torch tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "BoxBounds",
    "ControlAffineRelSys",
    "ContractError",
    "double_int_rel",
    "dubins_rel",
    "quad13_rel",
    "builtin_system",
    "rel_deriv",
    "rk4_step",
    "wrap_periodic",
    "hamiltonian",
    "hamiltonian_from_terms",
    "optimal_tracker_control",
    "adversarial_planner_control",
    "adversarial_disturbance",
]

ArrayFn = Callable[[np.ndarray], np.ndarray]


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


@dataclass(frozen=True)
class BoxBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ContractError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractError("bounds must be finite")
        if np.any(lo > hi):
            raise ContractError(f"lo > hi in bounds {lo} / {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def corners(self) -> np.ndarray:
        """All 2**dim corner points, shape (2**dim, dim)."""
        if self.dim == 0:
            return np.zeros((1, 0))
        grids = np.meshgrid(*[(l, h) for l, h in zip(self.lo, self.hi)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


def symmetric_beta_box(beta):
    """Default planner set: [-beta_j, beta_j] per planner axis."""
    beta = np.asarray(beta, dtype=float)
    return -beta, beta


def _empty_matrix(n: int) -> ArrayFn:
    def fn(r):
        r = np.asarray(r)
        return np.zeros(r.shape[:-1] + (n, 0))
    return fn


@dataclass(frozen=True)
class ControlAffineRelSys:
    """Relative system ``r_dot = drift(r) + S u_s + P u_p + D d``.

    ``*_matrix`` callables map ``(..., n_r)`` to ``(..., n_r, m)``; column ``i``
    of the matrix is the input column for input ``i``.
    """

    name: str
    n_r: int
    drift: ArrayFn
    tracker_matrix: ArrayFn
    planner_matrix: ArrayFn
    tracker_bounds: BoxBounds
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    error_dims: tuple[int, ...]
    Q: np.ndarray
    dist_matrix: ArrayFn | None = None
    dist_bounds: BoxBounds = field(default_factory=lambda: BoxBounds(np.zeros(0), np.zeros(0)))
    periodic_dims: tuple[int, ...] = ()
    planner_bound_shape: Callable = symmetric_beta_box
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "beta_lo", np.atleast_1d(np.asarray(self.beta_lo, dtype=float)))
        object.__setattr__(self, "beta_hi", np.atleast_1d(np.asarray(self.beta_hi, dtype=float)))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        if self.dist_matrix is None:
            object.__setattr__(self, "dist_matrix", _empty_matrix(self.n_r))
        if np.any(self.beta_lo > self.beta_hi):
            raise ContractError("beta_lo must be <= beta_hi")
        if not all(0 <= i < self.n_r for i in self.error_dims + self.periodic_dims):
            raise ContractError("error/periodic dims out of range")
        if self.Q.shape != (self.n_r, self.n_p):
            raise ContractError(f"Q must be {self.n_r}x{self.n_p}, got {self.Q.shape}")

    @property
    def n_beta(self) -> int:
        return self.beta_lo.shape[0]

    @property
    def n_p(self) -> int:
        return len(self.error_dims)

    @property
    def m_s(self) -> int:
        return self.tracker_bounds.dim

    @property
    def m_d(self) -> int:
        return self.dist_bounds.dim

    def planner_bounds(self, beta) -> BoxBounds:
        lo, hi = self.planner_bound_shape(self.check_beta(beta))
        return BoxBounds(lo, hi)

    def check_beta(self, beta, tol: float = 1e-12) -> np.ndarray:
        b = np.asarray(beta, dtype=float)
        if b.ndim == 0:
            b = np.full(self.n_beta, float(b))
        if b.shape[-1] != self.n_beta:
            raise ContractError(f"beta must have {self.n_beta} components, got shape {b.shape}")
        if np.any(b < self.beta_lo - tol) or np.any(b > self.beta_hi + tol):
            raise ContractError(f"beta {b} outside [{self.beta_lo}, {self.beta_hi}]")
        return b

    def error_fn(self, r):
        """Tracking error: Euclidean norm over the error (position) dims."""
        r = np.asarray(r, dtype=float)
        return np.linalg.norm(r[..., list(self.error_dims)], axis=-1)

    def tracker_cols(self, r) -> list[np.ndarray]:
        m = self.tracker_matrix(np.asarray(r, dtype=float))
        return [m[..., :, i] for i in range(m.shape[-1])]

    def planner_cols(self, r) -> list[np.ndarray]:
        m = self.planner_matrix(np.asarray(r, dtype=float))
        return [m[..., :, i] for i in range(m.shape[-1])]

    def dist_cols(self, r) -> list[np.ndarray]:
        m = self.dist_matrix(np.asarray(r, dtype=float))
        return [m[..., :, i] for i in range(m.shape[-1])]


# --- builtin systems -------------------------------------------------------


def double_int_rel(u_max: float = 1.0, d_max: float = 0.0,
                   beta_range: tuple[float, float] = (0.25, 1.25)) -> ControlAffineRelSys:
    """1D double integrator tracking a velocity-controlled point.

    r1 = position error, r2 = tracker velocity;
    r1_dot = r2 - u_p, r2_dot = u_s - d.
    """

    def drift(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        out[..., 0] = r[..., 1]
        return out

    def tracker(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (2, 1))
        out[..., 1, 0] = 1.0
        return out

    def planner(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (2, 1))
        out[..., 0, 0] = -1.0
        return out

    def dist(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (2, 1))
        out[..., 1, 0] = -1.0
        return out

    return ControlAffineRelSys(
        name="DoubleIntRel",
        n_r=2,
        drift=drift,
        tracker_matrix=tracker,
        planner_matrix=planner,
        dist_matrix=dist,
        tracker_bounds=BoxBounds([-u_max], [u_max]),
        dist_bounds=BoxBounds([-d_max], [d_max]),
        beta_lo=[beta_range[0]],
        beta_hi=[beta_range[1]],
        error_dims=(0,),
        Q=np.array([[1.0], [0.0]]),
        params={"u_max": u_max, "d_max": d_max, "beta_range": tuple(beta_range)},
    )


def dubins_rel(omega_max: float = 5.0, accel_max: float = 1.0,
               beta_range: tuple[float, float] = (0.5, 1.25)) -> ControlAffineRelSys:
    """4D Dubins car (heading measured from the y axis) tracking a 2D point.

    r1_dot = r4 sin r3 - u_px, r2_dot = r4 cos r3 - u_py,
    r3_dot = omega, r4_dot = alpha.
    """

    def drift(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        out[..., 0] = r[..., 3] * np.sin(r[..., 2])
        out[..., 1] = r[..., 3] * np.cos(r[..., 2])
        return out

    def tracker(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (4, 2))
        out[..., 2, 0] = 1.0
        out[..., 3, 1] = 1.0
        return out

    def planner(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (4, 2))
        out[..., 0, 0] = -1.0
        out[..., 1, 1] = -1.0
        return out

    return ControlAffineRelSys(
        name="DubinsRel",
        n_r=4,
        drift=drift,
        tracker_matrix=tracker,
        planner_matrix=planner,
        tracker_bounds=BoxBounds([-omega_max, -accel_max], [omega_max, accel_max]),
        beta_lo=[beta_range[0]] * 2,
        beta_hi=[beta_range[1]] * 2,
        error_dims=(0, 1),
        periodic_dims=(2,),
        Q=np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]),
        params={"omega_max": omega_max, "accel_max": accel_max, "beta_range": tuple(beta_range)},
    )


def quad13_rel(g: float = 9.81, n0: float = 10.0, d1: float = 8.0, d0: float = 10.0,
               k_t: float = 0.91, tilt_max: float = np.pi / 9,
               beta_range: tuple[float, float] = (0.5, 1.5)) -> ControlAffineRelSys:
    """Near-hover quadcopter relative system (10 states, 3 planner axes).

    Transcribed as published, including r4_dot = -d0 r3 + n0 u_x.
    """

    def drift(r):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for base in (0, 4):
            out[..., base] = r[..., base + 1]
            out[..., base + 1] = g * np.tan(r[..., base + 2])
            out[..., base + 2] = -d1 * r[..., base + 2] + r[..., base + 3]
            out[..., base + 3] = -d0 * r[..., base + 2]
        out[..., 8] = r[..., 9]
        out[..., 9] = -g
        return out

    def tracker(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (10, 3))
        out[..., 3, 0] = n0
        out[..., 7, 1] = n0
        out[..., 9, 2] = k_t
        return out

    def planner(r):
        r = np.asarray(r)
        out = np.zeros(r.shape[:-1] + (10, 3))
        out[..., 0, 0] = -1.0
        out[..., 4, 1] = -1.0
        out[..., 8, 2] = -1.0
        return out

    Q = np.zeros((10, 3))
    Q[0, 0] = Q[4, 1] = Q[8, 2] = 1.0
    return ControlAffineRelSys(
        name="Quad13Rel",
        n_r=10,
        drift=drift,
        tracker_matrix=tracker,
        planner_matrix=planner,
        tracker_bounds=BoxBounds([-tilt_max, -tilt_max, 0.0], [tilt_max, tilt_max, 1.5 * g]),
        beta_lo=[beta_range[0]] * 3,
        beta_hi=[beta_range[1]] * 3,
        error_dims=(0, 4, 8),
        Q=Q,
        params={"g": g, "n0": n0, "d1": d1, "d0": d0, "k_t": k_t, "tilt_max": tilt_max,
                "beta_range": tuple(beta_range)},
    )


_BUILTINS = {
    "DoubleIntRel": double_int_rel,
    "DubinsRel": dubins_rel,
    "Quad13Rel": quad13_rel,
}


def builtin_system(name: str, **overrides) -> ControlAffineRelSys:
    """Construct a builtin system by name, forwarding keyword overrides."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ContractError(f"unknown system {name!r}; choose from {sorted(_BUILTINS)}") from None
    if "beta_range" in overrides:
        overrides["beta_range"] = tuple(overrides["beta_range"])
    return factory(**overrides)


# --- operations -------------------------------------------------------------


def _as_input(x, m: int, what: str) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)) if x is not None else np.zeros(m)
    if m == 0 and x.size == 0:
        return np.zeros(0)
    if x.shape[-1] != m:
        raise ContractError(f"{what} must have {m} components, got shape {x.shape}")
    return x


def rel_deriv(sys: ControlAffineRelSys, r, u_s, u_p, d=None) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != sys.n_r:
        raise ContractError(f"state must have {sys.n_r} components, got shape {r.shape}")
    u_s = _as_input(u_s, sys.m_s, "u_s")
    u_p = _as_input(u_p, sys.n_p, "u_p")
    d = _as_input(d, sys.m_d, "d")
    out = sys.drift(r)
    out = out + np.einsum("...nm,...m->...n", sys.tracker_matrix(r), u_s)
    out = out + np.einsum("...nm,...m->...n", sys.planner_matrix(r), u_p)
    if sys.m_d:
        out = out + np.einsum("...nm,...m->...n", sys.dist_matrix(r), d)
    return out


def wrap_periodic(sys: ControlAffineRelSys, r) -> np.ndarray:
    """Wrap periodic dims into [-pi, pi)."""
    r = np.array(r, dtype=float, copy=True)
    for i in sys.periodic_dims:
        r[..., i] = np.mod(r[..., i] + np.pi, 2 * np.pi) - np.pi
    return r


def rk4_step(sys: ControlAffineRelSys, r, u_s, u_p, d, dt: float) -> np.ndarray:
    """Classical RK4 step with inputs held constant over ``dt``."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    r = np.asarray(r, dtype=float)
    k1 = rel_deriv(sys, r, u_s, u_p, d)
    k2 = rel_deriv(sys, r + 0.5 * dt * k1, u_s, u_p, d)
    k3 = rel_deriv(sys, r + 0.5 * dt * k2, u_s, u_p, d)
    k4 = rel_deriv(sys, r + dt * k3, u_s, u_p, d)
    return wrap_periodic(sys, r + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


def _optval(c, lo, hi, maximize: bool):
    # Extremum of c*u over u in [lo, hi]; arithmetic-only so torch tensors pass through.
    mid = c * (lo + hi) * 0.5
    half = abs(c) * (hi - lo) * 0.5
    return mid + half if maximize else mid - half


def hamiltonian_from_terms(p_dot_drift, c_s, c_p, c_d, s_bounds, p_bounds, d_bounds):
    """Min-max Hamiltonian given the costate projections on every input column.

    ``c_*`` are ``p . column`` with inputs on the last axis. Bounds are
    ``(lo, hi)`` pairs broadcastable against the matching ``c_*``.
    """
    h = p_dot_drift
    h = h + _optval(c_s, s_bounds[0], s_bounds[1], False).sum(-1)
    h = h + _optval(c_p, p_bounds[0], p_bounds[1], True).sum(-1)
    if c_d.shape[-1]:
        h = h + _optval(c_d, d_bounds[0], d_bounds[1], True).sum(-1)
    return h


def _projections(sys: ControlAffineRelSys, r, p):
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != sys.n_r or r.shape[-1] != sys.n_r:
        raise ContractError(f"state/costate must have {sys.n_r} components")
    pf = np.einsum("...n,...n->...", p, sys.drift(r))
    c_s = np.einsum("...n,...nm->...m", p, sys.tracker_matrix(r))
    c_p = np.einsum("...n,...nm->...m", p, sys.planner_matrix(r))
    c_d = np.einsum("...n,...nm->...m", p, sys.dist_matrix(r))
    return pf, c_s, c_p, c_d


def hamiltonian(sys: ControlAffineRelSys, r, p, beta):
    """H(r, p; beta) = min_{u_s} max_{u_p, d} p . r_dot."""
    pb = sys.planner_bounds(beta)
    pf, c_s, c_p, c_d = _projections(sys, r, p)
    tb, db = sys.tracker_bounds, sys.dist_bounds
    return hamiltonian_from_terms(pf, c_s, c_p, c_d, (tb.lo, tb.hi), (pb.lo, pb.hi), (db.lo, db.hi))


def optimal_tracker_control(sys: ControlAffineRelSys, r, grad, beta=None) -> np.ndarray:
    """Bang-bang minimizer of the Hamiltonian; ``lo`` on a zero coefficient."""
    _, c_s, _, _ = _projections(sys, r, grad)
    tb = sys.tracker_bounds
    return np.where(c_s < 0, tb.hi, tb.lo)


def adversarial_planner_control(sys: ControlAffineRelSys, r, grad, beta) -> np.ndarray:
    _, _, c_p, _ = _projections(sys, r, grad)
    pb = sys.planner_bounds(beta)
    return np.where(c_p > 0, pb.hi, pb.lo)


def adversarial_disturbance(sys: ControlAffineRelSys, r, grad) -> np.ndarray:
    _, _, _, c_d = _projections(sys, r, grad)
    db = sys.dist_bounds
    return np.where(c_d > 0, db.hi, db.lo)
