"""Grid dynamic programming for the running-max tracking game.

Each beta value is solved as an independent slice: beta has no dynamics, so
the parameterized value function decouples exactly into one fixed-bound game
per beta.  The time recursion in horizon time is

    V_{k+1} = max(l, V_k + dt * H_num(V_k))

where H_num is a monotone numerical Hamiltonian: an exact per-dimension
Godunov flux for dimension-separable systems (all builtins), or Lax-Friedrichs
with artificial dissipation otherwise.  Starting from V_0 = l
the iterates are pointwise nondecreasing and converge to the infinite-horizon
value when it exists.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ContractError, ControlAffineRelSys, builtin_system, hamiltonian_from_terms

log = logging.getLogger(__name__)

__all__ = [
    "GridSpec",
    "ValueSlice",
    "ValueFamily",
    "NumericalError",
    "SliceOperator",
    "separable_coefficients",
    "lf_numerical_hamiltonian",
    "dissipation_bounds",
    "vi_step",
    "solve_slice",
    "solve_family",
    "central_gradients",
    "interp_value",
    "interp_gradient",
    "save_value_table",
    "load_value_table",
]


class NumericalError(RuntimeError):
    """NaN/Inf or divergence inside a numerical routine."""


@dataclass(frozen=True)
class GridSpec:
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "mins", tuple(float(x) for x in self.mins))
        object.__setattr__(self, "maxs", tuple(float(x) for x in self.maxs))
        object.__setattr__(self, "counts", tuple(int(x) for x in self.counts))
        object.__setattr__(self, "periodic", tuple(bool(x) for x in self.periodic))
        n = len(self.mins)
        if not (len(self.maxs) == len(self.counts) == len(self.periodic) == n):
            raise ContractError("grid spec fields must have equal length")
        if any(c < 3 for c in self.counts):
            raise ContractError("every grid dimension needs at least 3 points")
        if any(lo >= hi for lo, hi in zip(self.mins, self.maxs)):
            raise ContractError("grid mins must be < maxs")

    @classmethod
    def for_system(cls, sys: ControlAffineRelSys, mins, maxs, counts) -> "GridSpec":
        periodic = tuple(i in sys.periodic_dims for i in range(sys.n_r))
        return cls(tuple(mins), tuple(maxs), tuple(counts), periodic)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def spacing(self) -> np.ndarray:
        span = np.subtract(self.maxs, self.mins)
        denom = np.array([c if p else c - 1 for c, p in zip(self.counts, self.periodic)], dtype=float)
        return span / denom

    def axes(self) -> list[np.ndarray]:
        h = self.spacing
        return [lo + h[i] * np.arange(c) for i, (lo, c) in enumerate(zip(self.mins, self.counts))]

    def points(self) -> np.ndarray:
        """Grid nodes, shape ``counts + (ndim,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs),
                "counts": list(self.counts), "periodic": list(self.periodic)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["mins"]), tuple(d["maxs"]), tuple(d["counts"]), tuple(d["periodic"]))


@dataclass
class ValueSlice:
    grid: GridSpec
    beta: np.ndarray
    values: np.ndarray
    converged: bool
    iterations: int
    sup_change_history: list[float] = field(default_factory=list)
    tol: float = 0.0
    sys_name: str = ""
    gradients: np.ndarray | None = None
    scheme: str = "godunov"

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.gradients is None:
            self.gradients = central_gradients(self.values, self.grid)

    @property
    def v_min(self) -> float:
        return float(self.values.min())

    @property
    def value_range(self) -> float:
        return float(self.values.max() - self.values.min())


@dataclass
class ValueFamily:
    sys_name: str
    betas: list[np.ndarray]
    slices: list[ValueSlice]

    def __post_init__(self):
        if len(self.betas) != len(self.slices) or not self.slices:
            raise ContractError("need one slice per beta")
        g0 = self.slices[0].grid
        if any(s.grid != g0 for s in self.slices):
            raise ContractError("all slices must share a grid")
        b = np.array([np.atleast_1d(x) for x in self.betas], dtype=float)
        if len(b) > 1 and np.any(np.diff(b, axis=0) <= 0):
            raise ContractError("beta grid must be strictly increasing componentwise")

    @property
    def grid(self) -> GridSpec:
        return self.slices[0].grid


# --- finite differences -------------------------------------------------------


def _one_sided(values: np.ndarray, axis: int, h: float, periodic: bool):
    """Backward and forward differences along ``axis``.

    Non-periodic boundaries reuse the inward difference on the missing side,
    i.e. linear extrapolation into a ghost cell.
    """
    if periodic:
        fwd = (np.roll(values, -1, axis) - values) / h
        bwd = (values - np.roll(values, 1, axis)) / h
        return bwd, fwd
    d = np.diff(values, axis=axis) / h
    first = np.take(d, [0], axis=axis)
    last = np.take(d, [-1], axis=axis)
    bwd = np.concatenate([first, d], axis=axis)
    fwd = np.concatenate([d, last], axis=axis)
    return bwd, fwd


def central_gradients(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Central differences (one-sided at non-periodic edges), shape ``(ndim,) + counts``."""
    h = grid.spacing
    out = np.empty((grid.ndim,) + values.shape)
    for i in range(grid.ndim):
        if grid.periodic[i]:
            out[i] = (np.roll(values, -1, i) - np.roll(values, 1, i)) / (2 * h[i])
        else:
            out[i] = np.gradient(values, h[i], axis=i, edge_order=1)
    return out


# --- the slice operator -------------------------------------------------------


def _compact_matrix(mat: np.ndarray):
    """Non-zero entries of a per-cell matrix as (row, col, scalar-or-array)."""
    entries = []
    for i in range(mat.shape[-2]):
        for j in range(mat.shape[-1]):
            col = mat[..., i, j]
            if not np.any(col):
                continue
            if np.all(col == col.flat[0]):
                entries.append((i, j, float(col.flat[0])))
            else:
                entries.append((i, j, np.ascontiguousarray(col)))
    return entries


def _project(p_list, entries, m, shape):
    # c_j = sum_i p_i * M_ij, only over non-zero matrix entries
    out = [None] * m
    for i, j, coef in entries:
        term = p_list[i] * coef
        out[j] = term if out[j] is None else out[j] + term
    return np.stack([np.zeros(shape) if c is None else np.broadcast_to(c, shape) for c in out], axis=-1) \
        if m else np.zeros(shape + (0,))


def dissipation_bounds(sys: ControlAffineRelSys, grid: GridSpec, beta, refine: int = 2,
                       chunk: int = 200_000) -> np.ndarray:
    """Per-dim bound on |r_dot_i| over a ``refine``-times denser lattice and all input corners.

    For affine dynamics this bounds |dH/dp_i|.
    """
    pb = sys.planner_bounds(beta)
    axes = []
    for lo, hi, c, per in zip(grid.mins, grid.maxs, grid.counts, grid.periodic):
        n = refine * c if per else refine * (c - 1) + 1
        axes.append(np.linspace(lo, hi, n, endpoint=not per))
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    alpha = np.zeros(sys.n_r)
    boxes = [(sys.tracker_matrix, sys.tracker_bounds.lo, sys.tracker_bounds.hi),
             (sys.planner_matrix, pb.lo, pb.hi),
             (sys.dist_matrix, sys.dist_bounds.lo, sys.dist_bounds.hi)]
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), shape)
        r = np.stack([a[i] for a, i in zip(axes, idx)], axis=-1)
        center = sys.drift(r)
        spread = np.zeros_like(center)
        for mat_fn, lo, hi in boxes:
            if lo.size == 0:
                continue
            mat = mat_fn(r)
            center += mat @ ((lo + hi) / 2)
            spread += np.abs(mat) @ ((hi - lo) / 2)
        alpha = np.maximum(alpha, np.max(np.abs(center) + spread, axis=0))
    return alpha


def separable_coefficients(sys: ControlAffineRelSys, pts: np.ndarray, beta):
    """Write H as sum_i A_i(r) p_i + B_i(r) |p_i| when every input column has one non-zero row.

    Returns ``(A, B)`` with shape ``(n_r,) + pts.shape[:-1]`` or ``None`` if the
    system is not dimension-separable.
    """
    pb = sys.planner_bounds(beta)
    A = sys.drift(pts).copy()
    B = np.zeros_like(A)
    boxes = [(sys.tracker_matrix, sys.tracker_bounds.lo, sys.tracker_bounds.hi, -1.0),
             (sys.planner_matrix, pb.lo, pb.hi, 1.0),
             (sys.dist_matrix, sys.dist_bounds.lo, sys.dist_bounds.hi, 1.0)]
    for mat_fn, lo, hi, sign in boxes:
        if lo.size == 0:
            continue
        mat = mat_fn(pts)
        if np.any(np.count_nonzero(mat, axis=-2) > 1):
            return None
        A += mat @ ((lo + hi) / 2)
        B += sign * (np.abs(mat) @ ((hi - lo) / 2))
    return np.moveaxis(A, -1, 0), np.moveaxis(B, -1, 0)


def _godunov_1d(a, b, p_minus, p_plus):
    # Godunov flux for V_t = a p + b |p|: extremize over the interval between the one-sided slopes.
    h_minus = a * p_minus + b * np.abs(p_minus)
    h_plus = a * p_plus + b * np.abs(p_plus)
    straddle = (p_minus < 0) != (p_plus < 0)
    hi = np.maximum(h_minus, h_plus)
    lo = np.minimum(h_minus, h_plus)
    hi = np.where(straddle, np.maximum(hi, 0.0), hi)
    lo = np.where(straddle, np.minimum(lo, 0.0), lo)
    return np.where(p_minus <= p_plus, hi, lo)


class SliceOperator:
    """Precomputed static terms for repeated value-iteration steps on one slice.

    ``scheme`` is ``"godunov"`` (exact upwind flux, needs a dimension-separable
    system), ``"lf"`` (Lax-Friedrichs with per-dim dissipation ``alpha``) or
    ``"auto"`` (godunov when possible).
    """

    def __init__(self, sys: ControlAffineRelSys, grid: GridSpec, beta, alpha=None,
                 cfl_factor: float = 0.5, scheme: str = "auto"):
        if grid.ndim != sys.n_r:
            raise ContractError(f"grid has {grid.ndim} dims, system has {sys.n_r}")
        if scheme not in ("auto", "godunov", "lf"):
            raise ContractError(f"unknown scheme {scheme!r}")
        self.sys = sys
        self.grid = grid
        self.beta = sys.check_beta(beta)
        pts = grid.points()
        self.ell = sys.error_fn(pts)
        self.sep = separable_coefficients(sys, pts, self.beta) if scheme != "lf" else None
        if scheme == "godunov" and self.sep is None:
            raise ContractError(f"{sys.name} is not dimension-separable; use scheme='lf'")
        self.scheme = "godunov" if self.sep is not None else "lf"
        drift = sys.drift(pts)
        self.drift = [None if not np.any(drift[..., i]) else np.ascontiguousarray(drift[..., i])
                      for i in range(sys.n_r)]
        self.s_entries = _compact_matrix(sys.tracker_matrix(pts))
        self.p_entries = _compact_matrix(sys.planner_matrix(pts))
        self.d_entries = _compact_matrix(sys.dist_matrix(pts)) if sys.m_d else []
        pb = sys.planner_bounds(self.beta)
        self.bounds = ((sys.tracker_bounds.lo, sys.tracker_bounds.hi), (pb.lo, pb.hi),
                       (sys.dist_bounds.lo, sys.dist_bounds.hi))
        self.alpha = dissipation_bounds(sys, grid, self.beta) if alpha is None else np.asarray(alpha, float)
        self.h = grid.spacing
        self.cfl_factor = cfl_factor
        rate = float(np.sum(self.alpha / self.h))
        self.dt_max = cfl_factor / rate if rate > 0 else np.inf

    def hamiltonian(self, p_list):
        """Analytic Hamiltonian on every cell for costate components ``p_list``."""
        shape = self.grid.shape
        pf = np.zeros(shape)
        for p_i, f_i in zip(p_list, self.drift):
            if f_i is not None:
                pf = pf + p_i * f_i
        c_s = _project(p_list, self.s_entries, self.sys.m_s, shape)
        c_p = _project(p_list, self.p_entries, self.sys.n_p, shape)
        c_d = _project(p_list, self.d_entries, self.sys.m_d, shape)
        return hamiltonian_from_terms(pf, c_s, c_p, c_d, *self.bounds)

    def lf_hamiltonian(self, values: np.ndarray) -> np.ndarray:
        """H(mean costate) plus Lax-Friedrichs dissipation, on every cell."""
        p_mean = []
        diss = np.zeros(self.grid.shape)
        for i in range(self.grid.ndim):
            bwd, fwd = _one_sided(values, i, self.h[i], self.grid.periodic[i])
            p_mean.append(0.5 * (bwd + fwd))
            if self.alpha[i]:
                diss += self.alpha[i] * 0.5 * (fwd - bwd)
        return self.hamiltonian(p_mean) + diss

    def godunov_hamiltonian(self, values: np.ndarray) -> np.ndarray:
        A, B = self.sep
        out = np.zeros(self.grid.shape)
        for i in range(self.grid.ndim):
            if not (np.any(A[i]) or np.any(B[i])):
                continue
            bwd, fwd = _one_sided(values, i, self.h[i], self.grid.periodic[i])
            out += _godunov_1d(A[i], B[i], bwd, fwd)
        return out

    def numerical_hamiltonian(self, values: np.ndarray) -> np.ndarray:
        if self.scheme == "godunov":
            return self.godunov_hamiltonian(values)
        return self.lf_hamiltonian(values)

    def step(self, values: np.ndarray, dt: float):
        if dt > self.dt_max * (1 + 1e-12):
            raise ContractError(f"dt={dt:.4g} violates CFL limit {self.dt_max:.4g} "
                                f"(cfl_factor={self.cfl_factor})")
        # The horizon value never decreases; the floor at ``values`` keeps the
        # extrapolated edge cells from breaking that.
        new = np.maximum(np.maximum(self.ell, values), values + dt * self.numerical_hamiltonian(values))
        return new, float(np.max(np.abs(new - values)))


def lf_numerical_hamiltonian(sys: ControlAffineRelSys, values: np.ndarray, grid: GridSpec,
                             index, beta, alpha) -> float:
    """Lax-Friedrichs numerical Hamiltonian at a single cell ``index``."""
    op = SliceOperator(sys, grid, beta, alpha=alpha, scheme="lf")
    return float(op.lf_hamiltonian(np.asarray(values, float).reshape(grid.shape))[tuple(index)])


def vi_step(sys: ControlAffineRelSys, values: np.ndarray, grid: GridSpec, beta, dt: float,
            cfl_factor: float = 0.5, scheme: str = "auto"):
    """One value-iteration step; returns ``(new_values, sup_change)``."""
    op = SliceOperator(sys, grid, beta, cfl_factor=cfl_factor, scheme=scheme)
    return op.step(np.asarray(values, float).reshape(grid.shape), dt)


def solve_slice(sys: ControlAffineRelSys, grid: GridSpec, beta, tol: float | None = None,
                max_iters: int = 20_000, cfl_factor: float = 0.5, scheme: str = "auto") -> ValueSlice:
    """Iterate to the infinite-horizon value for a fixed beta.

    Stops once the sup-norm change of one step drops below ``tol`` (default
    1e-4 times the spread of the error function over the grid).
    """
    op = SliceOperator(sys, grid, beta, cfl_factor=cfl_factor, scheme=scheme)
    if tol is None:
        tol = 1e-4 * float(op.ell.max() - op.ell.min())
    if tol <= 0:
        raise ContractError("tol must be positive")
    dt = op.dt_max if np.isfinite(op.dt_max) else 1.0
    values = op.ell.copy()
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        values, change = op.step(values, dt)
        if not np.isfinite(change):
            raise NumericalError(f"non-finite values at iteration {it} (beta={op.beta})")
        history.append(change)
        if change < tol:
            converged = True
            break
    log.info("slice beta=%s: %s after %d iterations (last change %.3g)",
             op.beta, "converged" if converged else "not converged", it, history[-1])
    return ValueSlice(grid=grid, beta=op.beta, values=values, converged=converged,
                      iterations=it, sup_change_history=history, tol=tol, sys_name=sys.name,
                      scheme=op.scheme)


def _solve_from_spec(args):
    name, params, grid, beta, tol, max_iters, cfl, scheme = args
    return solve_slice(builtin_system(name, **params), grid, beta, tol, max_iters, cfl, scheme)


def solve_family(sys: ControlAffineRelSys, grid: GridSpec, betas, tol: float | None = None,
                 max_iters: int = 20_000, cfl_factor: float = 0.5, workers: int = 1,
                 scheme: str = "auto") -> ValueFamily:
    """Solve one slice per beta; slices are independent and may run in parallel.

    Parallel solving needs a builtin system (rebuilt in each worker from its params).
    """
    betas = [sys.check_beta(b) for b in betas]
    if workers > 1 and len(betas) > 1:
        jobs = [(sys.name, dict(sys.params), grid, b, tol, max_iters, cfl_factor, scheme) for b in betas]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            slices = list(pool.map(_solve_from_spec, jobs))
    else:
        slices = [solve_slice(sys, grid, b, tol, max_iters, cfl_factor, scheme) for b in betas]
    return ValueFamily(sys_name=sys.name, betas=betas, slices=slices)


# --- interpolation ------------------------------------------------------------


def _locate(grid: GridSpec, r: np.ndarray):
    """Lower cell indices, fractional weights and clamp flags for points ``r``."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    h = grid.spacing
    lo_idx = np.empty(r.shape, dtype=np.int64)
    frac = np.empty(r.shape)
    clamped = np.zeros(r.shape[0], dtype=bool)
    for i in range(grid.ndim):
        x = (r[:, i] - grid.mins[i]) / h[i]
        n = grid.counts[i]
        if grid.periodic[i]:
            x = np.mod(x, n)
            k = np.floor(x).astype(np.int64) % n
            lo_idx[:, i] = k
            frac[:, i] = x - np.floor(x)
        else:
            out = (x < -1e-9) | (x > n - 1 + 1e-9)
            clamped |= out
            x = np.clip(x, 0.0, n - 1)
            k = np.minimum(np.floor(x).astype(np.int64), n - 2)
            lo_idx[:, i] = k
            frac[:, i] = x - k
    return lo_idx, frac, clamped


def _multilinear(grid: GridSpec, fields: np.ndarray, r) -> tuple[np.ndarray, np.ndarray]:
    """Interpolate ``fields`` of shape ``(k,) + counts`` at points ``r``."""
    lo_idx, frac, clamped = _locate(grid, r)
    out = np.zeros((fields.shape[0], lo_idx.shape[0]))
    n = grid.ndim
    for corner in range(1 << n):
        w = np.ones(lo_idx.shape[0])
        idx = []
        for i in range(n):
            bit = (corner >> i) & 1
            w = w * (frac[:, i] if bit else 1.0 - frac[:, i])
            k = lo_idx[:, i] + bit
            if grid.periodic[i]:
                k = k % grid.counts[i]
            idx.append(k)
        out += w * fields[(slice(None),) + tuple(idx)]
    return out, clamped


def interp_value(vs: ValueSlice, r, return_clamped: bool = False):
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    vals, clamped = _multilinear(vs.grid, vs.values[None], r)
    vals = vals[0]
    if single:
        vals, clamped = float(vals[0]), bool(clamped[0])
    return (vals, clamped) if return_clamped else vals


def interp_gradient(vs: ValueSlice, r, return_clamped: bool = False):
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    grads, clamped = _multilinear(vs.grid, vs.gradients, r)
    grads = grads.T
    if single:
        grads, clamped = grads[0], bool(clamped[0])
    return (grads, clamped) if return_clamped else grads


# --- value-table files -------------------------------------------------------

_MAGIC = "PFASTRACK-VALUE-TABLE 1"
_END = "END_HEADER"


def save_value_table(vs: ValueSlice, path) -> None:
    """Text header followed by little-endian float64 values then gradients (row-major)."""
    header = {
        "system": vs.sys_name,
        "grid": vs.grid.to_dict(),
        "beta": [float(b) for b in vs.beta],
        "v_min": vs.v_min,
        "tol": vs.tol,
        "converged": vs.converged,
        "scheme": vs.scheme,
        "iterations": vs.iterations,
        "sup_change_history": [float(x) for x in vs.sup_change_history],
    }
    lines = [_MAGIC] + [f"{k}: {json.dumps(v)}" for k, v in header.items()] + [_END, ""]
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        fh.write(np.ascontiguousarray(vs.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vs.gradients, dtype="<f8").tobytes())


def load_value_table(path) -> ValueSlice:
    raw = Path(path).read_bytes()
    marker = ("\n" + _END + "\n").encode("ascii")
    cut = raw.index(marker)
    text = raw[:cut].decode("ascii").splitlines()
    if text[0] != _MAGIC:
        raise ContractError(f"{path}: not a value-table file")
    header = {}
    for line in text[1:]:
        key, _, val = line.partition(": ")
        header[key] = json.loads(val)
    grid = GridSpec.from_dict(header["grid"])
    body = raw[cut + len(marker):]
    n = int(np.prod(grid.shape))
    arr = np.frombuffer(body, dtype="<f8")
    if arr.size != n * (1 + grid.ndim):
        raise ContractError(f"{path}: payload size {arr.size} does not match grid")
    values = arr[:n].reshape(grid.shape).astype(float)
    grads = arr[n:].reshape((grid.ndim,) + grid.shape).astype(float)
    return ValueSlice(grid=grid, beta=np.array(header["beta"]), values=values,
                      converged=header["converged"], iterations=header["iterations"],
                      sup_change_history=header["sup_change_history"], tol=header["tol"],
                      sys_name=header["system"], gradients=grads, scheme=header.get("scheme", "godunov"))
