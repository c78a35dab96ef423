"""Sinusoidal network approximation of the parameterized value function.

The network maps (r, t, beta) to V and is trained without labels: a boundary
term pins V(r, 0; beta) to the error function and a residual term enforces
the running-max variational inequality in horizon time,

    max(l(r) - V, H(r, grad_r V; beta) - dV/dt) = 0.

Training first fits the boundary only, then grows the sampled horizon
linearly to T so the solution propagates outward in time.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dynamics import ContractError, ControlAffineRelSys, hamiltonian_from_terms

log = logging.getLogger(__name__)

DTYPE = torch.float64

__all__ = [
    "SirenNet",
    "TrainConfig",
    "SampleBatch",
    "TrainingError",
    "NeuralValueSource",
    "sample_batch",
    "forward",
    "forward_with_grads",
    "loss",
    "train",
    "as_value_source",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    pass


class SineLayer(nn.Module):
    def __init__(self, n_in: int, n_out: int, omega0: float, first: bool):
        super().__init__()
        self.omega0 = omega0
        self.linear = nn.Linear(n_in, n_out, dtype=DTYPE)
        with torch.no_grad():
            bound = 1.0 / n_in if first else math.sqrt(6.0 / n_in) / omega0
            self.linear.weight.uniform_(-bound, bound)

    def forward(self, x):
        return torch.sin(self.omega0 * self.linear(x))


class SirenNet(nn.Module):
    """Sine-activated MLP with input normalization to [-1, 1] and an affine output map."""

    def __init__(self, n_r: int, n_beta: int, hidden=(64, 64, 64), omega0: float = 30.0,
                 in_lo=None, in_hi=None, out_offset: float = 0.0, out_scale: float = 1.0):
        super().__init__()
        self.n_r, self.n_beta = n_r, n_beta
        n_in = n_r + 1 + n_beta
        self.hidden = tuple(int(h) for h in hidden)
        self.omega0 = float(omega0)
        widths = (n_in,) + self.hidden
        self.layers = nn.ModuleList(
            SineLayer(a, b, self.omega0, first=(i == 0)) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        )
        self.head = nn.Linear(widths[-1], 1, dtype=DTYPE)
        with torch.no_grad():
            bound = math.sqrt(6.0 / widths[-1]) / self.omega0
            self.head.weight.uniform_(-bound, bound)
        in_lo = -np.ones(n_in) if in_lo is None else np.asarray(in_lo, float)
        in_hi = np.ones(n_in) if in_hi is None else np.asarray(in_hi, float)
        if np.any(in_hi <= in_lo):
            raise ContractError("normalization ranges must have hi > lo")
        self.register_buffer("in_lo", torch.as_tensor(in_lo, dtype=DTYPE))
        self.register_buffer("in_hi", torch.as_tensor(in_hi, dtype=DTYPE))
        self.register_buffer("out_offset", torch.tensor(float(out_offset), dtype=DTYPE))
        self.register_buffer("out_scale", torch.tensor(float(out_scale), dtype=DTYPE))

    @property
    def n_in(self) -> int:
        return self.n_r + 1 + self.n_beta

    def forward(self, x):
        h = 2.0 * (x - self.in_lo) / (self.in_hi - self.in_lo) - 1.0
        for layer in self.layers:
            h = layer(h)
        return self.out_offset + self.out_scale * self.head(h)[..., 0]


@dataclass
class TrainConfig:
    r_mins: tuple
    r_maxs: tuple
    pretrain_iters: int = 2000
    train_iters: int = 10000
    batch_size: int = 4096
    learning_rate: float = 1e-4
    lam: float = 1.0
    horizon: float = 3.0
    seed: int = 0
    hidden: tuple = (64, 64, 64)
    omega0: float = 30.0
    boundary_fraction: float = 0.1
    tie_beta: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if not 0.1 <= self.boundary_fraction <= 1.0:
            raise ContractError("boundary_fraction must be in [0.1, 1]")
        if self.horizon <= 0:
            raise ContractError("horizon must be positive")

    def curriculum(self, iteration: int) -> float:
        """Sampled horizon t_max: 0 through pretraining, then linear up to T."""
        if iteration < self.pretrain_iters or self.train_iters == 0:
            return 0.0 if iteration < self.pretrain_iters else self.horizon
        frac = (iteration - self.pretrain_iters + 1) / self.train_iters
        return self.horizon * min(frac, 1.0)


@dataclass
class SampleBatch:
    r: np.ndarray
    t: np.ndarray
    beta: np.ndarray

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.t == 0.0


def sample_batch(sys: ControlAffineRelSys, cfg: TrainConfig, t_max: float,
                 rng: np.random.Generator, n: int | None = None) -> SampleBatch:
    n = cfg.batch_size if n is None else n
    lo = np.asarray(cfg.r_mins, float)
    hi = np.asarray(cfg.r_maxs, float)
    r = rng.uniform(lo, hi, size=(n, sys.n_r))
    for i in sys.periodic_dims:
        r[:, i] = rng.uniform(-np.pi, np.pi, size=n)
    t = rng.uniform(0.0, t_max, size=n) if t_max > 0 else np.zeros(n)
    n_boundary = max(1, int(math.ceil(cfg.boundary_fraction * n)))
    t[:n_boundary] = 0.0
    if cfg.tie_beta:
        u = rng.uniform(0.0, 1.0, size=(n, 1))
        beta = sys.beta_lo + u * (sys.beta_hi - sys.beta_lo)
    else:
        beta = rng.uniform(sys.beta_lo, sys.beta_hi, size=(n, sys.n_beta))
    return SampleBatch(r=r, t=t, beta=beta)


def _inputs(r, t, beta, n_beta: int):
    r = np.atleast_2d(np.asarray(r, float))
    n = r.shape[0]
    t = np.broadcast_to(np.asarray(t, float).reshape(-1), (n,))
    beta = np.asarray(beta, float)
    if beta.ndim == 0:
        beta = np.full(n_beta, float(beta))
    beta = np.broadcast_to(beta, (n, n_beta))
    return torch.as_tensor(np.concatenate([r, t[:, None], beta], axis=1), dtype=DTYPE)


def forward(net: SirenNet, r, t, beta) -> np.ndarray:
    with torch.no_grad():
        out = net(_inputs(r, t, beta, net.n_beta)).numpy()
    return out


def _value_and_grads(net: SirenNet, x: torch.Tensor, create_graph: bool):
    x = x.detach().requires_grad_(True)
    v = net(x)
    (g,) = torch.autograd.grad(v.sum(), x, create_graph=create_graph)
    return v, g[:, net.n_r], g[:, :net.n_r]


def forward_with_grads(net: SirenNet, r, t, beta):
    """Returns ``(V, dV/dt, grad_r V)`` as numpy arrays via reverse-mode autodiff."""
    v, dt, dr = _value_and_grads(net, _inputs(r, t, beta, net.n_beta), create_graph=False)
    return v.detach().numpy(), dt.detach().numpy(), dr.detach().numpy()


def _batch_terms(sys: ControlAffineRelSys, batch: SampleBatch):
    """Costate-independent pieces of the Hamiltonian for a batch, as tensors."""
    r = batch.r
    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
    lo, hi = sys.planner_bound_shape(batch.beta)
    return {
        "ell": as_t(sys.error_fn(r)),
        "drift": as_t(sys.drift(r)),
        "S": as_t(sys.tracker_matrix(r)),
        "P": as_t(sys.planner_matrix(r)),
        "D": as_t(sys.dist_matrix(r)),
        "s_bounds": (as_t(sys.tracker_bounds.lo), as_t(sys.tracker_bounds.hi)),
        "p_bounds": (as_t(lo), as_t(hi)),
        "d_bounds": (as_t(sys.dist_bounds.lo), as_t(sys.dist_bounds.hi)),
    }


def _hamiltonian_torch(terms, p: torch.Tensor) -> torch.Tensor:
    pf = (p * terms["drift"]).sum(-1)
    c_s = torch.einsum("bn,bnm->bm", p, terms["S"])
    c_p = torch.einsum("bn,bnm->bm", p, terms["P"])
    c_d = torch.einsum("bn,bnm->bm", p, terms["D"])
    return hamiltonian_from_terms(pf, c_s, c_p, c_d, terms["s_bounds"], terms["p_bounds"], terms["d_bounds"])


def loss(net: SirenNet, sys: ControlAffineRelSys, batch: SampleBatch, lam: float, terms=None):
    """``(total, h1, h2)``: boundary fit, VI residual, and h1 + lam * h2."""
    terms = _batch_terms(sys, batch) if terms is None else terms
    x = _inputs(batch.r, batch.t, batch.beta, net.n_beta)
    v, v_t, v_r = _value_and_grads(net, x, create_graph=True)
    ell = terms["ell"]
    mask = torch.as_tensor(batch.boundary_mask)
    h1 = (v[mask] - ell[mask]).abs().mean() if bool(mask.any()) else v.new_zeros(())
    ham = _hamiltonian_torch(terms, v_r)
    h2 = torch.maximum(ell - v, ham - v_t).abs().mean()
    return h1 + lam * h2, h1, h2


def train(sys: ControlAffineRelSys, cfg: TrainConfig, progress_every: int = 0):
    """Train a fresh network; returns ``(net, history)``.

    ``history`` holds per-iteration ``(total, h1, h2)`` floats. Results are
    bit-identical for equal seeds on the same platform.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    lo = np.concatenate([cfg.r_mins, [0.0], sys.beta_lo])
    hi = np.concatenate([cfg.r_maxs, [cfg.horizon], sys.beta_hi])
    for i in sys.periodic_dims:
        lo[i], hi[i] = -np.pi, np.pi
    probe = sample_batch(sys, cfg, 0.0, np.random.default_rng(cfg.seed + 1), n=4096)
    ell = sys.error_fn(probe.r)
    net = SirenNet(sys.n_r, sys.n_beta, cfg.hidden, cfg.omega0, lo, hi,
                   out_offset=float(ell.mean()), out_scale=float(ell.std() or 1.0))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history: list[tuple[float, float, float]] = []
    total_iters = cfg.pretrain_iters + cfg.train_iters
    for it in range(total_iters):
        t_max = cfg.curriculum(it)
        batch = sample_batch(sys, cfg, t_max, rng)
        pretrain = it < cfg.pretrain_iters
        total, h1, h2 = loss(net, sys, batch, 0.0 if pretrain else cfg.lam)
        objective = h1 if pretrain else total
        if not torch.isfinite(objective):
            raise TrainingError(f"loss became non-finite at iteration {it}")
        opt.zero_grad()
        objective.backward()
        opt.step()
        history.append((float(total.detach()), float(h1.detach()), float(h2.detach())))
        if progress_every and it % progress_every == 0:
            log.info("iter %d t_max=%.3f total=%.4g h1=%.4g h2=%.4g", it, t_max, *history[-1])
    net.eval()
    net.train_meta = {"seed": cfg.seed, "iteration": total_iters, "horizon": cfg.horizon}
    return net, history


@dataclass
class NeuralValueSource:
    """Value-source view of a trained net at a fixed horizon ``t_conv``."""

    net: SirenNet
    t_conv: float
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    error_dims: tuple
    r_mins: np.ndarray
    r_maxs: np.ndarray
    periodic_dims: tuple = ()
    kind: str = field(default="neural", init=False)

    def query(self, r, beta):
        r = np.asarray(r, float)
        single = r.ndim == 1
        v = forward(self.net, np.atleast_2d(r), self.t_conv, beta)
        return float(v[0]) if single else v

    def grad(self, r, beta):
        r = np.asarray(r, float)
        single = r.ndim == 1
        _, _, g = forward_with_grads(self.net, np.atleast_2d(r), self.t_conv, beta)
        return g[0] if single else g

    def time_convergence_gap(self, n: int = 20_000, seed: int = 0) -> float:
        """Sup |V(T) - V(0.9 T)| over random samples, relative to the value range at T."""
        rng = np.random.default_rng(seed)
        r = rng.uniform(self.r_mins, self.r_maxs, size=(n, len(self.r_mins)))
        for i in self.periodic_dims:
            r[:, i] = rng.uniform(-np.pi, np.pi, size=n)
        beta = rng.uniform(self.beta_lo, self.beta_hi, size=(n, len(self.beta_lo)))
        v_t = forward(self.net, r, self.t_conv, beta)
        v_09 = forward(self.net, r, 0.9 * self.t_conv, beta)
        span = float(v_t.max() - v_t.min()) or 1.0
        return float(np.max(np.abs(v_t - v_09)) / span)


def as_value_source(net: SirenNet, sys: ControlAffineRelSys, t_conv: float,
                    r_mins=None, r_maxs=None) -> NeuralValueSource:
    horizon = float(net.in_hi[net.n_r])
    if t_conv > horizon + 1e-12:
        raise ContractError(f"t_conv={t_conv} exceeds trained horizon {horizon}")
    lo = net.in_lo[:net.n_r].numpy() if r_mins is None else np.asarray(r_mins, float)
    hi = net.in_hi[:net.n_r].numpy() if r_maxs is None else np.asarray(r_maxs, float)
    return NeuralValueSource(net=net, t_conv=float(t_conv), beta_lo=sys.beta_lo.copy(),
                             beta_hi=sys.beta_hi.copy(), error_dims=tuple(sys.error_dims),
                             r_mins=np.array(lo), r_maxs=np.array(hi),
                             periodic_dims=tuple(sys.periodic_dims))


# --- checkpoints --------------------------------------------------------------

_MAGIC = "PFASTRACK-SIREN 1"
_END = "END_HEADER"


def save_checkpoint(net: SirenNet, path, extra: dict | None = None) -> None:
    """Text header, then every tensor of the state dict as little-endian float64."""
    state = net.state_dict()
    header = {
        "n_r": net.n_r,
        "n_beta": net.n_beta,
        "hidden": list(net.hidden),
        "omega0": net.omega0,
        "tensors": [[k, list(v.shape)] for k, v in state.items()],
        "meta": getattr(net, "train_meta", {}),
    }
    if extra:
        header["extra"] = extra
    lines = [_MAGIC] + [f"{k}: {json.dumps(v)}" for k, v in header.items()] + [_END, ""]
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        for v in state.values():
            fh.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> SirenNet:
    raw = Path(path).read_bytes()
    marker = ("\n" + _END + "\n").encode("ascii")
    cut = raw.index(marker)
    text = raw[:cut].decode("ascii").splitlines()
    if text[0] != _MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    header = {}
    for line in text[1:]:
        k, _, v = line.partition(": ")
        header[k] = json.loads(v)
    net = SirenNet(header["n_r"], header["n_beta"], header["hidden"], header["omega0"])
    body = np.frombuffer(raw[cut + len(marker):], dtype="<f8")
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = torch.as_tensor(body[offset:offset + size].reshape(shape).copy(), dtype=DTYPE)
        offset += size
    if offset != body.size:
        raise ContractError(f"{path}: payload size mismatch")
    net.load_state_dict(state)
    net.train_meta = header.get("meta", {})
    net.eval()
    return net
