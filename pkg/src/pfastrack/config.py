"""Run configuration: a YAML document with fixed sections, checked on load.

Sections and keys (all optional; unknown keys are rejected)::

    system:   name, overrides{...}
    grid:     mins, maxs, counts, betas, tol, max_iters, workers, scheme
    training: pretrain_iters, train_iters, batch_size, learning_rate, lam,
              horizon, seed, hidden, omega0, boundary_fraction, t_conv,
              r_mins, r_maxs
    teb:      delta_beta, epsilon, policy
    map:      file, n_obstacles, bounds_lo, bounds_hi, start, goal,
              goal_radius, circle_radius, box_half, box_fraction, margin,
              max_attempts
    online:   dt, max_time, goal_tol, plan_resolution, sensing_radius,
              reset_attempts, max_stall_steps, seed, mode, disturbance
    bench:    n_runs, seed_base, baselines, workers,
              mppi{samples, horizon, steps, temperature, noise_scale,
                   control_weight, ref_speed}
"""
from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from .dynamics import ContractError

__all__ = ["ConfigError", "DEFAULTS", "GRID_DEFAULTS", "load_config", "merge_config"]


class ConfigError(ContractError):
    pass


GRID_DEFAULTS = {
    # training samples a wider position range so the net sees the inflow at the grid edges
    "DoubleIntRel": {"mins": [-2.0, -2.0], "maxs": [2.0, 2.0], "counts": [81, 81],
                     "betas": [0.25, 0.5, 0.75, 1.0, 1.25], "train_mins": [-4.0, -2.0], "train_maxs": [4.0, 2.0]},
    "DubinsRel": {"mins": [-3.0, -3.0, -math.pi, -2.0], "maxs": [3.0, 3.0, math.pi, 2.0],
                  "counts": [31, 31, 25, 15], "betas": [0.5, 0.75, 1.0, 1.25]},
}

DEFAULTS = {
    "system": {"name": "DubinsRel", "overrides": {}},
    "grid": {"mins": None, "maxs": None, "counts": None, "betas": None, "tol": None,
             "max_iters": 20000, "workers": 1, "scheme": "auto"},
    "training": {"pretrain_iters": 2000, "train_iters": 10000, "batch_size": 4096, "learning_rate": 1e-4,
                 "lam": 1.0, "horizon": 3.0, "seed": 0, "hidden": [64, 64, 64], "omega0": 30.0,
                 "boundary_fraction": 0.1, "t_conv": None, "r_mins": None, "r_maxs": None},
    "teb": {"delta_beta": 0.25, "epsilon": None, "policy": "nested"},
    "map": {"file": None, "n_obstacles": 8, "bounds_lo": [0.0, 0.0], "bounds_hi": [40.0, 40.0],
            "start": [4.0, 4.0], "goal": [36.0, 36.0], "goal_radius": 1.0, "circle_radius": [1.0, 2.5],
            "box_half": [0.75, 2.0], "box_fraction": 0.3, "margin": 1.0, "max_attempts": 1000},
    "online": {"dt": 0.05, "max_time": 300.0, "goal_tol": None, "plan_resolution": None,
               "sensing_radius": None, "reset_attempts": 500, "max_stall_steps": 40, "seed": 0,
               "mode": "PF", "disturbance": "zero"},
    "bench": {"n_runs": 20, "seed_base": 0, "baselines": ["F", "MF", "PF", "MPPI"], "workers": 1,
              "mppi": {"samples": 256, "horizon": 1.0, "steps": 20, "temperature": 1.0, "noise_scale": 0.3,
                       "control_weight": 0.01, "ref_speed": None}},
}

# keys whose values are free-form mappings
_OPEN = {("system", "overrides")}


def merge_config(base: dict, update: dict, where: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    if not isinstance(update, dict):
        raise ConfigError(f"section {'.'.join(where) or '<root>'} must be a mapping")
    for key, val in update.items():
        path = where + (key,)
        if key not in base:
            raise ConfigError(f"unknown configuration key {'.'.join(path)!r}")
        if isinstance(base[key], dict) and path not in _OPEN:
            out[key] = merge_config(base[key], val or {}, path)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check(cfg: dict) -> None:
    name = cfg["system"]["name"]
    if not isinstance(name, str):
        raise ConfigError("system.name must be a string")
    if not isinstance(cfg["system"]["overrides"], dict):
        raise ConfigError("system.overrides must be a mapping")
    g = cfg["grid"]
    lens = {len(g[k]) for k in ("mins", "maxs", "counts") if g[k] is not None}
    if len(lens) > 1:
        raise ConfigError("grid.mins, grid.maxs and grid.counts must have equal length")
    if cfg["teb"]["delta_beta"] is None or cfg["teb"]["delta_beta"] <= 0:
        raise ConfigError("teb.delta_beta must be positive")
    if cfg["teb"]["policy"] not in ("nested", "minimal"):
        raise ConfigError("teb.policy must be 'nested' or 'minimal'")
    if cfg["online"]["mode"] not in ("PF", "F", "MF"):
        raise ConfigError("online.mode must be PF, F or MF")
    bl = cfg["bench"]["baselines"]
    if not isinstance(bl, list) or not set(bl) <= {"F", "MF", "PF", "MPPI"}:
        raise ConfigError("bench.baselines must be a subset of [F, MF, PF, MPPI]")
    for sec, key in [("bench", "n_runs"), ("bench", "workers"), ("grid", "workers"), ("map", "n_obstacles")]:
        v = cfg[sec][key]
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"{sec}.{key} must be a non-negative integer")


def resolve_grid(cfg: dict) -> dict:
    """Grid section with system defaults filled in."""
    g = dict(cfg["grid"])
    defaults = GRID_DEFAULTS.get(cfg["system"]["name"], {})
    for key in ("mins", "maxs", "counts", "betas"):
        if g[key] is None:
            if key not in defaults:
                raise ConfigError(f"grid.{key} has no default for system {cfg['system']['name']!r}")
            g[key] = defaults[key]
    return g


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = merge_config(cfg, doc or {})
    _check(cfg)
    return cfg
