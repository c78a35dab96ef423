"""Command line entry point: solve, train, teb, simulate, bench.

Exit status: 0 on success, 1 on usage or contract errors, 2 on numerical
failures (solver blow-up, training divergence).
"""
from __future__ import annotations

import argparse
import logging
import sys as _sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import BenchConfig, MppiConfig, aggregate, render_rows, render_svg, render_table, run_bench
from .config import GRID_DEFAULTS, ConfigError, load_config, resolve_grid
from .dynamics import ContractError, builtin_system
from .environment import InfeasibleMapError, MapGenConfig, load_map, random_map, save_map
from .grid_solver import GridSpec, NumericalError, ValueFamily, load_value_table, save_value_table, solve_family
from .neural import TrainConfig, TrainingError, as_value_source, load_checkpoint, save_checkpoint, train
from .online import OnlineConfig, run
from .value_teb import GridValueSource, build_teb_table, render_teb_table

log = logging.getLogger("pfastrack")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(_sys.stderr)
        print(f"{self.prog}: error: {message}", file=_sys.stderr)
        raise SystemExit(1)


def _system(cfg):
    return builtin_system(cfg["system"]["name"], **cfg["system"]["overrides"])


def _grid_spec(cfg, sys):
    g = resolve_grid(cfg)
    return GridSpec.for_system(sys, g["mins"], g["maxs"], g["counts"]), g


def grid_family(cfg, sys, out_dir: Path, force: bool = False) -> ValueFamily:
    """Load cached value tables from ``out_dir`` or solve (and cache) them."""
    spec, g = _grid_spec(cfg, sys)
    betas = [sys.check_beta(b) for b in g["betas"]]
    paths = [out_dir / f"values_{k:02d}.vtab" for k in range(len(betas))]
    if not force and all(p.exists() for p in paths):
        slices = [load_value_table(p) for p in paths]
        if all(vs.grid == spec and np.allclose(vs.beta, b) and vs.sys_name == sys.name
               for vs, b in zip(slices, betas)):
            return ValueFamily(sys_name=sys.name, betas=betas, slices=slices)
    fam = solve_family(sys, spec, betas, tol=g["tol"], max_iters=g["max_iters"], workers=g["workers"],
                       scheme=g["scheme"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for vs, p in zip(fam.slices, paths):
        save_value_table(vs, p)
    return fam


def _train_config(cfg, sys) -> TrainConfig:
    t = dict(cfg["training"])
    t.pop("t_conv")
    spec, _ = _grid_spec(cfg, sys)
    d = GRID_DEFAULTS.get(sys.name, {})
    t["r_mins"] = tuple(t["r_mins"] or d.get("train_mins") or spec.mins)
    t["r_maxs"] = tuple(t["r_maxs"] or d.get("train_maxs") or spec.maxs)
    t["hidden"] = tuple(t["hidden"])
    return TrainConfig(**t)


def neural_source(cfg, sys, out_dir: Path, force: bool = False):
    tcfg = _train_config(cfg, sys)
    path = out_dir / "value_net.ckpt"
    if not force and path.exists():
        net = load_checkpoint(path)
    else:
        net, _ = train(sys, tcfg, progress_every=1000)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path)
    t_conv = cfg["training"]["t_conv"] or tcfg.horizon
    return as_value_source(net, sys, t_conv, tcfg.r_mins, tcfg.r_maxs)


def build_assets(cfg, backend: str, out_dir: Path) -> dict:
    sys = _system(cfg)
    if backend == "grid":
        source = GridValueSource(grid_family(cfg, sys, out_dir), sys)
    else:
        source = neural_source(cfg, sys, out_dir)
    tcfg = cfg["teb"]
    table = build_teb_table(source, tcfg["delta_beta"], tcfg["epsilon"], tcfg["policy"])
    return {"sys": sys, "source": source, "table": table}


def map_gen_config(cfg) -> MapGenConfig:
    m = {k: v for k, v in cfg["map"].items() if k not in ("file", "n_obstacles")}
    return MapGenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})


def online_config(cfg) -> OnlineConfig:
    return OnlineConfig(**cfg["online"])


def bench_config(cfg) -> BenchConfig:
    b = cfg["bench"]
    return BenchConfig(n_runs=b["n_runs"], seed_base=b["seed_base"], baselines=tuple(b["baselines"]),
                       n_obstacles=cfg["map"]["n_obstacles"], map_gen=map_gen_config(cfg),
                       online=online_config(cfg), mppi=MppiConfig(**b["mppi"]), workers=b["workers"])


# --- subcommands -----------------------------------------------------------------


def cmd_solve(cfg, args, out_dir):
    sys = _system(cfg)
    fam = grid_family(cfg, sys, out_dir, force=True)
    for k, vs in enumerate(fam.slices):
        print(f"beta={vs.beta.tolist()} v_min={vs.v_min:.6g} converged={vs.converged} "
              f"iterations={vs.iterations} -> values_{k:02d}.vtab")


def cmd_train(cfg, args, out_dir):
    sys = _system(cfg)
    src = neural_source(cfg, sys, out_dir, force=True)
    gap = src.time_convergence_gap()
    print(f"checkpoint: {out_dir / 'value_net.ckpt'}")
    print(f"time-convergence gap (sup |V(T) - V(0.9T)| / range): {gap:.4f}"
          + ("" if gap < 0.02 else "  [not converged in t]"))


def cmd_teb(cfg, args, out_dir):
    assets = build_assets(cfg, args.backend, out_dir)
    text = render_teb_table(assets["table"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "teb_table.txt").write_text(text)
    print(text, end="")


def cmd_simulate(cfg, args, out_dir):
    assets = build_assets(cfg, args.backend, out_dir)
    table = assets["table"]
    if cfg["map"]["file"]:
        obmap = load_map(cfg["map"]["file"])
    else:
        obmap = random_map(cfg["online"]["seed"], cfg["map"]["n_obstacles"], table.steb.radius,
                           map_gen_config(cfg))
    log_, outcome = run(assets["sys"], table, assets["source"], obmap, online_config(cfg))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_map(obmap, out_dir / "map.txt")
    (out_dir / "trajectory.csv").write_text(log_.to_text())
    (out_dir / "trajectory.svg").write_text(render_svg(log_, obmap, table, assets["sys"].error_dims))
    t = log_.records[-1].t if log_.records else 0.0
    print(f"outcome={outcome} time={t:.2f}s steps={len(log_)} invariant_violations={log_.count('invariant')}")


def cmd_bench(cfg, args, out_dir):
    assets = build_assets(cfg, args.backend, out_dir)
    runs = run_bench(assets, bench_config(cfg))
    report = aggregate(runs)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_table(report)
    (out_dir / "bench_report.txt").write_text(table)
    (out_dir / "bench_runs.csv").write_text(render_rows(report))
    print(table, end="")


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "teb": cmd_teb, "simulate": cmd_simulate, "bench": cmd_bench}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pfastrack", description="Parameterized tracking-error-bound planning toolkit")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="seed for maps, resets, training and bench runs")
    p.add_argument("--out-dir", type=Path, default=Path("pfastrack_out"))
    p.add_argument("--backend", choices=("grid", "neural"), default="grid")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_seed(cfg, seed):
    if seed is None:
        return cfg
    cfg["online"]["seed"] = seed
    cfg["training"]["seed"] = seed
    cfg["bench"]["seed_base"] = seed
    return cfg


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_seed(load_config(args.config), args.seed)
        COMMANDS[args.command](cfg, args, args.out_dir)
    except (NumericalError, TrainingError) as exc:
        print(f"numerical failure: {exc}", file=_sys.stderr)
        return 2
    except (ContractError, ConfigError, InfeasibleMapError, TypeError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
