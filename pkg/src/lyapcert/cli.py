"""Command-line orchestration: deterministic end-to-end experiment runs.

Subcommands:

    train-meta   region-selection loop (meta-train, task-check, shrink),
                 writes the meta checkpoint + training report
    adapt        k-step test-time adaptation of a checkpoint under the
                 50-sample / 10-step budget, with a budget ledger
    verify       tightened-condition map of a checkpoint (CSV + SVG)
    roa          certified sublevel set + Monte-Carlo validation (JSON/CSV/SVG)
    simulate     RK4 rollout from a given initial state (CSV, SVG for 2-d)
    compare      all methods on one preset, one table (CSV + JSON)

Every artifact embeds the config hash and seed; reruns with identical config
and seed reproduce all numeric artifacts bitwise (timings are never written
into artifacts). Exit codes: 0 ok, 2 config error, 3 verification failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import baselines, dynamics, meta, net, roa, svg, verify
from .config import (ConfigError, ExperimentConfig, PRESETS, config_hash,
                     config_to_dict, load_config)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFICATION = 3
EXIT_NUMERIC = 4


class MissingArtifact(Exception):
    """An upstream artifact (checkpoint, map) is absent."""


class ArchMismatch(Exception):
    """Checkpoint architecture does not match the configured system."""


def worker_count() -> int:
    """Worker cap from LYAPCERT_THREADS (default 1, sequential)."""
    raw = os.environ.get("LYAPCERT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2))


def _resolve_config(args) -> ExperimentConfig:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; have {sorted(PRESETS)}")
        cfg = PRESETS[args.preset]
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("either --preset or --config is required")
    if getattr(args, "mode", None):
        cfg = ExperimentConfig(**{**cfg.__dict__, "meta": cfg.meta.__class__(
            **{**cfg.meta.__dict__, "mode": args.mode})})
    if getattr(args, "seed", None) is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "seeds": cfg.seeds.__class__(
            **{**cfg.seeds.__dict__, "master": args.seed})})
    if getattr(args, "out", None):
        cfg = ExperimentConfig(**{**cfg.__dict__, "out_dir": args.out})
    return cfg


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seeds.master, "preset": cfg.name}


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta_pipeline_fns(cfg: ExperimentConfig):
    """train/verify/accept callables for the region-selection loop."""
    arch = cfg.architecture()
    loss_cfg = cfg.loss.to_loss_config()
    setup = cfg.task_setup()
    meta_cfg = cfg.meta.to_meta_config(cfg.seeds.net_seed)
    theta0 = cfg.system.nominal()

    def train_fn(d):
        tasks = dynamics.sample_tasks(theta0, setup.sigma_diag, setup.n_tasks, setup.task_seed)
        datasets = [
            dynamics.build_dataset(dynamics.build_system(t), d, setup.k_train,
                                   setup.j_test, setup.m_batches, setup.task_seed + 7 * i)
            for i, t in enumerate(tasks)
        ]
        theta_init = net.shaped_init(arch, meta_cfg.seed, d)
        report = meta.meta_train(datasets, arch, meta_cfg, loss_cfg, theta0=theta_init)
        return report

    def verify_fn(report, d):
        theta = report.theta_mnlf
        grid = verify.build_grid(d, cfg.verify.nodes_per_axis, theta0.state_dim)
        settings = cfg.verify.to_settings(radius=d)
        tasks = dynamics.sample_tasks(theta0, setup.sigma_diag, setup.n_tasks, setup.task_seed)
        maps = []
        for i, task in enumerate(tasks):
            system = dynamics.build_system(task)
            dataset = dynamics.build_dataset(system, d, setup.k_train, setup.j_test,
                                             setup.m_batches, setup.task_seed + 7 * i)
            adapted = meta.test_time_adapt(theta, arch, dataset.batches[0][0],
                                           setup.adapt_alpha, meta_cfg.k_test, loss_cfg)
            vmap, _ = baselines.certify_candidate(net.MlpLyapunov(adapted, arch),
                                                  system, grid, settings)
            maps.append(vmap)
        return maps

    def accept_fn(maps, d):
        grid = verify.build_grid(d, cfg.verify.nodes_per_axis, theta0.state_dim)
        interior = ~grid.boundary
        threshold = cfg.verify.min_green_fraction
        for m in maps:
            frac = float(np.mean(m.green[interior]))
            if frac < threshold:
                return False
        return True

    return train_fn, verify_fn, accept_fn


def cmd_train_meta(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    train_fn, verify_fn, accept_fn = _meta_pipeline_fns(cfg)
    try:
        selection = verify.select_valid_region(
            train_fn, verify_fn, cfg.verify.d0, cfg.verify.shrink_factor,
            cfg.verify.max_rounds, accept_fn=accept_fn)
    except verify.RegionSelectionFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION

    report = selection.artifact
    ckpt = out / "meta_checkpoint.json"
    net.save_checkpoint(ckpt, report.theta_mnlf, cfg.architecture(),
                        extra={**_stamp(cfg), "radius": selection.radius,
                               "system_id": cfg.system.system_id,
                               "rounds": selection.rounds})
    train_report = meta.export_report_json(report, cfg.meta.to_meta_config(cfg.seeds.net_seed),
                                           checkpoint_ref=ckpt.name)
    atomic_write_json(out / "train_report.json", {**_stamp(cfg), **train_report})
    atomic_write_json(out / "region.json",
                      {**_stamp(cfg), "radius": selection.radius, "rounds": selection.rounds})
    atomic_write_json(out / "config_echo.json", config_to_dict(cfg))
    print(f"meta checkpoint written to {ckpt} (radius {selection.radius:g}, "
          f"{selection.rounds} round(s))")
    return EXIT_OK


def _load_checkpoint_for(cfg: ExperimentConfig, path) -> tuple[np.ndarray, net.Architecture, dict]:
    if not Path(path).exists():
        raise MissingArtifact(f"checkpoint {path} does not exist")
    theta, arch, extra = net.load_checkpoint(path)
    if arch.input_dim != cfg.system.nominal().state_dim:
        raise ArchMismatch(f"checkpoint is {arch.input_dim}-d, system is "
                           f"{cfg.system.nominal().state_dim}-d")
    return theta, arch, extra


def cmd_adapt(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    theta, arch, extra = _load_checkpoint_for(cfg, args.checkpoint)
    radius = extra.get("radius", cfg.verify.d0)
    setup = cfg.task_setup()
    k = args.k if args.k is not None else cfg.meta.k_test
    n_samples = args.samples if args.samples is not None else setup.adapt_samples
    if n_samples > baselines.TEST_TIME_SAMPLES or k > baselines.TEST_TIME_STEPS:
        raise ConfigError(f"test-time budget is {baselines.TEST_TIME_SAMPLES} samples / "
                          f"{baselines.TEST_TIME_STEPS} steps")
    system_test = dynamics.build_system(cfg.system.test())
    dataset = dynamics.build_dataset(system_test, radius, n_samples, 1, 1,
                                     cfg.seeds.adapt_seed)
    adapted = meta.test_time_adapt(theta, arch, dataset.batches[0][0],
                                   setup.adapt_alpha, k, cfg.loss.to_loss_config())
    ckpt = out / "adapted_checkpoint.json"
    net.save_checkpoint(ckpt, adapted, arch,
                        extra={**_stamp(cfg), "radius": radius,
                               "system_id": cfg.system.system_id, "adapted": True})
    atomic_write_json(out / "adapt_ledger.json",
                      {**_stamp(cfg), "samples_used": n_samples, "steps_used": k,
                       "alpha": setup.adapt_alpha})
    print(f"adapted checkpoint written to {ckpt} ({n_samples} samples, {k} steps)")
    return EXIT_OK


def _certify_checkpoint(cfg: ExperimentConfig, checkpoint):
    theta, arch, extra = _load_checkpoint_for(cfg, checkpoint)
    radius = extra.get("radius", cfg.verify.d0)
    system_test = dynamics.build_system(cfg.system.test())
    grid = verify.build_grid(radius, cfg.verify.nodes_per_axis, system_test.dim)
    settings = cfg.verify.to_settings(radius=radius)
    candidate = net.MlpLyapunov(theta, arch)
    plane = tuple(cfg.roa.plane) if system_test.dim > 2 else None
    vmap, result = baselines.certify_candidate(candidate, system_test, grid, settings, plane)
    return candidate, system_test, grid, vmap, result


def cmd_verify(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    candidate, system_test, grid, vmap, _ = _certify_checkpoint(cfg, args.checkpoint)
    verify.export_validity_csv(vmap, grid, out / "validity_map.csv")
    axes = tuple(cfg.roa.plane) if grid.dim > 2 else (0, 1)
    atomic_write_text(out / "validity_map.svg",
                      svg.render_validity_svg(vmap, grid, axes=axes))
    green = float(np.mean(vmap.green))
    atomic_write_json(out / "validity_summary.json",
                      {**_stamp(cfg), "green_fraction": green,
                       "fully_green": vmap.fully_green,
                       "constants": {"k_v": vmap.constants.k_v,
                                     "k_grad_v": vmap.constants.k_grad_v,
                                     "k_f": vmap.constants.k_f,
                                     "k_lie": vmap.constants.k_lie}})
    print(f"validity map written ({green:.4f} green)")
    return EXIT_OK


def cmd_roa(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    candidate, system_test, grid, vmap, result = _certify_checkpoint(cfg, args.checkpoint)
    check = roa.monte_carlo_convergence(system_test, result, grid, cfg.roa.mc_samples,
                                        cfg.roa.mc_step, cfg.roa.mc_horizon,
                                        cfg.roa.mc_tol, cfg.seeds.master,
                                        candidate=candidate)
    roa.export_roa_json(result, grid, out / "roa.json",
                        config_hash=config_hash(cfg), seed=cfg.seeds.master)
    roa.export_boundary_csv(result, grid, out / "roa_boundary.csv")
    axes = tuple(cfg.roa.plane) if grid.dim > 2 else (0, 1)
    atomic_write_text(out / "roa_overlay.svg",
                      svg.render_validity_svg(vmap, grid, roa=result, axes=axes))
    atomic_write_json(out / "roa_mc.json",
                      {**_stamp(cfg), "fraction": check.fraction, "vacuous": check.vacuous,
                       "n_samples": check.n_samples})
    print(f"roa: c={result.c:g} area={result.area:g} mc_fraction={check.fraction:g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    system_test = dynamics.build_system(cfg.system.test())
    x0 = np.array([float(v) for v in args.x0.split(",")])
    traj = dynamics.simulate(system_test, x0, args.h, args.horizon)
    rows = ["t," + ",".join(f"x{i + 1}" for i in range(system_test.dim))]
    for t, state in zip(traj.times, traj.states):
        rows.append(",".join([repr(float(t))] + [repr(float(v)) for v in state]))
    atomic_write_text(out / "trajectory.csv", "\n".join(rows) + "\n")
    if system_test.dim == 2:
        grid = verify.build_grid(cfg.verify.d0, 41, 2)
        atomic_write_text(out / "trajectory.svg",
                          svg.render_phase_svg(system_test, grid, trajectories=[traj]))
    final = float(np.linalg.norm(traj.states[-1]))
    print(f"simulated {traj.times[-1]:g}s, final |x| = {final:g}"
          + (" (diverged)" if traj.diverged else ""))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    table = _run_compare(cfg)
    rows = table.to_rows()
    header = ["method", "area", "c", "mc_fraction", "test_samples", "test_steps", "status"]
    canon = _out_table_text(header, rows)
    atomic_write_text(out / "comparison.csv", canon)
    atomic_write_json(out / "comparison.json", {**_stamp(cfg), "rows": rows})
    for row in rows:
        area = f"{row['area']:.3f}" if isinstance(row["area"], float) else "-"
        print(f"{row['method']:<10} area={area:<9} status={row['status']}")
    return EXIT_OK


def _out_table_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(row[h]) if isinstance(row[h], float) else str(row[h])
                              for h in header))
    return "\n".join(lines) + "\n"


def _run_compare(cfg: ExperimentConfig) -> baselines.ComparisonTable:
    plane = tuple(cfg.roa.plane) if cfg.system.nominal().state_dim > 2 else None
    return baselines.compare(
        theta0_params=cfg.system.nominal(), theta_test_params=cfg.system.test(),
        settings=cfg.verify.to_settings(), arch=cfg.architecture(),
        loss_cfg=cfg.loss.to_loss_config(),
        meta_cfg=cfg.meta.to_meta_config(cfg.seeds.net_seed),
        setup=cfg.task_setup(), nlf_budget=cfg.nlf.to_budget(),
        seed=cfg.seeds.master, plane=plane, mc_samples=cfg.roa.mc_samples,
        mc_h=cfg.roa.mc_step, mc_horizon=cfg.roa.mc_horizon, mc_tol=cfg.roa.mc_tol,
        workers=worker_count(),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lyapcert",
                                     description="meta-trained, grid-certified Lyapunov functions")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a config JSON file")
        p.add_argument("--preset", help="named preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory root")

    p = sub.add_parser("train-meta", help="meta-train with region selection")
    common(p)
    p.add_argument("--mode", choices=["first_order", "second_order"])
    p.set_defaults(func=cmd_train_meta)

    p = sub.add_parser("adapt", help="test-time adaptation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, help="adaptation steps (default from config)")
    p.add_argument("--samples", type=int, help="adaptation samples (default from config)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("verify", help="tightened-condition map of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("roa", help="certified region of attraction of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_roa)

    p = sub.add_parser("simulate", help="RK4 rollout of the test-time system")
    common(p)
    p.add_argument("--x0", required=True, help="comma-separated initial state")
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=20.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="all methods, one table")
    common(p)
    p.add_argument("--mode", choices=["first_order", "second_order"])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, ArchMismatch) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (meta.NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
