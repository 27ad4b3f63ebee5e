"""Command-line entry points and run-directory persistence.

Every command resolves its configuration (file plus flag overrides), writes
the resolved copy and the master seed into the output directory, and emits
CSV tables with a fixed column order and full-precision floats, so a repeated
invocation with the same configuration and seed reproduces every output byte
of ``rounds.csv``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import seeding
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config, with_overrides
from .dynamics import IntegrationError, make_system, simulate_trajectory
from .estimation import ekf_filter, ukf_filter, urts_smooth
from .evaluation import ablation_run, build_clients, estimator_benchmark, final_mean, run_scheme
from .pendulum import IngestionError, TRAIN_KEEP, ingest_double_pendulum, load_trials, real_data_experiment

logger = logging.getLogger(__name__)

ROUNDS_HEADER = ("round,active,aggregate_size,client_sizes,"
                 "test_loss,test_loss_lin,test_loss_rec,test_loss_pred,pred_error")

ABLATION_SETTINGS = (
    (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
    (0.5, 0.5, 0.0),
    (0.5, 0.0, 0.5),
    (0.0, 0.5, 0.5),
    (0.0, 0.0, 1.0),
    (0.0, 1.0, 0.0),
    (1.0, 0.0, 0.0),
)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")


def write_rounds_csv(path, records):
    """One row per round; wall time is deliberately excluded so the file is a
    pure function of configuration and seed."""
    lines = [ROUNDS_HEADER]
    for r in records:
        lines.append(",".join([
            str(r.round_index),
            ";".join(str(c) for c in r.active),
            str(r.aggregate_size),
            ";".join(str(s) for s in r.client_sizes),
            _fmt(r.test_loss),
            _fmt(r.test_loss_lin),
            _fmt(r.test_loss_rec),
            _fmt(r.test_loss_pred),
            _fmt(r.pred_error),
        ]))
    _write_lines(path, lines)


def write_summary_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _write_lines(path, lines)


def prepare_run_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved", "w", encoding="utf-8", newline="\n") as handle:
        handle.write(serialize_config(cfg))
    _write_lines(out / "seed.txt", [str(cfg.seed)])
    return out


def _run_summary(records, scheme):
    tail = min(50, len(records))
    return [
        ("scheme", scheme),
        ("rounds", len(records)),
        ("round1_test_loss", records[0].test_loss),
        ("final_test_loss", records[-1].test_loss),
        (f"final{tail}_mean_test_loss", final_mean(records, tail, "test_loss")),
        (f"final{tail}_mean_pred_error", final_mean(records, tail, "pred_error")),
        ("total_wall_time_s", float(sum(r.wall_time for r in records))),
    ]


def cmd_train_fed(cfg):
    out = prepare_run_dir(cfg)
    records = run_scheme(cfg)
    write_rounds_csv(out / "rounds.csv", records)
    write_summary_csv(out / "summary.csv", ("key", "value"), _run_summary(records, cfg.scheme))
    print(f"train-fed: {len(records)} rounds -> {out}")
    return 0


def cmd_bench_estimators(cfg):
    out = prepare_run_dir(cfg)
    rows = estimator_benchmark(noise_scale=cfg.noise_scale, block_len=cfg.block_len,
                               seed=cfg.seed, ut=cfg.ut())
    write_summary_csv(out / "summary.csv", ("method", "mean_error", "std_error"),
                      [(r["method"], r["mean_error"], r["std_error"]) for r in rows])
    for r in rows:
        print(f"{r['method']}: mean_error={r['mean_error']:.4f} std={r['std_error']:.4f}")
    print(f"bench-estimators -> {out}")
    return 0


def cmd_ablate(cfg):
    out = prepare_run_dir(cfg)
    seeds = [cfg.seed + i for i in range(5)]
    rows = ablation_run(ABLATION_SETTINGS, cfg, seeds)
    write_summary_csv(out / "summary.csv",
                      ("w1", "w2", "w3", "loss_lin", "loss_rec", "loss_pred"),
                      [(r["w1"], r["w2"], r["w3"], r["loss_lin"], r["loss_rec"], r["loss_pred"])
                       for r in rows])
    print(f"ablate: {len(rows)} weight settings x {len(seeds)} seeds -> {out}")
    return 0


def cmd_simulate(cfg):
    """Simulate one observation block per client and persist the full chain:
    true states, noisy observations, filtered and smoothed estimates."""
    out = prepare_run_dir(cfg)
    system = make_system(cfg.system, dt=cfg.nu, substeps=cfg.substeps)
    clients = build_clients(cfg, system)
    system_rng = seeding.stream(cfg.seed, seeding.SYSTEM)
    trajectory = simulate_trajectory(system, system.sample_initial_state(system_rng),
                                     cfg.block_len)
    dims = range(1, system.dim + 1)
    lines = ["k," + ",".join(f"x{i}" for i in dims)]
    for k, x in enumerate(trajectory):
        lines.append(f"{k}," + ",".join(_fmt(float(v)) for v in x))
    _write_lines(out / "trajectory.csv", lines)

    obs_lines = None
    est_lines = ["client,k," + ",".join(f"xf{i}" for i in dims) + ","
                 + ",".join(f"xs{i}" for i in dims)]
    summary = []
    ut = cfg.ut()
    x0_hat = np.full(system.dim, cfg.init_mean)
    p0_hat = cfg.init_cov * np.eye(system.dim)
    for client in clients:
        observations = client.observer.observe_trajectory(trajectory, client.noise_rng)
        if obs_lines is None:
            obs_lines = ["client,k," + ",".join(f"z{i}" for i in range(1, observations.shape[1] + 1))]
        if cfg.estimator == "ekf":
            filtered = ekf_filter(observations, system.step, client.observer.apply,
                                  client.sigma_f, client.sigma_h, x0_hat, p0_hat)
        else:
            filtered = ukf_filter(observations, system.step, client.observer.apply,
                                  client.sigma_f, client.sigma_h, x0_hat, p0_hat, ut,
                                  resample=(cfg.estimator == "ukf_resample"))
        smoothed = urts_smooth(filtered, system.step, client.sigma_f, ut)
        for k, z in enumerate(observations):
            obs_lines.append(f"{client.cid},{k}," + ",".join(_fmt(float(v)) for v in z))
        for k, (fb, sb) in enumerate(zip(filtered, smoothed)):
            est_lines.append(f"{client.cid},{k},"
                             + ",".join(_fmt(float(v)) for v in fb.mean) + ","
                             + ",".join(_fmt(float(v)) for v in sb.mean))
        err_f = float(np.mean(np.abs(trajectory - np.stack([b.mean for b in filtered]))))
        err_s = float(np.mean(np.abs(trajectory - np.stack([b.mean for b in smoothed]))))
        summary.append((client.cid, err_f, err_s))
    _write_lines(out / "observations.csv", obs_lines)
    _write_lines(out / "estimates.csv", est_lines)
    write_summary_csv(out / "summary.csv",
                      ("client", "mean_abs_error_filtered", "mean_abs_error_smoothed"), summary)
    print(f"simulate: {cfg.block_len} samples, {len(clients)} clients -> {out}")
    return 0


def cmd_ingest_pendulum(cfg):
    out = prepare_run_dir(cfg)
    trials = load_trials(cfg)
    states = ingest_double_pendulum(trials, keep=TRAIN_KEEP, negate=cfg.negate_velocity)
    summary = []
    for i, trial in enumerate(states):
        lines = ["k,theta1,omega1,theta2,omega2"]
        for k, row in enumerate(trial, start=TRAIN_KEEP[0]):
            lines.append(f"{k}," + ",".join(_fmt(float(v)) for v in row))
        _write_lines(out / f"trial{i}.csv", lines)
        summary.append((i, trial.shape[0]))
    write_summary_csv(out / "summary.csv", ("trial", "n_states"), summary)
    print(f"ingest-pendulum: {len(states)} trials -> {out}")
    return 0


def cmd_real_data(cfg):
    records, run_cfg = real_data_experiment(cfg)
    out = prepare_run_dir(with_overrides(run_cfg, out=cfg.out))
    write_rounds_csv(out / "rounds.csv", records)
    write_summary_csv(out / "summary.csv", ("key", "value"), _run_summary(records, "fedkl"))
    print(f"real-data: {len(records)} rounds -> {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train-fed": cmd_train_fed,
    "bench-estimators": cmd_bench_estimators,
    "ablate": cmd_ablate,
    "ingest-pendulum": cmd_ingest_pendulum,
    "real-data": cmd_real_data,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedkoopman",
        description="Federated deep Koopman learning from Kalman-filtered observations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to a key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--scheme", choices=("single", "perfect", "central", "fedkl"),
                       help="training scheme override")
        p.add_argument("--policy", choices=("random", "roundrobin", "threshold"),
                       help="client-selection policy override")
    return parser


def resolve_config(args):
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.scheme is not None:
        overrides["scheme"] = args.scheme
    if args.policy is not None:
        overrides["policy"] = args.policy
    return with_overrides(cfg, **overrides) if overrides else cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, IngestionError, IntegrationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
