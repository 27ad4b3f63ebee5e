"""Double-pendulum dataset ingestion and the recorded-data experiment.

Recorded trials provide only the two angular displacements at 500 Hz.
Angular velocities are recovered by a wide central difference over a +/-200
sample window (clamped at the series ends), after which the retained sample
range forms the (theta1, omega1, theta2, omega2) state sequence.  When no
recording is available a simulated double pendulum stands in so the whole
pipeline stays runnable.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from . import seeding
from .config import with_overrides
from .dynamics import ObservationModel, make_system, simulate_trajectory
from .evaluation import run_scheme

logger = logging.getLogger(__name__)

SAMPLE_RATE = 500.0
HALF_WINDOW = 200
TRAIN_KEEP = (1000, 6000)
TEST_KEEP = (1000, 3000)


class IngestionError(ValueError):
    """The recorded-angle input could not be turned into state sequences."""


def angular_velocities(theta, half_window=HALF_WINDOW, sample_rate=SAMPLE_RATE, negate=False):
    """Velocity estimate (theta_i - theta_j) / (dt (j - i)) with i = max(0, k-w),
    j = min(k+w, n-1).

    The numerator order is kept as stated even though it yields the negative of
    the forward difference; ``negate`` flips it.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[0]
    k = np.arange(n)
    i = np.maximum(0, k - half_window)
    j = np.minimum(k + half_window, n - 1)
    if np.any(i >= j):
        raise IngestionError(f"series of {n} samples is too short for velocity estimation")
    omega = (theta[i] - theta[j]) / ((j - i) / sample_rate)
    return -omega if negate else omega


def states_from_angles(angles, keep, half_window=HALF_WINDOW, sample_rate=SAMPLE_RATE,
                       negate=False):
    """(theta1, omega1, theta2, omega2) rows over the retained sample range.

    Velocities are computed on the full series first so the retained rows see
    unclamped difference windows wherever possible.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.ndim != 2 or angles.shape[1] < 2:
        raise IngestionError("need an (n, 2) array of angle samples")
    lo, hi = keep
    if angles.shape[0] <= hi:
        raise IngestionError(
            f"trial has {angles.shape[0]} samples; retained range needs more than {hi}"
        )
    omega1 = angular_velocities(angles[:, 0], half_window, sample_rate, negate)
    omega2 = angular_velocities(angles[:, 1], half_window, sample_rate, negate)
    states = np.column_stack([angles[:, 0], omega1, angles[:, 1], omega2])
    return states[lo : hi + 1]


def load_angle_csv(path):
    """Read an (n, 2) angle series; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise IngestionError(f"{path}:{lineno}: expected at least two columns")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                if lineno == 1:
                    continue
                raise IngestionError(f"{path}:{lineno}: non-numeric row {line!r}") from None
    if not rows:
        raise IngestionError(f"{path}: no numeric rows")
    return np.asarray(rows, dtype=float)


def resolve_trial_paths(data):
    """Accept a directory of trial CSVs, a comma-separated list, or one file."""
    if "," in data:
        paths = [Path(p.strip()) for p in data.split(",") if p.strip()]
    elif os.path.isdir(data):
        paths = sorted(Path(data).glob("*.csv"))
    else:
        paths = [Path(data)]
    if not paths:
        raise IngestionError(f"no trial files found under {data!r}")
    for p in paths:
        if not p.exists():
            raise IngestionError(f"trial file {p} does not exist")
    return paths


def ingest_double_pendulum(trials, keep=TRAIN_KEEP, negate=False):
    """State sequences for each trial, kept separate.

    ``trials`` holds angle arrays or paths to angle CSVs.
    """
    out = []
    for trial in trials:
        angles = trial if isinstance(trial, np.ndarray) else load_angle_csv(trial)
        out.append(states_from_angles(angles, keep=keep, negate=negate))
    return out


def synthetic_angle_trials(seed, n_trials=3, n_samples=TRAIN_KEEP[1] + HALF_WINDOW + 1,
                           dt=1.0 / SAMPLE_RATE):
    """Simulated stand-in for the recorded archive: angle series of a double
    pendulum released from rest at random angles, sampled at the same rate."""
    system = make_system("double_pendulum", dt=dt, substeps=1)
    rng = seeding.stream(seed, seeding.DATASET)
    trials = []
    for _ in range(n_trials):
        x0 = system.sample_initial_state(rng)
        states = simulate_trajectory(system, x0, n_samples)
        trials.append(states[:, [0, 2]])
    return trials


def load_trials(cfg):
    """Recorded trials from ``cfg.data`` when set, else the simulated stand-in."""
    if cfg.data:
        paths = resolve_trial_paths(cfg.data)
        return [load_angle_csv(p) for p in paths]
    logger.info("no recorded dataset configured; using the simulated stand-in")
    return synthetic_angle_trials(cfg.seed)


def real_data_config(cfg):
    """The recorded-data experiment's parameter choices layered over a base
    configuration: 4-d pendulum state, 100-sample blocks, 50 rounds, 25 local
    epochs, and diag(0.01, 1, 0.01, 1) noise covariances."""
    return with_overrides(
        cfg,
        system="double_pendulum",
        scheme="fedkl",
        block_len=100,
        rounds=50,
        epochs=25,
        sigma_f=(0.01, 1.0, 0.01, 1.0),
        sigma_h=(0.01, 1.0, 0.01, 1.0),
        nu=1.0 / SAMPLE_RATE,
        substeps=1,
    )


def perturbed_identity_observers(cfg, dim=4):
    """Per-client observation maps I + Xi with Xi entries uniform on [0, 0.5]."""
    observers = []
    for cid in range(cfg.n_clients):
        rng = seeding.stream(cfg.seed, seeding.OBSERVER, cid)
        xi = rng.uniform(0.0, 0.5, size=(dim, dim))
        noise = np.diag(np.asarray(cfg.sigma_h if isinstance(cfg.sigma_h, tuple)
                                   else [float(cfg.sigma_h)] * dim, dtype=float))
        observers.append(ObservationModel("affine-identity", noise_cov=noise, perturbation=xi))
    return observers


def real_data_experiment(cfg, trials=None):
    """Federated training on recorded (or stand-in) double-pendulum data.

    The first two trials supply training blocks (random contiguous segments of
    the retained range); the third trial's samples 1000..3000 form the test
    sequence.  Returns (records, resolved config).
    """
    run_cfg = real_data_config(cfg)
    if trials is None:
        trials = load_trials(run_cfg)
    if len(trials) < 3:
        raise IngestionError(f"need at least 3 trials, got {len(trials)}")
    train_states = ingest_double_pendulum(trials[:2], keep=TRAIN_KEEP,
                                          negate=run_cfg.negate_velocity)
    test_states = ingest_double_pendulum([trials[2]], keep=TEST_KEEP,
                                         negate=run_cfg.negate_velocity)[0]

    def segment_source(rng, length):
        trial = train_states[int(rng.integers(len(train_states)))]
        start = int(rng.integers(trial.shape[0] - length + 1))
        return trial[start : start + length]

    observers = perturbed_identity_observers(run_cfg)
    records = run_scheme(run_cfg, observers=observers, trajectory_source=segment_source,
                         test_states=test_states)
    return records, run_cfg
