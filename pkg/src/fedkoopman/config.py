"""Experiment configuration: a flat ``key = value`` text format.

Missing keys take the default simulation parameters (five clients at success
probability 0.7, 300-sample blocks, 200 rounds, identity noise covariances,
the standard unscented-transform and optimizer settings, equal loss weights).
Unknown keys, duplicates, and invalid values are rejected with the offending
line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .dynamics import SYSTEMS
from .estimation import UtParams
from .koopman import DknConfig

THIRD = 1.0 / 3.0

SCHEMES = ("fedkl", "single", "perfect", "central")
POLICIES = ("random", "roundrobin", "threshold")
ESTIMATORS = ("ukf", "ukf_resample", "ekf")


class ConfigError(ValueError):
    """Malformed configuration file or invalid parameter value."""


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "lorenz63"
    scheme: str = "fedkl"
    policy: str = "threshold"
    estimator: str = "ukf"
    seed: int = 0
    out: str = "runs"
    n_clients: int = 5
    success_prob: float = 0.7
    block_len: int = 300
    rounds: int = 200
    sigma_f: object = 1.0
    sigma_h: object = 1.0
    init_mean: float = 0.0
    init_cov: float = 1.0
    alpha: float = 0.1
    kappa: float = -1.0
    beta: float = 2.0
    window: int = 1
    horizon: int = 1
    latent_dim: int | None = None
    hidden_layers: int = 1
    hidden_width: int = 30
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.001
    weight_decay: float = 1e-7
    lr_decay: float = 0.995
    threshold: int = 5
    w1: float = THIRD
    w2: float = THIRD
    w3: float = THIRD
    nu: float = 0.01
    substeps: int = 10
    reset_moments: bool = True
    reset_lr: bool = False
    depth_state: int = 5
    depth_latent: int = 5
    negate_velocity: bool = False
    noise_scale: float = 1.0
    data: str = ""
    smoke: bool = False

    @property
    def weights(self):
        return (self.w1, self.w2, self.w3)

    def ut(self):
        return UtParams(alpha=self.alpha, kappa=self.kappa, beta=self.beta)

    def dkn(self, state_dim):
        return DknConfig(
            state_dim=state_dim,
            window=self.window,
            horizon=self.horizon,
            latent_dim=self.latent_dim,
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width,
            weights=self.weights,
        )

    def noise_matrix(self, value, dim, key):
        import numpy as np

        if isinstance(value, tuple):
            if len(value) != dim:
                raise ConfigError(f"{key} diagonal has {len(value)} entries, expected {dim}")
            return np.diag(np.asarray(value, dtype=float))
        return float(value) * np.eye(dim)

    def sigma_f_matrix(self, dim):
        return self.noise_matrix(self.sigma_f, dim, "sigma_f")

    def sigma_h_matrix(self, dim):
        return self.noise_matrix(self.sigma_h, dim, "sigma_h")


def _parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_scalar_or_diag(text):
    if "," in text:
        return tuple(float(part) for part in text.split(","))
    return float(text)


def _parse_latent(text):
    if text.lower() in ("auto", "none"):
        return None
    return int(text)


_PARSERS = {
    "system": str,
    "scheme": str,
    "policy": str,
    "estimator": str,
    "seed": int,
    "out": str,
    "n_clients": int,
    "success_prob": float,
    "block_len": int,
    "rounds": int,
    "sigma_f": _parse_scalar_or_diag,
    "sigma_h": _parse_scalar_or_diag,
    "init_mean": float,
    "init_cov": float,
    "alpha": float,
    "kappa": float,
    "beta": float,
    "window": int,
    "horizon": int,
    "latent_dim": _parse_latent,
    "hidden_layers": int,
    "hidden_width": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "lr_decay": float,
    "threshold": int,
    "w1": float,
    "w2": float,
    "w3": float,
    "nu": float,
    "substeps": int,
    "reset_moments": _parse_bool,
    "reset_lr": _parse_bool,
    "depth_state": int,
    "depth_latent": int,
    "negate_velocity": _parse_bool,
    "noise_scale": float,
    "data": str,
    "smoke": _parse_bool,
}

SMOKE_ROUNDS = 60


def validate_config(cfg):
    """Raise ConfigError on any out-of-range parameter."""
    checks = [
        (cfg.system in SYSTEMS, f"unknown system {cfg.system!r}"),
        (cfg.scheme in SCHEMES, f"unknown scheme {cfg.scheme!r}"),
        (cfg.policy in POLICIES, f"unknown policy {cfg.policy!r}"),
        (cfg.estimator in ESTIMATORS, f"unknown estimator {cfg.estimator!r}"),
        (cfg.n_clients >= 1, "n_clients must be >= 1"),
        (0.0 <= cfg.success_prob <= 1.0, "success_prob must be in [0, 1]"),
        (cfg.block_len >= 2, "block_len must be >= 2"),
        (cfg.rounds >= 1, "rounds must be >= 1"),
        (cfg.init_cov > 0, "init_cov must be positive"),
        (cfg.window >= 1, "window must be >= 1"),
        (cfg.horizon >= 1, "horizon must be >= 1"),
        (cfg.latent_dim is None or cfg.latent_dim >= 1, "latent_dim must be >= 1 or auto"),
        (cfg.hidden_layers >= 0, "hidden_layers must be >= 0"),
        (cfg.hidden_width >= 1, "hidden_width must be >= 1"),
        (cfg.epochs >= 0, "epochs must be >= 0"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.learning_rate > 0, "learning_rate must be positive"),
        (cfg.weight_decay >= 0, "weight_decay must be >= 0"),
        (0 < cfg.lr_decay <= 1, "lr_decay must be in (0, 1]"),
        (cfg.threshold >= 1, "threshold must be >= 1"),
        (cfg.w1 >= 0 and cfg.w2 >= 0 and cfg.w3 >= 0, "loss weights must be >= 0"),
        (cfg.nu > 0, "nu must be positive"),
        (cfg.substeps >= 1, "substeps must be >= 1"),
        (cfg.depth_state >= 1, "depth_state must be >= 1"),
        (cfg.depth_latent >= 1, "depth_latent must be >= 1"),
        (cfg.noise_scale > 0, "noise_scale must be positive"),
        (cfg.seed >= 0, "seed must be non-negative"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    scalars = [v for v in (cfg.sigma_f, cfg.sigma_h) if not isinstance(v, tuple)]
    if any(float(v) <= 0 for v in scalars):
        raise ConfigError("noise covariance scales must be positive")
    for key in ("sigma_f", "sigma_h"):
        value = getattr(cfg, key)
        if isinstance(value, tuple) and any(v <= 0 for v in value):
            raise ConfigError(f"{key} diagonal entries must be positive")
    return cfg


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    raw = {}
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {lines[key]})")
        try:
            raw[key] = _PARSERS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: invalid value for {key!r}: {exc}") from None
        lines[key] = lineno
    if raw.get("smoke") and "rounds" not in raw:
        raw["rounds"] = SMOKE_ROUNDS
    return validate_config(ExperimentConfig(**raw))


def parse_config(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration file {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def serialize_config(cfg):
    """Full ``key = value`` dump that parses back to an equal configuration."""
    parts = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif value is None:
            text = "auto"
        elif isinstance(value, tuple):
            text = ",".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        parts.append(f"{f.name} = {text}")
    return "\n".join(parts) + "\n"


def with_overrides(cfg, **kwargs):
    """Replace fields and re-validate."""
    return validate_config(replace(cfg, **kwargs))
