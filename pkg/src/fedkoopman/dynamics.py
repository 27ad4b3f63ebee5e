"""Benchmark nonlinear systems, fixed-step integration, and noisy partial observation.

States are 1-d float arrays; trajectories are (n, d) arrays of states sampled
every ``dt`` time units.  Drift functions accept a single state of shape (d,)
or a batch of states stacked as columns (d, m), which lets the filters push
whole sigma-point sets through the dynamics in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class IntegrationError(RuntimeError):
    """The integrator produced a non-finite state."""


class SingularConfigurationError(RuntimeError):
    """A drift evaluation hit a (numerically) singular configuration."""


def rk4_step(x, drift, dt):
    """Advance state ``x`` by one classical 4th-order Runge-Kutta step of size ``dt``."""
    x = np.asarray(x, dtype=float)
    out = _rk4_unchecked(x, drift, dt)
    if not np.isfinite(np.sum(out)):
        raise IntegrationError("non-finite state after RK4 step (diverging trajectory?)")
    return out


def _rk4_unchecked(x, drift, dt):
    k1 = drift(x)
    k2 = drift(x + (0.5 * dt) * k1)
    k3 = drift(x + (0.5 * dt) * k2)
    k4 = drift(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz63_drift(x, a=10.0, b=28.0, c=8.0 / 3.0):
    """Lorenz63 vector field (a(x2-x1), x1(b-x3)-x2, x1 x2 - c x3)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[0] = a * (x[1] - x[0])
    out[1] = x[0] * (b - x[2]) - x[1]
    out[2] = x[0] * x[1] - c * x[2]
    return out


def vanderpol_drift(x, a=2.0):
    """Van der Pol oscillator: x1' = x2, x2' = a(1 - x1^2) x2 - x1."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[0] = x[1]
    out[1] = a * (1.0 - x[0] ** 2) * x[1] - x[0]
    return out


def pendulum_drift(x, length=1.0, g=9.8):
    """Single pendulum with state (theta, omega): theta' = omega, omega' = -(g/L) sin theta."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[0] = x[1]
    out[1] = -(g / length) * np.sin(x[0])
    return out


def double_pendulum_drift(x, l1=0.172, l2=0.143, m1=0.311, m2=0.111, g=9.8):
    """Planar double pendulum with state (theta1, omega1, theta2, omega2).

    Raises SingularConfigurationError if the shared denominator
    L1(m1+m2) - L1 m2 cos^2(theta2-theta1) falls below 1e-12 (impossible for
    m1 > 0, so this only fires on degenerate parameter choices).
    """
    x = np.asarray(x, dtype=float)
    th1, w1, th2, w2 = x[0], x[1], x[2], x[3]
    s = np.sin(th2 - th1)
    c = np.cos(th2 - th1)
    den1 = l1 * (m1 + m2) - l1 * m2 * c * c
    if np.any(den1 < 1e-12):
        raise SingularConfigurationError("double pendulum denominator underflow")
    den2 = den1 * (l2 / l1)
    out = np.empty_like(x)
    out[0] = w1
    out[1] = (
        l1 * m2 * w1**2 * s * c
        + g * m2 * np.sin(th2) * c
        + l2 * m2 * w2**2 * s
        - g * (m1 + m2) * np.sin(th1)
    ) / den1
    out[2] = w2
    out[3] = (
        -l2 * m2 * w2**2 * s * c
        + (m1 + m2) * (g * np.sin(th1) * c - l1 * w1**2 * s - g * np.sin(th2))
    ) / den2
    return out


@dataclass
class SystemModel:
    """A continuous-time system sampled at a fixed interval.

    ``drift`` maps states to time derivatives; one sample step integrates the
    drift over ``dt`` using ``substeps`` RK4 sub-steps.  ``init_low``/``init_high``
    bound the uniform distribution that fresh initial states are drawn from.
    """

    name: str
    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    dt: float = 0.01
    substeps: int = 10
    params: dict = field(default_factory=dict)
    init_low: np.ndarray | None = None
    init_high: np.ndarray | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("sampling interval must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    def step(self, x):
        """The discrete map f: advance one sampling interval (``substeps`` RK4 sub-steps)."""
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            x = _rk4_unchecked(x, self.drift, h)
        if not np.isfinite(np.sum(x)):
            raise IntegrationError("non-finite state after RK4 step (diverging trajectory?)")
        return x

    def sample_initial_state(self, rng):
        """Draw an initial state uniformly from the system's initial-state box."""
        if self.init_low is None or self.init_high is None:
            raise ValueError(f"system {self.name!r} has no initial-state range")
        return rng.uniform(self.init_low, self.init_high)


def lorenz63(a=10.0, b=28.0, c=8.0 / 3.0, dt=0.01, substeps=10):
    return SystemModel(
        name="lorenz63",
        dim=3,
        drift=lambda x: lorenz63_drift(x, a, b, c),
        dt=dt,
        substeps=substeps,
        params={"a": a, "b": b, "c": c},
        init_low=np.full(3, -10.0),
        init_high=np.full(3, 10.0),
    )


def vanderpol(a=2.0, dt=0.01, substeps=10):
    return SystemModel(
        name="vanderpol",
        dim=2,
        drift=lambda x: vanderpol_drift(x, a),
        dt=dt,
        substeps=substeps,
        params={"a": a},
        init_low=np.full(2, -2.0),
        init_high=np.full(2, 2.0),
    )


def pendulum(length=1.0, g=9.8, dt=0.01, substeps=10):
    return SystemModel(
        name="pendulum",
        dim=2,
        drift=lambda x: pendulum_drift(x, length, g),
        dt=dt,
        substeps=substeps,
        params={"L": length, "g": g},
        init_low=np.array([0.0, 0.0]),
        init_high=np.array([2.0 * np.pi, 0.0]),
    )


def double_pendulum(l1=0.172, l2=0.143, m1=0.311, m2=0.111, g=9.8, dt=0.01, substeps=10):
    # No published initial-state range for this system; a release from rest
    # with arbitrary angles keeps synthetic runs physically sensible.
    return SystemModel(
        name="double_pendulum",
        dim=4,
        drift=lambda x: double_pendulum_drift(x, l1, l2, m1, m2, g),
        dt=dt,
        substeps=substeps,
        params={"L1": l1, "L2": l2, "m1": m1, "m2": m2, "g": g},
        init_low=np.array([-np.pi, 0.0, -np.pi, 0.0]),
        init_high=np.array([np.pi, 0.0, np.pi, 0.0]),
    )


SYSTEMS = {
    "lorenz63": lorenz63,
    "vanderpol": vanderpol,
    "pendulum": pendulum,
    "double_pendulum": double_pendulum,
}


def make_system(name, dt=0.01, substeps=10):
    """Build one of the named benchmark systems with default parameters."""
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory(dt=dt, substeps=substeps)


def simulate_trajectory(system, x0, length):
    """Integrate ``length`` states starting from ``x0``; row k is the state at time k*dt.

    Ground truth is a deterministic ODE solution: no process noise is injected.
    """
    if length < 1:
        raise ValueError("trajectory length must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.dim,):
        raise ValueError(f"initial state has shape {x0.shape}, expected ({system.dim},)")
    out = np.empty((length, system.dim))
    out[0] = x0
    for k in range(1, length):
        out[k] = system.step(out[k - 1])
    return out


class ObservationModel:
    """A client's noisy partial view of the state.

    Two kinds:

    * ``projection``: z = B (x - o) + v with B the two stacked basis rows and
      o the offset; the three vectors are pairwise orthogonal by construction.
    * ``affine-identity``: z = (I + Xi) x + v.

    ``v ~ N(0, noise_cov)`` in both cases.
    """

    def __init__(self, kind, noise_cov, offset=None, basis=None, perturbation=None):
        noise_cov = np.asarray(noise_cov, dtype=float)
        if not np.allclose(noise_cov, noise_cov.T, atol=1e-12):
            raise ValueError("observation noise covariance must be symmetric")
        # positive definiteness check; the factor is reused for sampling
        try:
            self._noise_chol = np.linalg.cholesky(noise_cov)
        except np.linalg.LinAlgError:
            raise ValueError("observation noise covariance must be positive definite") from None
        self.kind = kind
        self.noise_cov = noise_cov
        if kind == "projection":
            self.offset = np.asarray(offset, dtype=float)
            self.basis = np.asarray(basis, dtype=float)
            rows = np.vstack([self.basis, self.offset[None, :]])
            gram = rows @ rows.T
            off_diag = gram - np.diag(np.diag(gram))
            if np.max(np.abs(off_diag)) >= 1e-10:
                raise ValueError("projection rows and offset must be pairwise orthogonal")
            self.perturbation = None
            self.d_z = self.basis.shape[0]
        elif kind == "affine-identity":
            self.perturbation = np.asarray(perturbation, dtype=float)
            self.offset = None
            self.basis = None
            self.d_z = self.perturbation.shape[0]
            self._matrix = np.eye(self.d_z) + self.perturbation
        else:
            raise ValueError(f"unknown observation kind {kind!r}")
        if noise_cov.shape != (self.d_z, self.d_z):
            raise ValueError("noise covariance shape does not match output dimension")

    def apply(self, x):
        """Noiseless observation map h(x); accepts (d,) or (d, m) column batches."""
        if self.kind == "projection":
            if x.ndim == 1:
                return self.basis @ (x - self.offset)
            return self.basis @ (x - self.offset[:, None])
        return self._matrix @ x

    def observe(self, x, rng):
        """One noisy observation of state ``x``."""
        return self.apply(np.asarray(x, dtype=float)) + self._noise_chol @ rng.standard_normal(self.d_z)

    def observe_trajectory(self, trajectory, rng):
        """Noisy observations of every state in an (n, d) trajectory; returns (n, d_z)."""
        clean = self.apply(np.asarray(trajectory, dtype=float).T).T
        noise = rng.standard_normal((trajectory.shape[0], self.d_z)) @ self._noise_chol.T
        return clean + noise


def make_projection_observer(dim, rng, noise_cov=None):
    """Random projection observer: two orthogonal basis rows plus an orthogonal offset.

    Rows come from orthonormalizing a random Gaussian matrix and rescaling each
    row to a random length in [0.5, 2]; unit rows would make every client's view
    identical up to rotation.
    """
    if dim != 3:
        raise ValueError("projection observers are defined for 3-dimensional systems")
    if noise_cov is None:
        noise_cov = np.eye(2)
    while True:
        raw = rng.standard_normal((dim, dim))
        q, r = np.linalg.qr(raw)
        if np.min(np.abs(np.diag(r))) > 1e-10:
            break
    rows = q.T * rng.uniform(0.5, 2.0, size=dim)[:, None]
    return ObservationModel(
        "projection", noise_cov=noise_cov, offset=rows[2], basis=rows[:2]
    )
