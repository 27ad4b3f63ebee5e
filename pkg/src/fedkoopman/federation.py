"""Client population and server-side orchestration of federated rounds.

Each round: every client independently succeeds or fails to observe the
shared trajectory for that time slot; successful clients filter and smooth
their observations into state-estimate blocks; a selection policy picks the
active set; active clients train the current global model on their buffered
blocks; the server averages the returned models weighted by the amount of
data each one trained on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import koopman
from .dynamics import IntegrationError, simulate_trajectory
from .estimation import CorrectionError, CovarianceError, UtParams, ekf_filter, ukf_filter, urts_smooth

logger = logging.getLogger(__name__)


class AggregationError(RuntimeError):
    """Model aggregation received incompatible inputs."""


@dataclass
class ClientNode:
    """One client: observation capability, noise model, data buffer, optimizer."""

    cid: int
    success_prob: float
    observer: object
    sigma_f: np.ndarray
    sigma_h: np.ndarray
    arrival_rng: np.random.Generator
    noise_rng: np.random.Generator
    train_rng: np.random.Generator
    buffer: list = field(default_factory=list)
    opt_state: koopman.AdamState | None = None
    lr: float = 1e-3

    @property
    def buffer_size(self):
        """Number of buffered estimated states (not blocks)."""
        return sum(block.shape[0] for block in self.buffer)


@dataclass(frozen=True)
class Policy:
    """Client-selection policy: ``random``, ``roundrobin``, or ``threshold``.

    ``rho`` is the threshold policy's block-count multiplier: a client becomes
    active once it holds at least rho * zeta estimated states.
    """

    kind: str
    rho: int = 5

    def __post_init__(self):
        if self.kind not in ("random", "roundrobin", "threshold"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "threshold" and self.rho < 1:
            raise ValueError("threshold multiplier must be >= 1")


@dataclass
class ServerState:
    """Global model plus the round counter and the server's own RNG stream."""

    params: koopman.DknParameters
    round_index: int = 0
    rng: np.random.Generator = None


@dataclass
class RoundRecord:
    """Per-round log entry; metric fields are filled by the experiment driver."""

    round_index: int
    active: tuple
    aggregate_size: int
    client_sizes: tuple
    test_loss: float = math.nan
    test_loss_lin: float = math.nan
    test_loss_rec: float = math.nan
    test_loss_pred: float = math.nan
    pred_error: float = math.nan
    wall_time: float = math.nan


def observation_phase(client, system, zeta, *, ut=None, init_mean=None, init_cov=None,
                      estimator="ukf", trajectory=None, perfect=False):
    """One time slot of data acquisition for one client.

    With probability ``success_prob`` the client observes ``zeta`` consecutive
    states (of ``trajectory`` if given, else of a freshly simulated one), runs
    the chosen filter plus the smoother, and appends the smoothed means to its
    buffer.  With ``perfect`` set the true states are buffered directly.
    Returns True when a block was added; filter failures discard the block.
    """
    if client.arrival_rng.random() >= client.success_prob:
        return False
    return _acquire_block(client, system, zeta, ut=ut, init_mean=init_mean,
                          init_cov=init_cov, estimator=estimator,
                          trajectory=trajectory, perfect=perfect)


def _acquire_block(client, system, zeta, *, ut, init_mean, init_cov, estimator,
                   trajectory, perfect):
    if trajectory is None:
        x0 = system.sample_initial_state(client.noise_rng)
        trajectory = simulate_trajectory(system, x0, zeta)
    if perfect:
        client.buffer.append(np.array(trajectory[:zeta]))
        return True
    ut = ut if ut is not None else UtParams()
    x0_hat = init_mean if init_mean is not None else np.zeros(system.dim)
    p0_hat = init_cov if init_cov is not None else np.eye(system.dim)
    observations = client.observer.observe_trajectory(trajectory[:zeta], client.noise_rng)
    try:
        if estimator == "ekf":
            filtered = ekf_filter(observations, system.step, client.observer.apply,
                                  client.sigma_f, client.sigma_h, x0_hat, p0_hat)
        else:
            filtered = ukf_filter(observations, system.step, client.observer.apply,
                                  client.sigma_f, client.sigma_h, x0_hat, p0_hat, ut,
                                  resample=(estimator == "ukf_resample"))
        smoothed = urts_smooth(filtered, system.step, client.sigma_f, ut)
    except (CovarianceError, CorrectionError, IntegrationError) as exc:
        logger.warning("client %d discarded a block: %s", client.cid, exc)
        return False
    block = np.stack([b.mean for b in smoothed])
    if not np.all(np.isfinite(block)):
        logger.warning("client %d discarded a block: non-finite estimates", client.cid)
        return False
    client.buffer.append(block)
    return True


def select_clients(policy, clients, round_index, zeta, rng=None):
    """Active-client ids for this round under the given policy."""
    if policy.kind == "random":
        return [clients[int(rng.integers(len(clients)))].cid]
    if policy.kind == "roundrobin":
        return [clients[round_index % len(clients)].cid]
    return [c.cid for c in clients if c.buffer_size >= zeta * policy.rho]


def aggregate(models):
    """Size-weighted coordinate-wise average of (parameters, size) pairs."""
    if not models:
        raise AggregationError("nothing to aggregate")
    if any(size <= 0 for _, size in models):
        raise AggregationError("aggregation sizes must be positive")
    shapes = [[a.shape for a in p.arrays()] for p, _ in models]
    if any(s != shapes[0] for s in shapes[1:]):
        raise AggregationError("parameter shapes do not match")
    total = float(sum(size for _, size in models))
    first, w0 = models[0]
    out = [(w0 / total) * a for a in first.arrays()]
    for params, size in models[1:]:
        w = size / total
        for acc, a in zip(out, params.arrays()):
            acc += w * a
    return first.replace_arrays(out)


def fedavg_m_round(server, clients, policy, system, *, zeta, epochs, batch_size,
                   weights=(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), window=1, horizon=1,
                   ut=None, init_mean=None, init_cov=None, estimator="ukf",
                   perfect=False, gamma=0.995, decay=1e-7, reset_moments=True,
                   system_rng=None, trajectory_source=None, central_trainer=None):
    """One synchronous federated round; returns the bookkeeping record.

    With ``system_rng`` given, the slot's ground-truth trajectory is shared:
    drawn once (from ``trajectory_source`` if provided, else simulated) and
    observed by every client whose arrival draw succeeded.  Without it each
    client simulates its own trajectory.  Aggregation weights are the buffer
    sizes snapshotted at selection time, since training empties the buffers.
    ``central_trainer`` switches the round to pooled server-side training of
    the active clients' data instead of local updates plus aggregation.
    """
    server.round_index += 1
    m = server.round_index

    if system_rng is not None:
        arrivals = [c.arrival_rng.random() < c.success_prob for c in clients]
        trajectory = None
        if any(arrivals):
            if trajectory_source is not None:
                trajectory = trajectory_source(system_rng, zeta)
            else:
                x0 = system.sample_initial_state(system_rng)
                trajectory = simulate_trajectory(system, x0, zeta)
        for client, arrived in zip(clients, arrivals):
            if arrived:
                _acquire_block(client, system, zeta, ut=ut, init_mean=init_mean,
                               init_cov=init_cov, estimator=estimator,
                               trajectory=trajectory, perfect=perfect)
    else:
        for client in clients:
            observation_phase(client, system, zeta, ut=ut, init_mean=init_mean,
                              init_cov=init_cov, estimator=estimator, perfect=perfect)

    active = select_clients(policy, clients, m, zeta, rng=server.rng)
    sizes = tuple(c.buffer_size for c in clients)
    by_id = {c.cid: c for c in clients}
    participants = []
    for cid in active:
        client = by_id[cid]
        if client.buffer_size == 0:
            continue
        data_size = client.buffer_size
        xs, xts = zip(*(koopman.build_windows(b, window, horizon) for b in client.buffer))
        client.buffer = []
        participants.append((client, np.concatenate(xs, axis=1), np.concatenate(xts, axis=1),
                             data_size))

    if central_trainer is not None:
        total = sum(size for _, _, _, size in participants)
        if participants:
            x = np.concatenate([p[1] for p in participants], axis=1)
            xt = np.concatenate([p[2] for p in participants], axis=1)
            try:
                server.params = central_trainer.train(server.params, x, xt)
            except koopman.TrainingDiverged as exc:
                logger.warning("centralized training skipped in round %d: %s", m, exc)
                total = 0
        return RoundRecord(round_index=m, active=tuple(active), aggregate_size=total,
                           client_sizes=sizes)

    trained = []
    for client, x, xt, data_size in participants:
        if reset_moments or client.opt_state is None:
            client.opt_state = koopman.init_adam(server.params, lr=client.lr,
                                                 gamma=gamma, decay=decay)
        try:
            updated = koopman.client_update(server.params, x, xt, client.opt_state,
                                            epochs, batch_size, client.train_rng,
                                            weights=weights, horizon=horizon)
        except koopman.TrainingDiverged as exc:
            logger.warning("client %d dropped from round %d: %s", client.cid, m, exc)
            client.lr = client.opt_state.lr
            continue
        client.lr = client.opt_state.lr
        trained.append((updated, data_size))

    if trained:
        server.params = aggregate(trained)
    total = sum(size for _, size in trained)
    return RoundRecord(round_index=m, active=tuple(active), aggregate_size=total,
                       client_sizes=sizes)


def convergence_coefficient(n_clients, k, p):
    """Per-cardinality coefficient in the convergence bound for probabilistic
    participation: 4(N-k) N! p^k (1-p)^(N-k) / (k (N-1) k! (N-k)!).

    Uses log-factorials so N up to ~10^3 stays in range.
    """
    n = int(n_clients)
    k = int(k)
    if n < 2:
        raise ValueError("need at least two clients (N-1 appears in the denominator)")
    if not 1 <= k <= n:
        raise ValueError("k must be in [1, N]")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be a probability")
    if k == n:
        return 0.0
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 0.0
    log_binom = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    log_term = (
        math.log(4.0 * (n - k)) - math.log(k * (n - 1))
        + log_binom + k * math.log(p) + (n - k) * math.log1p(-p)
    )
    return math.exp(log_term)
