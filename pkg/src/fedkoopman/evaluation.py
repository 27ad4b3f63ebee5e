"""Performance measures and the comparison protocols.

Prediction quality of a trained network is scored on a held-out true
trajectory: state-space error at depth l compares x_{k+l} against the decoded
l-step latent advance of x_k, latent-space error compares encoded targets
against advanced latents, and the headline number averages both families over
depths 1..5.  The experiment drivers reproduce the benchmark schemes
(single-client, perfect-data, centralized), the estimator comparison table,
and the loss-weight ablation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import koopman, seeding
from .config import with_overrides
from .dynamics import (
    IntegrationError,
    ObservationModel,
    make_projection_observer,
    make_system,
    simulate_trajectory,
)
from .estimation import CorrectionError, CovarianceError, ekf_filter, ukf_filter
from .federation import ClientNode, Policy, RoundRecord, ServerState, fedavg_m_round

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    """Per-round evaluation on the held-out test trajectory."""

    state_errors: tuple
    latent_errors: tuple
    composite: float
    loss: koopman.LossBreakdown


def prediction_error_state(params, states, depth):
    """Mean squared per-dimension error of depth-``depth`` decoded predictions.

    ``states`` is an (n, d) sequence; the average runs over every start index
    with a target inside the sequence.
    """
    states = np.asarray(states, dtype=float)
    n, d = states.shape
    if not 1 <= depth < n:
        raise ValueError(f"depth {depth} out of range for {n} states")
    latent = koopman.encode(params, states.T)
    pred = koopman.decode(params, koopman.advance(params, latent, depth))
    err = states[depth:].T - pred[:, : n - depth]
    return float(np.mean(np.sum(err * err, axis=0)) / d)


def prediction_error_latent(params, states, depth):
    """Like :func:`prediction_error_state` but scored in the latent space."""
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    if not 1 <= depth < n:
        raise ValueError(f"depth {depth} out of range for {n} states")
    latent = koopman.encode(params, states.T)
    advanced = koopman.advance(params, latent, depth)
    err = latent[:, depth:] - advanced[:, : n - depth]
    return float(np.mean(np.sum(err * err, axis=0)) / latent.shape[0])


def composite_metric(params, states, depth_state=5, depth_latent=5):
    """Average of the two error families over depths 1..l, half weight each."""
    e1 = sum(prediction_error_state(params, states, l) for l in range(1, depth_state + 1))
    e2 = sum(prediction_error_latent(params, states, l) for l in range(1, depth_latent + 1))
    return e1 / (2.0 * depth_state) + e2 / (2.0 * depth_latent)


def _window_rows(states, window):
    states = np.asarray(states, dtype=float)
    if window == 1:
        return states
    n = states.shape[0]
    idx = np.arange(window) + np.arange(n - window + 1)[:, None]
    return states[idx].reshape(n - window + 1, -1)


def evaluate_model(params, test_states, *, weights, window=1, horizon=1,
                   depth_state=5, depth_latent=5):
    """Test losses and prediction errors of a model on true trajectory states."""
    x, xt = koopman.build_windows(test_states, window, horizon)
    loss = koopman.dkn_loss(params, x, xt, weights, horizon)
    seq = _window_rows(test_states, window)
    e1 = tuple(prediction_error_state(params, seq, l) for l in range(1, depth_state + 1))
    e2 = tuple(prediction_error_latent(params, seq, l) for l in range(1, depth_latent + 1))
    composite = sum(e1) / (2.0 * depth_state) + sum(e2) / (2.0 * depth_latent)
    return MetricReport(state_errors=e1, latent_errors=e2, composite=composite, loss=loss)


def default_observer(system, noise_cov, rng):
    """Per-client observation map: a random orthogonal projection for
    3-dimensional systems, the identity otherwise."""
    if system.dim == 3:
        return make_projection_observer(system.dim, rng, noise_cov=noise_cov)
    return ObservationModel("affine-identity", noise_cov=noise_cov,
                            perturbation=np.zeros((system.dim, system.dim)))


def build_clients(cfg, system, observers=None):
    """Construct the client population with per-client RNG streams."""
    clients = []
    sigma_f = cfg.sigma_f_matrix(system.dim)
    for cid in range(cfg.n_clients):
        noise_rng = seeding.stream(cfg.seed, seeding.CLIENT_NOISE, cid)
        if observers is not None:
            observer = observers[cid]
        else:
            d_z = 2 if system.dim == 3 else system.dim
            observer = default_observer(system, cfg.sigma_h_matrix(d_z), noise_rng)
        clients.append(ClientNode(
            cid=cid,
            success_prob=cfg.success_prob,
            observer=observer,
            sigma_f=sigma_f,
            sigma_h=cfg.sigma_h_matrix(observer.d_z),
            arrival_rng=seeding.stream(cfg.seed, seeding.CLIENT_ARRIVAL, cid),
            noise_rng=noise_rng,
            train_rng=seeding.stream(cfg.seed, seeding.CLIENT_TRAIN, cid),
            lr=cfg.learning_rate,
        ))
    return clients


def run_scheme(cfg, scheme=None, observers=None, trajectory_source=None, test_states=None):
    """Run one full experiment and return the per-round records.

    ``scheme`` overrides the configured one.  ``trajectory_source``, a callable
    (rng, length) -> (length, d) array, replaces the simulated slot
    trajectories when the data comes from recordings; ``test_states`` likewise
    replaces the simulated held-out test trajectory.
    """
    scheme = scheme if scheme is not None else cfg.scheme
    if scheme == "single":
        cfg = with_overrides(cfg, n_clients=1)
    system = make_system(cfg.system, dt=cfg.nu, substeps=cfg.substeps)
    clients = build_clients(cfg, system, observers=observers)
    server = ServerState(
        params=koopman.init_dkn(cfg.dkn(system.dim), seeding.stream(cfg.seed, seeding.INIT)),
        rng=seeding.stream(cfg.seed, seeding.SERVER),
    )
    system_rng = seeding.stream(cfg.seed, seeding.SYSTEM)
    if test_states is None:
        eval_rng = seeding.stream(cfg.seed, seeding.EVAL)
        test_states = simulate_trajectory(system, system.sample_initial_state(eval_rng),
                                          cfg.block_len + 1)
    policy = Policy(cfg.policy, rho=cfg.threshold)
    ut = cfg.ut()
    init_mean = np.full(system.dim, cfg.init_mean)
    init_cov = cfg.init_cov * np.eye(system.dim)
    perfect = scheme == "perfect"

    central = _CentralTrainer(cfg) if scheme == "central" else None
    records = []
    for _ in range(cfg.rounds):
        start = time.perf_counter()
        record = fedavg_m_round(
            server, clients, policy, system,
            zeta=cfg.block_len, epochs=cfg.epochs, batch_size=cfg.batch_size,
            weights=cfg.weights, window=cfg.window, horizon=cfg.horizon,
            ut=ut, init_mean=init_mean, init_cov=init_cov,
            estimator=cfg.estimator, perfect=perfect,
            gamma=cfg.lr_decay, decay=cfg.weight_decay,
            reset_moments=cfg.reset_moments,
            system_rng=system_rng, trajectory_source=trajectory_source,
            central_trainer=central,
        )
        if cfg.reset_lr:
            for client in clients:
                client.lr = cfg.learning_rate
        report = evaluate_model(server.params, test_states, weights=cfg.weights,
                                window=cfg.window, horizon=cfg.horizon,
                                depth_state=cfg.depth_state, depth_latent=cfg.depth_latent)
        record.test_loss = report.loss.total
        record.test_loss_lin = report.loss.lin
        record.test_loss_rec = report.loss.rec
        record.test_loss_pred = report.loss.pred
        record.pred_error = report.composite
        record.wall_time = time.perf_counter() - start
        records.append(record)
    return records


class _CentralTrainer:
    """Server-side pooled training used by the centralized benchmark scheme."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.opt_state = None
        self.lr = cfg.learning_rate
        self.rng = seeding.stream(cfg.seed, seeding.SERVER_TRAIN)

    def train(self, params, x, xt):
        cfg = self.cfg
        if cfg.reset_moments or self.opt_state is None:
            self.opt_state = koopman.init_adam(params, lr=self.lr, gamma=cfg.lr_decay,
                                               decay=cfg.weight_decay)
        updated = koopman.client_update(params, x, xt, self.opt_state, cfg.epochs,
                                        cfg.batch_size, self.rng,
                                        weights=cfg.weights, horizon=cfg.horizon)
        self.lr = self.opt_state.lr
        return updated


def final_mean(records, count=50, field="test_loss"):
    """Mean of a record field over the final ``count`` rounds."""
    tail = records[-count:]
    return float(np.mean([getattr(r, field) for r in tail]))


def estimator_benchmark(methods=("ukf", "ukf_resample", "ekf"), noise_scale=1.0,
                        n_trajectories=10, block_len=300, final_steps=None,
                        seed=0, ut=None, max_attempts=10):
    """Mean absolute state-estimation error of each method on shared data.

    Each of ``n_trajectories`` Lorenz63 blocks is observed once through a
    fresh random projection; every method filters the same observations from
    the same cold start (zero mean, identity covariance), mirroring how the
    pipeline filters each arriving block.  The per-sample error is the
    dimension-averaged l1 distance between the true and the estimated state;
    by default the whole block is averaged, including the filter's lock-on
    transient (pass ``final_steps`` to average only the last n samples).  The
    spread is the across-trajectory standard deviation averaged over samples.
    A trajectory on which any method fails is redrawn for all methods.
    """
    from .estimation import UtParams

    ut = ut if ut is not None else UtParams()
    system = make_system("lorenz63")
    rng = seeding.stream(seed, seeding.BENCH)
    sigma_f = noise_scale * np.eye(3)
    sigma_h = noise_scale * np.eye(2)
    x0_hat = np.zeros(3)
    p0_hat = np.eye(3)
    keep = block_len if final_steps is None else final_steps
    errors = {m: np.empty((n_trajectories, keep)) for m in methods}
    for i in range(n_trajectories):
        for attempt in range(max_attempts):
            x0 = system.sample_initial_state(rng)
            observer = make_projection_observer(3, rng, noise_cov=sigma_h)
            trajectory = simulate_trajectory(system, x0, block_len)
            observations = observer.observe_trajectory(trajectory, rng)
            try:
                for method in methods:
                    if method == "ekf":
                        beliefs = ekf_filter(observations, system.step, observer.apply,
                                             sigma_f, sigma_h, x0_hat, p0_hat)
                    else:
                        beliefs = ukf_filter(observations, system.step, observer.apply,
                                             sigma_f, sigma_h, x0_hat, p0_hat, ut,
                                             resample=(method == "ukf_resample"))
                    means = np.stack([b.mean for b in beliefs])
                    if not np.all(np.isfinite(means)):
                        raise CovarianceError("non-finite estimates")
                    err = np.mean(np.abs(trajectory - means), axis=1)
                    errors[method][i] = err[-keep:]
                break
            except (CovarianceError, CorrectionError, IntegrationError) as exc:
                logger.warning("trajectory %d attempt %d failed, redrawing: %s", i, attempt, exc)
        else:
            raise RuntimeError(f"estimator benchmark failed on trajectory {i}")
    rows = []
    for method in methods:
        per_step_std = np.std(errors[method], axis=0, ddof=1)
        rows.append({
            "method": method,
            "mean_error": float(np.mean(errors[method])),
            "std_error": float(np.mean(per_step_std)),
        })
    return rows


def ablation_run(weight_settings, cfg, seeds, final_rounds=50):
    """Final-round test-loss components of the full pipeline for each loss
    weighting, averaged over the given seeds."""
    rows = []
    for weights in weight_settings:
        w1, w2, w3 = weights
        comps = []
        for seed in seeds:
            run_cfg = with_overrides(cfg, w1=w1, w2=w2, w3=w3, seed=seed)
            records = run_scheme(run_cfg, scheme="fedkl")
            comps.append([
                final_mean(records, final_rounds, "test_loss_lin"),
                final_mean(records, final_rounds, "test_loss_rec"),
                final_mean(records, final_rounds, "test_loss_pred"),
            ])
        mean = np.mean(comps, axis=0)
        rows.append({
            "w1": w1, "w2": w2, "w3": w3,
            "loss_lin": float(mean[0]),
            "loss_rec": float(mean[1]),
            "loss_pred": float(mean[2]),
        })
    return rows
