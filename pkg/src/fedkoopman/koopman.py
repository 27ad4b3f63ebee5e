"""Deep Koopman network: encoder, linear latent advance, decoder.

The network is trained to make the latent dynamics linear: an encoder lifts a
window of states into a latent space, a square matrix advances the latent
state, and a mirror-image decoder maps back.  Training minimizes a weighted
sum of three squared-error terms (latent linearity, reconstruction, and
decoded prediction), with gradients derived by hand and applied through Adam
with decoupled weight decay and an exponential learning-rate schedule.

Sample batches are matrices whose columns are flattened state windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class DknConfig:
    """Network shape and loss weighting.

    ``latent_dim=None`` resolves to four times the state dimension.  The input
    layer consumes ``window`` consecutive states flattened into one vector.
    """

    state_dim: int
    window: int = 1
    horizon: int = 1
    latent_dim: int | None = None
    hidden_layers: int = 1
    hidden_width: int = 30
    weights: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

    def __post_init__(self):
        if self.state_dim < 1 or self.window < 1 or self.horizon < 1:
            raise ValueError("state_dim, window and horizon must be >= 1")
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ValueError("hidden_layers must be >= 0 and hidden_width >= 1")
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be non-negative")

    @property
    def input_dim(self):
        return self.window * self.state_dim

    @property
    def resolved_latent_dim(self):
        return self.latent_dim if self.latent_dim is not None else 4 * self.state_dim

    def encoder_dims(self):
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.resolved_latent_dim]

    def decoder_dims(self):
        return list(reversed(self.encoder_dims()))


@dataclass
class DknParameters:
    """All trainable arrays: encoder stack, latent matrix, decoder stack."""

    enc_w: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)
    koopman: np.ndarray = None
    dec_w: list = field(default_factory=list)
    dec_b: list = field(default_factory=list)

    def arrays(self):
        """Flat list of parameter arrays in a fixed order."""
        return [*self.enc_w, *self.enc_b, self.koopman, *self.dec_w, *self.dec_b]

    def named_arrays(self):
        for i, w in enumerate(self.enc_w):
            yield f"enc_w{i}", w
        for i, b in enumerate(self.enc_b):
            yield f"enc_b{i}", b
        yield "koopman", self.koopman
        for i, w in enumerate(self.dec_w):
            yield f"dec_w{i}", w
        for i, b in enumerate(self.dec_b):
            yield f"dec_b{i}", b

    def replace_arrays(self, flat):
        """New parameter set with the same structure and the given flat arrays."""
        ne, nd = len(self.enc_w), len(self.dec_w)
        it = iter(flat)
        enc_w = [next(it) for _ in range(ne)]
        enc_b = [next(it) for _ in range(ne)]
        koopman = next(it)
        dec_w = [next(it) for _ in range(nd)]
        dec_b = [next(it) for _ in range(nd)]
        return DknParameters(enc_w, enc_b, koopman, dec_w, dec_b)

    def copy(self):
        return self.replace_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self):
        return self.replace_arrays([np.zeros_like(a) for a in self.arrays()])

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    @property
    def input_dim(self):
        return self.enc_w[0].shape[1]

    @property
    def latent_dim(self):
        return self.koopman.shape[0]


class LossBreakdown(NamedTuple):
    total: float
    lin: float
    rec: float
    pred: float


def init_dkn(config, rng):
    """He-initialized affine stacks with zero biases; near-zero latent matrix
    (entries drawn with standard deviation 1e-2)."""
    enc_dims = config.encoder_dims()
    dec_dims = config.decoder_dims()
    enc_w = [
        rng.standard_normal((o, i)) * np.sqrt(2.0 / i)
        for i, o in zip(enc_dims[:-1], enc_dims[1:])
    ]
    enc_b = [np.zeros(o) for o in enc_dims[1:]]
    o_dim = config.resolved_latent_dim
    koopman = rng.standard_normal((o_dim, o_dim)) * 1e-2
    dec_w = [
        rng.standard_normal((o, i)) * np.sqrt(2.0 / i)
        for i, o in zip(dec_dims[:-1], dec_dims[1:])
    ]
    dec_b = [np.zeros(o) for o in dec_dims[1:]]
    return DknParameters(enc_w, enc_b, koopman, dec_w, dec_b)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def _forward_stack(ws, bs, x):
    """Forward pass; returns layer inputs and pre-activations for the backward pass."""
    acts = [x]
    pres = []
    n = len(ws)
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = w @ acts[-1] + b[:, None]
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if i < n - 1 else z)
    return acts, pres


def _backward_stack(ws, acts, pres, grad_out, gw, gb):
    """Accumulate stack gradients in gw/gb and return the gradient at the input."""
    g = grad_out
    n = len(ws)
    for i in range(n - 1, -1, -1):
        dz = g if i == n - 1 else g * (pres[i] > 0)
        gw[i] += dz @ acts[i].T
        gb[i] += dz.sum(axis=1)
        g = ws[i].T @ dz
    return g


def encode(params, x):
    """Lift a flattened state window (or column batch) into the latent space."""
    batch, single = _as_batch(x)
    acts, _ = _forward_stack(params.enc_w, params.enc_b, batch)
    return acts[-1][:, 0] if single else acts[-1]


def advance(params, y, steps):
    """Advance latent coordinates ``steps`` times with the latent matrix."""
    batch, single = _as_batch(y)
    for _ in range(steps):
        batch = params.koopman @ batch
    return batch[:, 0] if single else batch


def decode(params, y):
    """Map latent coordinates back to the flattened state window."""
    batch, single = _as_batch(y)
    acts, _ = _forward_stack(params.dec_w, params.dec_b, batch)
    return acts[-1][:, 0] if single else acts[-1]


def dkn_loss(params, x, x_target, weights=(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), horizon=1):
    """Batch-mean composite loss and its three components.

    ``x`` and ``x_target`` hold flattened input windows and the same windows
    shifted ``horizon`` steps forward, one sample per column.
    """
    x, _ = _as_batch(x)
    x_target, _ = _as_batch(x_target)
    n = x.shape[1]
    d_x = x.shape[0]
    y = encode(params, x)
    y_target = encode(params, x_target)
    y_adv = advance(params, y, horizon)
    x_rec = decode(params, y)
    x_pred = decode(params, y_adv)
    d_y = y.shape[0]
    lin = float(np.sum((y_adv - y_target) ** 2) / (n * d_y))
    rec = float(np.sum((x - x_rec) ** 2) / (n * d_x))
    pred = float(np.sum((x_pred - x_target) ** 2) / (n * d_x))
    w1, w2, w3 = weights
    return LossBreakdown(w1 * lin + w2 * rec + w3 * pred, lin, rec, pred)


def dkn_gradients(params, x, x_target, weights=(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), horizon=1):
    """Exact gradient of the batch-mean composite loss for every parameter.

    Returns the gradient set (same structure as the parameters) and the loss
    breakdown from the shared forward pass.
    """
    x, _ = _as_batch(x)
    x_target, _ = _as_batch(x_target)
    n = x.shape[1]
    d_x = x.shape[0]
    w1, w2, w3 = weights

    enc_acts, enc_pres = _forward_stack(params.enc_w, params.enc_b, x)
    tgt_acts, tgt_pres = _forward_stack(params.enc_w, params.enc_b, x_target)
    y = enc_acts[-1]
    y_target = tgt_acts[-1]
    chain = [y]
    for _ in range(horizon):
        chain.append(params.koopman @ chain[-1])
    y_adv = chain[-1]
    rec_acts, rec_pres = _forward_stack(params.dec_w, params.dec_b, y)
    pred_acts, pred_pres = _forward_stack(params.dec_w, params.dec_b, y_adv)
    x_rec = rec_acts[-1]
    x_pred = pred_acts[-1]

    d_y = y.shape[0]
    lin = float(np.sum((y_adv - y_target) ** 2) / (n * d_y))
    rec = float(np.sum((x - x_rec) ** 2) / (n * d_x))
    pred = float(np.sum((x_pred - x_target) ** 2) / (n * d_x))
    losses = LossBreakdown(w1 * lin + w2 * rec + w3 * pred, lin, rec, pred)

    g_enc_w = [np.zeros_like(w) for w in params.enc_w]
    g_enc_b = [np.zeros_like(b) for b in params.enc_b]
    g_k = np.zeros_like(params.koopman)
    g_dec_w = [np.zeros_like(w) for w in params.dec_w]
    g_dec_b = [np.zeros_like(b) for b in params.dec_b]

    # latent-linearity term: reaches the latent matrix and both encoder passes
    g_adv = (2.0 * w1 / (n * d_y)) * (y_adv - y_target)
    g_y_target = -g_adv
    # decoded-prediction term: through the decoder, then the latent chain
    g_pred_out = (2.0 * w3 / (n * d_x)) * (x_pred - x_target)
    g_adv = g_adv + _backward_stack(params.dec_w, pred_acts, pred_pres, g_pred_out, g_dec_w, g_dec_b)
    # latent chain backward
    g_roll = g_adv
    for t in range(horizon, 0, -1):
        g_k += g_roll @ chain[t - 1].T
        g_roll = params.koopman.T @ g_roll
    g_y = g_roll
    # reconstruction term: through the decoder applied to the un-advanced latent
    g_rec_out = (2.0 * w2 / (n * d_x)) * (x_rec - x)
    g_y = g_y + _backward_stack(params.dec_w, rec_acts, rec_pres, g_rec_out, g_dec_w, g_dec_b)
    # encoder backward for both the input and the target branches
    _backward_stack(params.enc_w, enc_acts, enc_pres, g_y, g_enc_w, g_enc_b)
    _backward_stack(params.enc_w, tgt_acts, tgt_pres, g_y_target, g_enc_w, g_enc_b)

    grads = DknParameters(g_enc_w, g_enc_b, g_k, g_dec_w, g_dec_b)
    return grads, losses


@dataclass
class AdamState:
    """Adam accumulators plus the schedule state they evolve with."""

    m: DknParameters
    v: DknParameters
    step: int = 0
    lr: float = 1e-3
    gamma: float = 0.995
    decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, lr=1e-3, gamma=0.995, decay=1e-7):
    return AdamState(m=params.zeros_like(), v=params.zeros_like(), lr=lr, gamma=gamma, decay=decay)


def adam_step(params, grads, state):
    """One Adam update with decoupled weight decay applied before the moment update.

    The moment accumulators in ``state`` are updated in place; a new parameter
    set is returned.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    shrink = 1.0 - state.lr * state.decay
    new = []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new.append(p * shrink - update)
    return params.replace_arrays(new), state


def lr_decay(state):
    """Multiply the learning rate by the decay factor (once per local epoch)."""
    state.lr *= state.gamma
    return state


def build_windows(block, window=1, horizon=1):
    """Flattened input/target window pairs from one contiguous block of states.

    Returns two (window*d, m) matrices; windows never cross block boundaries,
    so callers concatenate the outputs of separate blocks column-wise.
    """
    block = np.asarray(block, dtype=float)
    n = block.shape[0]
    m = n - window - horizon + 1
    if m < 1:
        raise ValueError(f"block of {n} states is too short for window={window}, horizon={horizon}")
    idx = np.arange(window) + np.arange(m)[:, None]
    x = block[idx].reshape(m, -1).T
    xt = block[idx + horizon].reshape(m, -1).T
    return x, xt


def client_update(params, x, x_target, state, epochs, batch_size, rng,
                  weights=(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), horizon=1):
    """Local training loop: per epoch, shuffle samples, update on each batch,
    then decay the learning rate.  Returns the trained parameters.

    Raises TrainingDiverged on a non-finite loss or parameter.
    """
    x, _ = _as_batch(x)
    x_target, _ = _as_batch(x_target)
    n = x.shape[1]
    if n < 1:
        raise ValueError("no training samples")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    params = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            grads, losses = dkn_gradients(params, x[:, take], x_target[:, take], weights, horizon)
            if not np.isfinite(losses.total):
                raise TrainingDiverged(f"non-finite loss {losses.total}")
            params, state = adam_step(params, grads, state)
        state = lr_decay(state)
    if not params.all_finite():
        raise TrainingDiverged("non-finite parameter after update")
    return params


def save_params(path, params):
    """Serialize parameters as named float64 arrays in an NPZ container (bit-exact)."""
    np.savez(path, **dict(params.named_arrays()))


def load_params(path):
    """Inverse of :func:`save_params`."""
    with np.load(path) as data:
        names = set(data.files)
        n_enc = sum(1 for name in names if name.startswith("enc_w"))
        n_dec = sum(1 for name in names if name.startswith("dec_w"))
        return DknParameters(
            enc_w=[data[f"enc_w{i}"] for i in range(n_enc)],
            enc_b=[data[f"enc_b{i}"] for i in range(n_enc)],
            koopman=data["koopman"],
            dec_w=[data[f"dec_w{i}"] for i in range(n_dec)],
            dec_b=[data[f"dec_b{i}"] for i in range(n_dec)],
        )
