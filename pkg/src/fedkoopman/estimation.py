"""State estimation from noisy partial observations.

Implements the unscented Kalman filter (with and without redrawing sigma
points before the correction step), an extended Kalman filter baseline with
finite-difference Jacobians, and the unscented Rauch-Tung-Striebel smoother.

The discrete maps ``f`` and ``h`` may be evaluated either one state at a time
or on a (d, m) column batch; batch evaluation is attempted first and the
implementation falls back to column-by-column calls if the callable does not
support it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)


class CovarianceError(RuntimeError):
    """A covariance matrix could not be factored even after jitter escalation."""


class CorrectionError(RuntimeError):
    """The innovation covariance is singular; the correction step cannot proceed."""


@dataclass(frozen=True)
class UtParams:
    """Scaled unscented-transform hyperparameters (alpha, kappa, beta)."""

    alpha: float = 0.1
    kappa: float = -1.0
    beta: float = 2.0

    def lam(self, d):
        return self.alpha**2 * (d + self.kappa) - d

    def scale(self, d):
        """d + lambda, the sigma-point scaling factor."""
        return self.alpha**2 * (d + self.kappa)


@dataclass
class GaussianBelief:
    """Mean vector and covariance matrix of a state estimate."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass
class SigmaSet:
    """2d+1 sigma vectors (as columns) with their mean and covariance weights.

    ``source_points`` carries the pre-propagation vectors when the set is the
    image of another set under the dynamics (the smoother's cross covariance
    needs both).
    """

    points: np.ndarray
    wm: np.ndarray
    wc: np.ndarray
    source_points: np.ndarray | None = None


def _sym(P):
    return 0.5 * (P + P.T)


def _clamp_psd(P, floor=-1e-8):
    """Shift eigenvalues up if any falls below ``floor`` (keeps beliefs usable)."""
    low = np.linalg.eigvalsh(P)[0]
    if low < floor:
        P = P + (1e-9 - low) * np.eye(P.shape[0])
    return P


def _cholesky_with_jitter(P, max_escalations=3):
    """Lower Cholesky factor of a symmetric matrix, adding escalating jitter on failure."""
    P = _sym(np.asarray(P, dtype=float))
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    d = P.shape[0]
    base = 1e-9 * np.trace(P) / d
    if base <= 0:
        base = 1e-12
    for k in range(max_escalations):
        try:
            return np.linalg.cholesky(P + (base * 10**k) * np.eye(d))
        except np.linalg.LinAlgError:
            continue
    raise CovarianceError("covariance not positive definite after jitter escalation")


def ut_weights(d, params):
    """Mean and covariance weights for the 2d+1 sigma vectors."""
    s = params.scale(d)
    if s == 0.0:
        raise ValueError("invalid UT parameters: d + lambda is zero")
    lam = params.lam(d)
    wm = np.full(2 * d + 1, 1.0 / (2.0 * s))
    wc = wm.copy()
    wm[0] = lam / s
    wc[0] = lam / s + 1.0 - params.alpha**2 + params.beta
    return wm, wc


def sigma_points(belief, params):
    """Sigma vectors around a Gaussian belief: column 0 is the mean, the rest
    are mean +/- the columns of the scaled Cholesky factor of the covariance.

    A negative scaling d + lambda is handled by factoring |d + lambda| P and
    applying the sign to the offset columns.
    """
    mean = np.asarray(belief.mean, dtype=float)
    d = mean.shape[0]
    wm, wc = ut_weights(d, params)
    s = params.scale(d)
    chol = _cholesky_with_jitter(np.abs(s) * np.asarray(belief.cov, dtype=float))
    offsets = np.sign(s) * chol
    points = np.empty((d, 2 * d + 1))
    points[:, 0] = mean
    points[:, 1 : d + 1] = mean[:, None] + offsets
    points[:, d + 1 :] = mean[:, None] - offsets
    return SigmaSet(points=points, wm=wm, wc=wc)


def _apply_columns(fn, points):
    """Evaluate ``fn`` on each column of ``points``; batch call when supported."""
    try:
        out = np.asarray(fn(points), dtype=float)
        if out.ndim == 2 and out.shape[1] == points.shape[1]:
            return out
    except (CovarianceError, CorrectionError):
        raise
    except Exception:
        pass
    return np.stack([np.asarray(fn(points[:, j]), dtype=float) for j in range(points.shape[1])], axis=1)


def _moments(points, wm, wc, noise_cov):
    mean = points @ wm
    dev = points - mean[:, None]
    cov = (dev * wc) @ dev.T + noise_cov
    return mean, _sym(cov)


def ukf_predict(belief, f, sigma_f, params):
    """Propagate a belief through the discrete map ``f``.

    Returns the propagated sigma set (reused by the correction step) and the
    predicted belief whose covariance includes the process-mismatch term.
    """
    sig = sigma_points(belief, params)
    prop = _apply_columns(f, sig.points)
    mean, cov = _moments(prop, sig.wm, sig.wc, sigma_f)
    propagated = SigmaSet(points=prop, wm=sig.wm, wc=sig.wc, source_points=sig.points)
    return propagated, GaussianBelief(mean, cov)


def ukf_correct(predicted, propagated, h, sigma_h, z):
    """Correct a predicted belief with observation ``z`` through the map ``h``."""
    obs_pts = _apply_columns(h, propagated.points)
    z_hat = obs_pts @ propagated.wm
    dz = obs_pts - z_hat[:, None]
    p_zz = _sym((dz * propagated.wc) @ dz.T + sigma_h)
    dx = propagated.points - predicted.mean[:, None]
    p_xz = (dx * propagated.wc) @ dz.T
    try:
        factor = scipy.linalg.cho_factor(p_zz)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise CorrectionError(f"innovation covariance is singular: {exc}") from None
    gain = scipy.linalg.cho_solve(factor, p_xz.T).T
    mean = predicted.mean + gain @ (np.asarray(z, dtype=float) - z_hat)
    cov = _clamp_psd(_sym(predicted.cov - gain @ p_zz @ gain.T))
    return GaussianBelief(mean, cov)


def ukf_filter(observations, f, h, sigma_f, sigma_h, x0, P0, params, resample=False):
    """Run the unscented Kalman filter over an observation sequence.

    With ``resample`` set, a fresh sigma set is drawn from the predicted belief
    before each correction step; otherwise the sigma points propagated through
    ``f`` are reused.  Returns one belief per observation.  A failed correction
    step keeps the predicted belief for that sample.
    """
    sigma_f = np.atleast_2d(np.asarray(sigma_f, dtype=float))
    sigma_h = np.atleast_2d(np.asarray(sigma_h, dtype=float))
    observations = np.asarray(observations, dtype=float).reshape(-1, sigma_h.shape[0])
    if observations.shape[0] < 1:
        raise ValueError("need at least one observation")
    belief = GaussianBelief(
        np.atleast_1d(np.asarray(x0, dtype=float)), np.atleast_2d(np.asarray(P0, dtype=float))
    )
    out = []
    for k, z in enumerate(observations):
        propagated, predicted = ukf_predict(belief, f, sigma_f, params)
        try:
            if resample:
                propagated = sigma_points(predicted, params)
            belief = ukf_correct(predicted, propagated, h, sigma_h, z)
        except (CorrectionError, CovarianceError) as exc:
            logger.warning("correction failed at sample %d, keeping prediction: %s", k, exc)
            belief = predicted
        out.append(belief)
    return out


def finite_difference_jacobian(fn, x, step=1e-6):
    """Central-difference Jacobian of ``fn`` at ``x`` with per-coordinate step
    ``step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.shape[0]):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fn(xp), dtype=float) - np.asarray(fn(xm), dtype=float)) / (2.0 * h))
    return np.stack(cols, axis=1)


def ekf_filter(observations, f, h, sigma_f, sigma_h, x0, P0):
    """Extended Kalman filter baseline with finite-difference Jacobians."""
    sigma_f = np.atleast_2d(np.asarray(sigma_f, dtype=float))
    sigma_h = np.atleast_2d(np.asarray(sigma_h, dtype=float))
    observations = np.asarray(observations, dtype=float).reshape(-1, sigma_h.shape[0])
    if observations.shape[0] < 1:
        raise ValueError("need at least one observation")
    mean = np.atleast_1d(np.asarray(x0, dtype=float))
    cov = np.atleast_2d(np.asarray(P0, dtype=float))
    out = []
    for k, z in enumerate(observations):
        jac_f = finite_difference_jacobian(f, mean)
        mean_pred = np.asarray(f(mean), dtype=float)
        cov_pred = _sym(jac_f @ cov @ jac_f.T + sigma_f)
        jac_h = finite_difference_jacobian(h, mean_pred)
        z_hat = np.asarray(h(mean_pred), dtype=float)
        p_zz = _sym(jac_h @ cov_pred @ jac_h.T + sigma_h)
        try:
            factor = scipy.linalg.cho_factor(p_zz)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            logger.warning("correction failed at sample %d, keeping prediction: %s", k, exc)
            mean, cov = mean_pred, cov_pred
            out.append(GaussianBelief(mean, cov))
            continue
        gain = scipy.linalg.cho_solve(factor, (cov_pred @ jac_h.T).T).T
        mean = mean_pred + gain @ (z - z_hat)
        cov = _clamp_psd(_sym(cov_pred - gain @ p_zz @ gain.T))
        out.append(GaussianBelief(mean, cov))
    return out


def urts_smooth(filtered, f, sigma_f, params):
    """Backward smoothing pass over a filtered belief sequence.

    Anchors at the last filtered belief and folds future information into each
    earlier estimate.  If a predicted covariance cannot be factored the pass
    stops there and the remaining prefix keeps the filtered beliefs.
    """
    n = len(filtered)
    if n == 0:
        raise ValueError("need at least one filtered belief")
    sigma_f = np.asarray(sigma_f, dtype=float)
    smoothed = [None] * n
    smoothed[-1] = filtered[-1]
    for k in range(n - 2, -1, -1):
        try:
            sig = sigma_points(filtered[k], params)
            plus = _apply_columns(f, sig.points)
            mean_plus, cov_plus = _moments(plus, sig.wm, sig.wc, sigma_f)
            cross = ((sig.points - filtered[k].mean[:, None]) * sig.wc) @ (plus - mean_plus[:, None]).T
            factor = scipy.linalg.cho_factor(cov_plus)
        except (CovarianceError, scipy.linalg.LinAlgError, ValueError) as exc:
            logger.warning("smoothing stopped at sample %d, keeping filtered prefix: %s", k, exc)
            smoothed[: k + 1] = filtered[: k + 1]
            break
        gain = scipy.linalg.cho_solve(factor, cross.T).T
        mean = filtered[k].mean + gain @ (smoothed[k + 1].mean - mean_plus)
        cov = _clamp_psd(_sym(filtered[k].cov + gain @ (smoothed[k + 1].cov - cov_plus) @ gain.T))
        smoothed[k] = GaussianBelief(mean, cov)
    return smoothed
