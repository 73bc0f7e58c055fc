"""Tanh-squashed Gaussian policy head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# keeps atanh finite for dataset actions sitting on the bounds
ACTION_EPS = 1e-6
# tanh rounds to exactly +-1 in float64 once |u| > ~19; keep samples strictly inside
ACTION_MAX = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class GaussianPolicyHead:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "log_std", np.clip(np.asarray(self.log_std, dtype=np.float64),
                                                    LOG_STD_MIN, LOG_STD_MAX))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def _log_tanh_jacobian(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def sample_squashed_gaussian(head: GaussianPolicyHead, seed=None, rng=None):
    """Draw ``tanh(mean + std * noise)`` and its log-density (with tanh correction).

    Batched heads (leading axes) are supported; the log-density sums over the last
    axis.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    noise = rng.standard_normal(head.mean.shape)
    u = head.mean + head.std * noise
    logp = (-0.5 * noise ** 2 - head.log_std - HALF_LOG_2PI - _log_tanh_jacobian(u)).sum(-1)
    return np.clip(np.tanh(u), -ACTION_MAX, ACTION_MAX), logp


def squashed_log_prob(head: GaussianPolicyHead, actions) -> np.ndarray:
    a = np.clip(np.asarray(actions, dtype=np.float64), -1 + ACTION_EPS, 1 - ACTION_EPS)
    u = np.arctanh(a)
    z = (u - head.mean) / head.std
    return (-0.5 * z ** 2 - head.log_std - HALF_LOG_2PI - _log_tanh_jacobian(u)).sum(-1)


# --- tape versions -------------------------------------------------------------


def split_head(out: Tensor, act_dim: int) -> tuple[Tensor, Tensor]:
    """Split a ``(B, 2*act_dim)`` network output into mean and clamped log-std."""
    mean = out[..., :act_dim]
    log_std = ag.clip(out[..., act_dim:], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def rsample(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterised squashed sample and its log-density, both on the tape."""
    u = mean + ag.exp(log_std) * noise
    tanh_corr = 2.0 * (math.log(2.0) - u - ag.softplus(-2.0 * u))
    logp = (-0.5 * noise ** 2 - HALF_LOG_2PI - log_std - tanh_corr).sum(axis=-1)
    return ag.clip(ag.tanh(u), -ACTION_MAX, ACTION_MAX), logp


def log_prob(mean: Tensor, log_std: Tensor, actions: np.ndarray) -> Tensor:
    """Log-density of given (squashed) actions under the head, on the tape."""
    a = np.clip(actions, -1 + ACTION_EPS, 1 - ACTION_EPS)
    u = np.arctanh(a)
    z = (u - mean) * ag.exp(-log_std)
    corr = _log_tanh_jacobian(u)
    return (-0.5 * ag.square(z) - log_std - HALF_LOG_2PI - corr).sum(axis=-1)
