"""Linear stochastic interpolant x_t = (1 - t) x0 + t eps and its velocity objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DomainError, Tensor, as_tensor

T_MIN = 1e-4


def alpha(t):
    return 1 - t


def sigma(t):
    return t


def diffusion_coef(t):
    """SDE diffusion coefficient w_t; equal to sigma_t for this schedule."""
    return sigma(t)


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x0: np.ndarray


def _per_sample(t, like: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (like.ndim - 1))


def corrupt(x0, eps, t) -> NoisySample:
    """Forward corruption.  ``t`` is a scalar or one value per batch row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all((t_arr > 0) & (t_arr <= 1)):
        raise DomainError("t must lie in (0, 1]")
    tb = _per_sample(t_arr, x0)
    x_t = (1 - tb) * x0 + tb * eps
    return NoisySample(x_t=x_t.astype(x0.dtype), t=t_arr, eps=eps, x0=x0)


def velocity_target(x0, eps):
    """eps - x0: the time derivative of the linear interpolant (independent of t)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return eps - x0


def velocity_loss(pred: Tensor, target) -> Tensor:
    """Batch mean of the per-sample squared L2 error (summed over feature dims)."""
    pred = as_tensor(pred)
    if isinstance(target, Tensor):
        target = target.data
    target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return (diff * diff).sum() / pred.shape[0]


def sample_t(rng: np.random.Generator, batch: int, t_min: float = T_MIN) -> np.ndarray:
    """Uniform timesteps on [t_min, 1]."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return rng.uniform(t_min, 1.0, size=batch)
