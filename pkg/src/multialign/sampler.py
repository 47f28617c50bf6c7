"""Reverse-time Euler-Maruyama sampling for the linear interpolant.

Derivation for x_t = (1 - t) x0 + t eps with velocity v = E[eps - x0 | x_t]:

    eps_hat = x + (1 - t) v          (since x = eps_hat - (1 - t) v)
    score   = -eps_hat / t

With diffusion coefficient w_t = sigma_t = t, the SDE that shares the
probability-flow marginals, run backwards from t = 1 to t = 0, is

    x <- x - dt [v - (w_t / 2) score] + sqrt(w_t dt) xi,   xi ~ N(0, I).

The score blows up as t -> 0, so the last step is a plain velocity Euler
step with no noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .interpolant import diffusion_coef
from .networks import DenoiserNet
from .tensor import SingularityError

SCORE_T_MIN = 1e-5


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 250
    cfg_scale: float = 1.0
    guidance_interval: tuple = (0.0, 1.0)
    seed: int = 0
    deterministic_final_step: bool = True

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        lo, hi = self.guidance_interval
        if not 0 <= lo <= hi <= 1:
            raise ValueError("guidance_interval must satisfy 0 <= lo <= hi <= 1")
        if self.cfg_scale < 1:
            raise ValueError("cfg_scale must be >= 1")


def velocity_to_score(v, x, t: float):
    if t < SCORE_T_MIN:
        raise SingularityError(f"score undefined at t={t}; use the deterministic final step")
    return -(x + (1 - t) * v) / t


def em_step(
    x: np.ndarray,
    t: float,
    dt: float,
    v_fn: Callable[[np.ndarray, float], np.ndarray],
    rng: np.random.Generator | None,
    final: bool = False,
    w_fn: Callable[[float], float] = diffusion_coef,
) -> np.ndarray:
    """One reverse step from t to t - dt.  ``final`` drops the score and noise terms."""
    if dt <= 0 or t - dt < -1e-12:
        raise ValueError(f"invalid step t={t}, dt={dt}")
    v = v_fn(x, t)
    w = w_fn(t)
    if final or w == 0:
        return x - dt * v
    drift = v - 0.5 * w * velocity_to_score(v, x, t)
    return x - dt * drift + np.sqrt(w * dt) * rng.standard_normal(x.shape).astype(x.dtype)


def time_grid(nfe: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, nfe + 1)


def integrate(x: np.ndarray, v_fn, cfg: SamplerConfig, rng: np.random.Generator, w_fn=diffusion_coef) -> np.ndarray:
    grid = time_grid(cfg.nfe)
    for i in range(cfg.nfe):
        t, t_next = grid[i], grid[i + 1]
        final = cfg.deterministic_final_step and i == cfg.nfe - 1
        x = em_step(x, float(t), float(t - t_next), v_fn, rng, final=final, w_fn=w_fn)
    return x


class GuidedVelocity:
    """Network velocity with optional classifier-free guidance; counts forward calls."""

    def __init__(self, net: DenoiserNet, y: np.ndarray, cfg: SamplerConfig):
        self.net = net
        self.y = np.asarray(y, dtype=np.int64)
        self.cfg = cfg
        self.cond_calls = 0
        self.null_calls = 0

    def _forward(self, x, t, y):
        with T.no_grad():
            v, _ = self.net(x, np.full(x.shape[0], t), y)
        return v.data

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        v_cond = self._forward(x, t, self.y)
        self.cond_calls += 1
        lo, hi = self.cfg.guidance_interval
        if self.cfg.cfg_scale > 1 and lo <= t <= hi:
            v_null = self._forward(x, t, np.full_like(self.y, self.net.null_class))
            self.null_calls += 1
            return v_null + self.cfg.cfg_scale * (v_cond - v_null)
        return v_cond


def sample(net: DenoiserNet, cfg: SamplerConfig, y, batch: int | None = None, chunk: int = 512) -> np.ndarray:
    """Draw samples for class label(s) ``y``; returns [b, c, h, w].

    ``y`` is an int (replicated ``batch`` times) or an array of labels.
    Large batches are integrated in chunks with per-chunk RNG streams.
    """
    if np.isscalar(y):
        if batch is None:
            raise ValueError("batch is required with a scalar label")
        y = np.full(batch, int(y))
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y > net.cfg.num_classes):
        raise T.DomainError(f"class labels must lie in [0, {net.cfg.num_classes}]")
    c, s = net.cfg.in_channels, net.cfg.input_size
    out = []
    for k, lo in enumerate(range(0, len(y), chunk)):
        rng = np.random.default_rng([cfg.seed, k])
        yc = y[lo : lo + chunk]
        x = rng.standard_normal((len(yc), c, s, s)).astype(net.dtype)
        out.append(integrate(x, GuidedVelocity(net, yc, cfg), cfg, rng))
    return np.concatenate(out, axis=0)


def gaussian_velocity(mean: np.ndarray, cov: np.ndarray) -> Callable[[np.ndarray, float], np.ndarray]:
    """Exact velocity field E[eps - x0 | x_t = x] when x0 ~ N(mean, cov).

    ``x`` is [b, d].  Useful as a known-answer stand-in for a trained network.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    eye = np.eye(len(mean))

    def v(x, t):
        a = 1 - t
        c_t = a * a * cov + t * t * eye
        resid = np.linalg.solve(c_t, (x - a * mean).T).T
        e_x0 = mean + a * resid @ cov
        e_eps = t * resid
        return e_eps - e_x0

    return v
