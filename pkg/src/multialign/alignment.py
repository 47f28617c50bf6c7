"""Patch, structural and adversarial alignment losses and the joint objective.

Shapes: encoder features ``z_enc`` and projected denoiser features ``h_den``
are ``[batch, patches, width]``.  ``z_enc`` is always treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .networks import Discriminator
from .tensor import Tensor

COSINE_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    lam: float = 0.5
    beta: float = 0.5
    gamma: float = 0.05
    use_patch: bool = True
    use_struc: bool = True
    use_adv: bool = True
    cosine_eps: float = COSINE_EPS

    def __post_init__(self):
        for name in ("lam", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def patch_on(self) -> bool:
        return self.use_patch and self.lam > 0

    @property
    def struc_on(self) -> bool:
        return self.use_struc and self.beta > 0

    @property
    def adv_on(self) -> bool:
        return self.use_adv and self.gamma > 0

    @property
    def needs_projection(self) -> bool:
        return self.patch_on or self.struc_on or self.adv_on

    @classmethod
    def ablation(cls, name: str, **kw) -> "AlignmentConfig":
        """Named loss-term subsets: none, patch, patch+struc, patch+adv, full."""
        table = {
            "none": (False, False, False),
            "patch": (True, False, False),
            "patch+struc": (True, True, False),
            "patch+adv": (True, False, True),
            "full": (True, True, True),
        }
        try:
            p, s, a = table[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(table)}") from None
        base = cls(**kw)
        return cls(
            lam=base.lam if p else 0.0,
            beta=base.beta if s else 0.0,
            gamma=base.gamma if a else 0.0,
            use_patch=p,
            use_struc=s,
            use_adv=a,
            cosine_eps=base.cosine_eps,
        )


@dataclass
class LossBreakdown:
    velocity: float
    patch: float
    structural: float
    adversarial: float
    total: float
    disc: float = 0.0
    graph: Tensor | None = field(default=None, repr=False, compare=False)


def _const(x, like: Tensor | None = None) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if like is not None:
        data = data.astype(like.dtype, copy=False)
    return Tensor(data)


def patch_alignment_loss(z_enc, h_den: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Negative mean per-patch cosine similarity."""
    h_den = T.as_tensor(h_den)
    z = _const(z_enc, h_den)
    if z.shape != h_den.shape:
        raise T.DimensionError(f"z_enc {z.shape} vs h_den {h_den.shape}")
    cos = (T.normalize(z, eps) * T.normalize(h_den, eps)).sum(axis=-1)
    return -cos.mean()


def autocorrelation(h: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Per-sample cosine-similarity matrix between patches, [b, N, N]."""
    hn = T.normalize(T.as_tensor(h), eps)
    return hn @ hn.transpose(0, 2, 1)


def structural_loss(z_enc, h_den: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Batch mean of the squared Frobenius distance between autocorrelations."""
    h_den = T.as_tensor(h_den)
    z = _const(z_enc, h_den)
    if z.shape[:2] != h_den.shape[:2]:
        raise T.DimensionError(f"patch grids differ: {z.shape} vs {h_den.shape}")
    diff = autocorrelation(z, eps) - autocorrelation(h_den, eps)
    return (diff * diff).sum() / h_den.shape[0]


def discriminator_loss(d: Discriminator, z_enc, h_den) -> Tensor:
    """softplus(-D(real)) + softplus(D(fake)), batch-meaned; h_den is detached."""
    real = d(_const(z_enc))
    fake = d(_const(h_den))
    return T.softplus(-real).mean() + T.softplus(fake).mean()


def adversarial_loss(d: Discriminator, h_den: Tensor) -> Tensor:
    """Non-saturating generator loss; the discriminator weights are held constant."""
    return T.softplus(-d(h_den, frozen=True)).mean()


def total_loss(cfg: AlignmentConfig, parts: Mapping[str, object]) -> LossBreakdown:
    """Weighted sum of the enabled terms.  Disabled terms are reported as 0."""
    velocity = parts["velocity"]
    total = velocity
    reported = {}
    for key, on, weight in (
        ("patch", cfg.patch_on, cfg.lam),
        ("structural", cfg.struc_on, cfg.beta),
        ("adversarial", cfg.adv_on, cfg.gamma),
    ):
        value = parts.get(key)
        if on and value is not None:
            total = total + weight * value
            reported[key] = _scalar(value)
        else:
            reported[key] = 0.0
    return LossBreakdown(
        velocity=_scalar(velocity),
        total=_scalar(total),
        disc=_scalar(parts.get("disc", 0.0)),
        graph=total if isinstance(total, Tensor) else None,
        **reported,
    )


def _scalar(x) -> float:
    return float(x.item()) if isinstance(x, Tensor) else float(x)
