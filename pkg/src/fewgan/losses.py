"""Loss functions: non-saturating adversarial pair, latent-code reconstruction,
semi-supervised variants, and input mixup.

Adversarial losses take raw logits and use the numerically stable softplus
forms: -log sigmoid(t) == softplus(-t) and -log(1 - sigmoid(t)) == softplus(t).
The semi-supervised losses reduce bit-exactly to the supervised ones at
alpha = 0. Mixup operates on numpy batches (it lives in the data pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossBreakdown:
    """Per-step loss terms. total_d / total_g are the documented weighted sums:

    total_d = d_real + d_fake + alpha*(d_unsup_real + d_unsup_fake) + gamma*info
    total_g = g_adv + alpha*g_unsup + gamma*info
    """

    d_real: float = 0.0
    d_fake: float = 0.0
    g_adv: float = 0.0
    info: float = 0.0
    d_unsup_real: float = 0.0
    d_unsup_fake: float = 0.0
    g_unsup: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0


def _as_tensor(logits) -> torch.Tensor:
    t = logits if isinstance(logits, torch.Tensor) else torch.as_tensor(np.asarray(logits))
    if t.numel() == 0:
        raise ValueError("empty logit batch")
    return t


def d_loss_supervised(real_logits, fake_logits) -> torch.Tensor:
    """mean softplus(-real) + mean softplus(fake)."""
    real, fake = _as_tensor(real_logits), _as_tensor(fake_logits)
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def g_loss_supervised(fake_logits) -> torch.Tensor:
    """mean softplus(-fake)."""
    return F.softplus(-_as_tensor(fake_logits)).mean()


def infogan_loss(z_pred, z) -> torch.Tensor:
    """Mean over batch and latent dimensions of the squared reconstruction error."""
    zp, zt = _as_tensor(z_pred), _as_tensor(z)
    if zp.shape != zt.shape:
        raise ValueError(f"shape mismatch: {tuple(zp.shape)} vs {tuple(zt.shape)}")
    return ((zp - zt) ** 2).mean()


def d_loss_semi(real_cond, fake_cond, real_uncond_unlabeled, fake_uncond,
                alpha: float) -> torch.Tensor:
    """Supervised pair on conditional logits plus alpha times the same game on
    the unconditional head, whose real logits come from the unlabeled pool."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return d_loss_supervised(real_cond, fake_cond) + alpha * d_loss_supervised(
        real_uncond_unlabeled, fake_uncond)


def g_loss_semi(fake_cond, fake_uncond, alpha: float) -> torch.Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return g_loss_supervised(fake_cond) + alpha * g_loss_supervised(fake_uncond)


class MixupBatch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    lambdas: np.ndarray
    permutation: np.ndarray


def mixup_batch(x: np.ndarray, y_onehot: np.ndarray, beta_param: float, rng) -> MixupBatch:
    """Input mixup with a per-example Beta(beta_param, beta_param) coefficient.

    A random pairing permutation is drawn first, then the per-example lambdas;
    both are returned so mixed outputs can be audited exactly.
    """
    if beta_param <= 0:
        raise ValueError(f"beta_param must be > 0, got {beta_param}")
    n = len(x)
    if n < 2:
        raise ValueError("mixup needs a batch of at least 2")
    perm = rng.permutation(n)
    lam = rng.beta(beta_param, beta_param, size=n)
    lx = lam.reshape((n,) + (1,) * (x.ndim - 1))
    ly = lam.reshape((n,) + (1,) * (y_onehot.ndim - 1))
    x_mixed = lx * x + (1.0 - lx) * x[perm]
    y_mixed = ly * y_onehot + (1.0 - ly) * y_onehot[perm]
    return MixupBatch(x_mixed, y_mixed, lam, perm)
