"""Adversarial + L1 objective and flat gradient bundles for G and D."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .netcore import compose_lab

REAL_LABEL = 1.0
FAKE_LABEL = 0.0


class LossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_adv: float = 1.0
    w_l1: float = 100.0

    def __post_init__(self):
        if self.w_adv < 0 or self.w_l1 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_adv == 0 and self.w_l1 == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class GradientBundle:
    wrt: str  # "generator" or "discriminator"
    vector: np.ndarray
    loss_value: float
    terms: dict

    def __add__(self, other):
        if self.wrt != other.wrt:
            raise ValueError("cannot add gradients of different networks")
        terms = {k: self.terms.get(k, 0.0) + other.terms.get(k, 0.0) for k in {*self.terms, *other.terms}}
        return GradientBundle(self.wrt, self.vector + other.vector, self.loss_value + other.loss_value, terms)


def _label(label):
    if isinstance(label, str):
        return {"real": REAL_LABEL, "fake": FAKE_LABEL}[label]
    return float(label)


def adversarial_loss(scores, label):
    """Mean binary cross-entropy of probabilities ``scores`` against a constant label."""
    s = torch.as_tensor(scores, dtype=torch.float64) if not torch.is_tensor(scores) else scores
    if torch.any((s <= 0) | (s >= 1)):
        raise LossError("scores must lie strictly inside (0, 1)")
    y = _label(label)
    return -(y * torch.log(s) + (1 - y) * torch.log1p(-s)).mean()


def adversarial_loss_logits(logits, label):
    """Same quantity as :func:`adversarial_loss` on ``sigmoid(logits)``, computed stably."""
    target = torch.full_like(logits, _label(label))
    return F.binary_cross_entropy_with_logits(logits, target)


def l1_loss(pred_ab, target_ab):
    """Mean absolute difference. The gradient of |x| at 0 is taken as 0."""
    if tuple(pred_ab.shape) != tuple(target_ab.shape):
        raise LossError(f"shape mismatch {tuple(pred_ab.shape)} vs {tuple(target_ab.shape)}")
    return (pred_ab - target_ab).abs().mean()


def combined_loss(adv, l1, w: LossWeights):
    return w.w_adv * adv + w.w_l1 * l1


def generator_losses(g, d, L, target_ab, w: LossWeights):
    """(total, adversarial, l1) for the non-saturating generator objective."""
    fake_ab = g(L)
    adv = adversarial_loss_logits(d(compose_lab(L, fake_ab)), REAL_LABEL)
    l1 = l1_loss(fake_ab, target_ab)
    return combined_loss(adv, l1, w), adv, l1


def discriminator_losses(d, g, L, target_ab):
    """(total, real term, fake term); the generator runs without a graph."""
    with torch.no_grad():
        fake_ab = g(L)
    real = adversarial_loss_logits(d(compose_lab(L, target_ab)), REAL_LABEL)
    fake = adversarial_loss_logits(d(compose_lab(L, fake_ab)), FAKE_LABEL)
    return real + fake, real, fake


def _flat_grad(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [torch.zeros_like(p).reshape(-1) if gr is None else gr.reshape(-1) for p, gr in zip(params, grads)]
    return torch.cat(flat).detach().cpu().numpy()


def _check_finite(value, who):
    if not math.isfinite(value):
        raise LossError(f"non-finite {who} loss: {value}")


def as_batch(batch, dtype=torch.float32):
    """Stack a list of (L, ab) numpy pairs into B x 1 x H x W and B x 2 x H x W tensors."""
    if isinstance(batch, tuple) and len(batch) == 2 and torch.is_tensor(batch[0]):
        return batch
    L = torch.from_numpy(np.stack([p[0] for p in batch])).to(dtype)
    ab = torch.from_numpy(np.stack([p[1] for p in batch])).to(dtype)
    return L, ab


def generator_gradient(g, d, batch, w: LossWeights) -> GradientBundle:
    """Gradient of w_adv * L_adv(D(L, G(L)), real) + w_l1 * |G(L) - ab| w.r.t. the generator."""
    L, ab = as_batch(batch, next(g.parameters()).dtype)
    params = list(g.parameters())
    total, adv, l1 = generator_losses(g, d, L, ab, w)
    value = total.item()
    _check_finite(value, "generator")
    return GradientBundle("generator", _flat_grad(total, params), value, {"adv": adv.item(), "l1": l1.item()})


def discriminator_gradient(d, g, batch) -> GradientBundle:
    """Gradient of L_adv(D(target), real) + L_adv(D(G(L)), fake) w.r.t. the discriminator."""
    L, ab = as_batch(batch, next(d.parameters()).dtype)
    params = list(d.parameters())
    total, real, fake = discriminator_losses(d, g, L, ab)
    value = total.item()
    _check_finite(value, "discriminator")
    return GradientBundle("discriminator", _flat_grad(total, params), value, {"real": real.item(), "fake": fake.item()})


def discriminator_gradient_terms(d, g, batch):
    """The real-label and fake-label bundles computed separately."""
    L, ab = as_batch(batch, next(d.parameters()).dtype)
    params = list(d.parameters())
    with torch.no_grad():
        fake_ab = g(L)
    real = adversarial_loss_logits(d(compose_lab(L, ab)), REAL_LABEL)
    fake = adversarial_loss_logits(d(compose_lab(L, fake_ab)), FAKE_LABEL)
    return (
        GradientBundle("discriminator", _flat_grad(real, params), real.item(), {"real": real.item()}),
        GradientBundle("discriminator", _flat_grad(fake, params), fake.item(), {"fake": fake.item()}),
    )
