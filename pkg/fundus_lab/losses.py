"""
Training objectives for FAG-Net and FGC-Net.

Every loss is a torch function so that it can be back-propagated; pass
``EvalBatch.to_tensors()`` to evaluate one on a metrics batch.
"""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import constants as C
from .errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClfParams:
    """
    Weights of the custom regression loss.

    Attributes:
        varphi (float): Linear weight inside the tolerance band and offset of
            the cubic penalty outside it.
        J (int): Tolerance band in years.
        psi (float): Shared weight of the three ALF terms.
    """
    varphi: float = C.LOSS_VARPHI
    J: int = C.LOSS_J
    psi: float = C.LOSS_PSI

    def __post_init__(self):
        if int(self.J) != self.J or self.J < 0:
            raise InvalidInputError(f"J must be a nonnegative integer, got {self.J}")
        if self.psi < 0 or not math.isfinite(self.psi):
            raise InvalidInputError(f"psi must be finite and nonnegative, got {self.psi}")
        if not math.isfinite(self.varphi):
            raise InvalidInputError("varphi must be finite")
        low, high = C.VARPHI_RANGE
        if not low <= self.varphi <= high:
            logger.warning(f"varphi={self.varphi} lies outside the recommended range [{low}, {high}]")


@dataclass(frozen=True)
class LatentMoments:
    """Per-dimension mean and standard deviation, shape (latent,) or (batch, latent)."""
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise InvalidInputError(
                f"mu and sigma shapes differ: {tuple(self.mu.shape)} != {tuple(self.sigma.shape)}")
        if bool(torch.any(self.sigma <= 0)):
            raise InvalidInputError("sigma must be strictly positive")


def _check_pair(actual, predicted):
    predicted = torch.as_tensor(predicted)
    if not predicted.is_floating_point():
        predicted = predicted.to(torch.get_default_dtype())
    actual = torch.as_tensor(actual, dtype=predicted.dtype, device=predicted.device)
    actual = actual.reshape(-1)
    predicted = predicted.reshape(-1)
    if actual.numel() == 0:
        raise InvalidInputError("loss batch is empty")
    if actual.numel() != predicted.numel():
        raise InvalidInputError(
            f"actual and predicted lengths differ: {actual.numel()} != {predicted.numel()}")
    return actual, predicted


def clf_loss(actual, predicted, params):
    """
    Custom regression loss.

    Each sample contributes ``d*varphi`` when its absolute error ``d`` is
    within J years and ``d**3 + varphi`` otherwise; the result is the mean
    over the batch.
    """
    actual, predicted = _check_pair(actual, predicted)
    d = torch.abs(actual - predicted)
    per_sample = torch.where(d <= params.J, d * params.varphi, d ** 3 + params.varphi)
    return per_sample.mean()


def clf_gradient(actual, predicted, params):
    """Analytic derivative of clf_loss with respect to each prediction."""
    actual, predicted = _check_pair(actual, predicted)
    diff = predicted - actual
    d = torch.abs(diff)
    slope = torch.where(d <= params.J, torch.full_like(d, params.varphi), 3.0 * d ** 2)
    return torch.sign(diff) * slope / diff.numel()


def alf_loss(actual, predicted, params):
    """Accumulated FAG-Net loss: (psi*L1 + psi*L2 + psi*CLF) / 3."""
    actual, predicted = _check_pair(actual, predicted)
    l1 = F.l1_loss(predicted, actual)
    l2 = F.mse_loss(predicted, actual)
    clf = clf_loss(actual, predicted, params)
    return (params.psi * l1 + params.psi * l2 + params.psi * clf) / 3.0


def gender_loss(logits, labels):
    """Cross-entropy of the two-way gender head."""
    if logits.shape[0] == 0:
        raise InvalidInputError("loss batch is empty")
    return F.cross_entropy(logits, labels.long())


def kl_divergence(moments, variant="standard"):
    """
    KL regularizer of the latent moments, summed over latent dimensions.

    ``standard`` is the closed-form KL to the unit normal,
    ½Σ(σ² + μ² − 1 − ln σ²). ``paper`` keeps the exponential form
    ½Σ(σ² + μ² − 1 − exp(σ²)), which is negative at the prior and unbounded
    below. Batched moments are averaged over the batch after the sum.
    """
    if variant not in C.KL_VARIANTS:
        raise InvalidInputError(f"unknown KL variant {variant!r}")
    var = moments.sigma ** 2
    if variant == "standard":
        terms = var + moments.mu ** 2 - 1.0 - torch.log(var)
    else:
        terms = var + moments.mu ** 2 - 1.0 - torch.exp(var)
    per_sample = 0.5 * terms.sum(dim=-1)
    return per_sample.mean() if per_sample.dim() > 0 else per_sample


def discriminator_l2(pred_real, pred_fake, target_age):
    """
    Age-regression error of the discriminator on real and generated images.

    Ages are compared in units of AGE_SCALE so that this term is on the same
    scale as the pixel reconstruction error.
    """
    target = target_age.reshape(-1) / C.AGE_SCALE
    real = F.mse_loss(pred_real.reshape(-1) / C.AGE_SCALE, target)
    fake = F.mse_loss(pred_fake.reshape(-1) / C.AGE_SCALE, target)
    return 0.5 * (real + fake)


def reconstruction_l1(generated, original):
    return F.l1_loss(generated, original)


def tlf_fgc_loss(recon_l1, disc_l2, kl):
    """Total FGC-Net loss: the unweighted mean of its three terms."""
    terms = [torch.as_tensor(t, dtype=torch.float64) if not torch.is_tensor(t) else t
             for t in (recon_l1, disc_l2, kl)]
    for t in terms:
        if not bool(torch.all(torch.isfinite(t.detach()))):
            raise InvalidInputError("TLF-FGC terms must be finite")
    return (terms[0] + terms[1] + terms[2]) / 3.0
