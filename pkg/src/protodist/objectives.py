"""The four training loss terms and their weighted sum.

All terms reduce over the batch with an arithmetic mean, so the loss
weights are batch-size independent. Every function is a pure map from
tensors to a scalar tensor and differentiates cleanly with respect to the
encoder, decoder, and prototype parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch

from .errors import ConfigError
from .model import DistanceTable, LatentDistribution

Scalar = Union[float, torch.Tensor]


@dataclass
class LossWeights:
    """Nonnegative weights of the four loss terms."""

    w_cls: float = 1.0
    w_kl: float = 1.0
    w_rec: float = 1.0
    w_orth: float = 1.0

    def validate(self) -> None:
        for name in ("w_cls", "w_kl", "w_rec", "w_orth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "w_cls": self.w_cls, "w_kl": self.w_kl,
            "w_rec": self.w_rec, "w_orth": self.w_orth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        w = cls(**{k: float(v) for k, v in d.items()})
        w.validate()
        return w


@dataclass
class LossBreakdown:
    """Per-term values plus the weighted total (floats or scalar tensors)."""

    cls: Scalar
    kl: Scalar
    rec: Scalar
    orth: Scalar
    total: Scalar

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name in ("cls", "kl", "rec", "orth", "total"):
            v = getattr(self, name)
            out[name] = float(v.detach() if isinstance(v, torch.Tensor) else v)
        return out


def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy -log P(y=k|x), computed from logits via log-sum-exp."""
    log_probs = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_probs.gather(1, labels.view(-1, 1)).mean()


def cls_loss_from_probs(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Probability-space cross-entropy; kept to cross-check cls_loss."""
    picked = probs.gather(1, labels.view(-1, 1)).clamp_min(1e-300)
    return -torch.log(picked).mean()


def kl_loss(
    dist: LatentDistribution,
    labels: torch.Tensor,
    prototypes: torch.Tensor,
    j_star: torch.Tensor,
) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(phi, I)) to the nearest true-class prototype.

    ``j_star[n, k]`` selects the nearest prototype per class; the target of
    sample n is prototype ``j_star[n, labels[n]]`` of class ``labels[n]``.
    Closed form per sample: 0.5 * sum_l (sigma_l^2 + (mu_l - phi_l)^2 - 1
    - log sigma_l^2); the batch reduces by mean. The selection index is a
    constant of the differentiation (no gradient through the argmin).
    """
    n = dist.mu.shape[0]
    rows = torch.arange(n, device=dist.mu.device)
    j_true = j_star[rows, labels]  # (N,)
    target = prototypes[labels, j_true]  # (N, L)
    var = torch.exp(dist.log_var)
    per_sample = 0.5 * (var + (dist.mu - target) ** 2 - 1.0 - dist.log_var).sum(dim=1)
    return per_sample.mean()


def orth_loss(prototypes: torch.Tensor) -> torch.Tensor:
    """Mean class-wise squared Frobenius distance of the centered prototype
    Gram matrix from the identity.

    Prototype rows of each class are centered at their class mean before
    the Gram matrix is formed, so the loss pushes within-class prototypes
    towards mutual orthonormality. With one prototype per class the
    centered row is identically zero and the loss is the constant 1
    (gradient-free).
    """
    k, j, _ = prototypes.shape
    centered = prototypes - prototypes.mean(dim=1, keepdim=True)
    gram = torch.einsum("kjl,kml->kjm", centered, centered)
    eye = torch.eye(j, dtype=prototypes.dtype, device=prototypes.device)
    return ((gram - eye) ** 2).sum(dim=(1, 2)).mean()


def rec_loss(x: torch.Tensor, x_hat: torch.Tensor, metric) -> torch.Tensor:
    """Mean reconstruction error under the given metric (mse or perceptual)."""
    return metric.per_sample(x, x_hat).mean()


def total_loss(parts: LossBreakdown, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the four terms; returns a completed breakdown."""
    total = (
        weights.w_cls * parts.cls
        + weights.w_kl * parts.kl
        + weights.w_rec * parts.rec
        + weights.w_orth * parts.orth
    )
    return LossBreakdown(
        cls=parts.cls, kl=parts.kl, rec=parts.rec, orth=parts.orth, total=total
    )


def compute_losses(
    forward_pass,
    batch_x: torch.Tensor,
    labels: torch.Tensor,
    prototypes: torch.Tensor,
    metric,
    weights: LossWeights,
    detach_reconstruction: bool = False,
) -> LossBreakdown:
    """All four terms for one forward pass, combined by ``weights``.

    ``detach_reconstruction`` reports the reconstruction term at its value
    but severs it from the graph (used by the head-ablation protocol, which
    holds the reconstruction objective constant).
    """
    rec = rec_loss(batch_x, forward_pass.reconstruction, metric)
    if detach_reconstruction:
        rec = rec.detach()
    parts = LossBreakdown(
        cls=cls_loss(forward_pass.logits, labels),
        kl=kl_loss(
            forward_pass.latent, labels, prototypes, forward_pass.distances.j_star
        ),
        rec=rec,
        orth=orth_loss(prototypes),
        total=0.0,
    )
    return total_loss(parts, weights)
