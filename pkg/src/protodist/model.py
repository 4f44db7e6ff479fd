"""Prototype-distance VAE: probabilistic encoder, subpixel-conv decoder,
a learnable prototype bank, and a distance-based classification head.

Classification is purely geometric: a latent vector is scored against each
class by its Euclidean distance to the nearest prototype of that class,
distances become logits through a generalized Gaussian
``l = -(d / alpha)**beta``, and a softmax turns logits into probabilities.
With ``beta >= 2`` the logit surface is flat at the prototype, so gradients
vanish as an embedding approaches its prototype: embeddings are pulled into
a bounded region around the prototypes without collapsing onto them. The
alternative "similarity" head (steep near the prototype) is kept for
ablation runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError

HEADS = ("enclosing", "similarity")

# Epsilon of the ablation similarity head log((d^2+1)/(d^2+eps)).
SIMILARITY_EPS = 1e-4


@dataclass
class ModelConfig:
    """Architecture and head hyperparameters.

    ``alpha`` is the width and ``beta`` the shape of the generalized
    Gaussian used for logits; ``beta >= 2`` is required for the enclosing
    behaviour (zero gradient at zero distance).
    """

    class_count: int = 10
    prototypes_per_class: int = 1
    latent_dim: int = 32
    alpha: float = 2.0
    beta: float = 2.0
    image_shape: tuple[int, int, int] = (1, 28, 28)
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256, 256)
    head: str = "enclosing"
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError("model.class_count must be >= 2")
        if self.prototypes_per_class < 1:
            raise ConfigError("model.prototypes_per_class must be >= 1")
        if self.latent_dim < 1:
            raise ConfigError("model.latent_dim must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("model.alpha must be > 0")
        if self.beta < 2:
            raise ConfigError("model.beta must be >= 2")
        if len(self.image_shape) != 3:
            raise ConfigError("model.image_shape must be (channels, height, width)")
        if len(self.encoder_widths) != 5:
            raise ConfigError("model.encoder_widths must list 5 stage widths")
        if self.head not in HEADS:
            raise ConfigError(f"model.head must be one of {HEADS}")

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "prototypes_per_class": self.prototypes_per_class,
            "latent_dim": self.latent_dim,
            "alpha": self.alpha,
            "beta": self.beta,
            "image_shape": list(self.image_shape),
            "encoder_widths": list(self.encoder_widths),
            "head": self.head,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            class_count=int(d["class_count"]),
            prototypes_per_class=int(d["prototypes_per_class"]),
            latent_dim=int(d["latent_dim"]),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
            image_shape=tuple(d["image_shape"]),
            encoder_widths=tuple(d["encoder_widths"]),
            head=str(d.get("head", "enclosing")),
            seed=int(d.get("seed", 0)),
        )
        cfg.validate()
        return cfg


@dataclass
class LatentDistribution:
    """Per-sample posterior: mean and log-variance, each (N, L)."""

    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class DistanceTable:
    """Distances to every prototype plus per-class nearest selections.

    ``distances[n, k, j]`` is the Euclidean distance of sample n to
    prototype j of class k; ``j_star[n, k]`` the index of the nearest
    prototype within class k (lowest index on ties) and ``d_star[n, k]``
    its distance. ``d_star_sq`` carries the squared distances so heads can
    stay differentiable at distance zero.
    """

    distances: torch.Tensor  # (N, K, J)
    j_star: torch.Tensor  # (N, K) long
    d_star: torch.Tensor  # (N, K)
    d_star_sq: torch.Tensor  # (N, K)


@dataclass
class ForwardPass:
    latent: LatentDistribution
    z: torch.Tensor
    reconstruction: torch.Tensor
    distances: DistanceTable
    logits: torch.Tensor


@dataclass
class Prediction:
    classes: torch.Tensor  # (N,) long
    probs: torch.Tensor  # (N, K)
    distances: DistanceTable
    latent: LatentDistribution


def sample_latent(
    dist: LatentDistribution, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Reparameterized draw z = mu + exp(log_var / 2) * eps, eps ~ N(0, I)."""
    eps = torch.randn(
        dist.mu.shape, generator=generator, dtype=dist.mu.dtype, device=dist.mu.device
    )
    return reparameterize(dist, eps)


def reparameterize(dist: LatentDistribution, eps: torch.Tensor) -> torch.Tensor:
    """Deterministic half of the reparameterization trick (noise supplied)."""
    return dist.mu + torch.exp(0.5 * dist.log_var) * eps


def prototype_distances(z: torch.Tensor, prototypes: torch.Tensor) -> DistanceTable:
    """Euclidean distances of each latent vector to every prototype.

    ``z`` is (N, L), ``prototypes`` (K, J, L). Distances are computed as
    sqrt(max(ssq, 0)) to keep round-off from going negative under the root.
    """
    if z.shape[-1] != prototypes.shape[-1]:
        raise ShapeError(
            f"latent dim {z.shape[-1]} != prototype dim {prototypes.shape[-1]}"
        )
    diff = z[:, None, None, :] - prototypes[None, :, :, :]  # (N, K, J, L)
    ssq = (diff * diff).sum(dim=-1)
    distances = torch.sqrt(torch.clamp(ssq, min=0.0))
    # numpy argmin guarantees the lowest index on ties; gather keeps the
    # selected distance differentiable.
    j_star = torch.from_numpy(
        np.argmin(distances.detach().cpu().numpy(), axis=2)
    ).to(z.device)
    d_star = distances.gather(2, j_star[:, :, None]).squeeze(2)
    d_star_sq = ssq.gather(2, j_star[:, :, None]).squeeze(2)
    return DistanceTable(
        distances=distances, j_star=j_star, d_star=d_star, d_star_sq=d_star_sq
    )


def class_logits(d_star, alpha: float, beta: float):
    """Generalized-Gaussian logits l = -(d/alpha)**beta from distances.

    Logits are <= 0 with equality exactly at distance 0. Accepts torch
    tensors or numpy arrays.
    """
    if isinstance(d_star, torch.Tensor):
        return -((d_star / alpha) ** beta)
    return -((np.asarray(d_star, dtype=np.float64) / alpha) ** beta)


def _logits_from_squared(d_star_sq: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    # (d^2 / alpha^2)^(beta/2) == (d/alpha)^beta for d >= 0, but keeps the
    # graph differentiable at d == 0 (no sqrt with zero argument).
    return -((d_star_sq / (alpha * alpha)) ** (beta / 2.0))


def similarity_logits(d_star, eps: float = SIMILARITY_EPS):
    """Ablation head: l = log((d^2 + 1) / (d^2 + eps)).

    Monotone decreasing in distance like the enclosing head, but with a
    steep slope near zero distance instead of a flat one.
    """
    if isinstance(d_star, torch.Tensor):
        sq = d_star * d_star
        return torch.log((sq + 1.0) / (sq + eps))
    sq = np.asarray(d_star, dtype=np.float64) ** 2
    return np.log((sq + 1.0) / (sq + eps))


def _similarity_logits_from_squared(d_star_sq: torch.Tensor, eps: float = SIMILARITY_EPS) -> torch.Tensor:
    return torch.log((d_star_sq + 1.0) / (d_star_sq + eps))


def class_probabilities(logits):
    """Softmax with max subtraction; rows sum to 1."""
    if isinstance(logits, torch.Tensor):
        shifted = logits - logits.max(dim=-1, keepdim=True).values
        e = torch.exp(shifted)
        return e / e.sum(dim=-1, keepdim=True)
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _conv_out(size: int) -> int:
    # Conv2d(kernel 3, stride 2, padding 1) spatial map.
    return (size - 1) // 2 + 1


class PrototypeVAE(nn.Module):
    """Five-stage convolutional VAE with a prototype bank.

    Encoder: five stride-2 convolutions, then a dense map to (mu, log_var).
    Decoder: dense map to a low-resolution feature plane, five convolutions
    with two subpixel (pixel-shuffle) upsamplings, sigmoid output in [0, 1].
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c, h, w = config.image_shape
        widths = config.encoder_widths

        layers: list[nn.Module] = []
        in_ch = c
        eh, ew = h, w
        for width in widths:
            layers += [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = width
            eh, ew = _conv_out(eh), _conv_out(ew)
        self.encoder = nn.Sequential(*layers)
        self._encoded_hw = (eh, ew)
        self.fc_latent = nn.Linear(widths[-1] * eh * ew, 2 * config.latent_dim)

        # Decoder feature plane starts at ceil(H/4) x ceil(W/4) and is
        # upsampled twice by pixel shuffle; any overshoot is cropped.
        dh, dw = -(-h // 4), -(-w // 4)
        self._decode_hw = (dh, dw)
        d0, d1, d2, d3 = widths[3], widths[3], widths[2], widths[1]
        d4 = widths[0]
        self.fc_decode = nn.Linear(config.latent_dim, d0 * dh * dw)
        self.decoder = nn.Sequential(
            nn.Conv2d(d0, d1, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(d1, d2 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.ReLU(),
            nn.Conv2d(d2, d3, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(d3, d4 * 4, 3, padding=1),
            nn.PixelShuffle(2),
            nn.ReLU(),
            nn.Conv2d(d4, c, 3, padding=1),
            nn.Sigmoid(),
        )
        self._decode_channels = d0

        self.prototypes = nn.Parameter(
            torch.zeros(
                config.class_count, config.prototypes_per_class, config.latent_dim
            )
        )

    # -- parameter groups -------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters split into encoder / decoder / prototypes."""
        groups: dict[str, list[tuple[str, nn.Parameter]]] = {
            "psi": [],
            "theta": [],
            "prototypes": [],
        }
        for name, p in self.named_parameters():
            if name.startswith(("encoder", "fc_latent")):
                groups["psi"].append((name, p))
            elif name.startswith(("decoder", "fc_decode")):
                groups["theta"].append((name, p))
            else:
                groups["prototypes"].append((name, p))
        return groups

    # -- forward pieces ----------------------------------------------------

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        expected = self.config.image_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(expected):
            raise ShapeError(
                f"encode expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}"
            )
        feats = self.encoder(x).flatten(1)
        out = self.fc_latent(feats)
        mu, log_var = out.chunk(2, dim=1)
        return LatentDistribution(mu=mu, log_var=log_var)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(
                f"decode expects (N, {self.config.latent_dim}), got {tuple(z.shape)}"
            )
        dh, dw = self._decode_hw
        plane = self.fc_decode(z).view(-1, self._decode_channels, dh, dw)
        out = self.decoder(plane)
        _, h, w = self.config.image_shape
        return out[:, :, :h, :w]

    def distance_table(self, z: torch.Tensor) -> DistanceTable:
        return prototype_distances(z, self.prototypes)

    def head_logits(self, table: DistanceTable) -> torch.Tensor:
        if self.config.head == "similarity":
            return _similarity_logits_from_squared(table.d_star_sq)
        return _logits_from_squared(table.d_star_sq, self.config.alpha, self.config.beta)

    def forward(self, x: torch.Tensor, noise: Optional[torch.Tensor] = None) -> ForwardPass:
        """Full pass; ``noise`` supplies the reparameterization draw.

        With ``noise=None`` the latent mean is used (inference path).
        """
        latent = self.encode(x)
        z = latent.mu if noise is None else reparameterize(latent, noise)
        reconstruction = self.decode(z)
        table = self.distance_table(z)
        logits = self.head_logits(table)
        return ForwardPass(
            latent=latent, z=z, reconstruction=reconstruction,
            distances=table, logits=logits,
        )

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> Prediction:
        """Inference: z = mu, class = argmax probability.

        The argmax over probabilities equals the argmin over per-class
        nearest distances (both heads are strictly decreasing in distance);
        ties resolve to the lowest class index.
        """
        latent = self.encode(x)
        table = self.distance_table(latent.mu)
        probs = class_probabilities(self.head_logits(table))
        classes = torch.from_numpy(
            np.argmax(probs.cpu().numpy(), axis=1)
        ).to(torch.long)
        return Prediction(classes=classes, probs=probs, distances=table, latent=latent)


def _init_linear_or_conv(m: nn.Module, generator: torch.Generator) -> None:
    # Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fan_in = nn.init._calculate_correct_fan(m.weight, "fan_in")
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        m.weight.uniform_(-bound, bound, generator=generator)
        if m.bias is not None:
            m.bias.uniform_(-bound, bound, generator=generator)


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> PrototypeVAE:
    """Build a model with parameters drawn deterministically from the seed.

    Conv/linear weights use fan-in-scaled uniform init; prototypes are
    standard normal, matching the unit-variance latent prior.
    """
    config.validate()
    model = PrototypeVAE(config).to(dtype)
    generator = torch.Generator().manual_seed(config.seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            _init_linear_or_conv(m, generator)
    with torch.no_grad():
        model.prototypes.normal_(0.0, 1.0, generator=generator)
    return model
