"""Reconstruction error metrics: pixel MSE and a deep perceptual distance.

The perceptual distance follows the LPIPS recipe: run both images through a
fixed convolutional feature extractor, unit-normalize each feature map
along the channel axis, take the channel-weighted squared difference,
average spatially, and sum over layers.

Calibrated extractor weights can be loaded from a tensor container (see
``tensorstore``). When none are supplied, a fixed-seed random-weight
three-stage extractor is used instead; random features preserve enough
image structure for a usable, fully self-contained approximation, and the
normalization pipeline is identical either way.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError
from . import tensorstore

_NORM_EPS = 1e-10

METRIC_KINDS = ("mse", "perceptual")


def _check_pair(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() != 4:
        raise ShapeError(f"expected NCHW inputs, got {tuple(x.shape)}")


def mse_error(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample mean of squared pixel differences over (C, H, W)."""
    _check_pair(x, x_hat)
    return ((x - x_hat) ** 2).flatten(1).mean(dim=1)


class MseMetric:
    """Pixel MSE wrapped in the common metric interface."""

    kind = "mse"

    def per_sample(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        return mse_error(x, x_hat)


class PerceptualMetric:
    """LPIPS-style feature-space distance with a frozen extractor.

    Three convolution stages (3x3, stride 1) separated by 2x2 average
    pooling; features are tapped after each ReLU. ``channel_weights`` holds
    one nonnegative weight per feature channel and layer (uniform by
    default, which is the uncalibrated fallback).
    """

    kind = "perceptual"

    def __init__(
        self,
        stage_widths: Sequence[int] = (16, 32, 64),
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        weights: Optional[dict[str, np.ndarray]] = None,
    ):
        self.stage_widths = tuple(int(w) for w in stage_widths)
        self.seed = int(seed)
        self.convs: list[nn.Conv2d] = []
        in_ch = 3
        for w in self.stage_widths:
            conv = nn.Conv2d(in_ch, w, 3, padding=1).to(dtype)
            conv.requires_grad_(False)
            self.convs.append(conv)
            in_ch = w
        self.channel_weights: list[torch.Tensor] = [
            torch.ones(w, dtype=dtype) for w in self.stage_widths
        ]
        if weights is None:
            self._random_init(dtype)
        else:
            self._load_weights(weights, dtype)

    def _random_init(self, dtype: torch.dtype) -> None:
        g = torch.Generator().manual_seed(self.seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                std = (2.0 / fan_in) ** 0.5
                w32 = torch.empty(conv.weight.shape).normal_(0.0, std, generator=g)
                conv.weight.copy_(w32.to(dtype))
                conv.bias.zero_()

    def _load_weights(self, weights: dict[str, np.ndarray], dtype: torch.dtype) -> None:
        with torch.no_grad():
            for i, conv in enumerate(self.convs):
                for attr in ("weight", "bias"):
                    key = f"stage{i}.{attr}"
                    if key not in weights:
                        raise ConfigError(f"perceptual weights missing tensor {key!r}")
                    arr = torch.from_numpy(np.asarray(weights[key])).to(dtype)
                    getattr(conv, attr).copy_(arr)
                wkey = f"stage{i}.channel_weights"
                if wkey in weights:
                    cw = torch.from_numpy(np.asarray(weights[wkey])).to(dtype)
                    if (cw < 0).any():
                        raise ConfigError(f"{wkey} must be nonnegative")
                    self.channel_weights[i] = cw

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, conv in enumerate(self.convs):
            out[f"stage{i}.weight"] = conv.weight.detach().cpu().numpy()
            out[f"stage{i}.bias"] = conv.bias.detach().cpu().numpy()
            out[f"stage{i}.channel_weights"] = self.channel_weights[i].cpu().numpy()
        return out

    def save(self, directory: Union[str, Path]) -> None:
        tensorstore.write_tensors(
            directory,
            self.state_tensors(),
            {"perceptual": {"stage_widths": list(self.stage_widths), "seed": self.seed}},
        )

    @classmethod
    def from_checkpoint(
        cls, directory: Union[str, Path], dtype: torch.dtype = torch.float32
    ) -> "PerceptualMetric":
        tensors, meta = tensorstore.read_tensors(directory)
        info = meta.get("perceptual", {})
        widths = info.get(
            "stage_widths", [tensors[f"stage{i}.weight"].shape[0] for i in range(3)]
        )
        return cls(
            stage_widths=widths,
            seed=int(info.get("seed", 0)),
            dtype=dtype,
            weights=tensors,
        )

    # -- evaluation ----------------------------------------------------------

    def _expand(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 3:
            return x
        if x.shape[1] == 1:
            return x.expand(-1, 3, -1, -1)
        raise ConfigError(
            f"perceptual metric expects 1 or 3 channels, got {x.shape[1]}"
        )

    def _features(self, x: torch.Tensor) -> list[torch.Tensor]:
        # Inputs in [0, 1] are shifted to the extractor range [-1, 1].
        h = self._expand(x) * 2.0 - 1.0
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    @staticmethod
    def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
        norm = torch.sqrt((f * f).sum(dim=1, keepdim=True) + _NORM_EPS)
        return f / norm

    def per_sample(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        """Distance per sample: sum over layers of channel-weighted squared
        differences of unit-normalized features, averaged spatially."""
        _check_pair(x, x_hat)
        feats_a = self._features(x)
        feats_b = self._features(x_hat)
        total = None
        for fa, fb, cw in zip(feats_a, feats_b, self.channel_weights):
            diff = self._unit_normalize(fa) - self._unit_normalize(fb)
            weighted = (cw.view(1, -1, 1, 1) * diff**2).sum(dim=1)
            layer = weighted.mean(dim=(1, 2))
            total = layer if total is None else total + layer
        return total


def perceptual_error(
    x: torch.Tensor, x_hat: torch.Tensor, metric: PerceptualMetric
) -> torch.Tensor:
    """Per-sample perceptual distance under the given extractor."""
    return metric.per_sample(x, x_hat)


def make_metric(
    kind: str,
    seed: int = 0,
    weights_dir: Optional[Union[str, Path]] = None,
    dtype: torch.dtype = torch.float32,
):
    """Build a reconstruction metric by kind ("mse" or "perceptual")."""
    if kind == "mse":
        return MseMetric()
    if kind == "perceptual":
        if weights_dir is not None:
            return PerceptualMetric.from_checkpoint(weights_dir, dtype=dtype)
        return PerceptualMetric(seed=seed, dtype=dtype)
    raise ConfigError(f"unknown reconstruction metric kind {kind!r}")
