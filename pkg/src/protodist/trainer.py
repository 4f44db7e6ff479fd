"""End-to-end training: sampled-latent forward pass, joint optimizer step
over encoder, decoder, and prototypes, validation monitoring, score
normalizer fitting, and bit-exact checkpoint persistence.

A checkpoint is a tensor container directory (``tensorstore`` format)
holding the model parameters, optimizer moments, and the frozen perceptual
extractor, plus a JSON meta block with configs, epoch counter, RNG state,
manifest fingerprints, per-epoch history, and the fitted normalizers.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from .datasets import LoadedDataset, make_batches
from .errors import ConfigError, StateError, TrainingDivergedError
from .model import ModelConfig, PrototypeVAE, init_model
from .objectives import LossBreakdown, LossWeights, compute_losses
from .ood import FusionConfig, ScorePipeline
from .perceptual import MseMetric, PerceptualMetric
from . import tensorstore

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
CHECKPOINT_KIND = "protodist-checkpoint"


@dataclass
class TrainConfig:
    """Training-loop hyperparameters and bookkeeping knobs."""

    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=LossWeights)
    metric: str = "perceptual"
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    eval_every: int = 1
    grad_clip: float = 0.0
    ablate_reconstruction: bool = False
    percentile_lower: float = 1.0
    percentile_upper: float = 99.0
    perceptual_weights: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}")
        if self.metric not in ("mse", "perceptual"):
            raise ConfigError("train.metric must be 'mse' or 'perceptual'")
        self.weights.validate()

    def to_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "metric": self.metric,
            "seed": self.seed,
            "checkpoint_dir": self.checkpoint_dir,
            "eval_every": self.eval_every,
            "grad_clip": self.grad_clip,
            "ablate_reconstruction": self.ablate_reconstruction,
            "percentile_lower": self.percentile_lower,
            "percentile_upper": self.percentile_upper,
            "perceptual_weights": self.perceptual_weights,
        }
        d.update(self.weights.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        weights = LossWeights.from_dict(
            {k: d.get(k, 1.0) for k in ("w_cls", "w_kl", "w_rec", "w_orth")}
        )
        cfg = cls(
            epochs=int(d.get("epochs", 30)),
            batch_size=int(d.get("batch_size", 128)),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            optimizer=str(d.get("optimizer", "adam")),
            weights=weights,
            metric=str(d.get("metric", "perceptual")),
            seed=int(d.get("seed", 0)),
            checkpoint_dir=d.get("checkpoint_dir"),
            eval_every=int(d.get("eval_every", 1)),
            grad_clip=float(d.get("grad_clip", 0.0)),
            ablate_reconstruction=bool(d.get("ablate_reconstruction", False)),
            percentile_lower=float(d.get("percentile_lower", 1.0)),
            percentile_upper=float(d.get("percentile_upper", 99.0)),
            perceptual_weights=d.get("perceptual_weights"),
        )
        cfg.validate()
        return cfg


@dataclass
class Checkpoint:
    """Everything needed to reproduce a trained model and its pipeline."""

    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict[str, np.ndarray]
    epoch: int
    rng_state: bytes
    manifest_fingerprints: dict[str, str]
    pipeline_state: dict
    optimizer_state: dict
    history: list[dict]

    def build_model(self) -> PrototypeVAE:
        model = PrototypeVAE(self.model_config)
        state = {}
        for name, param in model.named_parameters():
            key = f"model.{name}"
            if key not in self.tensors:
                raise StateError(f"checkpoint misses model tensor {key!r}")
            state[name] = torch.from_numpy(self.tensors[key].copy())
        model.load_state_dict(state)
        return model

    def build_metrics(self) -> dict:
        weights = {
            k[len("perceptual."):]: v
            for k, v in self.tensors.items()
            if k.startswith("perceptual.")
        }
        info = self.pipeline_state.get("perceptual", {})
        metric = PerceptualMetric(
            stage_widths=info.get("stage_widths", (16, 32, 64)),
            seed=int(info.get("seed", 0)),
            weights=weights or None,
        )
        return {"mse": MseMetric(), "perceptual": metric}

    def build_pipeline(self, fusion: Optional[FusionConfig] = None) -> ScorePipeline:
        state = self.pipeline_state
        fusion = fusion or FusionConfig.from_dict(state.get("fusion", {}))
        pipeline = ScorePipeline(
            fusion=fusion,
            metrics=self.build_metrics(),
            percentiles=tuple(state.get("percentiles", (1.0, 99.0))),
        )
        if state.get("normalizers"):
            pipeline.restore_normalizers(state["normalizers"])
        return pipeline


def build_optimizer(model: PrototypeVAE, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def train_step(
    model: PrototypeVAE,
    optimizer: torch.optim.Optimizer,
    x: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
    metric,
    generator: torch.Generator,
    grad_clip: float = 0.0,
    ablate_reconstruction: bool = False,
) -> LossBreakdown:
    """One sampled-latent forward pass and one joint optimizer update.

    Raises TrainingDivergedError with the loss breakdown when the total
    goes non-finite.
    """
    noise = torch.randn(
        (x.shape[0], model.config.latent_dim), generator=generator, dtype=x.dtype
    )
    fp = model(x, noise=noise)
    breakdown = compute_losses(
        fp, x, labels, model.prototypes, metric, weights,
        detach_reconstruction=ablate_reconstruction,
    )
    if not torch.isfinite(breakdown.total):
        raise TrainingDivergedError(
            f"non-finite training loss: {breakdown.as_floats()}"
        )
    optimizer.zero_grad()
    breakdown.total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return LossBreakdown(**breakdown.as_floats())


@torch.no_grad()
def _validation_losses(
    model: PrototypeVAE, data: LoadedDataset, config: TrainConfig, metric
) -> dict[str, float]:
    """Mean validation losses on the mean-latent path; touches no state."""
    sums = {k: 0.0 for k in ("cls", "kl", "rec", "orth", "total")}
    count = 0
    for batch in make_batches(data, "val", config.batch_size):
        x = torch.from_numpy(np.ascontiguousarray(batch.data))
        labels = torch.from_numpy(np.asarray(batch.labels))
        fp = model(x)
        bd = compute_losses(fp, x, labels, model.prototypes, metric, config.weights)
        n = x.shape[0]
        for k, v in bd.as_floats().items():
            sums[k] += v * n
        count += n
    return {f"val_{k}": v / max(count, 1) for k, v in sums.items()}


def _shuffle_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def make_training_metric(config: TrainConfig):
    if config.metric == "mse":
        return MseMetric()
    if config.perceptual_weights:
        return PerceptualMetric.from_checkpoint(config.perceptual_weights)
    return PerceptualMetric()


def fit(
    data: LoadedDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    fusion: Optional[FusionConfig] = None,
    resume_from: Optional[Checkpoint] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> Checkpoint:
    """Train for the configured epochs, then fit score normalizers on the
    ID validation split and assemble a checkpoint.

    ``resume_from`` continues the epoch counter, optimizer moments, and RNG
    stream of an earlier checkpoint.
    """
    model_config.validate()
    train_config.validate()
    if len(data.manifest.split_indices("train")) == 0:
        raise ConfigError("training split is empty")
    if len(data.manifest.split_indices("val")) == 0:
        raise ConfigError(
            "validation split is empty; score normalizers need validation data"
        )

    metric = make_training_metric(train_config)
    generator = torch.Generator()
    if resume_from is not None:
        model = resume_from.build_model()
        optimizer = build_optimizer(model, train_config)
        _restore_optimizer(optimizer, model, resume_from)
        generator.set_state(
            torch.frombuffer(bytearray(resume_from.rng_state), dtype=torch.uint8).clone()
        )
        start_epoch = resume_from.epoch
        history = list(resume_from.history)
        if train_config.metric == "perceptual" and not train_config.perceptual_weights:
            metric = resume_from.build_metrics()["perceptual"]
    else:
        model = init_model(model_config)
        optimizer = build_optimizer(model, train_config)
        generator.manual_seed(train_config.seed)
        start_epoch = 0
        history = []

    if start_epoch >= train_config.epochs:
        raise ConfigError(
            f"resume epoch {start_epoch} is already past train.epochs={train_config.epochs}"
        )

    for epoch in range(start_epoch, train_config.epochs):
        sums = {k: 0.0 for k in ("cls", "kl", "rec", "orth", "total")}
        seen = 0
        for batch in make_batches(
            data, "train", train_config.batch_size,
            shuffle_seed=_shuffle_seed(train_config.seed, epoch),
        ):
            x = torch.from_numpy(np.ascontiguousarray(batch.data))
            labels = torch.from_numpy(np.asarray(batch.labels))
            bd = train_step(
                model, optimizer, x, labels, train_config.weights, metric,
                generator, grad_clip=train_config.grad_clip,
                ablate_reconstruction=train_config.ablate_reconstruction,
            )
            n = x.shape[0]
            for k, v in bd.as_floats().items():
                sums[k] += v * n
            seen += n
        record = {"epoch": epoch + 1}
        record.update({k: v / seen for k, v in sums.items()})
        if train_config.eval_every and (epoch + 1) % train_config.eval_every == 0:
            record.update(_validation_losses(model, data, train_config, metric))
        history.append(record)
        if log_fn is not None:
            log_fn(
                "epoch {epoch}: total {total:.4f} (cls {cls:.4f}, kl {kl:.4f}, "
                "rec {rec:.4f}, orth {orth:.4f})".format(**record)
            )

    metrics = {"mse": MseMetric(), "perceptual": metric if metric.kind == "perceptual" else PerceptualMetric()}
    pipeline = ScorePipeline(
        fusion=fusion or FusionConfig(),
        metrics=metrics,
        percentiles=(train_config.percentile_lower, train_config.percentile_upper),
    )
    pipeline.fit(model, make_batches(data, "val", train_config.batch_size))

    checkpoint = make_checkpoint(
        model, optimizer, model_config, train_config,
        epoch=train_config.epochs,
        rng_state=bytes(generator.get_state().numpy().tobytes()),
        manifest_fingerprints={"data": data.manifest.fingerprint()},
        pipeline=pipeline,
        history=history,
    )
    if train_config.checkpoint_dir:
        save_checkpoint(checkpoint, train_config.checkpoint_dir)
    return checkpoint


# -- persistence ----------------------------------------------------------------


def make_checkpoint(
    model: PrototypeVAE,
    optimizer: torch.optim.Optimizer,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: int,
    rng_state: bytes,
    manifest_fingerprints: dict[str, str],
    pipeline: ScorePipeline,
    history: list[dict],
) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    for name, param in model.named_parameters():
        tensors[f"model.{name}"] = param.detach().cpu().numpy().astype("<f4")
        state = optimizer.state.get(param, {})
        if "exp_avg" in state:
            tensors[f"optim.exp_avg.{name}"] = state["exp_avg"].cpu().numpy().astype("<f4")
            tensors[f"optim.exp_avg_sq.{name}"] = (
                state["exp_avg_sq"].cpu().numpy().astype("<f4")
            )
            steps[name] = int(state["step"])
    perceptual = pipeline.metrics.get("perceptual")
    perceptual_meta = {}
    if isinstance(perceptual, PerceptualMetric):
        for tname, arr in perceptual.state_tensors().items():
            tensors[f"perceptual.{tname}"] = arr
        perceptual_meta = {
            "stage_widths": list(perceptual.stage_widths),
            "seed": perceptual.seed,
        }
    pipeline_state = pipeline.to_dict()
    pipeline_state["perceptual"] = perceptual_meta
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        tensors=tensors,
        epoch=epoch,
        rng_state=rng_state,
        manifest_fingerprints=dict(manifest_fingerprints),
        pipeline_state=pipeline_state,
        optimizer_state={"kind": train_config.optimizer, "steps": steps},
        history=history,
    )


def _restore_optimizer(
    optimizer: torch.optim.Optimizer, model: PrototypeVAE, ckpt: Checkpoint
) -> None:
    steps = ckpt.optimizer_state.get("steps", {})
    for name, param in model.named_parameters():
        key = f"optim.exp_avg.{name}"
        if key not in ckpt.tensors:
            continue
        state = optimizer.state[param]
        state["step"] = torch.tensor(float(steps.get(name, 0)))
        state["exp_avg"] = torch.from_numpy(ckpt.tensors[key].copy())
        state["exp_avg_sq"] = torch.from_numpy(
            ckpt.tensors[f"optim.exp_avg_sq.{name}"].copy()
        )


def save_checkpoint(checkpoint: Checkpoint, directory: Union[str, Path]) -> None:
    """Write the checkpoint atomically as a tensor container directory."""
    meta = {
        "kind": CHECKPOINT_KIND,
        "epoch": checkpoint.epoch,
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "history": checkpoint.history,
        "rng_state_b64": base64.b64encode(checkpoint.rng_state).decode("ascii"),
        "manifest_fingerprints": checkpoint.manifest_fingerprints,
        "pipeline": checkpoint.pipeline_state,
        "optimizer": checkpoint.optimizer_state,
    }
    tensorstore.write_tensors(directory, checkpoint.tensors, meta)


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint directory; inverse of save_checkpoint."""
    tensors, meta = tensorstore.read_tensors(directory)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise StateError(f"{directory} is not a training checkpoint")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        tensors=tensors,
        epoch=int(meta["epoch"]),
        rng_state=base64.b64decode(meta["rng_state_b64"]),
        manifest_fingerprints=meta.get("manifest_fingerprints", {}),
        pipeline_state=meta.get("pipeline", {}),
        optimizer_state=meta.get("optimizer", {}),
        history=meta.get("history", []),
    )
