"""Out-of-distribution scoring and evaluation.

Score kinds
-----------
Distance-based: ``msp`` (one minus the maximum softmax probability),
``dist_ratio`` (distance mass of the predicted class over the total
distance mass), ``min_dist`` (distance to the globally nearest prototype).
Reconstruction-based: ``mse`` and ``perceptual`` errors of the
mean-latent reconstruction.

Every emitted score is oriented "larger = more out-of-distribution". Raw
scores are normalized against percentiles of their distribution on the
in-distribution validation split, clamped below at zero, and one distance
score plus one reconstruction score are fused with an L2 or Linf norm.
AUROC is computed rank-based with ties counted half.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

from .datasets import ImageBatch
from .errors import ConfigError, EvaluationError, NormalizerError, StateError
from .model import DistanceTable, PrototypeVAE

SCORE_KINDS = ("msp", "dist_ratio", "min_dist", "mse", "perceptual")
DISTANCE_SCORES = ("msp", "dist_ratio", "min_dist")
RECON_SCORES = ("mse", "perceptual")


# -- raw score definitions --------------------------------------------------


def msp_score(probs) -> np.ndarray:
    """1 - max_k P(y=k|x): low for confidently classified samples."""
    p = np.asarray(probs, dtype=np.float64)
    return 1.0 - p.max(axis=-1)


def _distances_of(table) -> np.ndarray:
    if isinstance(table, DistanceTable):
        return table.distances.detach().cpu().numpy().astype(np.float64)
    return np.asarray(table, dtype=np.float64)


def dist_ratio_score(table, predicted: Optional[np.ndarray] = None) -> np.ndarray:
    """Distance mass of the predicted class over the total distance mass.

    The predicted class is the argmax of the class probabilities; because
    probabilities decrease strictly with the per-class nearest distance,
    that argmax equals the argmin of ``d_star`` for any prototype count,
    which is what is computed here when ``predicted`` is not given.
    Degenerate tables (all distances zero) score 1/K.
    """
    d = _distances_of(table)  # (N, K, J)
    n, k, _ = d.shape
    if predicted is None:
        predicted = np.argmin(d.min(axis=2), axis=1)
    num = d[np.arange(n), predicted].sum(axis=1)
    den = d.sum(axis=(1, 2))
    out = np.full(n, 1.0 / k)
    nonzero = den > 0
    out[nonzero] = num[nonzero] / den[nonzero]
    return out


def min_dist_score(table) -> np.ndarray:
    """Distance to the globally nearest prototype."""
    d = _distances_of(table)
    return d.min(axis=(1, 2))


@torch.no_grad()
def recon_score(x: torch.Tensor, model: PrototypeVAE, metric) -> np.ndarray:
    """Reconstruction error of the mean-latent round trip, per sample."""
    latent = model.encode(x)
    x_hat = model.decode(latent.mu)
    return metric.per_sample(x, x_hat).cpu().numpy().astype(np.float64)


# -- normalization and fusion -------------------------------------------------


@dataclass
class ScoreNormalizer:
    """Affine score normalizer fitted from validation percentiles."""

    kind: str
    lower: float
    upper: float
    percentiles: tuple[float, float] = (1.0, 99.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "lower": self.lower, "upper": self.upper,
            "percentiles": list(self.percentiles),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreNormalizer":
        return cls(
            kind=d["kind"], lower=float(d["lower"]), upper=float(d["upper"]),
            percentiles=tuple(d.get("percentiles", (1.0, 99.0))),
        )


def fit_normalizer(
    validation_scores,
    percentiles: tuple[float, float] = (1.0, 99.0),
    kind: str = "",
) -> ScoreNormalizer:
    """Fit lower/upper from empirical percentiles (linear interpolation).

    Requires at least 20 validation scores and a non-degenerate spread
    between the two percentiles.
    """
    scores = np.asarray(validation_scores, dtype=np.float64).ravel()
    lo_p, hi_p = percentiles
    if not 0.0 <= lo_p < hi_p <= 100.0:
        raise NormalizerError(f"bad percentile pair {percentiles}")
    if scores.size < 20:
        raise NormalizerError(
            f"need >= 20 validation scores to fit a normalizer, got {scores.size}"
        )
    lower, upper = np.percentile(scores, [lo_p, hi_p])
    if not upper > lower:
        raise NormalizerError(
            f"degenerate score distribution for {kind or 'score'}: "
            f"percentiles {lo_p}/{hi_p} both at {lower}"
        )
    return ScoreNormalizer(kind=kind, lower=float(lower), upper=float(upper),
                           percentiles=(float(lo_p), float(hi_p)))


def normalize_score(raw, normalizer: ScoreNormalizer):
    """(raw - lower) / (upper - lower), clamped below at 0.

    The clamp keeps strongly in-distribution samples from inflating the
    fused Lp magnitude; values above 1 stay unbounded.
    """
    raw = np.asarray(raw, dtype=np.float64)
    scaled = (raw - normalizer.lower) / (normalizer.upper - normalizer.lower)
    return np.maximum(scaled, 0.0)


def fuse_scores(s1, s2, p):
    """Lp fusion of two normalized, nonnegative scores (p = 2 or inf)."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if math.isinf(p):
        return np.maximum(s1, s2)
    if p == 2:
        return np.sqrt(s1 * s1 + s2 * s2)
    raise ConfigError(f"fusion degree must be 2 or inf, got {p!r}")


# -- AUROC ---------------------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    before = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg = before + (counts + 1) / 2.0
    return avg[inverse]


def auroc(id_scores, ood_scores) -> float:
    """P(ood > id) + 0.5 * P(ood = id), via the rank-sum statistic."""
    id_s = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_s = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_s.size == 0 or ood_s.size == 0:
        raise EvaluationError("auroc needs non-empty ID and OOD score sets")
    ranks = _average_ranks(np.concatenate([id_s, ood_s]))
    m = ood_s.size
    u = ranks[id_s.size:].sum() - m * (m + 1) / 2.0
    return float(u / (id_s.size * m))


# -- pipeline -------------------------------------------------------------------


@dataclass
class FusionConfig:
    """Which distance score and reconstruction score to fuse, and how."""

    distance_score: str = "dist_ratio"
    recon_score: str = "perceptual"
    p: float = math.inf

    def validate(self) -> None:
        if self.distance_score not in DISTANCE_SCORES:
            raise ConfigError(
                f"fusion.distance_score must be one of {DISTANCE_SCORES}"
            )
        if self.recon_score not in RECON_SCORES:
            raise ConfigError(f"fusion.recon_score must be one of {RECON_SCORES}")
        if not (self.p == 2 or math.isinf(self.p)):
            raise ConfigError("fusion.p must be 2 or inf")

    def to_dict(self) -> dict:
        return {
            "distance_score": self.distance_score,
            "recon_score": self.recon_score,
            "p": "inf" if math.isinf(self.p) else self.p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        p = d.get("p", "inf")
        cfg = cls(
            distance_score=d.get("distance_score", "dist_ratio"),
            recon_score=d.get("recon_score", "perceptual"),
            p=math.inf if str(p) == "inf" else float(p),
        )
        cfg.validate()
        return cfg


@dataclass
class ScoreRecord:
    """Raw/normalized/fused scores of one sample."""

    sample_id: int
    raw: dict[str, float]
    normalized: dict[str, float]
    fused: float
    is_ood: Optional[bool] = None


@dataclass
class BatchScores:
    """Raw scores, predictions, and labels accumulated over batches."""

    raw: dict[str, np.ndarray]
    predicted: np.ndarray
    labels: Optional[np.ndarray]
    ids: np.ndarray


class ScorePipeline:
    """Raw scoring, normalizer fitting, and fusion behind one object.

    Construct with a fusion config and the two reconstruction metrics, fit
    on in-distribution validation batches, then score test batches. All
    five score kinds get normalizers so any fusion choice works after one
    fitting pass.
    """

    def __init__(
        self,
        fusion: FusionConfig,
        metrics: dict,
        percentiles: tuple[float, float] = (1.0, 99.0),
    ):
        fusion.validate()
        self.fusion = fusion
        self.metrics = metrics
        self.percentiles = tuple(percentiles)
        self.normalizers: dict[str, ScoreNormalizer] = {}

    @property
    def fitted(self) -> bool:
        return bool(self.normalizers)

    @torch.no_grad()
    def compute_raw(self, model: PrototypeVAE, batches: Iterable[ImageBatch]) -> BatchScores:
        raw: dict[str, list[np.ndarray]] = {kind: [] for kind in SCORE_KINDS}
        predicted, labels, ids = [], [], []
        have_labels = True
        for batch in batches:
            x = torch.from_numpy(np.ascontiguousarray(batch.data))
            pred = model.predict(x)
            probs = pred.probs.cpu().numpy()
            raw["msp"].append(msp_score(probs))
            raw["dist_ratio"].append(
                dist_ratio_score(pred.distances, predicted=np.argmax(probs, axis=1))
            )
            raw["min_dist"].append(min_dist_score(pred.distances))
            x_hat = model.decode(pred.latent.mu)
            for kind in RECON_SCORES:
                err = self.metrics[kind].per_sample(x, x_hat)
                raw[kind].append(err.cpu().numpy().astype(np.float64))
            predicted.append(pred.classes.cpu().numpy())
            ids.append(np.asarray(batch.indices))
            if batch.labels is None:
                have_labels = False
            else:
                labels.append(np.asarray(batch.labels))
        if not predicted:
            raise EvaluationError("no batches to score")
        return BatchScores(
            raw={k: np.concatenate(v) for k, v in raw.items()},
            predicted=np.concatenate(predicted),
            labels=np.concatenate(labels) if have_labels and labels else None,
            ids=np.concatenate(ids),
        )

    def fit(self, model: PrototypeVAE, validation_batches: Iterable[ImageBatch]) -> None:
        """Fit normalizers for every score kind on ID validation data."""
        scores = self.compute_raw(model, validation_batches)
        self.normalizers = {
            kind: fit_normalizer(scores.raw[kind], self.percentiles, kind=kind)
            for kind in SCORE_KINDS
        }

    def _require_fitted(self) -> None:
        if not self.fitted:
            raise StateError(
                "score normalizers are not fitted; run fit() on ID validation data "
                "(the training entry point does this automatically)"
            )

    def fused_from_raw(self, raw: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Normalize the two configured kinds and fuse; returns
        (normalized distance, normalized reconstruction, fused)."""
        self._require_fitted()
        nd = normalize_score(
            raw[self.fusion.distance_score], self.normalizers[self.fusion.distance_score]
        )
        nr = normalize_score(
            raw[self.fusion.recon_score], self.normalizers[self.fusion.recon_score]
        )
        return nd, nr, fuse_scores(nd, nr, self.fusion.p)

    def score(
        self,
        model: PrototypeVAE,
        batches: Iterable[ImageBatch],
        is_ood: Optional[bool] = None,
    ) -> list[ScoreRecord]:
        self._require_fitted()
        scores = self.compute_raw(model, batches)
        return _records_from(scores, self, is_ood=is_ood)

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion.to_dict(),
            "percentiles": list(self.percentiles),
            "normalizers": {k: n.to_dict() for k, n in self.normalizers.items()},
        }

    def restore_normalizers(self, state: dict) -> None:
        self.normalizers = {
            k: ScoreNormalizer.from_dict(d) for k, d in state.items()
        }


# -- benchmark -----------------------------------------------------------------


@dataclass
class EvalReport:
    """AUROC/accuracy summary of one ID-vs-OOD evaluation."""

    auroc: float
    id_accuracy: float
    score_aurocs: dict[str, float]
    fusion: dict
    counts: dict[str, int]
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "id_accuracy": self.id_accuracy,
            "score_aurocs": self.score_aurocs,
            "fusion": self.fusion,
            "counts": self.counts,
            "fingerprint": self.fingerprint,
        }

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def _pipeline_fingerprint(model: PrototypeVAE, pipeline: ScorePipeline) -> str:
    blob = json.dumps(
        {"model": model.config.to_dict(), "pipeline": pipeline.to_dict()},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_benchmark(
    model: PrototypeVAE,
    pipeline: ScorePipeline,
    id_batches: Iterable[ImageBatch],
    ood_batches: Iterable[ImageBatch],
) -> tuple[EvalReport, list[ScoreRecord]]:
    """Score ID test and OOD sets; report fused and per-kind AUROCs plus
    ID accuracy. Per-kind AUROCs are computed on raw scores (AUROC is
    invariant under the affine normalization)."""
    pipeline._require_fitted()
    id_scores = pipeline.compute_raw(model, id_batches)
    ood_scores = pipeline.compute_raw(model, ood_batches)

    _, _, id_fused = pipeline.fused_from_raw(id_scores.raw)
    _, _, ood_fused = pipeline.fused_from_raw(ood_scores.raw)

    per_kind = {
        kind: auroc(id_scores.raw[kind], ood_scores.raw[kind])
        for kind in SCORE_KINDS
    }
    if id_scores.labels is None:
        raise EvaluationError("ID test batches must carry labels for accuracy")
    accuracy = float((id_scores.predicted == id_scores.labels).mean())

    report = EvalReport(
        auroc=auroc(id_fused, ood_fused),
        id_accuracy=accuracy,
        score_aurocs=per_kind,
        fusion=pipeline.fusion.to_dict(),
        counts={"id": int(id_fused.size), "ood": int(ood_fused.size)},
        fingerprint=_pipeline_fingerprint(model, pipeline),
    )

    records = _records_from(id_scores, pipeline, is_ood=False)
    records += _records_from(ood_scores, pipeline, is_ood=True)
    return report, records


def _records_from(
    scores: BatchScores, pipeline: ScorePipeline, is_ood: Optional[bool]
) -> list[ScoreRecord]:
    nd, nr, fused = pipeline.fused_from_raw(scores.raw)
    return [
        ScoreRecord(
            sample_id=int(scores.ids[i]),
            raw={k: float(scores.raw[k][i]) for k in SCORE_KINDS},
            normalized={
                pipeline.fusion.distance_score: float(nd[i]),
                pipeline.fusion.recon_score: float(nr[i]),
            },
            fused=float(fused[i]),
            is_ood=is_ood,
        )
        for i in range(len(fused))
    ]


def write_score_csv(records: list[ScoreRecord], path: Union[str, Path]) -> None:
    """Per-sample score table: id, raw scores, normalized scores, fused, is_ood.

    Floats are written with ``repr`` so re-parsing reproduces them exactly.
    """
    if not records:
        raise EvaluationError("no score records to write")
    norm_kinds = sorted(records[0].normalized)
    header = (
        ["id"]
        + [f"raw_{k}" for k in SCORE_KINDS]
        + [f"norm_{k}" for k in norm_kinds]
        + ["fused", "is_ood"]
    )
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in records:
            writer.writerow(
                [r.sample_id]
                + [repr(r.raw[k]) for k in SCORE_KINDS]
                + [repr(r.normalized[k]) for k in norm_kinds]
                + [repr(r.fused), int(bool(r.is_ood))]
            )
