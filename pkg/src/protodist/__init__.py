"""Prototype-distance variational autoencoder for explainable
out-of-distribution detection.

A VAE learns a latent space in which each class is represented by learnable
prototype vectors; classification is by distance to the nearest prototype
through a generalized-Gaussian logit head, and OOD detection fuses a
distance-based score with a reconstruction error after percentile
normalization.
"""

from .datasets import (
    DatasetManifest,
    ImageBatch,
    LoadedDataset,
    ManifestEntry,
    assign_splits,
    carve_validation,
    load_dataset_spec,
    load_idx,
    load_manifest,
    make_batches,
    read_manifest_file,
    save_manifest,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    EvaluationError,
    FormatError,
    IngestionError,
    MigrationError,
    NormalizerError,
    ProtodistError,
    ShapeError,
    StateError,
    TrainingDivergedError,
)
from .model import (
    DistanceTable,
    LatentDistribution,
    ModelConfig,
    PrototypeVAE,
    class_logits,
    class_probabilities,
    init_model,
    prototype_distances,
    reparameterize,
    sample_latent,
    similarity_logits,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    cls_loss,
    cls_loss_from_probs,
    compute_losses,
    kl_loss,
    orth_loss,
    rec_loss,
    total_loss,
)
from .ood import (
    EvalReport,
    FusionConfig,
    ScoreNormalizer,
    ScorePipeline,
    ScoreRecord,
    auroc,
    dist_ratio_score,
    fit_normalizer,
    fuse_scores,
    min_dist_score,
    msp_score,
    normalize_score,
    recon_score,
    run_benchmark,
    write_score_csv,
)
from .perceptual import (
    MseMetric,
    PerceptualMetric,
    make_metric,
    mse_error,
    perceptual_error,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
