"""Command-line entry points.

Subcommands: ``train``, ``eval-ood``, ``reconstruct``, ``project``,
``report``. Every config key is addressable on the command line as
``--section.key value``. Exit codes: 0 ok, 1 usage/config error,
2 data error, 3 state error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import config as cfgmod
from .datasets import LoadedDataset, load_dataset_spec, make_batches
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
)
from .ood import FusionConfig, run_benchmark, write_score_csv
from .trainer import fit, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_STATE = 3


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""


class UsageError(ProtodistError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we want 1
        raise UsageError(message)


def _exit_code_for(exc: ProtodistError) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (StateError, MigrationError)):
        return EXIT_STATE
    if isinstance(
        exc,
        (FormatError, ConsistencyError, IngestionError, ShapeError,
         EvaluationError, NormalizerError),
    ):
        return EXIT_DATA
    return EXIT_DATA


def _split_overrides(extras: list[str]) -> dict[str, str]:
    """Collect ``--section.key value`` pairs from leftover argv tokens."""
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not (token.startswith("--") and "." in token):
            raise UsageError(f"unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extras):
                raise UsageError(f"override {token} is missing a value")
            value = extras[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


# -- commands -----------------------------------------------------------------


def cmd_train(config_path: str, overrides: dict[str, str]) -> CommandResult:
    """Train a model per config file (+ overrides); writes checkpoint and log."""
    flat = cfgmod.apply_overrides(cfgmod.load_config_file(config_path), overrides)
    data_cfg = cfgmod.DataConfig.from_flat(flat)
    model_cfg = cfgmod.model_config_from(flat)
    train_cfg = cfgmod.train_config_from(flat)
    fusion = cfgmod.fusion_config_from(flat)
    if not train_cfg.checkpoint_dir:
        raise ConfigError("train.checkpoint_dir is required")

    data = cfgmod.load_training_data(data_cfg, base_dir=Path(config_path).parent)
    checkpoint = fit(
        data, model_cfg, train_cfg, fusion=fusion, log_fn=lambda s: print(s)
    )

    ckpt_dir = Path(train_cfg.checkpoint_dir)
    log_path = ckpt_dir / "training_log.csv"
    _write_history_csv(checkpoint.history, log_path)
    final = checkpoint.history[-1] if checkpoint.history else {}
    return CommandResult(
        exit_code=EXIT_OK,
        artifacts=[str(ckpt_dir), str(log_path)],
        summary=(
            f"trained {checkpoint.epoch} epochs; "
            f"final total loss {final.get('total', float('nan')):.6f}; "
            f"checkpoint at {ckpt_dir}"
        ),
    )


def _write_history_csv(history: list[dict], path: Path) -> None:
    keys: list[str] = []
    for record in history:
        for k in record:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(history)


def _load_eval_dataset(path: str, image_shape) -> LoadedDataset:
    return load_dataset_spec(path, image_shape=tuple(image_shape))


def cmd_eval_ood(
    checkpoint_dir: str,
    id_manifest: str,
    ood_manifest: str,
    out_dir: str,
    distance_score: Optional[str] = None,
    recon_score: Optional[str] = None,
    p: Optional[str] = None,
    batch_size: int = 256,
) -> CommandResult:
    """Score ID vs OOD sets with a trained checkpoint; writes report + CSV."""
    ckpt = load_checkpoint(checkpoint_dir)
    fusion_dict = dict(ckpt.pipeline_state.get("fusion", {}))
    if distance_score:
        fusion_dict["distance_score"] = distance_score
    if recon_score:
        fusion_dict["recon_score"] = recon_score
    if p:
        fusion_dict["p"] = p
    fusion = FusionConfig.from_dict(fusion_dict)

    model = ckpt.build_model()
    pipeline = ckpt.build_pipeline(fusion)
    if not pipeline.fitted:
        raise StateError(
            "checkpoint has no fitted score normalizers; rerun training (fit) "
            "so validation-set normalizers are stored"
        )
    shape = ckpt.model_config.image_shape
    id_data = _load_eval_dataset(id_manifest, shape)
    ood_data = _load_eval_dataset(ood_manifest, shape)

    report, records = run_benchmark(
        model,
        pipeline,
        make_batches(id_data, None, batch_size),
        make_batches(ood_data, None, batch_size),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "eval_report.json"
    csv_path = out / "scores.csv"
    report.write_json(report_path)
    write_score_csv(records, csv_path)
    return CommandResult(
        exit_code=EXIT_OK,
        artifacts=[str(report_path), str(csv_path)],
        summary=(
            f"AUROC {report.auroc:.4f} | ID accuracy {report.id_accuracy:.4f} "
            f"({report.counts['id']} ID vs {report.counts['ood']} OOD)"
        ),
    )


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def cmd_reconstruct(
    checkpoint_dir: str,
    out_dir: str,
    manifest: Optional[str] = None,
    count: int = 8,
    prototypes: bool = False,
) -> CommandResult:
    """Write a PNG grid of inputs over reconstructions (or decoded prototypes)."""
    from PIL import Image

    ckpt = load_checkpoint(checkpoint_dir)
    model = ckpt.build_model()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with torch.no_grad():
        if prototypes:
            k, j, latent = model.prototypes.shape
            decoded = model.decode(model.prototypes.view(k * j, latent))
            grid = _grid([decoded.numpy()])
            path = out / "prototype_reconstructions.png"
            n_cols = k * j
        else:
            if manifest is None:
                raise ConfigError("--manifest is required unless --prototypes is set")
            data = _load_eval_dataset(manifest, ckpt.model_config.image_shape)
            batch = next(make_batches(data, None, max(count, 1)))
            x = torch.from_numpy(batch.data[:count])
            latent = model.encode(x)
            recon = model.decode(latent.mu)
            grid = _grid([x.numpy(), recon.numpy()])
            path = out / "reconstructions.png"
            n_cols = x.shape[0]

    Image.fromarray(grid).save(path)
    return CommandResult(
        exit_code=EXIT_OK,
        artifacts=[str(path)],
        summary=f"wrote {grid.shape[0]}x{grid.shape[1]} grid "
                f"({len(grid.shape)}D, {n_cols} columns) to {path}",
    )


def _grid(rows: list[np.ndarray]) -> np.ndarray:
    """Stack NCHW arrays into one (rows*H, N*W[, 3]) uint8 image array."""
    stacked = []
    for row in rows:
        imgs = [_to_uint8(img.transpose(1, 2, 0)) for img in row]
        stacked.append(np.concatenate(imgs, axis=1))
    grid = np.concatenate(stacked, axis=0)
    if grid.shape[-1] == 1:
        grid = grid[:, :, 0]
    return grid


def cmd_project(
    checkpoint_dir: str,
    out_csv: str,
    id_manifest: Optional[str] = None,
    ood_manifest: Optional[str] = None,
    batch_size: int = 256,
) -> CommandResult:
    """Export latent means and prototype rows for external projection tools."""
    ckpt = load_checkpoint(checkpoint_dir)
    model = ckpt.build_model()
    latent_dim = ckpt.model_config.latent_dim
    rows: list[list] = []

    with torch.no_grad():
        protos = model.prototypes.detach().numpy()
        k, j, _ = protos.shape
        for ki in range(k):
            for ji in range(j):
                rows.append(
                    [ki * j + ji, "prototype", ki] + [repr(float(v)) for v in protos[ki, ji]]
                )
        for tag, manifest in (("id", id_manifest), ("ood", ood_manifest)):
            if manifest is None:
                continue
            data = _load_eval_dataset(manifest, ckpt.model_config.image_shape)
            for batch in make_batches(data, None, batch_size):
                mu = model.encode(torch.from_numpy(batch.data)).mu.numpy()
                for i in range(mu.shape[0]):
                    label = int(batch.labels[i]) if batch.labels is not None else -1
                    rows.append(
                        [int(batch.indices[i]), tag, label]
                        + [repr(float(v)) for v in mu[i]]
                    )

    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "source", "label"] + [f"z{i}" for i in range(latent_dim)])
        writer.writerows(rows)
    return CommandResult(
        exit_code=EXIT_OK,
        artifacts=[str(out)],
        summary=f"wrote {len(rows)} embedding rows to {out}",
    )


def cmd_report(report_paths: list[str], out: Optional[str] = None) -> CommandResult:
    """Aggregate eval-report JSONs into one markdown table, best AUROC first."""
    if not report_paths:
        raise UsageError("report needs at least one eval_report.json path")
    rows = []
    for path in report_paths:
        p = Path(path)
        if not p.exists():
            raise IngestionError(f"report file not found: {p}")
        data = json.loads(p.read_text(encoding="utf-8"))
        for key in ("auroc", "id_accuracy", "counts"):
            if key not in data:
                raise FormatError(f"{p}: eval report is missing field {key!r}")
        rows.append((p.name, data))
    rows.sort(key=lambda item: -item[1]["auroc"])

    lines = [
        "| run | AUROC | ID accuracy | n_id | n_ood |",
        "| --- | ----- | ----------- | ---- | ----- |",
    ]
    for name, data in rows:
        lines.append(
            f"| {name} | {data['auroc']:.4f} | {data['id_accuracy']:.4f} "
            f"| {data['counts'].get('id', '-')} | {data['counts'].get('ood', '-')} |"
        )
    table = "\n".join(lines)
    artifacts = []
    if out:
        Path(out).write_text(table + "\n", encoding="utf-8")
        artifacts.append(out)
    return CommandResult(exit_code=EXIT_OK, artifacts=artifacts, summary=table)


# -- argv plumbing --------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="protodist", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)

    p_eval = sub.add_parser("eval-ood", help="evaluate OOD detection")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--id-manifest", required=True)
    p_eval.add_argument("--ood-manifest", required=True)
    p_eval.add_argument("--out-dir", required=True)
    p_eval.add_argument("--distance-score", choices=("msp", "dist_ratio", "min_dist"))
    p_eval.add_argument("--recon-score", choices=("mse", "perceptual"))
    p_eval.add_argument("--p", choices=("2", "inf"))
    p_eval.add_argument("--batch-size", type=int, default=256)

    p_rec = sub.add_parser("reconstruct", help="write input/reconstruction grids")
    p_rec.add_argument("--checkpoint", required=True)
    p_rec.add_argument("--out-dir", required=True)
    p_rec.add_argument("--manifest")
    p_rec.add_argument("--count", type=int, default=8)
    p_rec.add_argument("--prototypes", action="store_true")

    p_proj = sub.add_parser("project", help="export latent embeddings as CSV")
    p_proj.add_argument("--checkpoint", required=True)
    p_proj.add_argument("--out", required=True)
    p_proj.add_argument("--id-manifest")
    p_proj.add_argument("--ood-manifest")
    p_proj.add_argument("--batch-size", type=int, default=256)

    p_rep = sub.add_parser("report", help="aggregate eval reports to a table")
    p_rep.add_argument("reports", nargs="*")
    p_rep.add_argument("--out")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        overrides = _split_overrides(extras)
        if args.command != "train" and overrides:
            raise UsageError(
                f"--section.key overrides only apply to 'train': {sorted(overrides)}"
            )
        if args.command == "train":
            result = cmd_train(args.config, overrides)
        elif args.command == "eval-ood":
            result = cmd_eval_ood(
                args.checkpoint, args.id_manifest, args.ood_manifest, args.out_dir,
                distance_score=args.distance_score, recon_score=args.recon_score,
                p=args.p, batch_size=args.batch_size,
            )
        elif args.command == "reconstruct":
            result = cmd_reconstruct(
                args.checkpoint, args.out_dir, manifest=args.manifest,
                count=args.count, prototypes=args.prototypes,
            )
        elif args.command == "project":
            result = cmd_project(
                args.checkpoint, args.out, id_manifest=args.id_manifest,
                ood_manifest=args.ood_manifest, batch_size=args.batch_size,
            )
        else:
            result = cmd_report(args.reports, out=args.out)
    except ProtodistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    print(result.summary)
    for artifact in result.artifacts:
        print(f"artifact: {artifact}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
