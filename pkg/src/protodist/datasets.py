"""Dataset ingestion and batching.

Two on-disk sources are supported:

* IDX image/label file pairs (big-endian magic + dims header, raw ubyte
  payload), the format the classic digit benchmarks ship in.
* Image-directory manifests: a UTF-8 CSV with header ``path,label,split``
  or a JSON array of objects with the same keys, with paths relative to
  the manifest file.

Loading is eager; pixels are scaled to [0, 1] float32. Batching is a pure
function of (manifest, seed), so epochs are reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import ConsistencyError, FormatError, IngestionError

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SPLITS = ("train", "val", "test")

# Luminance weights for RGB -> grayscale conversion.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class ManifestEntry:
    """One sample: where it comes from, its class, and its split tag."""

    source: Union[str, int]  # image path, or row index into a decoded array
    label: int
    split: str


@dataclass
class DatasetManifest:
    """Enumerates the samples of one dataset.

    Invariants: every label is in [0, len(class_names)) and every split
    tag is one of "train"/"val"/"test". ``validate`` enforces both.
    """

    entries: list[ManifestEntry]
    class_names: list[str]
    image_shape: tuple[int, int, int]  # (C, H, W)

    def validate(self) -> None:
        k = len(self.class_names)
        for i, e in enumerate(self.entries):
            if e.split not in SPLITS:
                raise ConsistencyError(f"entry {i}: unknown split tag {e.split!r}")
            if not 0 <= e.label < k:
                raise ConsistencyError(
                    f"entry {i}: label {e.label} outside [0, {k})"
                )

    def split_indices(self, split: str) -> np.ndarray:
        return np.array(
            [i for i, e in enumerate(self.entries) if e.split == split], dtype=np.int64
        )

    def fingerprint(self) -> str:
        """Stable content hash over entries, class names, and image shape."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.image_shape)).encode())
        h.update(json.dumps(self.class_names).encode())
        for e in self.entries:
            h.update(f"{e.source}|{e.label}|{e.split}\n".encode())
        return h.hexdigest()


@dataclass
class ImageBatch:
    """A batch of float images in [0, 1], NCHW, plus optional labels.

    ``indices`` are the positions of the samples in the source manifest and
    double as sample ids in score records.
    """

    data: np.ndarray
    labels: Optional[np.ndarray]
    indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))


@dataclass
class LoadedDataset:
    """A manifest together with its decoded pixel array.

    ``images[entry.source]`` is the (C, H, W) float32 image of that entry.
    """

    manifest: DatasetManifest
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]

    def with_manifest(self, manifest: DatasetManifest) -> "LoadedDataset":
        return LoadedDataset(manifest=manifest, images=self.images)


def _read_be32(f, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"truncated IDX header while reading {what}")
    return struct.unpack(">I", data)[0]


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    split: str = "train",
) -> LoadedDataset:
    """Load an IDX image/label file pair into a LoadedDataset.

    Pixels are scaled to [0, 1] by division by 255. All entries get the
    given split tag; class names are derived from the label range.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "row count")
        cols = _read_be32(f, "column count")
        payload = f.read()
    if len(payload) < count * rows * cols:
        raise FormatError(
            f"{images_path}: payload holds {len(payload)} bytes, "
            f"header promises {count * rows * cols}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(f, "label count")
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if label_count != count:
        raise ConsistencyError(
            f"image count {count} != label count {label_count} "
            f"({images_path.name} vs {labels_path.name})"
        )
    if len(labels) < label_count:
        raise FormatError(f"{labels_path}: label payload shorter than header count")
    labels = labels[:label_count]

    class_names = [str(i) for i in range(int(labels.max()) + 1 if count else 0)]
    entries = [
        ManifestEntry(source=i, label=int(labels[i]), split=split)
        for i in range(count)
    ]
    manifest = DatasetManifest(
        entries=entries, class_names=class_names, image_shape=(1, rows, cols)
    )
    manifest.validate()
    return LoadedDataset(manifest=manifest, images=images)


def _to_channels(arr: np.ndarray, channels: int) -> np.ndarray:
    """Convert an HWC/HW uint8 array to the requested channel count."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    have = arr.shape[2]
    if have == channels:
        return arr
    if have == 3 and channels == 1:
        gray = (arr.astype(np.float64) @ _LUMA).round()
        return gray.astype(np.uint8)[:, :, None]
    if have == 1 and channels == 3:
        return np.repeat(arr, 3, axis=2)
    if have == 4:  # drop alpha, then recurse
        return _to_channels(arr[:, :, :3], channels)
    raise IngestionError(f"cannot convert {have}-channel image to {channels} channels")


def _load_image(path: Path, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Decode one image file to (C, H, W) float32 in [0, 1]."""
    channels, height, width = image_shape
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if im.mode not in ("L", "RGB") else im.mode)
            if im.size != (width, height):
                im = im.resize((width, height), Image.BILINEAR)
            arr = np.asarray(im)
    except OSError as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    arr = _to_channels(arr, channels)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def read_manifest_file(manifest_path: Union[str, Path]) -> list[ManifestEntry]:
    """Parse a CSV/JSON manifest into entries without touching any image."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IngestionError(f"manifest file not found: {manifest_path}")
    rows: list[dict]
    if manifest_path.suffix.lower() == ".json":
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise FormatError(f"{manifest_path}: JSON manifest must be an array")
        rows = data
    else:
        with open(manifest_path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or not {"path", "label", "split"} <= set(
                reader.fieldnames
            ):
                raise FormatError(
                    f"{manifest_path}: CSV manifest needs header path,label,split"
                )
            rows = list(reader)
    entries = []
    for i, row in enumerate(rows):
        try:
            entries.append(
                ManifestEntry(
                    source=str(row["path"]), label=int(row["label"]), split=str(row["split"])
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{manifest_path}: bad manifest row {i}: {row!r}") from exc
    return entries


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    """Write entries as CSV or JSON (by extension); inverse of read_manifest_file."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        payload = [
            {"path": e.source, "label": e.label, "split": e.split}
            for e in manifest.entries
        ]
        path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.source, e.label, e.split])


def load_manifest(
    manifest_path: Union[str, Path],
    image_shape: tuple[int, int, int] = (1, 28, 28),
    class_names: Optional[Sequence[str]] = None,
) -> LoadedDataset:
    """Load a CSV/JSON image manifest and decode all referenced images.

    Images are resized with bilinear interpolation and converted between
    grayscale and RGB as needed to match ``image_shape``. Raises
    IngestionError naming the entry when a file is missing or undecodable.
    """
    manifest_path = Path(manifest_path)
    entries = read_manifest_file(manifest_path)
    base = manifest_path.parent
    images = np.zeros((len(entries), *image_shape), dtype=np.float32)
    indexed = []
    for i, e in enumerate(entries):
        img_path = base / str(e.source)
        if not img_path.exists():
            raise IngestionError(f"manifest entry {i} ({e.source!r}): file not found")
        images[i] = _load_image(img_path, image_shape)
        indexed.append(replace(e, source=str(e.source)))
    if class_names is None:
        k = max((e.label for e in entries), default=-1) + 1
        class_names = [str(i) for i in range(k)]
    manifest = DatasetManifest(
        entries=indexed, class_names=list(class_names), image_shape=tuple(image_shape)
    )
    manifest.validate()
    # Images are decoded in manifest order, so position == array row.
    return LoadedDataset(manifest=manifest, images=images)


def load_dataset_spec(
    path: Union[str, Path],
    image_shape: Optional[tuple[int, int, int]] = None,
    default_split: str = "test",
) -> LoadedDataset:
    """Load either an image manifest or an IDX pair description.

    ``path`` may point at a CSV/JSON manifest, or at a JSON object of the
    form ``{"format": "idx", "images": ..., "labels": ..., "split": ...}``
    whose paths are relative to the spec file.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(data, dict):
            if data.get("format") != "idx":
                raise FormatError(f"{path}: dataset spec object must have format='idx'")
            base = path.parent
            return load_idx(
                base / data["images"], base / data["labels"],
                split=data.get("split", default_split),
            )
    return load_manifest(path, image_shape=image_shape or (1, 28, 28))


def _entry_positions(dataset: LoadedDataset, split: Optional[str]) -> np.ndarray:
    if split is None:
        return np.arange(len(dataset.manifest.entries), dtype=np.int64)
    return dataset.manifest.split_indices(split)


def _rows_for(dataset: LoadedDataset, positions: np.ndarray) -> np.ndarray:
    """Map manifest positions to rows of the decoded image array."""
    sources = [dataset.manifest.entries[p].source for p in positions]
    if all(isinstance(s, (int, np.integer)) for s in sources):
        return np.asarray(sources, dtype=np.int64)
    return positions  # path-backed datasets are decoded in manifest order


def make_batches(
    dataset: LoadedDataset,
    split: Optional[str],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
) -> Iterator[ImageBatch]:
    """Yield the split's samples exactly once, in batches of ``batch_size``.

    ``split=None`` iterates every entry regardless of tag. With a seed the
    order is a reproducible permutation; without one the manifest order is
    preserved (evaluation mode).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    positions = _entry_positions(dataset, split)
    if len(positions) == 0:
        log.warning("split %r is empty; yielding no batches", split)
        return
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        positions = positions[rng.permutation(len(positions))]
    rows = _rows_for(dataset, positions)
    labels = np.array(
        [dataset.manifest.entries[p].label for p in positions], dtype=np.int64
    )
    for start in range(0, len(positions), batch_size):
        sel = slice(start, start + batch_size)
        yield ImageBatch(
            data=dataset.images[rows[sel]],
            labels=labels[sel],
            indices=positions[sel],
        )


def assign_splits(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.6, 0.1, 0.3),
    seed: int = 0,
) -> DatasetManifest:
    """Re-tag all entries into train/val/test at the given ratios (seeded)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(manifest.entries)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train : n_train + n_val]] = "val"
    tags[order[n_train + n_val :]] = "test"
    entries = [replace(e, split=tags[i]) for i, e in enumerate(manifest.entries)]
    return DatasetManifest(
        entries=entries,
        class_names=list(manifest.class_names),
        image_shape=manifest.image_shape,
    )


def carve_validation(
    manifest: DatasetManifest, fraction: float = 0.1, seed: int = 0
) -> DatasetManifest:
    """Move a seeded random fraction of the train split into the val split.

    Benchmarks that ship a fixed train/test split still need validation
    data to fit the score normalizers.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    train_pos = manifest.split_indices("train")
    n_val = max(1, int(round(fraction * len(train_pos))))
    chosen = set(
        train_pos[np.random.default_rng(seed).permutation(len(train_pos))[:n_val]]
    )
    entries = [
        replace(e, split="val") if i in chosen else e
        for i, e in enumerate(manifest.entries)
    ]
    return DatasetManifest(
        entries=entries,
        class_names=list(manifest.class_names),
        image_shape=manifest.image_shape,
    )
