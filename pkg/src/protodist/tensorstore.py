"""Bit-exact tensor container: a directory with ``meta.json`` plus one raw
binary file per tensor (little-endian float32, row-major).

The JSON index records name, rank, dims, and dtype for every tensor, so the
format is language-neutral and round-trips byte-identically. Writes are
atomic (temp directory, then rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, MigrationError

FORMAT_VERSION = 1
META_NAME = "meta.json"


def write_tensors(
    directory: Union[str, Path],
    tensors: dict[str, np.ndarray],
    extra_meta: dict | None = None,
) -> None:
    """Write tensors plus metadata atomically into ``directory``."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    index = []
    payloads = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fname = f"t{i:04d}.bin"
        index.append(
            {
                "name": name,
                "rank": arr.ndim,
                "dims": list(arr.shape),
                "dtype": "float32",
                "file": fname,
            }
        )
        payloads.append((fname, arr.tobytes(order="C")))
    meta = {"format_version": FORMAT_VERSION, "tensors": index}
    meta.update(extra_meta or {})

    tmp = Path(
        tempfile.mkdtemp(prefix=directory.name + ".tmp.", dir=directory.parent)
    )
    try:
        (tmp / META_NAME).write_text(json.dumps(meta, indent=1), encoding="utf-8")
        for fname, blob in payloads:
            (tmp / fname).write_bytes(blob)
        if directory.exists():
            backup = directory.with_name(directory.name + ".old")
            if backup.exists():
                _rmtree(backup)
            os.replace(directory, backup)
            os.replace(tmp, directory)
            _rmtree(backup)
        else:
            os.replace(tmp, directory)
    except BaseException:
        if tmp.exists():
            _rmtree(tmp)
        raise


def read_tensors(directory: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    """Read a tensor container; returns (tensors, full metadata dict).

    Raises MigrationError on a format version mismatch and FormatError,
    naming the tensor, when a payload does not match its declared shape.
    """
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.exists():
        raise FormatError(f"no {META_NAME} in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise MigrationError(
            f"{directory}: container format version {version!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    tensors: dict[str, np.ndarray] = {}
    for desc in meta.get("tensors", []):
        name = desc["name"]
        path = directory / desc["file"]
        dims = tuple(desc["dims"])
        if desc.get("dtype") != "float32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {desc.get('dtype')!r}")
        expected = int(np.prod(dims, dtype=np.int64)) * 4
        if not path.exists():
            raise FormatError(f"tensor {name!r}: payload file {desc['file']} missing")
        blob = path.read_bytes()
        if len(blob) != expected:
            raise FormatError(
                f"tensor {name!r}: payload is {len(blob)} bytes, expected {expected}"
            )
        tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(dims).copy()
    return tensors, meta


def _rmtree(path: Path) -> None:
    import shutil

    shutil.rmtree(path, ignore_errors=True)
