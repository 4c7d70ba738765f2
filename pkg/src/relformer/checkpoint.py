"""Checkpoint serialization.

A checkpoint is a single file: a one-line UTF-8 JSON manifest, a newline,
then one binary blob. The manifest carries ``format`` ("relformer-ckpt/1"),
an optional ``model`` config echo, and a ``tensors`` list of
``{name, shape, dtype, byte_offset}`` entries; the blob is the tensors'
little-endian float data, row-major, concatenated in manifest order.
Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import CheckpointError
from .nn import ParamStore

FORMAT = "relformer-ckpt/1"


def save_checkpoint(path: str, store: ParamStore, model_meta: dict | None = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f8",
            "byte_offset": offset,
            "trainable": store.is_trainable(name),
        })
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    manifest = {"format": FORMAT, "tensors": tensors}
    if model_meta is not None:
        manifest["model"] = model_meta
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(b"\n")
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    """Read a checkpoint; returns (store, manifest)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    sep = raw.find(b"\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing manifest/blob separator")
    try:
        manifest = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(
            f"{path}: format {manifest.get('format')!r}, expected {FORMAT!r}")
    blob = raw[sep + 1:]

    store = ParamStore()
    for entry in manifest.get("tensors", []):
        try:
            name = entry["name"]
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            offset = entry["byte_offset"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad tensor entry {entry!r}") from exc
        if dtype.kind != "f" or dtype.byteorder not in ("<", "|", "="):
            raise CheckpointError(f"{path}: {name}: unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"{path}: {name}: blob truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        store.add(name, arr.astype(np.float64), trainable=entry.get("trainable", True))
    return store, manifest


def check_compatible(path: str, store: ParamStore, expected: ParamStore) -> None:
    """Raise if ``store`` does not carry exactly the shapes of ``expected``."""
    got = {n: t.data.shape for n, t in store.items()}
    want = {n: t.data.shape for n, t in expected.items()}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        mismatched = sorted(n for n in set(got) & set(want) if got[n] != want[n])
        detail = []
        if missing:
            detail.append(f"missing {missing[:3]}")
        if extra:
            detail.append(f"unexpected {extra[:3]}")
        if mismatched:
            detail.append(
                "shape mismatch " +
                ", ".join(f"{n}: {got[n]} != {want[n]}" for n in mismatched[:3]))
        raise CheckpointError(f"{path}: incompatible with model config ({'; '.join(detail)})")
