"""Checkpoint container: a NumPy ``.npz`` archive with a JSON header.

Layout::

    __meta__              uint8 array holding UTF-8 JSON
    param.<name>          trainable tensor
    buffer.<name>         batch-norm running statistic
    adam_m.<name>         optimizer first moment
    adam_v.<name>         optimizer second moment

The header carries ``format`` and ``version`` tags, whatever the caller adds
(config echo, seed, epoch, optimizer step, RNG state), and a ``tensors`` table
of ``{"key", "group", "name", "shape"}`` entries. Every tensor is stored as a
row-major float64 array. Readers reject any other format tag or version.
"""

import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger("overhead_counts.checkpoint")

FORMAT_TAG = "overhead-counts-checkpoint"
FORMAT_VERSION = 1
GROUPS = ("param", "buffer", "adam_m", "adam_v")
META_KEY = "__meta__"


@dataclass
class Container:
    """Decoded checkpoint: header plus tensors grouped by role."""

    meta: dict
    tensors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def group(self, name: str) -> dict[str, np.ndarray]:
        return self.tensors.get(name, {})


def write_container(
    path: str | Path,
    meta: dict,
    tensors: dict[str, dict[str, np.ndarray]],
) -> Path:
    """Write a checkpoint atomically (temp file, then rename)."""
    path = Path(path)
    unknown = set(tensors) - set(GROUPS)
    if unknown:
        raise CheckpointError(f"Unknown tensor group(s): {', '.join(sorted(unknown))}")

    arrays: dict[str, np.ndarray] = {}
    table = []
    for group in GROUPS:
        for name, value in tensors.get(group, {}).items():
            key = f"{group}.{name}"
            arrays[key] = np.ascontiguousarray(value, dtype=np.float64)
            table.append({"key": key, "group": group, "name": name, "shape": list(arrays[key].shape)})

    header = dict(meta)
    header["format"] = FORMAT_TAG
    header["version"] = FORMAT_VERSION
    header["tensors"] = table
    arrays[META_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.debug(f"Wrote checkpoint {path} ({len(table)} tensors)")
    return path


def read_container(path: str | Path) -> Container:
    """Read and validate a checkpoint written by ``write_container``.

    Raises:
        CheckpointError: missing file, corrupt payload, foreign format,
            unsupported version, or tensor table mismatch
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        with np.load(path, allow_pickle=False) as data:
            if META_KEY not in data.files:
                raise CheckpointError(f"{path}: corrupt payload (no header)")
            meta = json.loads(data[META_KEY].tobytes().decode("utf-8"))
            raw = {key: data[key] for key in data.files if key != META_KEY}
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, OSError, EOFError, KeyError, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt payload ({e})") from e

    if not isinstance(meta, dict) or meta.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: not an overhead-counts checkpoint")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('version')!r} "
            f"(this build reads version {FORMAT_VERSION})"
        )

    table = meta.get("tensors", [])
    if {entry["key"] for entry in table} != set(raw):
        raise CheckpointError(f"{path}: corrupt payload (tensor table does not match contents)")

    container = Container(meta=meta, tensors={g: {} for g in GROUPS})
    for entry in table:
        value = raw[entry["key"]]
        if list(value.shape) != entry["shape"] or value.dtype != np.float64:
            raise CheckpointError(
                f"{path}: tensor '{entry['key']}' is {value.dtype}{list(value.shape)}, "
                f"header says float64{entry['shape']}"
            )
        container.tensors[entry["group"]][entry["name"]] = value
    return container
