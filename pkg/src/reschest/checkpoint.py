"""Binary checkpoint file.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"RCNC"
    offset 4   uint32    format version
    offset 8   uint64    header length L
    offset 16  L bytes   UTF-8 JSON header
    offset 16+L          payload: tensors as little-endian float32, concatenated

The header holds ``model_config``, ``class_index``, ``normalization``,
``image_size``, ``best_epoch`` (an epoch record or null), ``run`` (training
metadata such as the split specification, or null) and ``tensors``, a
list of ``{"name", "shape", "offset", "nbytes", "trainable"}`` where
``offset`` is relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import IMAGE_SIZE, NORM_MEAN, NORM_STD, ClassIndex
from .model import RUNNING_SUFFIXES, ModelConfig, ModelParams

MAGIC = b"RCNC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint.  ``reason`` is a short machine
    tag; ``missing`` is the absent byte range for truncated files."""

    def __init__(self, reason: str, message: str, missing: tuple[int, int] | None = None):
        super().__init__(message)
        self.reason = reason
        self.missing = missing


@dataclass
class Checkpoint:
    model_config: ModelConfig
    class_index: ClassIndex
    state: dict[str, np.ndarray]
    normalization: dict[str, float] = field(default_factory=lambda: {"mean": NORM_MEAN, "std": NORM_STD})
    image_size: int = IMAGE_SIZE
    best_epoch: dict[str, Any] | None = None
    run: dict[str, Any] | None = None
    version: int = VERSION

    def to_params(self) -> ModelParams:
        from .model import build_model

        params = build_model(self.model_config, seed=0)
        params.load_state_dict(self.state)
        return params


def save_checkpoint(
    params: ModelParams,
    path: str | os.PathLike,
    class_index: ClassIndex,
    image_size: int = IMAGE_SIZE,
    best_epoch: dict[str, Any] | None = None,
    run: dict[str, Any] | None = None,
) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype=_LE_F32).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "trainable": not name.endswith(RUNNING_SUFFIXES),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": params.config.to_dict(),
        "class_index": class_index.to_list(),
        "normalization": {"mean": NORM_MEAN, "std": NORM_STD},
        "image_size": image_size,
        "best_epoch": best_epoch,
        "run": run,
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError(
            "truncated",
            f"preamble truncated: missing bytes [{len(blob)}, {_PREAMBLE.size})",
            (len(blob), _PREAMBLE.size),
        )
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad_magic", f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError("version", f"unsupported checkpoint version {version}, expected {VERSION}")
    hend = _PREAMBLE.size + hlen
    if len(blob) < hend:
        raise CheckpointError(
            "truncated", f"header truncated: missing bytes [{len(blob)}, {hend})", (len(blob), hend)
        )
    try:
        header = json.loads(blob[_PREAMBLE.size : hend].decode("utf-8"))
        tensors = header["tensors"]
        cfg = ModelConfig.from_dict(header["model_config"])
        index = ClassIndex(tuple(header["class_index"]))
        payload_len = sum(int(t["nbytes"]) for t in tensors)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError("bad_header", f"unreadable checkpoint header: {exc}") from exc

    end = hend + payload_len
    if len(blob) < end:
        raise CheckpointError(
            "truncated", f"payload truncated: missing bytes [{len(blob)}, {end})", (len(blob), end)
        )
    if len(blob) > end:
        raise CheckpointError("trailing_data", f"{len(blob) - end} unexpected bytes after payload")

    state: dict[str, np.ndarray] = {}
    expected = 0
    for t in tensors:
        shape = tuple(int(s) for s in t["shape"])
        nbytes = int(t["nbytes"])
        if t["offset"] != expected or nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError("bad_directory", f"inconsistent directory entry for {t['name']}")
        if t["name"] in state:
            raise CheckpointError("bad_directory", f"duplicate tensor {t['name']}")
        start = hend + expected
        state[t["name"]] = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
        expected += nbytes

    norm = header.get("normalization", {"mean": NORM_MEAN, "std": NORM_STD})
    return Checkpoint(
        model_config=cfg,
        class_index=index,
        state=state,
        normalization=norm,
        image_size=int(header.get("image_size", IMAGE_SIZE)),
        best_epoch=header.get("best_epoch"),
        run=header.get("run"),
        version=version,
    )
