"""Versioned checkpoint container.

Layout::

    8 bytes   magic b"RFSEPCKP"
    u32 LE    format version
    u64 LE    header length in bytes
    header    UTF-8 JSON: config, tensor names/shapes, parameter count, extras
    payload   little-endian float32 tensors, concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, RFSeparator, count_params

MAGIC = b"RFSEPCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model: RFSeparator, path, extra: dict | None = None) -> None:
    params = list(model.named_parameters())
    header = {
        "format_version": VERSION,
        "config": model.config.to_dict(),
        "param_count": count_params(model),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: truncated prefix ({len(prefix)} bytes)")
        magic, version, size = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        raw = fh.read(size)
    if len(raw) < size:
        raise CheckpointError(f"{path}: header truncated ({len(raw)} of {size} bytes)")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    header["_offset"] = _PREFIX.size + size
    return header


def load_checkpoint(path) -> RFSeparator:
    header = read_header(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config in header: {exc}") from exc
    model = RFSeparator(cfg)
    own = dict(model.named_parameters())
    listed = [t["name"] for t in header["tensors"]]
    if set(listed) != set(own):
        missing = sorted(set(own) - set(listed))
        unexpected = sorted(set(listed) - set(own))
        raise CheckpointError(f"{path}: tensor mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
    data = np.fromfile(path, dtype="<f4", offset=header["_offset"])
    total = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if data.size != total:
        raise CheckpointError(
            f"{path}: payload has {data.size} floats, header lists {total} "
            f"(param_count {header.get('param_count')})"
        )
    pos = 0
    with torch.no_grad():
        for t in header["tensors"]:
            p = own[t["name"]]
            if list(p.shape) != t["shape"]:
                raise CheckpointError(f"{path}: {t['name']} shape {t['shape']} != model {list(p.shape)}")
            n = p.numel()
            p.copy_(torch.from_numpy(data[pos : pos + n].reshape(p.shape).copy()))
            pos += n
    model.eval()
    return model
