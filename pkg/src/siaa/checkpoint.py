"""Versioned safetensors containers for trained heads.

Tensors go in the safetensors body; everything else (format name, version,
dimensions, configs, provenance) is stored as JSON strings in the header
metadata. The header JSON is rewritten with sorted keys (the serializer's own
key order varies between calls), so output bytes depend only on the tensors and
metadata and reruns with the same seed produce identical files.
"""

import hashlib
import json
from pathlib import Path

import torch
from safetensors.torch import load_file
from safetensors.torch import save as to_bytes
from safetensors import safe_open

FORMAT_VERSION = "1"


def save(path, tensors: dict[str, torch.Tensor], kind: str, **meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"format": kind, "version": FORMAT_VERSION}
    metadata.update({k: json.dumps(v, sort_keys=True) for k, v in meta.items()})
    blob = to_bytes({k: v.detach().contiguous() for k, v in tensors.items()}, metadata=metadata)
    path.write_bytes(_canonical(blob))
    return path


def _canonical(blob: bytes) -> bytes:
    n = int.from_bytes(blob[:8], "little")
    header = json.dumps(json.loads(blob[8:8 + n]), sort_keys=True, separators=(",", ":")).encode()
    header += b" " * (-len(header) % 8)
    return len(header).to_bytes(8, "little") + header + blob[8 + n:]


def load(path, kind: str):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        metadata = f.metadata() or {}
    if metadata.get("format") != kind:
        raise ValueError(f"{path} is not a {kind} checkpoint (format={metadata.get('format')!r})")
    if metadata.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {metadata.get('version')!r}")
    meta = {k: json.loads(v) for k, v in metadata.items() if k not in ("format", "version")}
    return load_file(str(path)), meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
