"""Model directory: ``config.json`` plus ``tensors.bin``.

``config.json`` holds the architecture sizes, the tokenizer vocabulary and the
sorted list of tensor names; ``tensors.bin`` is an RLNS1 blob (see
:mod:`reward_lens.tensorfile`). Both files are written deterministically, so
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from ..errors import DataFormatError, ShapeMismatchError
from ..tensorfile import atomic_write_bytes, decode_tensors, encode_tensors
from .config import TransformerConfig
from .model import RewardModel, expected_shapes

CONFIG_FILE = "config.json"
TENSOR_FILE = "tensors.bin"
FORMAT_VERSION = 1


def _config_document(model: RewardModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "name": model.name,
        "config": model.config.to_dict(),
        "vocab": list(model.vocab),
        "tensors": sorted(model.params),
    }


def config_bytes(model: RewardModel) -> bytes:
    return (json.dumps(_config_document(model), sort_keys=True, indent=2) + "\n").encode("utf-8")


def config_hash(model: RewardModel) -> str:
    """SHA-256 over the config document and the tensor blob."""
    h = hashlib.sha256()
    h.update(config_bytes(model))
    h.update(encode_tensors(model.params))
    return h.hexdigest()


def save_model(model: RewardModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(directory / TENSOR_FILE, encode_tensors(model.params))
    atomic_write_bytes(directory / CONFIG_FILE, config_bytes(model))
    return directory


def load_model(directory) -> RewardModel:
    directory = Path(directory)
    cfg_path, blob_path = directory / CONFIG_FILE, directory / TENSOR_FILE
    for p in (cfg_path, blob_path):
        if not p.is_file():
            raise DataFormatError(f"model directory {directory} is missing {p.name}")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{cfg_path}: invalid JSON ({exc})") from None
    for key in ("config", "vocab", "tensors"):
        if key not in doc:
            raise DataFormatError(f"{cfg_path}: missing key {key!r}")
    config = TransformerConfig.from_dict(doc["config"])

    listed = doc["tensors"]
    if len(set(listed)) != len(listed):
        raise DataFormatError(f"{cfg_path}: tensor list names a tensor twice")
    if set(listed) != set(expected_shapes(config)):
        raise ShapeMismatchError(f"{cfg_path}: tensor list does not match the architecture")

    tensors = decode_tensors(blob_path.read_bytes())
    if set(tensors) != set(listed):
        missing = sorted(set(listed) - set(tensors))
        extra = sorted(set(tensors) - set(listed))
        raise ShapeMismatchError(f"tensor blob mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    return RewardModel(config, tensors, doc["vocab"], doc.get("name", directory.name))
