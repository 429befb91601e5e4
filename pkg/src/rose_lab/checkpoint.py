"""Portable checkpoints: a text manifest followed by one little-endian float32 blob.

Layout::

    rose-lab-checkpoint 1
    fingerprint <sha256 of the canonical model config>
    config <canonical JSON model config>
    tensor <name> f32 <shape as AxBxC, or - for scalars> <byte offset> <byte count>
    ...
    end
    <blob>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from rose_lab.model import ModelConfig, RoseModel

MAGIC = "rose-lab-checkpoint 1"
_END = b"\nend\n"


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path, model: RoseModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = model.config
    lines = [MAGIC, f"fingerprint {config.fingerprint()}",
             "config " + json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))]
    chunks, offset = [], 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        lines.append(f"tensor {name} f32 {_shape_text(tensor.shape)} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    lines.append("end")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks))
    return path


def read_checkpoint(path) -> tuple[ModelConfig, str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    cut = raw.find(_END)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a rose-lab checkpoint")
    header = raw[:cut].decode("utf-8").split("\n")
    blob = raw[cut + len(_END):]
    fingerprint, config, tensors = None, None, {}
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "fingerprint":
            fingerprint = rest
        elif key == "config":
            config = ModelConfig.from_dict(json.loads(rest))
        elif key == "tensor":
            name, dtype, shape, off, size = rest.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{path}: unsupported dtype {dtype} for {name}")
            off, size = int(off), int(size)
            if off + size > len(blob):
                raise CheckpointError(f"{path}: tensor {name} runs past the end of the blob")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(_parse_shape(shape))
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")
    if config is None or fingerprint is None:
        raise CheckpointError(f"{path}: manifest lacks config or fingerprint")
    if config.fingerprint() != fingerprint:
        raise CheckpointError(f"{path}: stored fingerprint does not match stored config")
    return config, fingerprint, tensors


def load_checkpoint(path, expected: ModelConfig | None = None, force: bool = False) -> RoseModel:
    """Rebuild a model; refuses a config mismatch with ``expected`` unless ``force``.

    With ``force`` the checkpoint's own config is used.
    """
    config, fingerprint, tensors = read_checkpoint(path)
    if expected is not None and expected.fingerprint() != fingerprint and not force:
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprint {fingerprint[:12]} does not match config {expected.fingerprint()[:12]}")
    model = RoseModel(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model
