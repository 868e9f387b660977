"""Shared model checkpoint format.

One UTF-8 JSON header line holding the architecture metadata and a named
tensor directory (name, shape, byte offset into the payload), followed by
the concatenated little-endian float32 tensor payloads.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

__all__ = ["save_checkpoint", "load_checkpoint", "save_model", "load_flow",
           "load_cvae"]

FORMAT_NAME = "scatter-sbi-checkpoint"


def save_checkpoint(path, kind: str, config: dict, tensors: dict,
                    extra: dict | None = None) -> Path:
    """Write named float32 tensors after a single JSON header line."""
    directory = []
    payload = bytearray()
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(
            tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor)
            else tensor, dtype=np.float32)
        directory.append({"name": name, "shape": list(arr.shape),
                          "offset": len(payload)})
        payload += arr.astype("<f4").tobytes()
    header = {"format": FORMAT_NAME, "version": 1, "kind": kind,
              "config": config, "extra": extra or {}, "tensors": directory}
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))
    return path


def load_checkpoint(path):
    """Read back (kind, config, extra, name -> float32 array)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a {FORMAT_NAME} file")
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return header["kind"], header["config"], header["extra"], tensors


def save_model(path, model, kind: str, extra: dict | None = None) -> Path:
    """Checkpoint a FlowModel or CvaeModel with its config and trained flag."""
    meta = {"trained": bool(getattr(model, "trained", False))}
    if extra:
        meta.update(extra)
    return save_checkpoint(path, kind, asdict(model.config),
                           dict(model.state_dict()), extra=meta)


def _load_state(model, tensors: dict) -> None:
    state = model.state_dict()
    converted = {}
    for name, ref in state.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        converted[name] = torch.as_tensor(tensors[name]).to(ref.dtype)
    model.load_state_dict(converted)


def load_flow(path, dtype: torch.dtype = torch.float64):
    """Load a flow checkpoint; float64 by default for evaluation paths."""
    from .flow import FlowConfig, FlowModel

    kind, config, extra, tensors = load_checkpoint(path)
    if kind != "flow":
        raise ValueError(f"expected a flow checkpoint, found {kind!r}")
    model = FlowModel(FlowConfig(**config), dtype=dtype)
    _load_state(model, tensors)
    model.trained = bool(extra.get("trained", False))
    return model


def load_cvae(path, dtype: torch.dtype = torch.float32):
    from .cvae import CvaeConfig, CvaeModel

    kind, config, extra, tensors = load_checkpoint(path)
    if kind != "cvae":
        raise ValueError(f"expected a cvae checkpoint, found {kind!r}")
    config["image_shape"] = tuple(config["image_shape"])
    config["widths"] = tuple(config["widths"])
    model = CvaeModel(CvaeConfig(**config), dtype=dtype)
    _load_state(model, tensors)
    model.trained = bool(extra.get("trained", False))
    return model
