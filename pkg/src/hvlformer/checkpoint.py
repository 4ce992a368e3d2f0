"""Checkpoint files: magic, JSON header, then named little-endian tensor blobs.

Layout::

    b"HVLCKPT1" | uint32 header_len | header (utf-8 JSON) | blobs

The header carries the config hash, iteration, the full config, class specs,
and a table of ``{name, dtype, shape, offset, nbytes}`` entries pointing into
the blob section.  Floating tensors are stored as float32.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ClassSpec, ExperimentConfig, from_dict

MAGIC = b"HVLCKPT1"
_DTYPES = {"float32": "<f4", "int64": "<i8", "uint8": "u1", "bool": "u1"}


@dataclass
class Checkpoint:
    cfg: ExperimentConfig
    class_specs: list[ClassSpec]
    tensors: dict[str, torch.Tensor]
    iteration: int = 0
    rng_state: bytes | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.cfg.config_hash()


def model_tensors(model) -> dict[str, torch.Tensor]:
    """Every parameter and buffer, plus imported text-name overrides."""
    out = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    for name, vec in model.text.encoder.overrides.items():
        out[f"text_override::{name}"] = vec.detach().cpu()
    return out


def checkpoint_from_model(model, cfg: ExperimentConfig, iteration: int, extra=None) -> Checkpoint:
    return Checkpoint(cfg, list(model.class_specs), model_tensors(model), iteration,
                      bytes(torch.get_rng_state().numpy().tobytes()), dict(extra or {}))


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    if t.dtype.is_floating_point:
        arr = t.to(torch.float32).numpy()
        kind = "float32"
    elif t.dtype == torch.bool:
        arr, kind = t.numpy().astype(np.uint8), "bool"
    elif t.dtype == torch.uint8:
        arr, kind = t.numpy(), "uint8"
    else:
        arr, kind = t.to(torch.int64).numpy(), "int64"
    return kind, np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in ckpt.tensors.items():
        kind, data = _tensor_bytes(t)
        entries.append({"name": name, "dtype": kind, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    cfg = ckpt.cfg.to_dict()
    cfg["model"]["image_size"] = list(cfg["model"]["image_size"])
    header = {
        "config_hash": ckpt.config_hash,
        "iteration": ckpt.iteration,
        "config": cfg,
        "class_specs": [dataclasses.asdict(c) for c in ckpt.class_specs],
        "rng_state": base64.b64encode(ckpt.rng_state).decode() if ckpt.rng_state else None,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    raw = json.dumps(header).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(raw)) + raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        body = fh.read()
    tensors = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path} is truncated at tensor {e['name']!r}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr)
        if e["dtype"] == "bool":
            t = t.bool()
        tensors[e["name"]] = t
    cfg = from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    rng = base64.b64decode(header["rng_state"]) if header.get("rng_state") else None
    specs = [ClassSpec(**c) for c in header["class_specs"]]
    return Checkpoint(cfg, specs, tensors, header["iteration"], rng, header.get("extra", {}))


def build_model(ckpt: Checkpoint):
    """Instantiate the network described by a checkpoint and load its tensors."""
    from .model import HVLFormer
    from .htqg import freeze

    model = HVLFormer(ckpt.cfg.model, ckpt.class_specs, seed=ckpt.cfg.train.seed)
    state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("text_override::")}
    model.load_state_dict(state)
    for k, v in ckpt.tensors.items():
        if k.startswith("text_override::"):
            model.text.encoder.overrides[k.split("::", 1)[1]] = v.clone()
    freeze(model.sre)
    model.eval()
    return model
