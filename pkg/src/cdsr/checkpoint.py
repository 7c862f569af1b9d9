"""Versioned binary checkpoint: magic, version, JSON header, raw tensor bytes.

Layout::

    b"CDSRCKPT" | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header records the config (and its hash), domain sizes and, for every
tensor, its dtype, shape and byte offset into the little-endian payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .model import CrossDomainRecModel

MAGIC = b"CDSRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _encode(tensors: dict[str, torch.Tensor]):
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = _np(t)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def save_checkpoint(path, model: CrossDomainRecModel, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    tensors = {"param/" + k: v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"param_groups": state["param_groups"], "state": {}}
        for pid, slots in sorted(state["state"].items()):
            meta = {}
            for key, val in sorted(slots.items()):
                if torch.is_tensor(val):
                    tensors[f"opt/{pid}/{key}"] = val
                    meta[key] = "tensor"
                else:
                    meta[key] = val
            opt_meta["state"][str(pid)] = meta
    index, payload = _encode(tensors)
    header = {
        "format": "cdsr-checkpoint",
        "version": VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "domain_sizes": list(model.domain_sizes),
        "tensors": index,
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + payload)


def read_header(path) -> dict:
    """Header only; tensor bytes are not read."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: file too short for a checkpoint")
        magic, version, n = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(n).decode("utf-8"))
    header["_payload_start"] = _PREFIX.size + n
    return header


def _read_tensors(path, header) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()[header["_payload_start"]:]
    out = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(data[start:start + nbytes], dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arr = arr.astype(np.dtype(entry["dtype"])).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def load_checkpoint(path, config: TrainConfig | None = None, domain_sizes=None, graphs=None):
    """Rebuild the model (and optimizer state dict if stored).

    If ``config`` or ``domain_sizes`` are given they must match the stored
    ones; a mismatch raises :class:`CheckpointError` naming the field.
    Returns ``(model, optimizer_state_or_None, header)``.
    """
    header = read_header(path)
    stored = TrainConfig.from_dict(header["config"])
    if config is not None:
        for key, val in config.to_dict().items():
            if header["config"].get(key) != val:
                raise CheckpointError(f"config mismatch on field {key!r}: checkpoint has "
                                      f"{header['config'].get(key)!r}, expected {val!r}")
    sizes = tuple(header["domain_sizes"])
    if domain_sizes is not None and tuple(domain_sizes) != sizes:
        raise CheckpointError(f"domain_sizes mismatch: checkpoint has {sizes}, expected {tuple(domain_sizes)}")
    tensors = _read_tensors(path, header)
    model = CrossDomainRecModel(stored, sizes, graphs)
    from .model import torch_dtype

    model = model.to(torch_dtype(stored.dtype))
    own = model.state_dict()
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    missing = sorted(set(own) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
    for name, t in params.items():
        if name not in own:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(t.shape) != tuple(own[name].shape):
            raise CheckpointError(f"shape mismatch on {name!r}: checkpoint {tuple(t.shape)}, "
                                  f"model {tuple(own[name].shape)}")
    model.load_state_dict(params)
    opt_state = None
    if header.get("optimizer"):
        meta = header["optimizer"]
        state = {}
        for pid, slots in sorted(meta["state"].items(), key=lambda kv: int(kv[0])):
            state[int(pid)] = {k: (tensors[f"opt/{pid}/{k}"] if v == "tensor" else v) for k, v in slots.items()}
        opt_state = {"state": state, "param_groups": meta["param_groups"]}
    header.pop("_payload_start", None)
    return model, opt_state, header
