"""Single-file checkpoint archive.

Layout::

    magic      8 bytes  b"MPMAECKP"
    version    u32
    header_len u64
    header     UTF-8 JSON (config echo, epoch, tensor index, extra metadata)
    payload    concatenated little-endian tensor bytes
    checksum   32 bytes SHA-256 over everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, ShapeMismatch, UnsupportedVersion

MAGIC = b"MPMAECKP"
VERSION = 1
_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_NAME_OF = {t: n for n, (t, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    epoch: int
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def _flatten_optimizer(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, scalars = {}, {}
    for idx, st in state["state"].items():
        for key, val in st.items():
            name = f"{idx}.{key}"
            if torch.is_tensor(val):
                tensors[name] = val
            else:
                scalars[name] = val
    return tensors, {"param_groups": state["param_groups"], "scalars": scalars}


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], info: dict) -> dict:
    state: dict[int, dict] = {}
    for name, val in list(tensors.items()) + list(info.get("scalars", {}).items()):
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": info["param_groups"]}


def save_checkpoint(
    path: str | os.PathLike,
    model: torch.nn.Module,
    config: dict,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    meta: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Write atomically (temp file then rename)."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        opt_t, opt_info = _flatten_optimizer(optimizer.state_dict())
        tensors.update({f"optim.{k}": v for k, v in opt_t.items()})
        meta["optimizer"] = opt_info
    tensors["rng.torch"] = torch.get_rng_state()
    tensors.update(extra_tensors or {})

    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAME_OF:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
        dname = _NAME_OF[t.dtype]
        data = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        index.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "epoch": int(epoch), "tensors": index, "meta": meta}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 52 or raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint archive")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}, expected {VERSION}")
    header = json.loads(body[20 : 20 + hlen])
    payload = memoryview(body)[20 + hlen :]
    tensors = {}
    for rec in header["tensors"]:
        tdtype, npdtype = _DTYPES[rec["dtype"]]
        buf = payload[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=npdtype).reshape(rec["shape"]).copy()
        tensors[rec["name"]] = torch.from_numpy(arr).to(tdtype)
    return Checkpoint(tensors, header["config"], header["epoch"], header["meta"])


def load_state_strict(module: torch.nn.Module, state: dict[str, torch.Tensor], what: str = "model") -> None:
    """Load ``state`` into ``module``, naming the first mismatched tensor."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise ShapeMismatch(f"{what}: missing tensors {missing[:5]}, unexpected {unexpected[:5]}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ShapeMismatch(f"{what}: tensor {k} has shape {tuple(state[k].shape)} in checkpoint, model expects {tuple(v.shape)}")
    module.load_state_dict(state)


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    info = ckpt.meta.get("optimizer")
    if info is None:
        raise IntegrityError("checkpoint has no optimizer state")
    optimizer.load_state_dict(_unflatten_optimizer(ckpt.section("optim"), info))


def tensor_digest(tensors) -> str:
    """SHA-256 over named tensor bytes; used for frozen-parameter checks."""
    h = hashlib.sha256()
    items = tensors.items() if isinstance(tensors, dict) else tensors
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
