"""Single-file checkpoint container: magic, JSON header, little-endian array blob.

Layout::

    b"A2VCKPT\\0"                 8 bytes
    header length (uint32 LE)     4 bytes
    header (UTF-8 JSON)           format_version, meta, arrays[{name, dtype, shape, offset}]
    blob                          arrays back to back, little-endian, C order
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from . import FormatError, StateError

MAGIC = b"A2VCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u8": "|u1", "bool": "|b1"}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def save_arrays(path, arrays: dict, meta: dict) -> None:
    """Write named arrays plus a JSON-able meta dict atomically."""
    entries, chunks, offset = [], [], 0
    for name in arrays:
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.asarray(a, order="C")  # unlike ascontiguousarray, keeps 0-d shapes
        tag = _TAGS.get(a.dtype.newbyteorder("<").str if a.dtype.byteorder == ">" else a.dtype.str)
        if tag is None:
            raise StateError(f"unsupported dtype {a.dtype} for {name}")
        data = a.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_arrays(path):
    """Returns (arrays as numpy, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise StateError(f"{path}: checkpoint format {header.get('format_version')} "
                         f"!= supported {FORMAT_VERSION}")
    base = 12 + n
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, prefix: str, arrays: dict, strict: bool = True):
    """Copy ``prefix.*`` arrays into a module, naming the first mismatching array."""
    own = module.state_dict()
    found = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
    for name, tensor in own.items():
        if name not in found:
            if strict:
                raise StateError(f"checkpoint lacks {prefix}.{name}")
            continue
        if tuple(found[name].shape) != tuple(tensor.shape):
            raise StateError(f"shape mismatch for {prefix}.{name}: checkpoint "
                             f"{tuple(found[name].shape)} vs model {tuple(tensor.shape)}")
    state = {k: torch.as_tensor(found[k]) for k in own if k in found}
    module.load_state_dict(state, strict=strict)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer):
    sd = optimizer.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, value in st.items():
            arrays[f"{prefix}.{idx}.{key}"] = torch.as_tensor(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()}
              for g in sd["param_groups"]]
    return arrays, groups


def load_optimizer(optimizer: torch.optim.Optimizer, prefix: str, arrays: dict, groups: list):
    state: dict = {}
    for name, value in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(value)
    current = optimizer.state_dict()["param_groups"]
    if len(current) != len(groups):
        raise StateError("optimizer parameter groups differ from checkpoint")
    restored = []
    for cur, saved in zip(current, groups):
        g = dict(saved)
        g["params"] = cur["params"]
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        restored.append(g)
    optimizer.load_state_dict({"state": state, "param_groups": restored})
