"""Versioned checkpoint file: named parameter groups, spec fingerprints, step and RNG state.

Layout::

    MULTISAT-CKPT <version>\\n
    <header byte length>\\n
    <JSON header, sorted keys>
    <raw little-endian tensor payload>

The encoding depends only on the stored values, so identical training runs
produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import param_fingerprint

MAGIC = b"MULTISAT-CKPT"
VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
}


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    groups: dict[str, dict[str, torch.Tensor]]
    specs: dict[str, dict] = field(default_factory=dict)
    spec_fingerprints: dict[str, str] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def fingerprint(self, group: str) -> str:
        return param_fingerprint(self.groups[group])

    def fingerprints(self) -> dict[str, str]:
        return {g: self.fingerprint(g) for g in sorted(self.groups)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for group in sorted(ckpt.groups):
        for name in sorted(ckpt.groups[group]):
            t = ckpt.groups[group][name].detach().cpu().contiguous()
            dtype = str(t.dtype).replace("torch.", "")
            if dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {dtype} for {group}/{name}")
            raw = t.numpy().astype(_DTYPES[dtype]).tobytes()
            tensors.append({"group": group, "name": name, "dtype": dtype, "shape": list(t.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "version": VERSION,
        "step": ckpt.step,
        "specs": ckpt.specs,
        "spec_fingerprints": ckpt.spec_fingerprints,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b" %d\n" % VERSION)
        fh.write(b"%d\n" % len(blob))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline()
        if not first.startswith(MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        version = int(first.split()[1])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        n = int(fh.readline())
        header = json.loads(fh.read(n))
        payload = fh.read()
    groups: dict[str, dict[str, torch.Tensor]] = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(raw) != t["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload at {t['group']}/{t['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[t["dtype"]]).reshape(t["shape"]).copy()
        groups.setdefault(t["group"], {})[t["name"]] = torch.from_numpy(arr)
    return Checkpoint(
        groups=groups,
        specs=header["specs"],
        spec_fingerprints=header["spec_fingerprints"],
        step=header["step"],
        rng_state=header["rng_state"],
        meta=header["meta"],
    )


def module_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
