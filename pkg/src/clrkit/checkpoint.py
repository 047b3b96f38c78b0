"""Checkpoint container: one zip of little-endian .npy arrays plus a JSON entry."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import atomic_write_bytes

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    states: dict[str, dict[str, torch.Tensor]]

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def config(self) -> dict | None:
        return self.meta.get("config")

    def load_into(self, name: str, module: nn.Module) -> None:
        if name not in self.states:
            raise CheckpointError(f"checkpoint has no module {name!r}")
        module.load_state_dict(self.states[name], strict=True)


def _to_le(a: np.ndarray) -> np.ndarray:
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], *, config: dict | None = None,
                    step: int = 0, extra: dict | None = None) -> str:
    """Write all module state dicts; returns the SHA-256 of the archive."""
    buf = io.BytesIO()
    index = {}
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for mod_name, module in modules.items():
            for key, t in module.state_dict().items():
                name = f"{mod_name}.{key}"
                arr = _to_le(t.detach().cpu().numpy())
                npy = io.BytesIO()
                np.lib.format.write_array(npy, arr, allow_pickle=False)
                zf.writestr(f"arrays/{name}.npy", npy.getvalue())
                index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape)}
        meta = {"format_version": FORMAT_VERSION, "step": step, "config": config,
                "modules": list(modules), "arrays": index, "extra": extra or {}}
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
    data = buf.getvalue()
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')}")
        states: dict[str, dict[str, torch.Tensor]] = {m: {} for m in meta["modules"]}
        for name in meta["arrays"]:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")),
                                           allow_pickle=False)
            mod, key = name.split(".", 1)
            states[mod][key] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(meta, states)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
