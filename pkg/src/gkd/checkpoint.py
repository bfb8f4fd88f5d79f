"""Checkpoints as a directory of flat tensors plus ``manifest.json``.

One subdirectory per phase tag under the run directory.  Loading validates
every tensor shape against the live module before copying anything in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import LoadError
from .tensorio import read_json, read_tensor, write_json, write_tensor

FORMAT = "gkd-checkpoint-v1"


@dataclass
class Checkpoint:
    phase: str
    tensors: dict  # "<component>.<param name>" -> float32 array
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_modules(cls, phase, modules: dict, meta=None):
        tensors = {}
        for comp, module in modules.items():
            for name, value in module.state_dict().items():
                tensors[f"{comp}.{name}"] = value.detach().cpu().numpy().astype(np.float32)
        return cls(phase, tensors, dict(meta or {}))

    def merged(self, other: "Checkpoint"):
        return Checkpoint(self.phase, {**self.tensors, **other.tensors}, {**self.meta, **other.meta})

    def components(self):
        return sorted({k.split(".", 1)[0] for k in self.tensors})

    def save(self, run_dir) -> Path:
        directory = Path(run_dir) / self.phase
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("t*.bin"):
            stale.unlink()
        entries = []
        for i, name in enumerate(sorted(self.tensors)):
            fname = f"t{i:04d}.bin"
            write_tensor(directory / fname, self.tensors[name])
            entries.append({"name": name, "shape": list(self.tensors[name].shape), "file": fname})
        write_json(directory / "manifest.json", {"format": FORMAT, "phase": self.phase, "meta": self.meta, "tensors": entries})
        return directory

    @classmethod
    def load(cls, run_dir, phase):
        directory = Path(run_dir) / phase
        path = directory / "manifest.json"
        if not path.exists():
            raise LoadError(f"no {phase} checkpoint in {run_dir}")
        manifest = read_json(path)
        if manifest.get("format") != FORMAT:
            raise LoadError(f"{path}: unsupported format {manifest.get('format')!r}")
        tensors = {}
        for e in manifest["tensors"]:
            arr = read_tensor(directory / e["file"])
            if list(arr.shape) != list(e["shape"]):
                raise LoadError(f"tensor {e['name']}: file shape {arr.shape} disagrees with manifest {e['shape']}")
            tensors[e["name"]] = arr
        return cls(manifest["phase"], tensors, manifest.get("meta", {}))

    def load_into(self, component, module: torch.nn.Module):
        """Copy ``component.*`` tensors into ``module``, shape for shape."""
        prefix = component + "."
        state = module.state_dict()
        found = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        missing = sorted(set(state) - set(found))
        if missing:
            raise LoadError(f"checkpoint {self.phase} lacks tensor {prefix}{missing[0]}")
        for name, value in found.items():
            if name not in state:
                raise LoadError(f"checkpoint tensor {prefix}{name} has no counterpart in the network")
            if tuple(state[name].shape) != tuple(value.shape):
                raise LoadError(
                    f"tensor {prefix}{name}: checkpoint shape {tuple(value.shape)} != network shape {tuple(state[name].shape)}"
                )
        with torch.no_grad():
            for name, value in found.items():
                state[name].copy_(torch.from_numpy(np.array(value, dtype=np.float32)).to(state[name].dtype))


def has_checkpoint(run_dir, phase):
    return run_dir is not None and (Path(run_dir) / phase / "manifest.json").exists()
