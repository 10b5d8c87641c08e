"""Portable checkpoints: a JSON manifest plus one raw little-endian float32 file per tensor."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


def _arch_dict(arch) -> dict:
    return json.loads(json.dumps(asdict(arch) if is_dataclass(arch) else dict(arch)))


def save_module(module: nn.Module, directory, kind: str, arch, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in module.state_dict().items():
        arr = value.detach().cpu().numpy().astype("<f4")
        fname = f"{name}.bin"
        arr.tofile(directory / fname)
        tensors[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": FORMAT_VERSION, "kind": kind, "arch": _arch_dict(arch), "tensors": tensors,
                "extra": extra or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_into(module: nn.Module, directory, kind: str, arch) -> dict:
    """Fill ``module`` from ``directory``; rejects a different kind or architecture."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest["kind"] != kind:
        raise ArchitectureMismatch(f"checkpoint holds a {manifest['kind']!r}, expected {kind!r}")
    if manifest["arch"] != _arch_dict(arch):
        raise ArchitectureMismatch(f"checkpoint arch {manifest['arch']} != {_arch_dict(arch)}")
    own = module.state_dict()
    if set(own) != set(manifest["tensors"]):
        raise ArchitectureMismatch("parameter names differ from the checkpoint")
    state = {}
    for name, meta in manifest["tensors"].items():
        f = directory / meta["file"]
        if not f.exists():
            raise CheckpointError(f"missing tensor file {f}")
        arr = np.fromfile(f, dtype="<f4")
        shape = tuple(meta["shape"])
        if arr.size != int(np.prod(shape)) or tuple(own[name].shape) != shape:
            raise ArchitectureMismatch(f"tensor {name}: stored {shape}, model {tuple(own[name].shape)}")
        state[name] = torch.from_numpy(arr.reshape(shape).copy()).to(own[name].dtype)
    module.load_state_dict(state)
    return manifest


def save_embedder(model, directory, extra: dict | None = None) -> Path:
    return save_module(model, directory, "embedder", model.arch, extra)


def load_embedder(directory):
    from .embed import EmbedArch, OrdinalEmbedder

    arch = EmbedArch(**_tuple_fields(read_manifest(directory)["arch"]))
    model = OrdinalEmbedder(arch)
    load_into(model, directory, "embedder", arch)
    model.eval()
    return model


def save_policy(policy, directory, extra: dict | None = None) -> Path:
    return save_module(policy, directory, "policy", policy.arch, extra)


def load_policy(directory, expected_arch=None):
    from .agent import Policy, PolicyArch

    arch = PolicyArch(**read_manifest(directory)["arch"])
    if expected_arch is not None and _arch_dict(expected_arch) != _arch_dict(arch):
        raise ArchitectureMismatch(f"checkpoint arch {_arch_dict(arch)} != expected {_arch_dict(expected_arch)}")
    policy = Policy(arch)
    load_into(policy, directory, "policy", arch)
    return policy


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def param_digest_dir(directory) -> str:
    """SHA-256 over the manifest's tensor names and raw tensor bytes."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    h = hashlib.sha256()
    for name in sorted(manifest["tensors"]):
        h.update(name.encode())
        h.update((directory / manifest["tensors"][name]["file"]).read_bytes())
    return h.hexdigest()
