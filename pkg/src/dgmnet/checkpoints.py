"""Model checkpoints: a manifest JSON plus one raw parameter payload.

Layout of a checkpoint directory:

    manifest.json   spec serialization, ordered parameter name -> shape table,
                    frozen parameter names, sha256 of the payload, extras
    params.bin      float32 little-endian tensor data, concatenated in
                    manifest order

The payload hash doubles as the freezing witness: hashing a frozen
sub-module's parameters before and after training must give identical hex.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .shape_generator import GeneratorSpec, ShapeDecoder, freeze

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def parameter_hash(module: nn.Module, prefix: str = "") -> str:
    """sha256 over (name, shape, float32 LE bytes) of parameters and buffers,
    sorted by name. Buffers are included so batch-norm statistics count."""
    digest = hashlib.sha256()
    entries = list(module.named_parameters()) + list(module.named_buffers())
    for name, tensor in sorted(entries, key=lambda kv: kv[0]):
        digest.update(f"{prefix}{name}:{tuple(tensor.shape)}:".encode())
        digest.update(_tensor_bytes(tensor))
    return digest.hexdigest()


def _spec_to_json(spec) -> dict:
    out = {}
    for f in dataclasses.fields(spec):
        value = getattr(spec, f.name)
        if dataclasses.is_dataclass(value):
            value = _spec_to_json(value)
        elif isinstance(value, tuple):
            value = list(value)
        elif hasattr(value, "value"):  # enums
            value = value.value
        out[f.name] = value
    return out


def save_checkpoint(module: nn.Module, path, spec=None, extra: dict | None = None) -> Path:
    """Write a checkpoint directory; returns its path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = list(module.named_parameters()) + list(module.named_buffers())
    entries.sort(key=lambda kv: kv[0])
    payload = b"".join(_tensor_bytes(t) for _, t in entries)
    manifest = {
        "format": "dgmnet-checkpoint-v1",
        "spec_class": type(spec).__name__ if spec is not None else None,
        "spec": _spec_to_json(spec) if spec is not None else None,
        "parameters": [
            {"name": name, "shape": list(t.shape), "buffer": not isinstance(t, nn.Parameter)}
            for name, t in entries
        ],
        "frozen_names": sorted(getattr(module, "frozen_names", set())),
        "frozen": all(not p.requires_grad for p in module.parameters()),
        "content_hash": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    (path / PARAMS_NAME).write_bytes(payload)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    return json.loads((Path(path) / MANIFEST_NAME).read_text())


def load_parameters(module: nn.Module, path) -> nn.Module:
    """Load a checkpoint payload into an architecture-compatible module."""
    path = Path(path)
    manifest = read_manifest(path)
    payload = (path / PARAMS_NAME).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["content_hash"]:
        raise ValueError(f"{path}: payload does not match its manifest hash")
    tensors = {}
    offset = 0
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        offset += n * 4
        tensors[entry["name"]] = torch.from_numpy(raw.copy().reshape(shape))
    state = module.state_dict()
    missing = set(state) - set(tensors)
    unexpected = set(tensors) - set(state)
    if missing or unexpected:
        raise ValueError(
            f"{path}: parameter names do not match the module "
            f"(missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})"
        )
    converted = {name: t.to(state[name].dtype).reshape(state[name].shape) for name, t in tensors.items()}
    module.load_state_dict(converted)
    return module


def _generator_spec_from_json(raw: dict) -> GeneratorSpec:
    return GeneratorSpec(
        landmark_dim=raw["landmark_dim"],
        projection=tuple(raw["projection"]),
        upconv_stages=raw["upconv_stages"],
        output_size=tuple(raw["output_size"]),
    )


def load_generator_checkpoint(path) -> ShapeDecoder:
    """Rebuild a frozen shape decoder from its checkpoint directory."""
    manifest = read_manifest(path)
    if manifest.get("spec_class") != "GeneratorSpec":
        raise ValueError(f"{path} is not a generator checkpoint")
    net = ShapeDecoder(_generator_spec_from_json(manifest["spec"]))
    load_parameters(net, path)
    return freeze(net)


def load_model_checkpoint(path):
    """Rebuild a segmentation network (any variant) from its checkpoint."""
    from .architectures import ModelSpec, Variant, build_model

    manifest = read_manifest(path)
    if manifest.get("spec_class") != "ModelSpec":
        raise ValueError(f"{path} is not a segmentation model checkpoint")
    raw = dict(manifest["spec"])
    generator_spec = (
        _generator_spec_from_json(raw["generator"]) if raw.get("generator") else None
    )
    spec = ModelSpec(
        variant=Variant(raw["variant"]),
        levels=raw["levels"],
        base_filters=raw["base_filters"],
        se_reduction=raw["se_reduction"],
        dropout_rate=raw["dropout_rate"],
        input_size=tuple(raw["input_size"]),
        max_slices=raw["max_slices"],
        fc_hidden=raw["fc_hidden"],
        model_path_pool=raw["model_path_pool"],
        generator=generator_spec,
    )
    model = build_model(spec)
    load_parameters(model, path)
    model.eval()
    return model
