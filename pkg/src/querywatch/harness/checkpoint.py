"""Checkpoint directories: manifest.json plus one little-endian f64 blob.

Tensors are stored back to back in ``weights.bin``; the manifest maps each
tensor name to its shape, element offset and element count, and records the
layer specs needed to rebuild the models.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..models import Classifier
from ..numerics import LayerSpec
from ..vae import LatentReference, VaeModel

VERSION = 1
_F64 = np.dtype("<f8")
# model group -> checkpoint prefix
VAE_PREFIX = {"enc": "f_enc", "mu": "f_mu", "logvar": "f_sigma", "dec": "f_dec"}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups, blobs, offset = {}, [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_F64)
        groups[name] = {"shape": list(a.shape), "offset": offset, "count": int(a.size)}
        blobs.append(a.tobytes())
        offset += a.size
    manifest = {"version": VERSION, "dtype": "f64-le", "total": offset, "groups": groups}
    if extra:
        manifest.update(extra)
    (path / "weights.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path: str | Path, expected: dict[str, tuple] | None = None):
    """Return (tensors, manifest); ``expected`` maps names to required shapes."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}") from None
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {manifest.get('version')!r} is not supported (want {VERSION})"
        )
    raw = (path / "weights.bin").read_bytes()
    total = int(manifest.get("total", sum(g["count"] for g in manifest["groups"].values())))
    if len(raw) != total * _F64.itemsize:
        raise CheckpointTruncatedError(
            f"weights.bin holds {len(raw)} bytes, manifest needs {total * _F64.itemsize}"
        )
    flat = np.frombuffer(raw, dtype=_F64)
    tensors = {}
    for name, g in manifest["groups"].items():
        shape = tuple(g["shape"])
        if int(np.prod(shape, dtype=np.int64)) != g["count"]:
            raise CheckpointShapeError(f"{name}: shape {shape} does not hold {g['count']} values")
        if g["offset"] < 0 or g["offset"] + g["count"] > total:
            raise CheckpointTruncatedError(f"{name}: extends past the end of weights.bin")
        tensors[name] = flat[g["offset"] : g["offset"] + g["count"]].reshape(shape).copy()
    for name, shape in (expected or {}).items():
        if name not in tensors:
            raise CheckpointShapeError(f"missing tensor {name}")
        if tensors[name].shape != tuple(shape):
            raise CheckpointShapeError(
                f"{name}: stored shape {tensors[name].shape} but expected {tuple(shape)}"
            )
    return tensors, manifest


def _param_shapes(specs: list[LayerSpec]) -> dict[str, tuple]:
    shapes = {}
    for i, s in enumerate(specs):
        if s.kind == "affine":
            shapes[f"L{i}.W"] = (s.fan_in, s.fan_out)
            shapes[f"L{i}.b"] = (s.fan_out,)
    return shapes


def save_trained(path, g: Classifier, vae: VaeModel, ref: LatentReference) -> Path:
    tensors = {f"g/{k}": v for k, v in g.params.items()}
    for group, prefix in VAE_PREFIX.items():
        tensors.update({f"{prefix}/{k}": v for k, v in vae.params[group].items()})
    tensors["u"] = ref.u
    arch = {"g": [s.to_dict() for s in g.specs]}
    arch.update({VAE_PREFIX[grp]: [s.to_dict() for s in vae.specs[grp]] for grp in VAE_PREFIX})
    extra = {"architecture": arch, "latent_dim": vae.latent_dim}
    return save_tensors(path, tensors, extra)


def load_trained(path) -> tuple[Classifier, VaeModel, LatentReference]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {path}; run `train` first") from None
    arch = {k: [LayerSpec.from_dict(s) for s in v] for k, v in manifest.get("architecture", {}).items()}
    if set(arch) != {"g", *VAE_PREFIX.values()}:
        raise CheckpointError("checkpoint architecture is incomplete")
    L = int(manifest["latent_dim"])
    expected = {f"{p}/{k}": shp for p, specs in arch.items() for k, shp in _param_shapes(specs).items()}
    tensors, _ = load_tensors(path, expected)
    if "u" not in tensors or tensors["u"].ndim != 2 or tensors["u"].shape[1] != L:
        raise CheckpointShapeError(f"reference u must have shape (n, {L})")

    def group(prefix):
        return {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + "/")}

    g = Classifier(arch["g"], group("g"))
    vae = VaeModel(
        {grp: arch[p] for grp, p in VAE_PREFIX.items()},
        {grp: group(p) for grp, p in VAE_PREFIX.items()},
        L,
    )
    return g, vae, LatentReference(tensors["u"], L)
