"""Checkpoint container and image I/O.

A checkpoint is two files sharing a stem:

``<stem>.npz``
    flat mapping of string keys to arrays (``numpy.savez``, uncompressed).
``<stem>.json``
    manifest: ``{"format": "apa-ckpt/1", "kind": ..., "arrays": {key:
    {"shape": [...], "dtype": ...}}, "sha256": <hash of the npz>, "meta":
    {...}}``. ``meta`` carries whatever the writer needs to rebuild the object
    (network config, schedule, seed).

Loading recomputes the hash and checks every declared key, so a truncated or
edited file is refused with its path rather than silently loaded.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from apa.errors import ArtifactError

FORMAT = "apa-ckpt/1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj, length=12) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(f"missing file {path}", path) from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt JSON in {path}: {exc}", path) from None


def _to_numpy(v):
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy()
    return np.asarray(v)


def save_checkpoint(stem, arrays: dict, kind: str, meta=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: _to_numpy(v) for k, v in arrays.items()}
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    data = buf.getvalue()
    npz = stem.with_suffix(".npz")
    npz.write_bytes(data)
    manifest = {
        "format": FORMAT,
        "kind": kind,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
        "sha256": hashlib.sha256(data).hexdigest(),
        "meta": meta or {},
    }
    write_json(stem.with_suffix(".json"), manifest)
    return manifest


def load_checkpoint(stem, kind=None):
    """Return ``(arrays, manifest)``; raises ``ArtifactError`` naming the bad file."""
    stem = Path(stem)
    mpath, npz = stem.with_suffix(".json"), stem.with_suffix(".npz")
    manifest = read_json(mpath)
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ArtifactError(f"{mpath} is not an {FORMAT} manifest", mpath)
    for key in ("kind", "arrays", "sha256", "meta"):
        if key not in manifest:
            raise ArtifactError(f"manifest {mpath} lacks required key {key!r}", mpath)
    if kind is not None and manifest["kind"] != kind:
        raise ArtifactError(f"{mpath} holds a {manifest['kind']!r} checkpoint, expected {kind!r}", mpath)
    try:
        data = npz.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"missing checkpoint data {npz}", npz) from None
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise ArtifactError(f"checksum mismatch for {npz} (manifest {mpath})", npz)
    with np.load(io.BytesIO(data)) as f:
        arrays = {k: f[k] for k in f.files}
    for k, spec in manifest["arrays"].items():
        if k not in arrays or list(arrays[k].shape) != spec["shape"]:
            raise ArtifactError(f"array {k!r} in {npz} does not match manifest {mpath}", mpath)
    return arrays, manifest


def state_to_arrays(module, prefix=""):
    return {prefix + k: v for k, v in module.state_dict().items()}


def arrays_to_state(arrays, prefix=""):
    return {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}


def to_uint8(x):
    """``[3, H, W]`` float tensor in [0, 1] to ``[H, W, 3]`` uint8 (round half up)."""
    x = x.detach().cpu().clamp(0, 1).to(torch.float64)
    return np.floor(x.permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


def save_png(x, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def load_png(path):
    """PNG file to ``[3, H, W]`` float32 tensor, values mapped linearly to [0, 1]."""
    try:
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ArtifactError(f"missing image {path}", path) from None
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()
