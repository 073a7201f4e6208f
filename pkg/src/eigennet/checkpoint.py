"""Checkpoint archive: named little-endian float64 arrays plus a manifest.

The file is a flat (uncompressed) zip whose entries are raw array bytes
named ``layer{i}.{Q|lambda|P|bias}`` and ``head{i}.{W|b}``, together with a
``manifest.txt`` listing every name and its shape. Entry timestamps are
pinned so identical states produce identical archives.
"""

import zipfile

import numpy as np

from .errors import FormatError

MANIFEST = "manifest.txt"
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp for reproducible bytes


def _named_arrays(model):
    entries = []
    for i, layer in enumerate(model.eigen_layers()):
        entries.append((f"layer{i}.Q", layer.Q))
        entries.append((f"layer{i}.lambda", layer.scales))
        entries.append((f"layer{i}.P", layer.P))
        if layer.bias is not None:
            entries.append((f"layer{i}.bias", layer.bias))
    for i, head in enumerate(model.heads()):
        entries.append((f"head{i}.W", head.W))
        entries.append((f"head{i}.b", head.b))
    return entries


def save_checkpoint(model, path):
    entries = _named_arrays(model)
    manifest = "".join(
        f"{name} {' '.join(str(d) for d in t.data.shape)}\n" for name, t in entries
    )
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(MANIFEST, _EPOCH), manifest)
        for name, t in entries:
            zf.writestr(zipfile.ZipInfo(name, _EPOCH), t.data.astype("<f8").tobytes())


def read_checkpoint(path):
    """Name -> array mapping as stored, validated against the manifest."""
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = zf.read(MANIFEST).decode()
        except KeyError:
            raise FormatError(f"{path}: missing {MANIFEST}") from None
        for line in manifest.splitlines():
            if not line.strip():
                continue
            name, *dims = line.split()
            shape = tuple(int(d) for d in dims)
            raw = zf.read(name)
            expected = int(np.prod(shape)) * 8 if shape else 8
            if len(raw) != expected:
                raise FormatError(f"{path}: entry {name} holds {len(raw)} bytes, manifest promises {expected}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays


def load_checkpoint(model, path):
    """Restore parameters into an architecture-compatible model."""
    arrays = read_checkpoint(path)
    for name, tensor in _named_arrays(model):
        if name not in arrays:
            raise FormatError(f"{path}: checkpoint lacks entry {name}")
        if arrays[name].shape != tensor.data.shape:
            raise FormatError(
                f"{path}: entry {name} has shape {arrays[name].shape}, model expects {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arrays[name])
