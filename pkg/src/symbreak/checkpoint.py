"""Checkpoints: flat little-endian float32 binary plus a JSON manifest.

The manifest lists (name, shape, offset) per parameter so the format is
language-neutral and the binary diff-able by name.
"""

import json
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
PARAMS_BIN = "params.bin"


def save_checkpoint(net, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / PARAMS_BIN, "wb") as f:
        for name in sorted(net.params):
            arr = np.ascontiguousarray(net.params[name], dtype="<f4")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"step": net.step_counter, "dtype": "<f4", "params": entries}
    with open(directory / MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return directory


def load_checkpoint_arrays(directory):
    """Read a checkpoint without needing the architecture: name -> array."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    raw = (directory / PARAMS_BIN).read_bytes()
    out = {}
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, "<f4", count=size, offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out, manifest


def load_checkpoint(net, directory):
    """Restore parameters into an existing network (shapes must match)."""
    arrays, manifest = load_checkpoint_arrays(directory)
    for name, arr in arrays.items():
        if name not in net.params:
            raise KeyError(f"checkpoint parameter {name!r} unknown to this network")
        if tuple(arr.shape) != net.params[name].shape:
            raise ValueError(
                f"{name}: checkpoint shape {arr.shape} != network {net.params[name].shape}"
            )
        net.params[name][...] = arr.astype(net.dtype)
    net.step_counter = manifest["step"]
    return net
