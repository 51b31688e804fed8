"""Model checkpoint format: magic, architecture text, named float32 arrays.

Layout:

    b"ANET1\\n"
    8-byte little-endian uint64: header length
    header JSON: {"kind", "arch", "variant", "arrays": [[name, [shape]], ...]}
    raw little-endian float32 buffers, concatenated in header order

Arrays are the learnable parameters in declaration order followed by the
per-channel running statistics of every normalization layer, so a loaded
model is inference-ready.  Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import AnchorNetModel, ArchSpec, DownstreamModel, build_anchornet

MAGIC = b"ANET1\n"


class WeightFormatError(ValueError):
    """File is not a recognizable checkpoint."""


def _state_arrays(model) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p, _ in model.parameters()]
    for bn_name, bn in model.batchnorms():
        arrays.append((f"{bn_name}.running_mean", bn.running_mean))
        arrays.append((f"{bn_name}.running_var", bn.running_var))
    return arrays


def save_model(model, path: str) -> None:
    """Write an AnchorNet or downstream checkpoint (float32 on disk)."""
    if isinstance(model, AnchorNetModel):
        kind, arch, variant = "anchornet", model.spec.canonical_text(), None
    elif isinstance(model, DownstreamModel):
        kind, arch, variant = "downstream", model.arch_text(), model.variant
    else:
        raise WeightFormatError(f"cannot serialize {type(model).__name__}")
    arrays = _state_arrays(model)
    header = {
        "kind": kind,
        "arch": arch,
        "variant": variant,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path: str):
    """Rebuild a model from a checkpoint; loaded models count as trained."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {data[:6]!r}")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise WeightFormatError(f"{path}: corrupt header") from err

    kind = header.get("kind")
    if kind == "anchornet":
        model = build_anchornet(ArchSpec.from_text(header["arch"]), seed=0)
    elif kind == "downstream":
        layers, classes, in_ch = DownstreamModel.layers_from_text(header["arch"])
        model = DownstreamModel(
            classes, seed=0, variant=header.get("variant") or "global",
            layers=layers, in_channels=in_ch,
        )
    else:
        raise WeightFormatError(f"{path}: unknown model kind {kind!r}")

    offset = start + hlen
    values: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(data):
            raise WeightFormatError(f"{path}: truncated array {name}")
        values[name] = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end

    slots = {name: p for name, p, _ in model.parameters()}
    for name, p in slots.items():
        if name not in values:
            raise WeightFormatError(f"{path}: missing array {name}")
        if tuple(values[name].shape) != p.data.shape:
            raise WeightFormatError(f"{path}: shape mismatch for {name}")
        p.data = values[name]
    for bn_name, bn in model.batchnorms():
        bn.running_mean = values[f"{bn_name}.running_mean"]
        bn.running_var = values[f"{bn_name}.running_var"]
        bn.initialized = True
    model.trained = True
    return model
