"""Self-describing checkpoint container shared by the CLI stages.

A checkpoint is a JSON document with a format version, the network
descriptors, the seed, the flat parameter array as base64 of little-endian
64-bit floats, and free-form metadata. Round-trips are bit-exact.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Conv2d, Dense, Flatten, NetworkSpec, ParamVector, Relu, Tanh, param_layout
from .surrogate import SurrogateSpec

FORMAT_VERSION = 1


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"type": "dense", "in_dim": layer.in_dim, "out_dim": layer.out_dim, "bias": layer.bias}
    if isinstance(layer, Conv2d):
        return {
            "type": "conv2d",
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "kernel": layer.kernel,
        }
    return {"type": type(layer).__name__.lower()}


def _layer_from_dict(d: dict):
    kind = d["type"]
    if kind == "dense":
        return Dense(d["in_dim"], d["out_dim"], d.get("bias", True))
    if kind == "conv2d":
        return Conv2d(d["in_channels"], d["out_channels"], d["kernel"])
    if kind == "relu":
        return Relu()
    if kind == "tanh":
        return Tanh()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer type {kind!r}")


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "layers": [_layer_to_dict(layer) for layer in spec.layers],
        "input_shape": list(spec.input_shape),
        "output_dim": spec.output_dim,
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        tuple(_layer_from_dict(ld) for ld in d["layers"]),
        tuple(d["input_shape"]),
        d["output_dim"],
    )


def _encode_params(values: np.ndarray) -> str:
    return base64.b64encode(np.asarray(values, dtype="<f8").tobytes()).decode("ascii")


def _decode_params(blob: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(blob), dtype="<f8").astype(np.float64)


@dataclass
class MapCheckpoint:
    spec: NetworkSpec
    params: ParamVector
    seed: int
    metadata: dict


@dataclass
class SurrogateCheckpoint:
    surrogate: SurrogateSpec
    seed: int
    base_checkpoint: str
    biased: bool
    context_dataset: str
    metadata: dict


def _write(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read(path) -> dict:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return doc


def save_map_checkpoint(path, spec: NetworkSpec, params: ParamVector, seed: int, metadata: dict) -> None:
    _write(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "map",
            "spec": spec_to_dict(spec),
            "seed": int(seed),
            "params_le_f64": _encode_params(params.values),
            "metadata": metadata,
        },
    )


def load_map_checkpoint(path) -> MapCheckpoint:
    doc = _read(path)
    if doc.get("kind") != "map":
        raise ValueError(f"{path} is not a MAP checkpoint")
    spec = spec_from_dict(doc["spec"])
    params = ParamVector(_decode_params(doc["params_le_f64"]), param_layout(spec))
    return MapCheckpoint(spec, params, doc["seed"], doc["metadata"])


def save_surrogate_checkpoint(
    path,
    surrogate: SurrogateSpec,
    seed: int,
    base_checkpoint: str,
    biased: bool,
    context_dataset: str,
    metadata: dict,
) -> None:
    _write(
        path,
        {
            "format_version": FORMAT_VERSION,
            "kind": "surrogate",
            "spec": spec_to_dict(surrogate.spec),
            "n_classes": surrogate.n_classes,
            "m": surrogate.m,
            "seed": int(seed),
            "params_le_f64": _encode_params(surrogate.phi.values),
            "surrogate": {
                "base_checkpoint": base_checkpoint,
                "biased": bool(biased),
                "context_dataset": context_dataset,
            },
            "metadata": metadata,
        },
    )


def load_surrogate_checkpoint(path) -> SurrogateCheckpoint:
    doc = _read(path)
    if doc.get("kind") != "surrogate":
        raise ValueError(f"{path} is not a surrogate checkpoint")
    spec = spec_from_dict(doc["spec"])
    phi = ParamVector(_decode_params(doc["params_le_f64"]), param_layout(spec))
    surrogate = SurrogateSpec(spec, doc["n_classes"], doc["m"], phi)
    extra = doc["surrogate"]
    return SurrogateCheckpoint(
        surrogate,
        doc["seed"],
        extra["base_checkpoint"],
        extra["biased"],
        extra["context_dataset"],
        doc["metadata"],
    )
