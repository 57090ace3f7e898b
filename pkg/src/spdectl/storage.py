"""Binary containers: SPDD datasets, SPDM checkpoints, SPDF feature caches.

All three share one little-endian layout:

    magic (4 bytes) | u32 version | u32 header_len | header JSON | payload

The header JSON describes the payload as named float64 arrays (shape and
offset in elements) plus format-specific metadata, and carries a sha256 of
its own canonical serialization (minus the hash field) so corrupt or
truncated files fail loudly on load.  Payload bytes are raw row-major
float64, so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .util import canonical_json, config_hash

MAGIC_DATASET = b"SPDD"
MAGIC_MODEL = b"SPDM"
MAGIC_FEATURES = b"SPDF"
VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated or mismatching container file."""


def _finalize_header(header: dict) -> bytes:
    header = dict(header)
    header["header_hash"] = config_hash({k: v for k, v in header.items()
                                         if k != "header_hash"})
    return canonical_json(header).encode()


def _write(path, magic: bytes, header: dict, arrays: dict):
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = dict(header)
    header["arrays"] = entries
    blob = _finalize_header(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def _read(path, magic: bytes):
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ContainerError(f"{path}: expected magic {magic!r}, got {got!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode())
        expected = header.get("header_hash")
        actual = config_hash({k: v for k, v in header.items() if k != "header_hash"})
        if expected != actual:
            raise ContainerError(f"{path}: header hash mismatch")
        payload = fh.read()
    total = sum(int(np.prod(e["shape"])) for e in header["arrays"])
    if len(payload) != total * 8:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, "
                             f"expected {total * 8}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"]))
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + size] \
            .reshape(e["shape"]).copy()
    return header, arrays


# -- datasets -------------------------------------------------------------------


def write_dataset(dataset, path):
    from .solver import SamplerConfig

    sampler = dataset.sampler or SamplerConfig()
    header = {
        "problem": dataset.problem.descriptor(),
        "split": dataset.split,
        "config_hash": dataset.config_hash,
        "sampler": sampler.as_dict(),
        "count": len(dataset),
        "seeds": [int(tr.seed) for tr in dataset.trajectories],
    }
    arrays = {
        "states": np.stack([tr.states for tr in dataset.trajectories]),
        "forcing": np.stack([tr.forcing for tr in dataset.trajectories]),
        "noise": np.stack([tr.noise for tr in dataset.trajectories]),
    }
    _write(path, MAGIC_DATASET, header, arrays)


def read_dataset(path):
    from .solver import Dataset, SamplerConfig, Trajectory, problem_from_descriptor

    header, arrays = _read(path, MAGIC_DATASET)
    problem = problem_from_descriptor(header["problem"])
    trajectories = [
        Trajectory(states=arrays["states"][i], forcing=arrays["forcing"][i],
                   noise=arrays["noise"][i], seed=header["seeds"][i])
        for i in range(header["count"])
    ]
    return Dataset(problem=problem, trajectories=trajectories,
                   split=header["split"], config_hash=header["config_hash"],
                   sampler=SamplerConfig(**header["sampler"]))


# -- model checkpoints ------------------------------------------------------------


def save_surrogate(model, path):
    header = {
        "section": "surrogate",
        "problem": model.problem.descriptor(),
        "config": model.config.as_dict(),
    }
    arrays = {name: p.data for name, p in model.named_params()}
    _write(path, MAGIC_MODEL, header, arrays)


def load_surrogate(path):
    from .solver import problem_from_descriptor
    from .surrogate import SurrogateConfig, SurrogateModel

    header, arrays = _read(path, MAGIC_MODEL)
    if header.get("section") != "surrogate":
        raise ContainerError(f"{path}: not a surrogate checkpoint")
    problem = problem_from_descriptor(header["problem"])
    model = SurrogateModel(problem, SurrogateConfig(**header["config"]))
    _load_params(model.named_params(), arrays, path)
    return model


def save_policy(policy, path, config=None):
    header = {
        "section": "policy",
        "problem": policy.problem.descriptor(),
        "hidden": [int(layer.weight.shape[1]) for layer in policy.layers[:-1]],
        "config": config.as_dict() if config is not None else None,
    }
    arrays = {name: p.data for name, p in policy.named_params()}
    _write(path, MAGIC_MODEL, header, arrays)


def load_policy(path):
    from .control import PolicyNet
    from .solver import problem_from_descriptor

    header, arrays = _read(path, MAGIC_MODEL)
    if header.get("section") != "policy":
        raise ContainerError(f"{path}: not a policy checkpoint")
    problem = problem_from_descriptor(header["problem"])
    policy = PolicyNet(problem, hidden=tuple(header["hidden"]))
    _load_params(policy.named_params(), arrays, path)
    return policy, header.get("config")


def _load_params(named, arrays, path):
    names = [n for n, _ in named]
    if set(names) != set(arrays):
        raise ContainerError(f"{path}: parameter names do not match the model")
    for name, p in named:
        stored = arrays[name]
        if tuple(stored.shape) != p.shape:
            raise ContainerError(
                f"{path}: parameter {name} has shape {stored.shape}, "
                f"model expects {p.shape}")
        p.data = stored


# -- feature caches ---------------------------------------------------------------


def save_features(path, spec_hash: str, dataset_hash: str, features: np.ndarray):
    header = {"spec_hash": spec_hash, "dataset_hash": dataset_hash}
    _write(path, MAGIC_FEATURES, header, {"features": features})


def load_features(path, spec_hash: str, dataset_hash: str):
    """Cached feature stacks, or None when the key does not match."""
    header, arrays = _read(path, MAGIC_FEATURES)
    if header["spec_hash"] != spec_hash or header["dataset_hash"] != dataset_hash:
        return None
    return arrays["features"]
