"""Binary checkpoint format.

Layout::

    b"DERFCKPT"            8-byte magic
    u32 version            little-endian
    u64 header_len         little-endian
    header                 UTF-8 JSON (descriptor, config, counters, blob table)
    blobs                  float32 little-endian arrays in blob-table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .field import AdamState, ArchitectureDescriptor, DerfModel, HeadParams
from .geometry import NormalizationTransform
from .train import TrainConfig, TrainState
from .voronoi import VoronoiDecomposition

MAGIC = b"DERFCKPT"
VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


_OPTIMIZERS = ("coarse", "sites", "heads")


def _blobs(state: TrainState) -> dict[str, np.ndarray]:
    m = state.model
    blobs = {"sites": m.decomposition.sites}
    blobs.update({f"coarse.{k}": v for k, v in m.coarse.arrays.items()})
    blobs.update(m.head_params())
    for name in _OPTIMIZERS:
        opt = getattr(state, f"opt_{name}")
        for path in opt.m:
            blobs[f"opt.{name}.m.{path}"] = opt.m[path]
            blobs[f"opt.{name}.v.{path}"] = opt.v[path]
    return blobs


def save_checkpoint(state: TrainState, path) -> None:
    m = state.model
    blobs = _blobs(state)
    header = {
        "descriptor": m.descriptor.to_dict(),
        "normalization": m.normalization.to_dict(),
        "beta": m.decomposition.beta,
        "n_heads": m.n_heads,
        "iteration": state.iteration,
        "config": state.config.__dict__,
        "rng": state.rng.bit_generator.state,
        "optimizers": {name: {k: getattr(getattr(state, f"opt_{name}"), k)
                              for k in ("lr", "beta1", "beta2", "eps", "step")} for name in _OPTIMIZERS},
        "blobs": [{"name": k, "shape": list(v.shape)} for k, v in blobs.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for v in blobs.values():
            f.write(np.ascontiguousarray(v, dtype=_BLOB_DTYPE).tobytes())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a DeRF checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 12:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, head_len = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos += 12
    if len(data) < pos + head_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    pos += head_len
    arrays = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _BLOB_DTYPE.itemsize
        if len(data) < pos + nbytes:
            raise CheckpointTruncatedError(f"{path}: blob {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(data, _BLOB_DTYPE, count=nbytes // 4, offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")

    desc = ArchitectureDescriptor(**header["descriptor"])
    layer_keys = [f"{name}.{wb}" for name in desc.layer_shapes() for wb in ("w", "b")]
    coarse = HeadParams(desc, {k: arrays[f"coarse.{k}"] for k in layer_keys})
    heads = [HeadParams(desc, {k: arrays[f"heads.{n}.{k}"] for k in layer_keys}) for n in range(header["n_heads"])]
    decomposition = VoronoiDecomposition(arrays["sites"], header["beta"])
    model = DerfModel(decomposition, heads, coarse, desc, NormalizationTransform.from_dict(header["normalization"]))
    opts = {}
    for name in _OPTIMIZERS:
        opt = AdamState(**header["optimizers"][name])
        prefix = f"opt.{name}.m."
        for k in arrays:
            if k.startswith(prefix):
                path_ = k[len(prefix):]
                opt.m[path_] = arrays[k]
                opt.v[path_] = arrays[f"opt.{name}.v.{path_}"]
        opts[name] = opt
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    return TrainState(model, TrainConfig(**header["config"]), opts["coarse"], opts["sites"], opts["heads"], rng,
                      iteration=header["iteration"])
