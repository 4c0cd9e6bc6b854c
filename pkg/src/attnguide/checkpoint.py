"""Binary checkpoint format.

Layout::

    b"AGCKPT1\\n"
    u32 length + UTF-8 JSON config block (configs, vocab, step, tensor manifest)
    repeated tensor records:
        u32 name length, name bytes, u32 rank, u32 dims..., float32 payload

All integers and floats are little-endian.  Optimizer moments live under the
``adam.m/`` and ``adam.v/`` prefixes; the numpy PCG64 generator state is stored
as 16-bit chunks under ``rng/pcg64``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterStore, init_parameters, parameter_shapes
from .objective import GuidanceConfig

MAGIC = b"AGCKPT1\n"
FORMAT_VERSION = 1
M_PREFIX = "adam.m/"
V_PREFIX = "adam.v/"
RNG_NAME = "rng/pcg64"

_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelConfig
    guidance: GuidanceConfig
    vocab: list[str]
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    train: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def parameter_store(self) -> ParameterStore:
        return ParameterStore.from_arrays(self.model, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def fresh(cls, model: ModelConfig, vocab: list[str], seed: int = 0,
              guidance: GuidanceConfig | None = None) -> "Checkpoint":
        """Checkpoint of an untrained model."""
        if len(vocab) != model.vocab_size:
            raise CheckpointError("vocabulary size disagrees with the model config")
        store = init_parameters(model, seed)
        return cls(model, guidance or GuidanceConfig(), list(vocab), store.arrays())


def _encode_rng(state: dict) -> np.ndarray:
    inner = state["state"]
    chunks = []
    for value, width in ((inner["state"], 128), (inner["inc"], 128),
                         (state["has_uint32"], 16), (state["uinteger"], 32)):
        for shift in range(0, width, 16):
            chunks.append((int(value) >> shift) & 0xFFFF)
    return np.array(chunks, dtype=np.float32)


def _decode_rng(arr: np.ndarray) -> dict:
    vals = [int(v) for v in arr]
    if len(vals) != 19 or any(v < 0 or v > 0xFFFF for v in vals):
        raise CheckpointError(f"malformed tensor {RNG_NAME}")

    def join(chunk):
        return sum(v << (16 * i) for i, v in enumerate(chunk))

    return {
        "bit_generator": "PCG64",
        "state": {"state": join(vals[0:8]), "inc": join(vals[8:16])},
        "has_uint32": join(vals[16:17]),
        "uinteger": join(vals[17:19]),
    }


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs = list(ckpt.params.items())
    recs += [(M_PREFIX + k, v) for k, v in ckpt.adam_m.items()]
    recs += [(V_PREFIX + k, v) for k, v in ckpt.adam_v.items()]
    if ckpt.rng_state is not None:
        recs.append((RNG_NAME, _encode_rng(ckpt.rng_state)))
    return recs


def to_bytes(ckpt: Checkpoint) -> bytes:
    records = _records(ckpt)
    header = {
        "version": ckpt.version,
        "model": ckpt.model.to_dict(),
        "guidance": ckpt.guidance.to_dict(),
        "train": ckpt.train,
        "vocab": ckpt.vocab,
        "step": ckpt.step,
        "tensors": [[name, list(arr.shape)] for name, arr in records],
    }
    block = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(len(block)))
    buf.write(block)
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for dim in arr.shape:
            buf.write(_U32.pack(dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temporary file in the same directory is renamed over ``path``."""
    path = Path(path)
    payload = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    try:
        header = json.loads(r.take(r.u32("config length"), "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    manifest = {name: tuple(shape) for name, shape in header["tensors"]}

    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(data):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * count, f"payload of {name}")
        if name not in manifest:
            raise CheckpointError(f"unexpected tensor {name}")
        if shape != manifest[name]:
            raise CheckpointError(f"tensor {name} has shape {shape}, manifest says {manifest[name]}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    for name in manifest:
        if name not in tensors:
            raise CheckpointError(f"checkpoint truncated: tensor {name} missing")

    model = ModelConfig(**header["model"])
    expected = parameter_shapes(model)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"parameter {name} missing")
        if tensors[name].shape != shape:
            raise CheckpointError(f"parameter {name} has shape {tensors[name].shape}, config implies {shape}")
        params[name] = tensors[name]
    adam_m = {k[len(M_PREFIX):]: v for k, v in tensors.items() if k.startswith(M_PREFIX)}
    adam_v = {k[len(V_PREFIX):]: v for k, v in tensors.items() if k.startswith(V_PREFIX)}
    for moments, prefix in ((adam_m, M_PREFIX), (adam_v, V_PREFIX)):
        for k, v in moments.items():
            if k not in expected or v.shape != expected[k]:
                raise CheckpointError(f"optimizer tensor {prefix}{k} does not match any parameter")
    rng_state = _decode_rng(tensors[RNG_NAME]) if RNG_NAME in tensors else None
    if len(header["vocab"]) != model.vocab_size:
        raise CheckpointError("vocabulary size disagrees with the model config")
    return Checkpoint(
        model=model,
        guidance=GuidanceConfig.from_dict(header["guidance"]),
        vocab=list(header["vocab"]),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        step=int(header["step"]),
        rng_state=rng_state,
        train=header.get("train", {}),
        version=header["version"],
    )


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
