"""SFSL checkpoint files.

Layout (little-endian): magic ``SFSL``, version u32, digest length u32 and
ASCII digest bytes, tensor count u32, then per tensor: name length u16,
UTF-8 name, ndim u8, dims u32 each, f64 payload in C order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backbone import Params
from .config import RunConfig, parse_config_text
from .glc.optim import AdamState
from .model import CountModel

MAGIC = b"SFSL"
VERSION = 1
RUN_CONFIG_KEY = "meta.run_config"
ADAM_PREFIX = "adam."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_digest: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        digest = self.config_digest.encode("ascii")
        buf = bytearray(MAGIC)
        buf += struct.pack("<II", self.version, len(digest)) + digest
        buf += struct.pack("<I", len(self.tensors))
        for name, arr in self.tensors.items():
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            buf += struct.pack("<H", len(raw_name)) + raw_name
            buf += struct.pack("<B", arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        return bytes(buf)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        off = 0

        def take(n: int) -> bytes:
            nonlocal off
            if off + n > len(raw):
                raise CheckpointError(f"checkpoint truncated at offset {off} (need {n} bytes, have {len(raw) - off})")
            chunk = raw[off : off + n]
            off += n
            return chunk

        if take(4) != MAGIC:
            raise CheckpointError(f"not an SFSL checkpoint (magic {raw[:4]!r})")
        version, dlen = struct.unpack("<II", take(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = take(dlen).decode("ascii")
        (count,) = struct.unpack("<I", take(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = take(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            tensors[name] = data
        if off != len(raw):
            raise CheckpointError(f"trailing bytes after offset {off}")
        return cls(config_digest=digest, tensors=tensors, version=version)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def make_checkpoint(config: RunConfig, params: Params, state: AdamState | None = None) -> Checkpoint:
    """Parameters (plus optional Adam moments) and the run config needed to rebuild the model."""
    tensors: dict[str, np.ndarray] = {name: t.data.copy() for name, t in params.items()}
    tensors[RUN_CONFIG_KEY] = _encode_text(config.canonical_text())
    if state is not None:
        tensors[ADAM_PREFIX + "step"] = np.array([float(state.step)])
        for name in params:
            if name in state.m:
                tensors[ADAM_PREFIX + "m." + name] = np.array(state.m[name])
                tensors[ADAM_PREFIX + "v." + name] = np.array(state.v[name])
    return Checkpoint(config_digest=config.digest(), tensors=tensors)


def restore(checkpoint: Checkpoint) -> tuple[RunConfig, CountModel, Params]:
    """Rebuild (config, model, params) from a checkpoint written by make_checkpoint."""
    if RUN_CONFIG_KEY not in checkpoint.tensors:
        raise CheckpointError(f"checkpoint has no {RUN_CONFIG_KEY!r} entry")
    config = parse_config_text(_decode_text(checkpoint.tensors[RUN_CONFIG_KEY]))
    if config.digest() != checkpoint.config_digest:
        raise CheckpointError("stored run config does not match the checkpoint digest")
    model = CountModel(config.model_config())
    expected = model.init_params(0)
    params: Params = {}
    for name, ref in expected.items():
        if name not in checkpoint.tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = checkpoint.tensors[name]
        if arr.shape != ref.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, expected {ref.shape}")
        params[name] = Tensor(arr, requires_grad=True)
    return config, model, params
