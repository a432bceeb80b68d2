"""Binary persistence: tensor files, checkpoints, and the corpus manifest.

Tensor file ("EMTF"): magic, u32 version, u32 rows, u32 cols, then
rows*cols little-endian float64 values row-major. Checkpoint ("EMCK"):
magic, u32 version, RNG state (two u64), config echo, and a named tensor
table in sorted name order, so save -> load -> save is byte-identical.
All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numerics import ParamSet, RngState

TENSOR_MAGIC = b"EMTF"
CHECKPOINT_MAGIC = b"EMCK"
FORMAT_VERSION = 1


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _pack_matrix(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    if array.ndim != 2:
        raise FormatError(f"tensor files hold 2-D matrices, got shape {array.shape}")
    return struct.pack("<II", *array.shape) + array.tobytes()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def matrix(self) -> np.ndarray:
        rows, cols = struct.unpack("<II", self.take(8))
        flat = np.frombuffer(self.take(rows * cols * 8), dtype="<f8")
        return flat.reshape(rows, cols).astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def write_tensor_file(path: str | Path, array: np.ndarray) -> None:
    payload = TENSOR_MAGIC + struct.pack("<I", FORMAT_VERSION) + _pack_matrix(array)
    _atomic_write(Path(path), payload)


def read_tensor_file(path: str | Path) -> np.ndarray:
    reader = _Reader(Path(path).read_bytes(), f"tensor file {path}")
    if reader.take(4) != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, not a tensor file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported tensor-file version {version}")
    matrix = reader.matrix()
    reader.done()
    return matrix


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str
    rng: RngState

    def to_param_set(self, prefix: str = "") -> ParamSet:
        params = ParamSet()
        for name in sorted(self.tensors):
            if name.startswith(prefix):
                params.add(name[len(prefix):], self.tensors[name].copy())
        return params


def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                     config_text: str, rng: RngState) -> None:
    config_bytes = config_text.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<QQ", rng.seed & (2 ** 64 - 1), rng.counter & (2 ** 64 - 1)),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(_pack_matrix(tensors[name]))
    _atomic_write(Path(path), b"".join(parts))


def read_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes(), f"checkpoint {path}")
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    seed, counter = reader.u64(), reader.u64()
    config_text = reader.take(reader.u32()).decode("utf-8")
    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        tensors[name] = reader.matrix()
    reader.done()
    return Checkpoint(tensors, config_text, RngState(seed, counter))


def params_to_tensors(params: ParamSet, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: value for name, value in params.values.items()}


# ---------------------------------------------------------------------------
# corpus manifest (JSON lines: one record per sample)
# ---------------------------------------------------------------------------

def manifest_record(index: int, motion_path: str, features_path: str, seed: int,
                    events: list) -> str:
    return json.dumps({
        "id": index,
        "motion": motion_path,
        "features": features_path,
        "seed": seed,
        "events": [{"onset": e.onset, "duration": e.duration, "part": e.part,
                    "amplitude": e.amplitude, "shape": e.shape_id} for e in events],
    }, sort_keys=True)


def parse_manifest(text: str) -> list[dict]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest line {lineno}: {exc}") from exc
    return records
