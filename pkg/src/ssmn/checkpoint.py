"""Binary checkpoint format.

Layout (all header lines UTF-8, newline-terminated)::

    SSMN-CHECKPOINT <version>
    arch <architecture hash of the config>
    phase <tag>
    config <n bytes>          followed by the key = value config text (locations omitted)
    vocab <n names>           followed by one name per line
    tensors <count>
    <name> <ndim> <dim>...    per tensor, followed by its float64 little-endian bytes

Tensors are written in sorted name order, so equal parameters give equal
bytes.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .factors import FactorParams, PartNameTable

MAGIC = "SSMN-CHECKPOINT"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: FactorParams
    config: RunConfig
    phase: str


def dumps(params: FactorParams, config: RunConfig, phase: str) -> bytes:
    out = io.BytesIO()
    text = config.stored_text().encode()
    out.write(f"{MAGIC} {VERSION}\narch {config.arch_hash()}\nphase {phase}\n".encode())
    out.write(f"config {len(text)}\n".encode() + text)
    out.write(f"vocab {len(params.vocab.names)}\n".encode())
    out.write("".join(n + "\n" for n in params.vocab.names).encode())
    names = params.names()
    out.write(f"tensors {len(names)}\n".encode())
    for n in names:
        v = np.ascontiguousarray(params[n].value, dtype="<f8")
        out.write(f"{n} {v.ndim}{''.join(' %d' % d for d in v.shape)}\n".encode())
        out.write(v.tobytes())
    return out.getvalue()


def save(path, params: FactorParams, config: RunConfig, phase: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, config, phase))
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"{self.source}: truncated header")
        text = self.data[self.pos:end].decode()
        self.pos = end + 1
        return text

    def field(self, key: str) -> str:
        head, _, rest = self.line().partition(" ")
        if head != key:
            raise CheckpointError(f"{self.source}: expected '{key}' record, found {head!r}")
        return rest

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated payload")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def loads(data: bytes, source: str = "<checkpoint>") -> Checkpoint:
    r = _Reader(data, source)
    magic, _, version = r.line().partition(" ")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if version != str(VERSION):
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads {VERSION})")
    arch = r.field("arch")
    phase = r.field("phase")
    config = RunConfig.from_text(r.take(int(r.field("config"))).decode(), source)
    if config.arch_hash() != arch:
        raise CheckpointError(f"{source}: stored config does not match its architecture hash")
    vocab = PartNameTable([r.line() for _ in range(int(r.field("vocab")))])
    expected = FactorParams.initialize(config.model_spec(), vocab, seed=0)
    tensors = {}
    for _ in range(int(r.field("tensors"))):
        name, *dims = r.line().split(" ")
        shape = tuple(int(d) for d in dims[1:])
        if int(dims[0]) != len(shape):
            raise CheckpointError(f"{source}: malformed shape header for {name}")
        if name not in expected.tensors:
            raise CheckpointError(f"{source}: unexpected tensor {name!r} for this architecture")
        if shape != expected[name].shape:
            raise CheckpointError(f"{source}: {name} has shape {shape}, architecture expects {expected[name].shape}")
        value = np.frombuffer(r.take(8 * int(np.prod(shape, dtype=np.int64))), dtype="<f8").reshape(shape)
        tensors[name] = ad.param(value.astype(np.float64), name)
    missing = set(expected.tensors) - set(tensors)
    if missing:
        raise CheckpointError(f"{source}: missing tensors {sorted(missing)}")
    if r.pos != len(data):
        raise CheckpointError(f"{source}: trailing bytes after last tensor")
    return Checkpoint(FactorParams(config.model_spec(), vocab, tensors), config, phase)


def load(path, expect: RunConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = loads(path.read_bytes(), str(path))
    if expect is not None and expect.arch_hash() != ckpt.config.arch_hash():
        raise CheckpointError(f"{path}: architecture hash {ckpt.config.arch_hash()} differs from the "
                              f"requested config ({expect.arch_hash()})")
    return ckpt
