"""Binary checkpoint container.

Layout (all integers unsigned 32-bit little-endian, floats 32-bit little-endian)::

    b"TPNC" | version | len, config hash (ascii) | len, arch JSON | epoch
    n_stages, then per stage: n_nodes | n_edges | (j, i) pairs | alpha n x n
    n_tensors, then per tensor: ndim | dims | values
    n_stats, then per stat: width | mean | var
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import AlphaMatrix, Graph, GraphError
from .network import ArchitectureError, Network, build_network

MAGIC = b"TPNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: Network
    epoch: int
    config_hash: str


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def dumps(net: Network, epoch: int = 0, config_hash: str = "") -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_u32(VERSION))
    for blob in (config_hash.encode("ascii"), _canonical(net.arch)):
        out.write(_u32(len(blob)))
        out.write(blob)
    out.write(_u32(epoch))
    out.write(_u32(len(net.stages)))
    for st in net.stages:
        g = st.graph
        out.write(_u32(g.n_nodes))
        out.write(_u32(len(g.edges)))
        for j, i in g.edges:
            out.write(_u32(j) + _u32(i))
        out.write(_f32(st.alpha_matrix().values))
    tensors = [p for p in net.parameters() if p.role != "edge-weight"]
    out.write(_u32(len(tensors)))
    for p in tensors:
        out.write(_u32(p.data.ndim))
        for d in p.data.shape:
            out.write(_u32(d))
        out.write(_f32(p.data))
    stats = net.running_stats()
    out.write(_u32(len(stats)))
    for s in stats:
        out.write(_u32(s.mean.size))
        out.write(_f32(s.mean) + _f32(s.var))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def loads(buf: bytes, expected_arch: dict | None = None) -> Checkpoint:
    """Parse a checkpoint; with ``expected_arch`` the stored architecture must agree with it."""
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    config_hash = r.take(r.u32()).decode("ascii")
    try:
        arch = json.loads(r.take(r.u32()))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt architecture record") from exc
    if expected_arch is not None:
        for key, value in expected_arch.items():
            if arch.get(key) != value:
                raise CheckpointError(f"checkpoint arch {key}={arch.get(key)!r} disagrees with config {value!r}")
    epoch = r.u32()
    try:
        net = build_network(**arch)
    except (TypeError, ArchitectureError) as exc:
        raise CheckpointError(f"cannot rebuild architecture: {exc}") from exc

    n_stages = r.u32()
    if n_stages != len(net.stages):
        raise CheckpointError(f"checkpoint has {n_stages} stages, architecture has {len(net.stages)}")
    for k, st in enumerate(net.stages):
        n = r.u32()
        if n != st.n_nodes:
            raise CheckpointError(f"stage {k}: {n} nodes stored, architecture has {st.n_nodes}")
        n_edges = r.u32()
        edges = [(r.u32(), r.u32()) for _ in range(n_edges)]
        alpha = r.f32(n * n).reshape(n, n)
        try:
            st.install(Graph(n, tuple(edges)), AlphaMatrix(alpha))
        except (GraphError, ArchitectureError) as exc:
            raise CheckpointError(f"stage {k}: {exc}") from exc

    tensors = [p for p in net.parameters() if p.role != "edge-weight"]
    count = r.u32()
    if count != len(tensors):
        raise CheckpointError(f"{count} tensors stored, architecture has {len(tensors)}")
    for idx, p in enumerate(tensors):
        shape = tuple(r.u32() for _ in range(r.u32()))
        if shape != p.shape:
            raise CheckpointError(f"tensor {idx}: shape {shape} stored, architecture expects {p.shape}")
        p.data = r.f32(int(np.prod(shape, dtype=np.int64))).reshape(shape)
        p.zero_grad()

    stats = net.running_stats()
    count = r.u32()
    if count != len(stats):
        raise CheckpointError(f"{count} running stats stored, architecture has {len(stats)}")
    for idx, s in enumerate(stats):
        width = r.u32()
        if width != s.mean.size:
            raise CheckpointError(f"running stat {idx}: width {width}, expected {s.mean.size}")
        s.mean = r.f32(width)
        s.var = r.f32(width)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(net, epoch, config_hash)


def save(path: str | Path, net: Network, epoch: int = 0, config_hash: str = "") -> bytes:
    blob = dumps(net, epoch, config_hash)
    Path(path).write_bytes(blob)
    return blob


def load(path: str | Path, expected_arch: dict | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_arch)
