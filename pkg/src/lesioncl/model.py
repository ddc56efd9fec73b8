"""Small CNN feature extractor, projection head and checkpoint format.

The encoder is a stack of ``conv3x3 -> ReLU -> maxpool2`` blocks followed by
global average pooling; its output is the feature vector used downstream.
The projection head is only used for pretraining and its parameters carry
the ``g.`` prefix so evaluation can drop them.  Two variants exist: ``relu``
(one affine layer followed by ReLU, the default) and ``mlp`` (affine, ReLU,
affine with a hidden width of ``d_h``).

Checkpoint layout (little-endian)::

    b"LCLCKPT1"  u32 version
    u32 len, UTF-8 JSON header {"arch": ..., "seed": ..., "step": ...}
    u32 tensor count
    per tensor: u32 name len, name bytes, u32 rank, rank x u32 extents,
                float32 data
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .imageops import derive_rng

HEADS = ("relu", "mlp")
MAGIC = b"LCLCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or incompatible checkpoint files."""


@dataclass(frozen=True)
class ArchDescriptor:
    blocks: tuple[int, ...] = (8, 16, 32)
    d_z: int = 16
    in_channels: int = 3
    kernel: int = 3
    head: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not self.blocks or min(self.blocks) < 1:
            raise ValueError("need at least one conv block with >= 1 channel")
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")

    @property
    def d_h(self) -> int:
        return self.blocks[-1]

    def min_input(self) -> int:
        return 2 ** len(self.blocks)

    def to_dict(self) -> dict:
        return {"blocks": list(self.blocks), "d_z": self.d_z, "in_channels": self.in_channels,
                "kernel": self.kernel, "head": self.head}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        unknown = set(d) - {"blocks", "d_z", "in_channels", "kernel", "head"}
        if unknown:
            raise ValueError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.in_channels
        for i, c in enumerate(self.blocks):
            shapes[f"f.conv{i}.weight"] = (c, c_in, self.kernel, self.kernel)
            shapes[f"f.conv{i}.bias"] = (c,)
            c_in = c
        if self.head == "mlp":
            shapes["g.fc.weight"] = (self.d_h, self.d_h)
            shapes["g.fc.bias"] = (self.d_h,)
            shapes["g.out.weight"] = (self.d_z, self.d_h)
            shapes["g.out.bias"] = (self.d_z,)
        else:
            shapes["g.fc.weight"] = (self.d_z, self.d_h)
            shapes["g.fc.bias"] = (self.d_z,)
        return shapes


TINY = ArchDescriptor(blocks=(4, 8), d_z=4)
DESK = ArchDescriptor()


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def encoder(self) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if k.startswith("f."))

    def head(self) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if k.startswith("g."))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, nx.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)) for k, v in self.items())

    def copy(self) -> "ParamSet":
        return ParamSet((k, nx.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()


def init_params(desc: ArchDescriptor, seed: int, dtype=np.float64) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = derive_rng(seed, 0x1717)
    params = ParamSet()
    for name, shape in desc.param_shapes().items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-a, a, size=shape).astype(dtype)
        params[name] = nx.Tensor(arr, requires_grad=True, name=name)
    return params


def forward_features(params: ParamSet, desc: ArchDescriptor, x) -> nx.Tensor:
    """Encoder output ``h``.

    ``x`` is ``(C, H, W)``, ``(N, C, H, W)`` or an ``(N, H, W, C)`` image
    array (channels-last arrays are transposed).
    """
    if not isinstance(x, nx.Tensor):
        arr = np.asarray(x)
        if arr.ndim in (3, 4) and arr.shape[-1] == desc.in_channels and arr.shape[-3] != desc.in_channels:
            arr = np.moveaxis(arr, -1, -3)
        x = nx.Tensor(np.ascontiguousarray(arr, dtype=params["f.conv0.weight"].dtype))
    chan_axis = x.data.ndim - 3
    if x.data.ndim not in (3, 4) or x.shape[chan_axis] != desc.in_channels:
        raise nx.ShapeError(f"expected {desc.in_channels}-channel input, got shape {x.shape}")
    side = min(x.shape[-2:])
    if side < desc.min_input():
        raise nx.ShapeError(f"input {x.shape[-2:]} too small for {len(desc.blocks)} pooling stages")
    h = x
    bias_shape = (-1, 1, 1)
    for i in range(len(desc.blocks)):
        w = params[f"f.conv{i}.weight"]
        b = params[f"f.conv{i}.bias"]
        h = nx.conv2d(h, w, stride=1, pad=desc.kernel // 2)
        h = nx.add(h, nx.reshape(b, bias_shape))
        h = nx.relu(h)
        h = nx.maxpool2(h)
    return nx.global_avg_pool(h)


def forward_projection(params: ParamSet, h: nx.Tensor) -> nx.Tensor:
    z = nx.relu(nx.affine(h, params["g.fc.weight"], params["g.fc.bias"]))
    if "g.out.weight" in params:
        z = nx.affine(z, params["g.out.weight"], params["g.out.bias"])
    return z


# -- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    params: ParamSet
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    def digest(self) -> str:
        return self.params.digest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps(
        {"arch": ckpt.arch.to_dict(), "seed": int(ckpt.seed), "step": int(ckpt.step), "extra": ckpt.extra},
        sort_keys=True,
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    chunks.append(struct.pack("<I", len(ckpt.params)))
    for name, t in ckpt.params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, drop_head: bool = False, dtype=np.float32) -> Checkpoint:
    """Read a checkpoint; ``drop_head`` omits the projection-head tensors."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        arch = ArchDescriptor.from_dict(header["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    count = r.u32()
    expected = arch.param_shapes()
    params = ParamSet()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if expected.get(name) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} does not match architecture")
        if drop_head and name.startswith("g."):
            continue
        params[name] = nx.Tensor(data.astype(dtype), requires_grad=True, name=name)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    want = {k for k in expected if not (drop_head and k.startswith("g."))}
    if set(params) != want:
        raise CheckpointError(f"{path}: missing tensors {sorted(want - set(params))}")
    return Checkpoint(arch, params, int(header.get("seed", 0)), int(header.get("step", 0)), header.get("extra", {}))
