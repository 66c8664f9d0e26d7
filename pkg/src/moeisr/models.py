"""Encoder, mapper and expert bank over the autodiff core, plus checkpoints."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ParseError

VARIANT_HIDDEN = {"b": 256, "s": 128}
DEFAULT_DEPTHS = (2, 3, 4, 5)


@dataclass(frozen=True)
class EncoderSpec:
    feat_dim: int = 64
    n_res_blocks: int = 4

    def __post_init__(self):
        if self.feat_dim < 1 or self.n_res_blocks < 0:
            raise ValueError(f"invalid encoder spec {self}")


@dataclass(frozen=True)
class MapperSpec:
    n_layers: int = 5
    hidden_channels: int = 64
    out_channels: int = 4

    def __post_init__(self):
        if self.n_layers < 1 or self.out_channels < 1:
            raise ValueError(f"invalid mapper spec {self}")


@dataclass(frozen=True)
class ExpertSpec:
    depth: int
    hidden: int
    in_dim: int
    out_dim: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"expert depth counts linear layers and must be >= 2, got {self.depth}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        n, h = self.in_dim, self.hidden
        return n * h + h + (self.depth - 2) * (h * h + h) + h * self.out_dim + self.out_dim


def decoder_in_dim(feat_dim: int) -> int:
    """Unfolded latent (9 * D) plus relative coordinate (2) plus cell (2)."""
    return 9 * feat_dim + 4


def expert_bank(feat_dim: int, hidden: int, depths=DEFAULT_DEPTHS) -> list[ExpertSpec]:
    depths = sorted(depths)
    return [ExpertSpec(d, hidden, decoder_in_dim(feat_dim)) for d in depths]


@dataclass
class ModelParams:
    encoder: EncoderSpec
    mapper: MapperSpec
    experts: list[ExpertSpec]
    tensors: dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def with_tensors(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Copy with parameter values replaced (names must match)."""
        new = {k: Tensor(arrays[k], requires_grad=True, dtype=self.tensors[k].dtype) for k in self.tensors}
        return ModelParams(self.encoder, self.mapper, self.experts, new, self.seed)

    def astype(self, dtype) -> "ModelParams":
        new = {k: Tensor(t.data, requires_grad=True, dtype=dtype) for k, t in self.tensors.items()}
        return ModelParams(self.encoder, self.mapper, self.experts, new, self.seed)


def param_shapes(encoder: EncoderSpec, mapper: MapperSpec, experts: list[ExpertSpec]) -> dict[str, tuple]:
    """Every parameter name and shape, derived from the specs alone (insertion order is canonical)."""
    d = encoder.feat_dim
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout):
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)

    conv("encoder.head", 3, d)
    for b in range(encoder.n_res_blocks):
        conv(f"encoder.body.{b}.conv1", d, d)
        conv(f"encoder.body.{b}.conv2", d, d)
    conv("encoder.tail", d, d)
    chans = [d] + [mapper.hidden_channels] * (mapper.n_layers - 1) + [mapper.out_channels]
    for i in range(mapper.n_layers):
        conv(f"mapper.{i}", chans[i], chans[i + 1])
    for j, spec in enumerate(experts):
        for i, (fi, fo) in enumerate(spec.layer_dims()):
            shapes[f"expert.{j}.{i}.weight"] = (fi, fo)
            shapes[f"expert.{j}.{i}.bias"] = (fo,)
    return shapes


def _fan_in(name: str, shape: tuple, shapes: dict) -> int:
    wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
    return int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]


def init_params(encoder: EncoderSpec, mapper: MapperSpec, experts: list[ExpertSpec],
                seed: int = 0, dtype=None) -> ModelParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` init drawn in canonical name order."""
    if mapper.out_channels != len(experts):
        raise ValueError(f"mapper emits {mapper.out_channels} scores for {len(experts)} experts")
    rng = np.random.default_rng(seed)
    shapes = param_shapes(encoder, mapper, experts)
    tensors = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)
    return ModelParams(encoder, mapper, list(experts), tensors, seed)


def build_model(feat_dim=64, n_res_blocks=4, mapper_layers=5, mapper_hidden=64, n_experts=4,
                variant="b", expert_hidden=None, depths=None, seed=0, dtype=None) -> ModelParams:
    hidden = expert_hidden or VARIANT_HIDDEN[variant]
    if depths is None:
        depths = DEFAULT_DEPTHS[-n_experts:] if n_experts <= 4 else range(2, 2 + n_experts)
    experts = expert_bank(feat_dim, hidden, depths)
    return init_params(EncoderSpec(feat_dim, n_res_blocks), MapperSpec(mapper_layers, mapper_hidden, len(experts)),
                       experts, seed, dtype)


# ---------------------------------------------------------------- forward

def _conv(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ad.conv2d(x, params[f"{name}.weight"], padding=1, bias=params[f"{name}.bias"])


def encode(lr, params: ModelParams) -> Tensor:
    """``(H, W, 3)`` image to an ``(H, W, D)`` latent grid; spatial size is preserved."""
    lr = lr if isinstance(lr, Tensor) else Tensor(lr, dtype=params["encoder.head.weight"].dtype)
    if lr.data.ndim != 3 or lr.shape[2] != 3:
        raise DimensionError(f"encode expects an H x W x 3 image, got {lr.shape}")
    x = ad.transpose(ad.scale(ad.add_scalar(lr, -0.5), 2.0), (2, 0, 1))
    x = _conv(x, params, "encoder.head")
    for b in range(params.encoder.n_res_blocks):
        r = ad.relu(_conv(x, params, f"encoder.body.{b}.conv1"))
        x = ad.add(x, _conv(r, params, f"encoder.body.{b}.conv2"))
    x = _conv(x, params, "encoder.tail")
    return ad.transpose(x, (1, 2, 0))


def map_experts(z: Tensor, params: ModelParams) -> Tensor:
    """Raw ``(H, W, J)`` expert scores; no normalization."""
    x = ad.transpose(z, (2, 0, 1))
    n = params.mapper.n_layers
    for i in range(n):
        x = _conv(x, params, f"mapper.{i}")
        if i < n - 1:
            x = ad.relu(x)
    return ad.transpose(x, (1, 2, 0))


def expert_forward(j: int, feat: Tensor, params: ModelParams) -> Tensor:
    """Run expert ``j`` (0-based, shallowest first) on ``(N, in_dim)`` features."""
    spec = params.experts[j]
    if feat.shape[-1] != spec.in_dim:
        raise DimensionError(f"expert {j} expects {spec.in_dim} input features, got {feat.shape[-1]}")
    x = feat if feat.data.ndim == 2 else ad.reshape(feat, (1, -1))
    for i in range(spec.depth):
        x = ad.linear(x, params[f"expert.{j}.{i}.weight"], params[f"expert.{j}.{i}.bias"])
        if i < spec.depth - 1:
            x = ad.relu(x)
    return x if feat.data.ndim == 2 else ad.reshape(x, (spec.out_dim,))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MOEISRCK"
FORMAT_VERSION = 1


def encode_checkpoint(params: ModelParams) -> bytes:
    """Header of little-endian uint32 spec integers, then named float32 tensors."""
    hidden = params.experts[0].hidden
    ints = [FORMAT_VERSION, params.encoder.feat_dim, params.encoder.n_res_blocks,
            params.mapper.n_layers, params.mapper.hidden_channels, params.n_experts, hidden,
            *[e.depth for e in params.experts], params.seed & 0xFFFFFFFF, len(params.tensors)]
    out = [MAGIC, struct.pack(f"<{len(ints)}I", *ints)]
    for name, t in params.tensors.items():
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError("truncated checkpoint", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else list(vals)


def decode_checkpoint(buf: bytes, dtype=None) -> ModelParams:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", 0)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", len(MAGIC))
    feat_dim, n_blocks, m_layers, m_hidden, n_experts, hidden = r.u32(6)
    depths = r.u32(n_experts) if n_experts > 1 else [r.u32()]
    seed, count = r.u32(2)
    encoder = EncoderSpec(feat_dim, n_blocks)
    mapper = MapperSpec(m_layers, m_hidden, n_experts)
    experts = [ExpertSpec(d, hidden, decoder_in_dim(feat_dim)) for d in depths]
    expected = param_shapes(encoder, mapper, experts)
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        if expected.get(name) != shape:
            raise ParseError(f"parameter {name!r} has shape {shape}, spec says {expected.get(name)}", r.pos)
        data = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype or np.float32)
    if tensors.keys() != expected.keys():
        raise ParseError("checkpoint parameter set does not match its header", r.pos)
    return ModelParams(encoder, mapper, experts, tensors, seed)


def save_checkpoint(path: str | os.PathLike, params: ModelParams) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path: str | os.PathLike, dtype=None) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes(), dtype)
