"""Analytic FLOPs accounting and expert-map export.

Convention: one multiply-accumulate is 2 FLOPs. Bias adds and activations
are not counted separately. Encoder and mapper run once per LR input;
decoders run once per output query. Feature unfolding is pure data
movement and costs 0.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import encode_ppm, load_image
from .errors import UsageError
from .models import EncoderSpec, ExpertSpec, MapperSpec, ModelParams

# expert 1..4 -> yellow, green, blue, red
DEFAULT_PALETTE = ((255, 255, 0), (0, 255, 0), (0, 0, 255), (255, 0, 0))


def flops_linear(in_dim: int, out_dim: int, n_queries: int = 1) -> int:
    if in_dim < 1 or out_dim < 1 or n_queries < 0:
        raise UsageError("flops_linear needs positive dimensions")
    return 2 * in_dim * out_dim * n_queries


def flops_expert(spec: ExpertSpec, n_queries: int = 1) -> int:
    return sum(flops_linear(i, o, n_queries) for i, o in spec.layer_dims())


def flops_conv3x3(c_in: int, c_out: int, h: int, w: int) -> int:
    return 2 * c_in * c_out * 9 * h * w


def flops_encoder(spec: EncoderSpec, h: int, w: int) -> int:
    d = spec.feat_dim
    return flops_conv3x3(3, d, h, w) + (2 * spec.n_res_blocks + 1) * flops_conv3x3(d, d, h, w)


def flops_mapper(spec: MapperSpec, feat_dim: int, h: int, w: int) -> int:
    chans = [feat_dim] + [spec.hidden_channels] * (spec.n_layers - 1) + [spec.out_channels]
    return sum(flops_conv3x3(a, b, h, w) for a, b in zip(chans[:-1], chans[1:]))


@dataclass
class FlopsReport:
    encoder_flops: int
    mapper_flops: int
    unfold_flops: int
    per_expert_flops: list[int]
    pixels_per_expert: list[int]
    decoder_total: int
    pipeline_total: int
    baseline_decoder_total: int
    baseline_total: int
    ratio: float
    extras: dict = field(default_factory=dict)

    @property
    def decoder_share(self) -> float:
        return self.decoder_total / self.pipeline_total

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key == "extras":
                lines += [f"{k}: {v}" for k, v in value.items()]
            elif isinstance(value, list):
                lines.append(f"{key}: {','.join(str(v) for v in value)}")
            elif isinstance(value, float):
                lines.append(f"{key}: {value:.6f}")
            else:
                lines.append(f"{key}: {value}")
        lines.append(f"decoder_share: {self.decoder_share:.6f}")
        return "\n".join(lines) + "\n"


def flops_pipeline(encoder: EncoderSpec, mapper: MapperSpec, experts: list[ExpertSpec],
                   lr_shape: tuple[int, int], out_shape: tuple[int, int], decisions) -> FlopsReport:
    """Cost of reconstructing one ``out_shape`` image from an ``lr_shape`` input.

    ``decisions`` holds the 0-based expert index of every output query.
    """
    h, w = lr_shape
    decisions = np.asarray(decisions).ravel()
    n_out = out_shape[0] * out_shape[1]
    if decisions.size != n_out:
        raise UsageError(f"{decisions.size} routing decisions for {n_out} output pixels")
    if decisions.size and (decisions.min() < 0 or decisions.max() >= len(experts)):
        raise UsageError("routing decision outside the expert bank")
    counts = [int(c) for c in np.bincount(decisions, minlength=len(experts))]
    per_expert = [flops_expert(e, n) for e, n in zip(experts, counts)]
    enc = flops_encoder(encoder, h, w)
    mapf = flops_mapper(mapper, encoder.feat_dim, h, w)
    unfold = 0
    decoder = sum(per_expert)
    deepest = max(experts, key=lambda e: flops_expert(e))
    base_decoder = flops_expert(deepest, n_out)
    return FlopsReport(
        encoder_flops=enc, mapper_flops=mapf, unfold_flops=unfold,
        per_expert_flops=per_expert, pixels_per_expert=counts,
        decoder_total=decoder, pipeline_total=enc + mapf + unfold + decoder,
        baseline_decoder_total=base_decoder, baseline_total=enc + unfold + base_decoder,
        ratio=decoder / base_decoder if base_decoder else 1.0,
    )


def profile_model(params: ModelParams, lr_shape, out_shape, decisions) -> FlopsReport:
    return flops_pipeline(params.encoder, params.mapper, params.experts, lr_shape, out_shape, decisions)


# ---------------------------------------------------------------- expert maps

def expert_map_image(decisions: np.ndarray, palette=None) -> np.ndarray:
    """``(H, W)`` 0-based expert indices to a ``uint8`` RGB image."""
    decisions = np.asarray(decisions)
    palette = np.asarray(DEFAULT_PALETTE if palette is None else palette, dtype=np.uint8)
    if decisions.size and decisions.max() >= len(palette):
        raise UsageError(f"expert index {decisions.max() + 1} exceeds palette of {len(palette)} colours; "
                         "pass a custom palette")
    return palette[decisions]


def export_expert_map(decisions: np.ndarray, path: str | os.PathLike, palette=None) -> None:
    Path(path).write_bytes(encode_ppm(expert_map_image(decisions, palette)))


def read_expert_map(path: str | os.PathLike, palette=None) -> np.ndarray:
    """Invert the palette of an exported map back to 0-based indices."""
    img = np.round(load_image(path) * 255).astype(np.uint8)
    palette = np.asarray(DEFAULT_PALETTE if palette is None else palette, dtype=np.uint8)
    match = (img[:, :, None, :] == palette[None, None]).all(axis=-1)
    if not match.any(axis=-1).all():
        raise UsageError(f"{path} contains colours outside the palette")
    return match.argmax(axis=-1)
