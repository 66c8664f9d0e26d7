"""Losses, Adam, the training loop and arbitrary-scale evaluation."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import downscale, list_images, load_image, psnr, sample_training_pair
from .errors import UsageError
from .flops import profile_model
from .models import ModelParams, build_model, encode, map_experts, save_checkpoint
from .routing import route_infer, route_train
from .sampling import QueryBinding, assemble_query_features, bind_grid, feature_unfold, nearest_latent

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 3000.0
    beta: float = 1.0
    tau: float = 1.0
    weights: list[float] | None = None      # balance weights w_j, default all 1
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 2000
    batch: int = 1
    seed: int = 0
    variant: str = "b"
    expert_hidden: int | None = None        # overrides the variant width
    feat_dim: int = 64
    n_res_blocks: int = 4
    mapper_layers: int = 5
    mapper_hidden: int = 64
    experts: int = 4
    patch: int = 48
    scale_min: float = 1.0
    scale_max: float = 4.0
    n_queries: int = 2304
    log_every: int = 100
    eval_every: int = 0
    eval_scale: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise UsageError("alpha and beta must be non-negative")
        if not self.tau > 0:
            raise UsageError("tau must be positive")
        if self.variant not in ("b", "s"):
            raise UsageError(f"unknown variant {self.variant!r}")
        w = self.balance_weights()
        if len(w) != self.experts or any(x <= 0 for x in w):
            raise UsageError(f"balance weights must be {self.experts} positive values, got {self.weights}")

    def balance_weights(self) -> list[float]:
        return list(self.weights) if self.weights is not None else [1.0] * self.experts

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def model(self, dtype=None) -> ModelParams:
        return build_model(self.feat_dim, self.n_res_blocks, self.mapper_layers, self.mapper_hidden,
                           self.experts, self.variant, self.expert_hidden, seed=self.seed, dtype=dtype)


# ---------------------------------------------------------------- losses

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise UsageError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return ad.mean(ad.abs(ad.sub(pred, target)))


def balance_loss(probs: Tensor, weights: Sequence[float]) -> Tensor:
    """``sum_j | w_j * sum_k probs[k, j] - K / J |`` for ``(K, J)`` probabilities."""
    k, j = probs.shape
    w = Tensor(np.asarray(weights, dtype=np.float64), dtype=probs.dtype)
    load = ad.mul(ad.sum(probs, axis=0), w)
    return ad.sum(ad.abs(ad.add_scalar(load, -k / j)))


def total_loss(pred: Tensor, target: Tensor, probs: Tensor, config: TrainConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(alpha * L1 + beta * Lb, L1, Lb)``."""
    l1 = l1_loss(pred, target)
    lb = balance_loss(probs, config.balance_weights())
    return ad.add(ad.scale(l1, config.alpha), ad.scale(lb, config.beta)), l1, lb


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise UsageError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        new_p[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- forward passes

def forward_soft(params: ModelParams, lr_img: np.ndarray, coords: np.ndarray, cells: np.ndarray,
                 tau: float = 1.0, rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Training-mode forward: ``(pred (N, 3), routing weights (N, J), site probs (K, J))``.

    Site probabilities are the noise-free softmax of the raw scores and
    feed the balance loss.
    """
    z = encode(lr_img, params)
    scores = map_experts(z, params)
    h, w, _ = z.shape
    binding = nearest_latent(coords, (h, w), cells)
    feats = assemble_query_features(binding, feature_unfold(z))
    pred, weights = route_train(feats, binding.site, scores, params, tau, rng, noise)
    probs = ad.softmax(ad.reshape(scores, (h * w, params.n_experts)))
    return pred, weights, probs


def _subset(b: QueryBinding, sl: slice) -> QueryBinding:
    return QueryBinding(b.rows[sl], b.cols[sl], b.rel_coord[sl], b.cell[sl], b.latent_shape)


def reconstruct(params: ModelParams, lr_img: np.ndarray, h_out: int, w_out: int,
                chunk: int = 65536) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard-routed reconstruction at ``h_out`` x ``w_out``.

    Returns ``(image clamped to [0, 1], per-output-pixel expert index, raw expert scores)``.
    """
    with ad.no_grad():
        z = encode(lr_img, params)
        scores = map_experts(z, params)
        unfolded = feature_unfold(z)
        binding = bind_grid(h_out, w_out, z.shape[:2])
        rgb, dec = [], []
        for start in range(0, len(binding), chunk):
            part = _subset(binding, slice(start, start + chunk))
            out, d = route_infer(assemble_query_features(part, unfolded), part.site, scores, params)
            rgb.append(out)
            dec.append(d)
    img = np.clip(np.concatenate(rgb).reshape(h_out, w_out, 3).astype(np.float64), 0.0, 1.0)
    return img, np.concatenate(dec).reshape(h_out, w_out), scores.data


# ---------------------------------------------------------------- training loop

def _grads_by_name(params: ModelParams, loss: Tensor) -> dict[str, np.ndarray]:
    g = ad.backward(loss, params.trainable())
    return {name: g[t.id].data for name, t in params.tensors.items()}


def train_step(params: ModelParams, state: AdamState, pairs, config: TrainConfig,
               rng: np.random.Generator) -> tuple[ModelParams, AdamState, dict]:
    preds, targets, probs = [], [], []
    for pair in pairs:
        pred, _, p = forward_soft(params, pair.lr_patch, pair.query_coords, pair.query_cells, config.tau, rng)
        preds.append(pred)
        probs.append(p)
        targets.append(pair.target_rgb)
    pred = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
    prob = probs[0] if len(probs) == 1 else ad.concat(probs, axis=0)
    target = Tensor(np.concatenate(targets), dtype=pred.dtype)
    loss, l1, lb = total_loss(pred, target, prob, config)
    grads = _grads_by_name(params, loss)
    arrays = {k: t.data for k, t in params.tensors.items()}
    arrays, state = adam_step(arrays, grads, state, config.lr, config.adam_beta1, config.adam_beta2,
                              config.adam_eps)
    metrics = {"loss": float(loss.data), "l1": float(l1.data), "lb": float(lb.data)}
    return params.with_tensors(arrays), state, metrics


def train_on_images(images: Sequence[np.ndarray], config: TrainConfig, checkpoint: str | os.PathLike | None = None,
                    emit: Callable[[str], None] | None = None, params: ModelParams | None = None) -> ModelParams:
    """Train from in-memory HR images; fully determined by ``config.seed``."""
    if not images:
        raise UsageError("no images to train on")
    emit = emit or log.info
    params = params or config.model()
    state = AdamState()
    data_rng = np.random.default_rng(config.seed)
    for step in range(config.steps):
        noise_rng = np.random.default_rng([config.seed, step])
        pairs = []
        for _ in range(config.batch):
            img = images[int(data_rng.integers(len(images)))]
            pairs.append(sample_training_pair(img, data_rng, config.patch, (config.scale_min, config.scale_max),
                                              config.n_queries))
        params, state, m = train_step(params, state, pairs, config, noise_rng)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            emit(f"step {step} loss {m['loss']:.6g} l1 {m['l1']:.6g} lb {m['lb']:.6g}")
        if config.eval_every and (step + 1) % config.eval_every == 0:
            result = evaluate(params, images, config.eval_scale)
            emit(result.line())
            if checkpoint is not None:
                save_checkpoint(checkpoint, params)
    if checkpoint is not None:
        save_checkpoint(checkpoint, params)
    return params


def load_dataset(dataset_dir: str | os.PathLike) -> list[np.ndarray]:
    path = Path(dataset_dir)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    files = list_images(path)
    if not files:
        raise UsageError(f"no images in {path}")
    return [load_image(f) for f in files]


def train(dataset_dir: str | os.PathLike, config: TrainConfig, checkpoint: str | os.PathLike,
          emit: Callable[[str], None] | None = None) -> Path:
    images = load_dataset(dataset_dir)
    train_on_images(images, config, checkpoint, emit)
    return Path(checkpoint)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    scale: float
    psnrs: list[float]
    counts: list[int]              # output pixels per expert, summed over images
    ratios: list[float]            # decoder FLOPs ratio per image

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnrs))

    @property
    def shares(self) -> list[float]:
        total = sum(self.counts)
        return [c / total for c in self.counts]

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios))

    def line(self) -> str:
        shares = ",".join(f"{s:.4f}" for s in self.shares)
        return f"eval scale {self.scale:g} psnr {self.mean_psnr:.4f} shares {shares}"


def evaluate(params: ModelParams, images: Sequence[np.ndarray] | str | os.PathLike, scale: float) -> EvalResult:
    """Downscale each image by ``scale``, reconstruct at full size with hard routing."""
    if scale < 1:
        raise UsageError(f"scale must be >= 1, got {scale}")
    if isinstance(images, (str, os.PathLike)):
        images = load_dataset(images)
    psnrs, ratios = [], []
    counts = np.zeros(params.n_experts, dtype=np.int64)
    for hr in images:
        h, w = hr.shape[:2]
        lr = downscale(hr, scale)
        pred, dec, _ = reconstruct(params, lr, h, w)
        psnrs.append(psnr(pred, hr))
        counts += np.bincount(dec.ravel(), minlength=params.n_experts)
        ratios.append(profile_model(params, lr.shape[:2], (h, w), dec).ratio)
    return EvalResult(scale, psnrs, [int(c) for c in counts], ratios)
