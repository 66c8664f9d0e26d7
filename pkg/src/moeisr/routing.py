"""Per-pixel expert routing.

Training blends every expert with Gumbel-softmax weights of the bound
latent site's scores. Inference sends each query to the single
highest-scoring expert, with ties going to the smaller (cheaper) index.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError
from .models import ModelParams, expert_forward

U_CLAMP = 1e-12


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(scores: Tensor, tau: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> Tensor:
    """``softmax((scores + G) / tau)`` over the last axis.

    ``G`` is drawn from ``rng``, or taken from ``noise``; with neither the
    noise is off and this is a tempered softmax.
    """
    if not tau > 0:
        raise UsageError(f"tau must be positive, got {tau}")
    if noise is None and rng is not None:
        noise = gumbel_noise(scores.shape, rng)
    x = scores if noise is None else ad.add(scores, Tensor(noise, dtype=scores.dtype))
    return ad.softmax(ad.scale(x, 1.0 / tau))


def site_scores(expert_map: Tensor, site: np.ndarray) -> Tensor:
    """Score rows ``D_k`` of the latent sites the queries are bound to, ``(N, J)``."""
    h, w, j = expert_map.shape
    return ad.take(ad.reshape(expert_map, (h * w, j)), site)


def mix(weights: Tensor, outputs: list[Tensor]) -> Tensor:
    """Row-wise convex combination ``sum_j weights[:, j] * outputs[j]``."""
    n, j = weights.shape
    c = outputs[0].shape[1]
    stacked = ad.concat([ad.reshape(o, (n, 1, c)) for o in outputs], axis=1)
    wexp = ad.expand(ad.reshape(weights, (n, j, 1)), (n, j, c))
    return ad.sum(ad.mul(stacked, wexp), axis=1)


def route_train(feats: Tensor, site: np.ndarray, expert_map: Tensor, params: ModelParams,
                tau: float = 1.0, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None, weights: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Soft routing: returns ``(rgb (N, 3), weights (N, J))``.

    ``weights`` overrides the Gumbel-softmax weights (e.g. forced one-hot).
    """
    if weights is None:
        weights = gumbel_softmax(site_scores(expert_map, site), tau, rng, noise)
    outputs = [expert_forward(j, feats, params) for j in range(params.n_experts)]
    return mix(weights, outputs), weights


def hard_decisions(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ``np.argmax`` already returns the first maximum."""
    return np.argmax(np.asarray(scores), axis=-1)


def group_by_expert(decisions: np.ndarray, n_experts: int) -> list[np.ndarray]:
    """Query indices per expert; the lists partition ``range(len(decisions))``."""
    decisions = np.asarray(decisions)
    order = np.argsort(decisions, kind="stable")
    counts = np.bincount(decisions, minlength=n_experts)
    return np.split(order, np.cumsum(counts)[:-1])


def gather(x: np.ndarray, groups: list[np.ndarray]) -> list[np.ndarray]:
    return [x[g] for g in groups]


def scatter(parts: list[np.ndarray], groups: list[np.ndarray], n: int) -> np.ndarray:
    out = np.empty((n,) + parts[0].shape[1:], dtype=parts[0].dtype) if parts else np.empty((n,))
    for g, p in zip(groups, parts):
        out[g] = p
    return out


def route_infer(feats: Tensor, site: np.ndarray, expert_map, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Hard routing: returns ``(rgb (N, 3), expert index per query)``.

    Each query runs through exactly one expert, batched per expert.
    """
    scores = expert_map.data if isinstance(expert_map, Tensor) else np.asarray(expert_map)
    h, w, j = scores.shape
    decisions = hard_decisions(scores.reshape(h * w, j))[site]
    groups = group_by_expert(decisions, params.n_experts)
    fdata = feats.data
    parts = []
    for e, g in enumerate(groups):
        if len(g) == 0:
            parts.append(np.zeros((0, params.experts[e].out_dim), dtype=fdata.dtype))
            continue
        parts.append(expert_forward(e, Tensor(fdata[g], dtype=fdata.dtype), params).data)
    return scatter(parts, groups, len(site)), decisions
