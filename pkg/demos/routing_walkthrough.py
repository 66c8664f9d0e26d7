"""
Soft and hard routing on one image
==================================

Build a small untrained model, look at the expert scores the mapper
produces for each low-resolution pixel, and compare the training-time
mixture with the inference-time dispatch.
"""

import numpy as np

from moeisr.autodiff import Tensor
from moeisr.data import downscale, synthetic_image
from moeisr.flops import profile_model
from moeisr.models import build_model, encode, map_experts
from moeisr.routing import route_infer, route_train
from moeisr.sampling import assemble_query_features, bind_grid, feature_unfold
from moeisr.training import reconstruct

model = build_model(feat_dim=16, n_res_blocks=2, mapper_hidden=16, expert_hidden=64, seed=0)
hr = synthetic_image(64)
lr = downscale(hr, 2)
print("LR image", lr.shape, "experts", [(e.depth, e.hidden) for e in model.experts])

# One score vector per LR pixel; argmax picks the expert.
z = encode(lr, model)
scores = map_experts(z, model)
print("score map", scores.shape)

# Every HR pixel binds to its nearest latent and carries that pixel's scores.
binding = bind_grid(64, 64, z.shape[:2])
feats = assemble_query_features(binding, feature_unfold(z))
print("decoder input width", feats.shape[1])

# Training mixes all experts with Gumbel-softmax weights...
rng = np.random.default_rng(0)
soft, weights = route_train(feats, binding.site, scores, model, tau=1.0, rng=rng)
print("mean routing weights", weights.data.mean(axis=0).round(3))

# ...inference runs each query through exactly one expert.
hard, decisions = route_infer(feats, binding.site, scores, model)
print("pixels per expert", np.bincount(decisions, minlength=4))

# Forcing one-hot weights at the argmax gives the same pixels back.
forced, _ = route_train(feats, binding.site, scores, model, weights=Tensor(np.eye(4)[decisions]))
print("max |hard - forced soft|", float(np.abs(hard - forced.data).max()))

# Cost of this dispatch against running everything through the deepest expert.
_, dec_map, _ = reconstruct(model, lr, 64, 64)
print(profile_model(model, lr.shape[:2], (64, 64), dec_map).to_text())
