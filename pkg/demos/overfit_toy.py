"""
Overfitting one synthetic image
===============================

Train the toy configuration on a single 64x64 image at 2x, then look at
quality, expert usage and the exported expert map. Pass a step count as
the first argument for a quicker run (default 2000, about two minutes).
"""

import sys
from pathlib import Path

from moeisr.data import bicubic_resize, downscale, psnr, save_image, synthetic_image
from moeisr.flops import export_expert_map
from moeisr.training import TrainConfig, evaluate, reconstruct, train_on_images

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("overfit_out")
out.mkdir(exist_ok=True)

hr = synthetic_image(64)
lr = downscale(hr, 2)
print("bicubic baseline", round(psnr(bicubic_resize(lr, 64, 64), hr), 2), "dB")

config = TrainConfig(steps=steps, patch=32, scale_min=2.0, scale_max=2.0, feat_dim=16, n_res_blocks=2,
                     mapper_hidden=16, expert_hidden=64, lr=1e-3, log_every=max(1, steps // 5))
params = train_on_images([hr], config, emit=print)

result = evaluate(params, [hr], 2.0)
print(result.line())
print("decoder FLOPs ratio", round(result.mean_ratio, 4))

# Yellow, green, blue, red: shallowest to deepest.
sr, decisions, _ = reconstruct(params, lr, 64, 64)
save_image(out / "sr.ppm", sr)
export_expert_map(decisions, out / "experts.ppm")
print("wrote", out / "sr.ppm", "and", out / "experts.ppm")

# Doubling one expert's weight steers pixels away from it.
for w in ([1, 1, 1, 2], [2, 1, 1, 1]):
    steered = train_on_images([hr], TrainConfig(**{**vars(config), "weights": w, "log_every": 0}))
    print("weights", w, evaluate(steered, [hr], 2.0).line())
