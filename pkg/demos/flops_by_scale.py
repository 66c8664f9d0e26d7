"""
Where the FLOPs go as the scale grows
=====================================

The encoder and mapper run once per LR pixel, the decoder once per output
pixel. At large scales the decoder dominates, which is where cheaper
experts pay off.
"""

import numpy as np

from moeisr.flops import flops_expert, flops_pipeline
from moeisr.models import EncoderSpec, MapperSpec, expert_bank

encoder, mapper = EncoderSpec(64, 4), MapperSpec(5, 64, 4)
lr = (48, 48)

for hidden in (256, 128):
    bank = expert_bank(64, hidden)
    print(f"\nhidden {hidden}: per-pixel expert cost", [flops_expert(e) for e in bank])
    print(" scale  decoder share  ratio (uniform split)")
    for s in (2, 3, 4, 6, 12):
        out = (lr[0] * s, lr[1] * s)
        # Even split over the four experts.
        dec = np.arange(out[0] * out[1]) % 4
        rep = flops_pipeline(encoder, mapper, bank, lr, out, dec)
        print(f" {s:5d}  {rep.decoder_share:13.3f}  {rep.ratio:.4f}")
