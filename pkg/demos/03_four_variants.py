"""
The four network variants side by side
======================================

STAN carries temporal attention on the three finest pyramid levels and
spatial attention on the fused map. TAN drops the spatial module, SAN drops
the temporal ones, and RSTAN puts temporal attention on every level.
"""

import time

import numpy as np

from stanet.backbone import NetworkConfig, build_variant_suite, forward
from stanet.tensor import no_grad

cfg = NetworkConfig.desk()  # 64 x 64 cells, channel widths divided by 4
print("level sizes:", cfg.spatial_sizes, "channels:", cfg.level_channels, "frames:", cfg.temporal)

frames = (np.random.default_rng(1).random((5, 64, 64, 13)) < 0.03).astype(np.uint8)
suite = build_variant_suite(cfg, seed=0)

print(f"{'variant':<8}{'params':>10}{'TAM':>5}{'SAM':>5}{'fused':>18}{'ms':>8}")
for name, net in suite.items():
    t0 = time.perf_counter()
    with no_grad():
        fused = forward(net, frames)
    ms = 1000 * (time.perf_counter() - t0)
    c = net.module_counts()
    print(f"{name:<8}{net.num_parameters():>10}{c['tam']:>5}{c['sam']:>5}{str(fused.shape):>18}{ms:>8.0f}")

# the heads turn the 160-channel map into motion, class logits and a static score
with no_grad():
    bundle = suite["STAN"](frames)
print("motion", bundle.motion_raw.shape, "classes", bundle.class_logits.shape,
      "state", bundle.state_logit.shape)
