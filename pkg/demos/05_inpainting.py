"""Inpainting: restore images with 30% of their pixels removed.

The degraded input carries the survival mask as a second channel; the
network sees both and the residual skip adds back the degraded image.
Short run; the full-length protocol lives in the acceptance suite, where
the +3 dB restoration bar passes easily while the halve-the-feature-error
bar does not (see the README's testing section for why).
"""

import numpy as np

from eqreg import (EqRegConfig, RotationGroup, TrainConfig, build_network,
                   init_weights, make_dataset, psnr, train)

STEPS = 300
group = RotationGroup(4)
data = make_dataset("inpaint", 128, seed=200, sigma=0.05, mask_rate=0.3)
val = make_dataset("inpaint", 32, seed=201, sigma=0.05, mask_rate=0.3)

baseline = float(np.mean([psnr(d, c) for d, c in zip(val.degraded, val.clean)]))
print(f"masked input vs clean: {baseline:.2f} dB")
print(f"input tensor: {data.inputs().shape} (image + mask channel)\n")

for lam in (0.0, 0.1):
    net = init_weights(build_network(2, 1, group), seed=0)
    cfg = TrainConfig(steps=STEPS, task="inpaint", eval_period=STEPS,
                      eqreg=EqRegConfig(lam=lam))
    _, _, report = train(net, data, cfg, eval_data=val)
    print(f"lambda={lam}: psnr {report.psnr:.2f} dB "
          f"({report.psnr - baseline:+.2f} over masked input), "
          f"e_feat {report.e_feat_mean:.3f}")
