"""What the equivariance meter reports, on three very different networks.

e_out compares restoring a rotated image against rotating the restored one;
e_feat does the analogous comparison per hidden layer using the full
feature transform. Both are relative Frobenius errors averaged over a
dataset, reported per rotation k.
"""

import numpy as np

from eqreg import (LiftingConvOracle, RotationGroup, build_network,
                   init_weights, make_dataset, measure_equivariance)

group = RotationGroup(4)
data = make_dataset("denoise", 16, seed=5, sigma=0.1)


def show(name, report):
    print(f"{name}:")
    print(f"  e_out  mean {report.e_out_mean:.4g}  per k: "
          + "  ".join(f"{k}:{v:.4g}" for k, v in sorted(report.output_errors.items())))
    print(f"  e_feat mean {report.e_feat_mean:.4g}")
    header, rows = report.csv_rows()
    print(f"  csv columns: {header}")


# the zero-initialized residual net is the identity map, which commutes
# with rotation exactly
identity = build_network(1, 1, group)
show("identity (zero weights, residual)", measure_equivariance(identity, data))

# randomly initialized weights are nowhere near equivariant
random_net = init_weights(build_network(1, 1, group), seed=3)
show("\nrandom init", measure_equivariance(random_net, data))

# a lifted convolution is exactly equivariant in its features; its "output"
# is a feature stack, so no PSNR is defined for it
oracle = LiftingConvOracle(np.random.default_rng(4).standard_normal((2, 1, 3, 3)), group)
rep = measure_equivariance(oracle, data)
show("\nlifted convolution", rep)
print(f"  (feature errors at float rounding: {max(max(v) for v in rep.feature_errors.values()):.2e})")
