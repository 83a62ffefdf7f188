"""Equivariance regularization: per-layer and network-wide losses with exact gradients.

For a group element k, each regularization point contributes
||FT_k(h_plain) - h_rot||_F^2 where h_plain comes from the clean-orientation
branch, h_rot from the branch fed the k-rotated input, and FT_k is the
feature transform. Gradients flow through both branches: the rotated side
sees -2 D, the plain side the feature-transform adjoint of 2 D.
"""

from dataclasses import dataclass

import numpy as np

from .model import backprop
from .tensor import frobenius_sq


@dataclass(frozen=True)
class EqRegConfig:
    """Knobs of the regularizer.

    lam scales the equivariance term in the total objective. reduction "mean"
    divides each layer's squared norm by its element count; "sum" does not.
    include_identity admits k = 0 when sampling (a vacuous constraint, off by
    default). output_consistency adds a rotate-the-output penalty.
    """

    lam: float = 0.1
    reduction: str = "mean"
    include_identity: bool = False
    output_consistency: bool = False
    output_consistency_weight: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.output_consistency_weight < 0:
            raise ValueError(f"output_consistency_weight must be >= 0, got {self.output_consistency_weight}")


def _reduce(sq, numel, cfg):
    return sq / numel if cfg.reduction == "mean" else sq


def sample_k(group, cfg, rng):
    """Draw the shared group element for one training step."""
    low = 0 if cfg.include_identity else 1
    if group.order <= low:
        raise ValueError(f"no non-identity element to sample in a group of order {group.order}")
    return int(rng.integers(low, group.order))


def layer_loss(f_plain, f_rotated, k, group, cfg):
    """Squared Frobenius mismatch at one regularization point.

    Exactly-rounded summation, so the value is invariant under permutations
    of the elements (in particular under relabeling by another group element).
    """
    if f_plain.shape != f_rotated.shape:
        raise ValueError(f"branch shapes differ: {f_plain.shape} vs {f_rotated.shape}")
    diff = group.feature_transform(f_plain, k) - f_rotated
    return _reduce(frobenius_sq(diff), diff.size, cfg)


def equi_loss(tape_plain, tape_rotated, k, group, cfg):
    """Sum of layer losses over all regularization points of the two tapes."""
    if len(tape_plain) != len(tape_rotated):
        raise ValueError(f"tapes record {len(tape_plain)} vs {len(tape_rotated)} points")
    return sum(
        layer_loss(hp, hr, k, group, cfg)
        for hp, hr in zip(tape_plain.hidden, tape_rotated.hidden)
    )


def output_consistency_loss(y_plain, y_rotated, k, group, cfg):
    """Rotate-the-output penalty ||rot_k(y_plain) - y_rot||_F^2 (spatial only)."""
    if y_plain.shape != y_rotated.shape:
        raise ValueError(f"output shapes differ: {y_plain.shape} vs {y_rotated.shape}")
    diff = group.rotate_image(y_plain, k) - y_rotated
    return _reduce(frobenius_sq(diff), diff.size, cfg)


def total_loss(task, equi, cfg, output_consistency=0.0):
    """task + lam * equi, plus the weighted consistency term when enabled."""
    total = task + cfg.lam * equi
    if cfg.output_consistency:
        total += cfg.output_consistency_weight * output_consistency
    return total


def equi_injections(tape_plain, tape_rotated, k, group, cfg, numel_override=None):
    """Per-layer gradient injections plus fast squared sums for the equi term.

    The rotated branch receives -s D, the plain branch the feature-transform
    adjoint of s D, with s = 2 / numel under mean reduction and 2 otherwise.
    numel_override supplies full-batch element counts when the caller splits
    a batch into chunks; the squared sums use float64 accumulation (fast, not
    exactly rounded; layer_loss is the exact variant).
    Returns (inject_plain, inject_rotated, sq_sums).
    """
    if len(tape_plain) != len(tape_rotated):
        raise ValueError(f"tapes record {len(tape_plain)} vs {len(tape_rotated)} points")
    inject_plain, inject_rot, sq_sums = [], [], []
    for i, (hp, hr) in enumerate(zip(tape_plain.hidden, tape_rotated.hidden)):
        d = group.feature_transform(hp, k) - hr
        sq_sums.append(float(np.sum(np.square(d, dtype=np.float64))))
        numel = numel_override[i] if numel_override is not None else d.size
        scale = 2.0 / numel if cfg.reduction == "mean" else 2.0
        inject_plain.append(group.feature_transform_adjoint(scale * d, k))
        inject_rot.append(-scale * d)
    return inject_plain, inject_rot, sq_sums


def equi_loss_backward(net, tape_plain, tape_rotated, k, cfg):
    """Exact weight gradients of equi_loss (unscaled by lam).

    Runs the reverse sweep through both branches with the injections from
    equi_injections. Returns [(grad_w, grad_b), ...] per conv layer.
    """
    inject_plain, inject_rot, _ = equi_injections(tape_plain, tape_rotated, k, net.group, cfg)
    gp = backprop(net, tape_plain, hidden_grads=inject_plain)
    gr = backprop(net, tape_rotated, hidden_grads=inject_rot)
    return [(wp + wr, bp + br) for (wp, bp), (wr, br) in zip(gp, gr)]
