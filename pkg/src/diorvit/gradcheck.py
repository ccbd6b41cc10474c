"""End-to-end gradient verification of the combined loss on a tiny 64-bit model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import LossConfig
from .model import ArchConfig, init_model
from .optim import batch_losses
from .rngs import substream

# slope 0.2 keeps the leaky branches from shrinking head gradients below
# what float64 central differences can resolve
TINY_ARCH = ArchConfig(image_size=8, channels=1, patch_size=4, dim=8, num_blocks=1, num_heads=2,
                       ff_hidden=(16, 16, 8), head_hidden=(8, 8), num_classes=2, leaky_slope=0.2)
DEFAULT_H = 1e-4
TOLERANCE = 1e-5


def tiny_problem(seed: int = 0, batch: int = 4, arch: ArchConfig = TINY_ARCH,
                 loss_cfg: LossConfig | None = None):
    """(model, loss closure) in float64; the closure recomputes L_total from current params."""
    loss_cfg = loss_cfg or LossConfig(K=arch.num_classes - 1)
    with ad.default_dtype(np.float64):
        model = init_model(arch, substream(seed, "init"))
    rng = substream(seed, "data")
    images = rng.uniform(0.0, 1.0, size=(batch, arch.channels, arch.image_size, arch.image_size))
    labels = np.arange(batch) % arch.num_classes + 1

    def f() -> ad.Tensor:
        return batch_losses(model, images, labels, loss_cfg)[2]

    return model, f


def gradcheck_report(seed: int = 0, h: float = DEFAULT_H, loss_cfg: LossConfig | None = None) -> dict[str, float]:
    """Max relative error per parameter group."""
    model, f = tiny_problem(seed, loss_cfg=loss_cfg)
    return ad.grad_check_groups(f, model.params, h)
