"""Central-difference checks of the full model's gradients at small sizes."""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig
from .model import ModelConfig, init_params, loss_and_grads
from .numerics import GradCheckReport, grad_check

SIZES = ("tiny", "small")


def problem(size: str, seed: int = 0):
    """Random parameters, inputs and labels for a gradient check."""
    rng = np.random.default_rng(seed)
    if size == "tiny":
        # L=4 cells, D=6, U=5, N=2 heads, F=3 frames, E=4 classes
        config = ModelConfig(num_classes=4, dim=6, hidden=5, heads=2)
        inputs = rng.standard_normal((2, 3, 4, 6))
    elif size == "small":
        config = ModelConfig(
            num_classes=3, dim=6, hidden=5, heads=2, input="images",
            backbone=BackboneConfig(in_channels=3, channels=(2, 3, 4, 6)),
        )
        inputs = rng.uniform(0, 1, (1, 2, 32, 16, 3))
    else:
        raise ValueError(f"unknown size {size!r}; expected one of {SIZES}")
    params = init_params(config, rng)
    params["classifier.W_sm"] = rng.uniform(-1, 1, params["classifier.W_sm"].shape)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
    labels = rng.integers(0, config.num_classes, size=inputs.shape[0])
    return config, params, inputs, labels


def check_model(
    size: str = "tiny",
    regs=(0.0, 1.0),
    pooling: str = "tp",
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: float | None = None,
    seed: int = 0,
) -> dict[str, GradCheckReport]:
    """One report per penalty strength. ``corrupt`` scales analytic gradients to test the harness."""
    config, params, inputs, labels = problem(size, seed)
    reports = {}
    for reg in regs:

        def fn(p, reg=reg):
            loss, grads, _ = loss_and_grads(p, inputs, labels, config, reg, pooling)
            if corrupt is not None:
                grads = {k: g * corrupt for k, g in grads.items()}
            return loss, grads

        reports[f"reg={reg:g}"] = grad_check(fn, params, step, tolerance)
    return reports
