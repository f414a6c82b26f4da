"""Gated fusion of the projected per-scale image features."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .encoders import linear
from .errors import ContractError


def init_fusion_params(rng, cfg) -> dict:
    d = cfg.embed_dim
    return {
        "fuse.weight": rng.normal(0.0, cfg.init_std, size=(d, d)),
        "fuse.bias": np.zeros(d),
    }


def fuse_multiscale(projected, params, return_gate: bool = False):
    """``A * s`` with ``s`` the sum of the scales and ``A = sigmoid(L(s))``."""
    if not projected:
        raise ContractError("need at least one scale to fuse")
    shapes = {tuple(tc._as_tensor(v).shape) for v in projected}
    if len(shapes) != 1:
        raise ContractError(f"scale features disagree in shape: {sorted(shapes)}")
    total = projected[0]
    for v in projected[1:]:
        total = tc.add(total, v)
    gate = tc.sigmoid(linear(total, params["fuse.weight"], params["fuse.bias"]))
    fused = gate * total
    return (fused, gate) if return_gate else fused
