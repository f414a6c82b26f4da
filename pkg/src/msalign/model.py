"""Wiring of encoders, per-scale alignment, fusion and losses into one model."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .alignment import init_alignment_params, similarity_stack
from .config import TrainConfig
from .encoders import (TextBatch, encode_image_multiscale, encode_text, init_image_params,
                       init_text_params, linear, project_scales)
from .fusion import fuse_multiscale, init_fusion_params
from .objectives import csmmc_loss, mscma_loss, total_loss, triplet_loss


def init_params(cfg: TrainConfig) -> dict:
    """Every parameter of every module, drawn in a fixed order from ``cfg.seed``.

    The draw does not depend on the ablation setting, so settings sharing a
    seed start from identical weights.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    params.update(init_image_params(rng, cfg))
    params.update(init_text_params(rng, cfg))
    params.update(init_alignment_params(rng, cfg))
    params.update(init_fusion_params(rng, cfg))
    return params


def aligned_scales(cfg: TrainConfig) -> list:
    if cfg.ablation not in ("base_m_a_b", "full"):
        return []
    return [i for i, on in enumerate(cfg.scale_mask, 1) if on]


def uses_distillation(cfg: TrainConfig) -> bool:
    return cfg.ablation == "full" and len(aligned_scales(cfg)) >= 2


def active_param_names(cfg: TrainConfig, names) -> list:
    """Parameters on the gradient path of ``cfg.ablation``."""
    n = cfg.n_scales
    align = {f"align{i}." for i in aligned_scales(cfg)}

    def keep(name):
        if name.startswith(("img.stage", "txt.")):
            return True
        if name.startswith("img.proj"):
            return cfg.ablation != "base" or name.startswith(f"img.proj{n}.")
        if name.startswith("fuse."):
            return cfg.ablation != "base"
        if name.startswith("align"):
            return name[: name.index(".") + 1] in align
        return False

    return [k for k in names if keep(k)]


def image_features(params, images, cfg: TrainConfig):
    """Projected per-scale features; ``base`` only projects the last scale."""
    raw = encode_image_multiscale(images, params, cfg.n_scales, cfg.use_bias)
    if cfg.ablation == "base":
        n = cfg.n_scales
        bias = params[f"img.proj{n}.bias"] if cfg.use_bias else None
        return [None] * (n - 1) + [linear(raw[-1], params[f"img.proj{n}.weight"], bias)]
    return project_scales(raw, params, cfg.use_bias)


def image_embedding(params, images, cfg: TrainConfig):
    """Test-time image embedding (no cross-attention involved)."""
    projected = image_features(params, images, cfg)
    if cfg.ablation == "base":
        return projected[-1]
    return fuse_multiscale(projected, params)


def text_embedding(params, text: TextBatch, cfg: TrainConfig):
    return encode_text(text, params, cfg.heads, cfg.use_bias).cls


def forward(params, images, text: TextBatch, cfg: TrainConfig) -> dict:
    """All losses for one batch; absent components are ``None``."""
    projected = image_features(params, images, cfg)
    feats = encode_text(text, params, cfg.heads, cfg.use_bias)
    if cfg.ablation == "base":
        embed = projected[-1]
    else:
        embed = fuse_multiscale(projected, params)
    lc = cfg.loss
    out = {"tri": triplet_loss(embed, feats.cls, lc), "mscma": None, "csmmc": None, "stack": []}
    scales = aligned_scales(cfg)
    if scales:
        stack = similarity_stack(projected, feats, params, scales, cfg.heads, cfg.tau_attn,
                                 cfg.mscmat_mode)
        out["stack"] = stack
        out["mscma"] = mscma_loss(stack, lc.tau_cl)
        if uses_distillation(cfg):
            out["csmmc"] = csmmc_loss(stack, lc.mu, lc.teacher_detached)
    out["total"] = total_loss(
        out["tri"],
        out["mscma"] if out["mscma"] is not None else 0.0,
        out["csmmc"] if out["csmmc"] is not None else 0.0,
        lc.alpha if out["mscma"] is not None else 0.0,
        lc.beta if out["csmmc"] is not None else 0.0,
    )
    return out


def full_model_gradcheck(cfg: TrainConfig, batch_size: int = 4, probes: int = 100,
                         eps: float = 1e-5, seed: int = 7):
    """Finite-difference check of the total loss through the whole model.

    The teacher path is left attached: a stop-gradient is invisible to finite
    differences, so checking it would compare two different functions.
    """
    cfg = cfg.replace(ablation="full", **{"loss.teacher_detached": False})
    rng = np.random.default_rng(seed)
    params = init_params(cfg.replace(seed=seed, init_std=0.3))
    images = rng.normal(size=(batch_size, cfg.channels, cfg.image_size, cfg.image_size))
    lengths = rng.integers(1, cfg.text_len + 1, size=batch_size)
    mask = np.arange(cfg.text_len)[None, :] < lengths[:, None]
    ids = np.where(mask, rng.integers(1, cfg.vocab, size=(batch_size, cfg.text_len)), 0)
    text = TextBatch(ids, mask)
    names = sorted(params)

    def f(values):
        return forward(dict(zip(names, values)), images, text, cfg)["total"]

    return tc.check_gradients(f, [params[k] for k in names], eps=eps, probes=probes, seed=seed)
