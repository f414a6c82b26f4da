"""Small learnable stand-ins for the image backbone and the text encoder.

The image side is a pyramid: every stage mixes channels with a linear map,
applies ``tanh``, and (from the second stage on) first halves the spatial
extent with 2x2 average pooling. Each stage's map is averaged over space to
give one feature vector per scale. The text side embeds tokens, adds learned
position offsets, runs one masked multi-head self-attention layer with a
residual connection, and summarises the valid tokens into a ``cls`` vector.

Linear weights are stored ``out x in``; ``linear(x, W, b) = x W^T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, InputError
from .tensor_core import Tensor


@dataclass(frozen=True)
class TextBatch:
    ids: np.ndarray    # b x p, int
    mask: np.ndarray   # b x p, bool (True = real token)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if ids.shape != mask.shape or ids.ndim != 2:
            raise InputError(f"ids {ids.shape} and mask {mask.shape} must be matching b x p arrays")
        if not mask.any(axis=1).all():
            raise InputError("every text row needs at least one valid token")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "mask", mask)

    def __len__(self):
        return self.ids.shape[0]


@dataclass(frozen=True)
class TextFeatures:
    cls: Tensor        # b x d
    local: Tensor      # b x p x d
    mask: np.ndarray   # b x p


def linear(x, weight, bias=None) -> Tensor:
    x = tc._as_tensor(x)
    lead = x.shape[:-1]
    out = tc.einsum("ni,oi->no", x.reshape(-1, x.shape[-1]), weight)
    out = out.reshape(*lead, out.shape[-1])
    return out if bias is None else out + bias


def _normal(rng, std, *shape):
    return rng.normal(0.0, std, size=shape)


def init_image_params(rng, cfg) -> dict:
    params = {}
    d_in = cfg.channels
    for i, d_i in enumerate(cfg.scale_dims, 1):
        params[f"img.stage{i}.weight"] = _normal(rng, cfg.init_std, d_i, d_in)
        params[f"img.stage{i}.bias"] = np.zeros(d_i)
        d_in = d_i
    for i, d_i in enumerate(cfg.scale_dims, 1):
        params[f"img.proj{i}.weight"] = _normal(rng, cfg.init_std, cfg.embed_dim, d_i)
        params[f"img.proj{i}.bias"] = np.zeros(cfg.embed_dim)
    return params


def init_text_params(rng, cfg) -> dict:
    d = cfg.embed_dim
    params = {
        "txt.embed": _normal(rng, cfg.init_std, cfg.vocab, d),
        "txt.pos": _normal(rng, cfg.init_std, cfg.text_len, d),
    }
    for name in ("wq", "wk", "wv", "wo"):
        params[f"txt.attn.{name}"] = _normal(rng, cfg.init_std, d, d)
    params["txt.cls.weight"] = _normal(rng, cfg.init_std, d, d)
    params["txt.cls.bias"] = np.zeros(d)
    return params


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes of a b x c x h x w tensor."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"cannot halve spatial extent {h}x{w}")
    return tc.mean(x.reshape(b, c, h // 2, 2, w // 2, 2), axis=(3, 5))


def encode_image_multiscale(images, params, n_scales=None, use_bias=True) -> list:
    """Per-scale globally pooled features ``[b x d_1, ..., b x d_n]``."""
    x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))
    if x.ndim != 4:
        raise InputError(f"images must be b x c x h x w, got shape {x.shape}")
    if n_scales is None:
        n_scales = sum(1 for k in params if k.startswith("img.stage") and k.endswith(".weight"))
    if n_scales < 2:
        raise ConfigurationError(f"need at least 2 scales, got {n_scales}")
    h, w = x.shape[2:]
    factor = 2 ** (n_scales - 1)
    if h % factor or w % factor:
        raise ConfigurationError(f"spatial extent {h}x{w} not divisible by {factor}")
    feats = []
    for i in range(1, n_scales + 1):
        if i > 1:
            x = avg_pool2(x)
        z = tc.einsum("bchw,oc->bohw", x, params[f"img.stage{i}.weight"])
        if use_bias:
            z = z + params[f"img.stage{i}.bias"].reshape(-1, 1, 1)
        x = tc.tanh(z)
        feats.append(tc.mean(x, axis=(2, 3)))
    return feats


def project_scales(raw, params, use_bias=True) -> list:
    """Map every scale to the shared embedding width."""
    n_proj = sum(1 for k in params if k.startswith("img.proj") and k.endswith(".weight"))
    if n_proj != len(raw):
        raise ConfigurationError(f"{len(raw)} raw scales but {n_proj} configured projections")
    return [
        linear(v, params[f"img.proj{i}.weight"], params[f"img.proj{i}.bias"] if use_bias else None)
        for i, v in enumerate(raw, 1)
    ]


def encode_text(text: TextBatch, params, heads: int, use_bias=True) -> TextFeatures:
    embed = params["txt.embed"]
    vocab, d = embed.shape
    ids, mask = text.ids, text.mask
    if (ids < 0).any() or (ids >= vocab).any():
        raise InputError(f"token id outside [0, {vocab})")
    b, p = ids.shape
    if p > params["txt.pos"].shape[0]:
        raise InputError(f"text length {p} exceeds configured maximum {params['txt.pos'].shape[0]}")
    if d % heads:
        raise ConfigurationError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    x0 = tc.getitem(embed, ids) + params["txt.pos"][:p]
    q = linear(x0, params["txt.attn.wq"]).reshape(b, p, heads, dh)
    k = linear(x0, params["txt.attn.wk"]).reshape(b, p, heads, dh)
    v = linear(x0, params["txt.attn.wv"]).reshape(b, p, heads, dh)
    logits = tc.einsum("bqhe,bkhe->bhqk", q, k) * (1.0 / math.sqrt(dh))
    weights = tc.softmax(logits, axis=-1, mask=mask[:, None, None, :])
    attended = tc.einsum("bhqk,bkhe->bqhe", weights, v).reshape(b, p, d)
    local = x0 + linear(attended, params["txt.attn.wo"])

    valid = mask.astype(np.float64)
    pooled = tc.einsum("bpd,bp->bd", local, valid / valid.sum(axis=1, keepdims=True))
    cls = linear(pooled, params["txt.cls.weight"], params["txt.cls.bias"] if use_bias else None)
    return TextFeatures(cls=cls, local=local, mask=mask)
