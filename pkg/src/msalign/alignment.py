"""Per-scale cross-modal alignment: one attention block per image scale that
scores every image in a batch against every text.

For image ``j`` and text ``k`` the image vector is the query and text ``k``'s
valid local tokens supply keys and values. Token weights come from a
sigmoid gate (not a softmax), so they need not sum to one. The aggregated
text vector, plus the text's ``cls`` feature unless ``mode == "no_cls"``, is
cosine-scored against the image vector.

The ``self_attn`` variant instead prepends the image vector to the text's
tokens and runs ordinary softmax self-attention; only the output at the image
position is scored.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor_core as tc
from .encoders import TextFeatures, linear
from .errors import ContractError, DimensionError, InputError


def init_alignment_params(rng, cfg) -> dict:
    d = cfg.embed_dim
    return {
        f"align{i}.{name}": rng.normal(0.0, cfg.init_std, size=(d, d))
        for i in range(1, cfg.n_scales + 1)
        for name in ("wq", "wk", "wv")
    }


def scale_params(params, i: int) -> dict:
    """The ``wq``/``wk``/``wv`` triple of scale ``i`` (1-based)."""
    return {name: params[f"align{i}.{name}"] for name in ("wq", "wk", "wv")}


def _check_inputs(v, text: TextFeatures, heads: int):
    d = v.shape[-1]
    if v.ndim != 2 or text.cls.shape[-1] != d or text.local.shape[-1] != d:
        raise DimensionError(
            f"image {v.shape}, cls {text.cls.shape} and local {text.local.shape} must share width")
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    if not np.asarray(text.mask, bool).any(axis=1).all():
        raise InputError("every text row needs at least one valid token")


def _cosine_scores(v, u):
    """cos(v_j, u_jk) for v: B x d, u: B x T x d."""
    return tc.einsum("jd,jkd->jk", tc.l2_normalize(v, axis=-1), tc.l2_normalize(u, axis=-1))


def mscmat_forward(v, text: TextFeatures, params, heads: int, tau_attn: float,
                   mode: str = "standard", return_gates: bool = False):
    """Score matrix (B_img x B_txt) for one scale.

    With ``return_gates`` also returns the gate array of shape
    ``B_img x B_txt x heads x p`` (zero at padded tokens).
    """
    if mode == "self_attn":
        raise ContractError("self_attn variant is served by mscmat_forward_self")
    if mode not in ("standard", "no_cls"):
        raise ContractError(f"unknown mode {mode!r}")
    v = tc._as_tensor(v)
    _check_inputs(v, text, heads)
    B, d = v.shape
    T, p, _ = text.local.shape
    dh = d // heads
    mask = np.asarray(text.mask, dtype=np.float64)

    q = linear(v, params["wq"]).reshape(B, heads, dh)
    k = linear(text.local, params["wk"]).reshape(T, p, heads, dh)
    val = linear(text.local, params["wv"]).reshape(T, p, heads, dh)

    logits = tc.einsum("jhe,kthe->jkht", q, k) * (1.0 / tau_attn)
    gates = tc.sigmoid(logits) * mask[None, :, None, :]
    agg = tc.einsum("jkht,kthe->jkhe", gates, val).reshape(B, T, d)
    if mode == "standard":
        agg = agg + text.cls.reshape(1, T, d)
    scores = _cosine_scores(v, agg)
    if return_gates:
        return scores, np.array(gates.data)
    return scores


def mscmat_forward_self(v, text: TextFeatures, params, heads: int, return_weights: bool = False):
    """Score matrix for the self-attention variant (image token + text tokens)."""
    v = tc._as_tensor(v)
    _check_inputs(v, text, heads)
    B, d = v.shape
    T, p, _ = text.local.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    q = linear(v, params["wq"]).reshape(B, heads, dh)
    k_img = linear(v, params["wk"]).reshape(B, heads, dh)
    v_img = linear(v, params["wv"]).reshape(B, heads, dh)
    k_tok = linear(text.local, params["wk"]).reshape(T, p, heads, dh)
    v_tok = linear(text.local, params["wv"]).reshape(T, p, heads, dh)

    self_logit = tc.einsum("jhe,jhe->jh", q, k_img).reshape(B, 1, heads, 1) * scale
    tok_logit = tc.einsum("jhe,kthe->jkht", q, k_tok) * scale
    logits = tc.concat([self_logit + np.zeros((1, T, 1, 1)), tok_logit], axis=3)
    full_mask = np.concatenate(
        [np.ones((T, 1), bool), np.asarray(text.mask, bool)], axis=1)[None, :, None, :]
    w = tc.softmax(logits, axis=3, mask=full_mask)

    out = (tc.einsum("jkh,jhe->jkhe", w[..., 0], v_img)
           + tc.einsum("jkht,kthe->jkhe", w[..., 1:], v_tok)).reshape(B, T, d)
    scores = _cosine_scores(v, out + text.cls.reshape(1, T, d))
    if return_weights:
        return scores, np.array(w.data)
    return scores


def similarity_stack(projected, text: TextFeatures, params, scales, heads: int,
                     tau_attn: float, mode: str = "standard") -> list:
    """Score matrices for the listed 1-based ``scales``, in ascending order."""
    out = []
    for i in scales:
        p = scale_params(params, i)
        if mode == "self_attn":
            out.append(mscmat_forward_self(projected[i - 1], text, p, heads))
        else:
            out.append(mscmat_forward(projected[i - 1], text, p, heads, tau_attn, mode))
    return out
