"""Training objectives: bidirectional triplet ranking, per-scale symmetric
contrastive alignment, cross-scale distillation, and their weighted sum."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .config import LossConfig, NEGATIVE_STRATEGIES
from .errors import ContractError, NumericalError, ParameterError


def cosine_matrix(a, b):
    """``S[j, k] = cos(a_j, b_k)``."""
    return tc.einsum("jd,kd->jk", tc.l2_normalize(a, axis=1), tc.l2_normalize(b, axis=1))


def _hinge_sum(sim, margin, strategy):
    """Hinge terms anchored on the rows of ``sim`` (positives on the diagonal)."""
    b = sim.shape[0]
    pos = sim[np.arange(b), np.arange(b)]
    if strategy == "hardest":
        # cosines live in [-1, 1]; pushing the diagonal down by 4 excludes it from the max
        neg = tc.tmax(sim - 4.0 * np.eye(b), axis=1)
        return tc.relu(margin - pos + neg).sum()
    off = 1.0 - np.eye(b)
    return (tc.relu(margin - pos.reshape(b, 1) + sim) * off).sum()


def triplet_from_similarity(sim, margin: float, strategy: str = "hardest"):
    sim = tc._as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity must be square, got shape {sim.shape}")
    if sim.shape[0] < 2:
        raise ContractError("triplet loss needs a batch of at least 2 pairs")
    if strategy not in NEGATIVE_STRATEGIES:
        raise ParameterError(f"unknown negative strategy {strategy!r}")
    return _hinge_sum(sim, margin, strategy) + _hinge_sum(sim.T, margin, strategy)


def triplet_loss(image, text_cls, cfg: LossConfig):
    """Image-anchored plus text-anchored hinge sums over cosine similarities."""
    image = tc._as_tensor(image)
    if image.shape[0] < 2:
        raise ContractError("triplet loss needs a batch of at least 2 pairs")
    return triplet_from_similarity(cosine_matrix(image, text_cls), cfg.margin, cfg.negative_strategy)


def cma_directions(m, tau_cl: float):
    """Mean log-likelihood of the diagonal, image-to-text rows and text-to-image columns."""
    if not tau_cl > 0:
        raise ParameterError(f"tau_cl must be positive, got {tau_cl}")
    m = tc._as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"score matrix must be square, got shape {m.shape}")
    b = m.shape[0]
    diag = (np.arange(b), np.arange(b))
    scaled = m * (1.0 / tau_cl)
    return tc.log_softmax(scaled, axis=1)[diag].mean(), tc.log_softmax(scaled, axis=0)[diag].mean()


def cma_loss(m, tau_cl: float):
    """Symmetric InfoNCE on one score matrix, diagonal = positives."""
    i2t, t2i = cma_directions(m, tau_cl)
    return (i2t + t2i) * -0.5


def mscma_loss(stack, tau_cl: float):
    if len(stack) == 0:
        raise ContractError("empty similarity stack")
    total = cma_loss(stack[0], tau_cl)
    for m in stack[1:]:
        total = total + cma_loss(m, tau_cl)
    return total


def mmc_loss(student, teacher, mu: float):
    """Row-averaged KL(softmax(student/mu) || softmax(teacher/mu))."""
    log_p = tc.log_softmax(tc._as_tensor(student) * (1.0 / mu), axis=1)
    log_q = tc.log_softmax(tc._as_tensor(teacher) * (1.0 / mu), axis=1)
    return (tc.exp(log_p) * (log_p - log_q)).sum(axis=1).mean()


def csmmc_loss(stack, mu: float, teacher_detached: bool = True):
    """Distil every smaller scale towards the last (largest) scale."""
    if len(stack) < 2:
        raise ContractError(f"cross-scale loss needs >= 2 scales, got {len(stack)}")
    if not mu > 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    teacher = tc.detach(stack[-1]) if teacher_detached else stack[-1]
    total = mmc_loss(stack[0], teacher, mu)
    for m in stack[1:-1]:
        total = total + mmc_loss(m, teacher, mu)
    return total


def total_loss(l_tri, l_mscma, l_csmmc, alpha: float, beta: float):
    for name, value in (("L_tri", l_tri), ("L_MSCMA", l_mscma), ("L_CSMMC", l_csmmc)):
        if not np.all(np.isfinite(tc._as_tensor(value).data)):
            raise NumericalError(f"{name} is not finite")
    return tc._as_tensor(l_tri) + tc._as_tensor(l_mscma) * alpha + tc._as_tensor(l_csmmc) * beta
