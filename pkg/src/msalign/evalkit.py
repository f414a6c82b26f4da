"""Retrieval metrics, per-scale diagnostics, attention dumps, and ablation runners.

Ranking convention: candidates are sorted by cosine similarity, highest
first; equal similarities are ordered by ascending candidate index. A query
counts as a hit at K when any of its ground-truth matches is among the first K.

Quartiles use linear interpolation between order statistics (the inclusive
method, ``numpy.percentile(..., method="linear")``).
"""

from __future__ import annotations

import itertools
import statistics
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .alignment import mscmat_forward, mscmat_forward_self, scale_params
from .encoders import encode_text
from .errors import InputError
from .formats import format_table
from .model import image_embedding, image_features, text_embedding

KS = (1, 5, 10)
QUARTILE_METHOD = "linear"
REPORT_COLUMNS = ("setting", "seed", "R@1s", "R@5s", "R@10s", "R@1i", "R@5i", "R@10i", "mR")


@dataclass(frozen=True)
class RetrievalReport:
    sentence: tuple      # image query -> texts, R@1/5/10 in percent
    image: tuple         # text query -> images
    mR: float
    image_queries: int
    text_queries: int

    def values(self):
        return (*self.sentence, *self.image)


def _ranks(sim, axis):
    """Rank (0 = best) of every candidate for every query along ``axis``."""
    s = np.moveaxis(sim, axis, -1)
    order = np.argsort(-s, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(s.shape[-1])[None, :], axis=-1)
    return ranks


def _cosine(a, b):
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def retrieve_eval(image_embed, text_embed, text_owner=None) -> RetrievalReport:
    """Dual-direction R@K from embeddings.

    ``text_owner[t]`` is the index of the image that text ``t`` describes;
    the default pairs text ``t`` with image ``t``.
    """
    img = np.asarray(image_embed, dtype=np.float64)
    txt = np.asarray(text_embed, dtype=np.float64)
    if img.ndim != 2 or txt.ndim != 2 or img.shape[1] != txt.shape[1]:
        raise InputError(f"embeddings must be N x d and M x d, got {img.shape} and {txt.shape}")
    if not (np.all(np.isfinite(img)) and np.all(np.isfinite(txt))):
        raise InputError("embeddings contain non-finite values")
    return retrieve_from_similarity(_cosine(img, txt), text_owner)


def retrieve_from_similarity(sim, text_owner=None) -> RetrievalReport:
    sim = np.asarray(sim, dtype=np.float64)
    N, M = sim.shape
    owner = np.arange(M) if text_owner is None else np.asarray(text_owner, dtype=np.int64)
    if owner.shape != (M,) or (owner < 0).any() or (owner >= N).any():
        raise InputError(f"text_owner must give an image index in [0, {N}) for each of {M} texts")
    counts = np.bincount(owner, minlength=N)
    if (counts == 0).any():
        raise InputError(f"image query {int(np.argmin(counts))} has no ground-truth text")

    rank_t = _ranks(sim, axis=1)                        # N x M: rank of text among texts
    relevant = owner[None, :] == np.arange(N)[:, None]
    best_t = np.where(relevant, rank_t, M).min(axis=1)  # first relevant text per image
    rank_i = _ranks(sim, axis=0)                        # M x N: rank of image among images
    best_i = rank_i[np.arange(M), owner]

    sentence = tuple(100.0 * int(np.count_nonzero(best_t < k)) / N for k in KS)
    image = tuple(100.0 * int(np.count_nonzero(best_i < k)) / M for k in KS)
    return RetrievalReport(sentence, image, sum(sentence + image) / 6.0, N, M)


def embed_split(params, split, cfg, chunk=256):
    """Dual-flow test-time embeddings (no cross-attention)."""
    imgs, txts = [], []
    for lo in range(0, len(split), chunk):
        idx = np.arange(lo, min(lo + chunk, len(split)))
        imgs.append(image_embedding(params, split.images[idx], cfg).data)
        txts.append(text_embedding(params, split.text(idx), cfg).data)
    return np.concatenate(imgs), np.concatenate(txts)


def evaluate(params, split, cfg) -> RetrievalReport:
    img, txt = embed_split(params, split, cfg)
    return retrieve_eval(img, txt, split.text_owner)


# ---------------------------------------------------------------- diagnostics

@dataclass
class ScaleDiagnostics:
    matrices: list                 # per scale, images x texts
    stats: list                    # per scale dict(min, q1, median, q3, max, mean)
    gap_to_largest: list           # mean diag(scale n) - mean diag(scale i)
    quartile_method: str = QUARTILE_METHOD


def diagonal_stats(matrix) -> dict:
    diag = np.diag(np.asarray(matrix, dtype=np.float64))
    q1, med, q3 = np.percentile(diag, [25, 50, 75], method=QUARTILE_METHOD)
    return {"min": float(diag.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(diag.max()), "mean": float(diag.mean())}


def scale_matrices(params, split, cfg, chunk=64, return_gates=False):
    """Full images x texts score matrix at every scale, computed in blocks."""
    diag_cfg = cfg if cfg.ablation != "base" else cfg.replace(ablation="base_m")
    N = len(split)
    mats = [np.zeros((N, N)) for _ in range(cfg.n_scales)]
    gates = [None] * cfg.n_scales
    feats_img = image_features(params, split.images, diag_cfg)
    for lo in range(0, N, chunk):
        cols = np.arange(lo, min(lo + chunk, N))
        text = encode_text(split.text(cols), params, cfg.heads, cfg.use_bias)
        for i in range(1, cfg.n_scales + 1):
            p = scale_params(params, i)
            v = feats_img[i - 1]
            if cfg.mscmat_mode == "self_attn":
                m = mscmat_forward_self(v, text, p, cfg.heads)
            elif return_gates:
                m, g = mscmat_forward(v, text, p, cfg.heads, cfg.tau_attn, cfg.mscmat_mode, True)
                gates[i - 1] = g if gates[i - 1] is None else np.concatenate([gates[i - 1], g], 1)
            else:
                m = mscmat_forward(v, text, p, cfg.heads, cfg.tau_attn, cfg.mscmat_mode)
            mats[i - 1][:, cols] = m.data
    return (mats, gates) if return_gates else mats


def scale_diagnostics(params, split, cfg) -> ScaleDiagnostics:
    mats = scale_matrices(params, split, cfg)
    stats = [diagonal_stats(m) for m in mats]
    top = stats[-1]["mean"]
    return ScaleDiagnostics(mats, stats, [top - s["mean"] for s in stats])


def attention_dump(params, split, cfg, max_pairs=16):
    """Gate values per (image, text, head, token) at every scale for the first pairs."""
    sub = split.subset(np.arange(min(max_pairs, len(split))))
    _, gates = scale_matrices(params, sub, cfg.replace(mscmat_mode="standard"), return_gates=True)
    return gates


# ---------------------------------------------------------------- statistics

def paired_one_sided(a, b):
    """One-sided paired t-test of mean(a - b) > 0; returns (t, p)."""
    from scipy import stats

    res = stats.ttest_rel(a, b, alternative="greater")
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------- ablations

SUITES = ("components", "layers", "mscmat_variants", "alpha_beta_sweep")


@dataclass
class AblationResult:
    suite: str
    rows: list = field(default_factory=list)   # (setting, seed, RetrievalReport)
    histories: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)      # filled only with keep_states

    def table(self) -> str:
        return format_table(REPORT_COLUMNS, [
            (setting, seed, *rep.values(), rep.mR) for setting, seed, rep in self.rows])

    def summary(self):
        """Setting -> (mean mR, stdev mR) over seeds, in first-seen order."""
        by = {}
        for setting, _, rep in self.rows:
            by.setdefault(setting, []).append(rep.mR)
        return {k: (statistics.fmean(v), statistics.stdev(v) if len(v) > 1 else 0.0)
                for k, v in by.items()}

    def summary_table(self) -> str:
        return format_table(("setting", "mR_mean", "mR_std"),
                            [(k, m, s) for k, (m, s) in self.summary().items()])


def layer_masks(n_scales: int):
    """All nonempty scale subsets, largest subsets first (all-scales first)."""
    return [m for m in itertools.product((True, False), repeat=n_scales) if any(m)]


def _mask_label(mask):
    return "layers=" + "".join("1" if on else "0" for on in mask)


def run_ablation(base_cfg, suite: str, seeds: int, dataset, grid=(0.0, 1.0, 10.0),
                 train_fn=None, keep_states=False) -> AblationResult:
    """Train and test every setting of ``suite`` for ``seeds`` seeds.

    Seeds are ``base_cfg.seed + s`` for ``s < seeds``; each run is scored on
    ``dataset.test`` with its best-by-validation parameters.
    """
    from .trainer import train

    if suite not in SUITES:
        raise InputError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    if seeds < 1:
        raise InputError("seeds must be >= 1")
    train_fn = train_fn or train
    result = AblationResult(suite)

    def run(label, cfg):
        for s in range(seeds):
            run_cfg = cfg.replace(seed=base_cfg.seed + s)
            state, history = train_fn(run_cfg, dataset)
            rep = evaluate(state.eval_params, dataset.test, run_cfg)
            result.rows.append((label, run_cfg.seed, rep))
            result.histories[(label, run_cfg.seed)] = history
            if keep_states:
                result.states[(label, run_cfg.seed)] = (run_cfg, state)

    if suite == "components":
        for setting in ("base", "base_m", "base_m_a_b", "full"):
            run(setting, base_cfg.replace(ablation=setting))
    elif suite == "layers":
        for mask in layer_masks(base_cfg.n_scales):
            run(_mask_label(mask), base_cfg.replace(ablation="full", scale_mask=mask))
    elif suite == "mscmat_variants":
        for mode in ("standard", "no_cls", "self_attn"):
            run(mode, base_cfg.replace(ablation="full", mscmat_mode=mode))
    else:
        for a in grid:
            run(f"alpha_search:alpha={a:g},beta=0", base_cfg.replace(
                ablation="full", **{"loss.alpha": a, "loss.beta": 0.0}))
        summary = result.summary()
        best_alpha = max(grid, key=lambda a: summary[f"alpha_search:alpha={a:g},beta=0"][0])
        for b in grid:
            run(f"beta_search:alpha={best_alpha:g},beta={b:g}", base_cfg.replace(
                ablation="full", **{"loss.alpha": best_alpha, "loss.beta": b}))
    return result
