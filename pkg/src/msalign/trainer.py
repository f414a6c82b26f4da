"""End-to-end training loop with Adam and the ablation switches."""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_text, config_to_text
from .errors import ContractError, InputError, NumericalError
from .evalkit import evaluate
from .formats import atomic_write_text, read_checkpoint, write_checkpoint
from .model import active_param_names, forward, init_params
from .tensor_core import GradTape, backward

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "L_tri", "L_MSCMA", "L_CSMMC", "val_mR")


@dataclass
class ModelState:
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    best_params: dict = None
    best_epoch: int = 0
    best_val: float = -math.inf

    @property
    def eval_params(self):
        """Best-by-validation parameters when available, else the latest."""
        return self.best_params if self.best_params is not None else self.params


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_tri: float
    l_mscma: float      # nan when the component is not part of the setting
    l_csmmc: float
    val_mr: float

    def values(self):
        return (self.l_tri, self.l_mscma, self.l_csmmc, self.val_mr)


def adam_step(state: ModelState, grads: dict, cfg: TrainConfig) -> ModelState:
    """One bias-corrected Adam update with decoupled weight decay.

    Only parameters present in ``grads`` move; the others keep their values
    and moment estimates.
    """
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr, wd = cfg.learning_rate, cfg.weight_decay
    params, m, v = dict(state.params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = state.params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m_new = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v_new = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m_new / (1.0 - b1 ** t)
        v_hat = v_new / (1.0 - b2 ** t)
        params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + wd * p)
        m[name], v[name] = m_new, v_new
    return ModelState(params, m, v, t, state.best_params, state.best_epoch, state.best_val)


def _batches(order, batch_size):
    return [order[i:i + batch_size] for i in range(0, len(order) - batch_size + 1, batch_size)]


def _prefetched(split, batches, enabled):
    if not enabled:
        for idx in batches:
            yield split.images[idx], split.text(idx)
        return
    q: queue.Queue = queue.Queue(maxsize=2)
    done = object()

    def produce():
        for idx in batches:
            q.put((split.images[idx], split.text(idx)))
        q.put(done)

    threading.Thread(target=produce, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


def train_step(state: ModelState, images, text, cfg: TrainConfig, names) -> tuple:
    tape = GradTape()
    live = dict(state.params)
    for n in names:
        live[n] = tape.watch(state.params[n])
    try:
        out = forward(live, images, text, cfg)
    except NumericalError as exc:
        raise NumericalError(f"step {state.step + 1}: {exc}") from None
    if not np.isfinite(out["total"].item()):
        raise NumericalError(f"step {state.step + 1}: total loss is not finite")
    grads = backward(out["total"])
    state = adam_step(state, {n: grads[live[n].tape_id].data for n in names}, cfg)
    raw = tuple(float("nan") if out[k] is None else out[k].item() for k in ("tri", "mscma", "csmmc"))
    return state, raw


def train(cfg: TrainConfig, dataset, out_dir=None):
    """Run the training loop; returns ``(ModelState, [EpochRecord, ...])``.

    One epoch is a shuffled pass over ``dataset.train`` with the last
    incomplete batch dropped. Validation mR (dual-flow) is measured after each
    epoch; training stops early after ``cfg.patience`` epochs without a new
    best. With ``out_dir`` a checkpoint is written every epoch, plus
    ``best.msac`` and ``history.txt``.
    """
    split = dataset.train
    if len(split) == 0:
        raise InputError("training split is empty")
    if len(split) < cfg.batch_size:
        raise InputError(f"training split has {len(split)} pairs, batch_size is {cfg.batch_size}")
    state = ModelState(init_params(cfg))
    names = active_param_names(cfg, sorted(state.params))
    rng = np.random.default_rng([cfg.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        atomic_write_text(out / "config.txt", config_to_text(cfg))

    history, stale = [], 0
    val = getattr(dataset, "val", None)
    for epoch in range(1, cfg.epochs + 1):
        sums, count = np.zeros(3), 0
        for images, text in _prefetched(split, _batches(rng.permutation(len(split)), cfg.batch_size),
                                        cfg.prefetch):
            state, raw = train_step(state, images, text, cfg, names)
            sums += raw
            count += 1
        val_mr = evaluate(state.params, val, cfg).mR if val is not None and len(val) else float("nan")
        rec = EpochRecord(epoch, *(sums / count), val_mr)
        history.append(rec)
        log.info("epoch %d  L_tri %.4f  L_MSCMA %.4f  L_CSMMC %.4f  val mR %.2f", epoch, *rec.values())

        improved = val_mr > state.best_val
        if improved:
            state.best_params, state.best_epoch, state.best_val = dict(state.params), epoch, val_mr
            stale = 0
        else:
            stale += 1
        if out is not None:
            save_checkpoint(out / f"epoch{epoch:03d}.msac", cfg, state)
            if improved:
                save_checkpoint(out / "best.msac", cfg, state, best=True)
            atomic_write_text(out / "history.txt", history_to_text(history))
        if stale >= cfg.patience:
            log.info("early stop after epoch %d (best %d)", epoch, state.best_epoch)
            break
    return state, history


# ---------------------------------------------------------------- files

def history_to_text(history) -> str:
    lines = ["\t".join(HISTORY_COLUMNS)]
    lines += ["\t".join([str(r.epoch)] + [repr(float(x)) for x in r.values()]) for r in history]
    return "\n".join(lines) + "\n"


def history_from_text(text: str) -> list:
    rows = [ln.split("\t") for ln in text.splitlines()[1:] if ln.strip()]
    return [EpochRecord(int(r[0]), *(float(x) for x in r[1:])) for r in rows]


def save_checkpoint(path, cfg: TrainConfig, state: ModelState, best: bool = False):
    params = state.best_params if best else state.params
    tensors = dict(params)
    if not best:
        tensors.update({f"adam.m/{k}": v for k, v in state.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in state.v.items()})
        tensors["adam.step"] = np.array(float(state.step))
    write_checkpoint(path, config_to_text(cfg), tensors)


def load_checkpoint(path):
    """Return ``(TrainConfig, ModelState)`` from a checkpoint file."""
    text, tensors = read_checkpoint(path)
    cfg = config_from_text(text)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k[7:]: t for k, t in tensors.items() if k.startswith("adam.v/")}
    step = int(tensors["adam.step"]) if "adam.step" in tensors else 0
    return cfg, ModelState(params, m, v, step)
