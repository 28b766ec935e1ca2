"""Second-order meta-training of modulated INRs and processor regression."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .codec import EncoderConfig, EncodeError, batch_losses, inner_loop
from .inr import InrModel

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-6


class TrainingError(ArithmeticError):
    pass


@dataclass
class OuterConfig:
    lr: float = 5e-6
    epochs: int = 100
    batch_size: int = 32
    alpha_lr: float = 0.0
    first_order: bool = False
    seed: int = 0
    scheduler_decay: Optional[float] = None
    patience: int = 250
    threshold: float = 0.01
    min_lr: float = 1e-5
    # fraction of a batch's grid points kept per outer step (1.0 keeps all)
    point_keep: float = 1.0
    # with point_keep < 1: encode on the kept points, score the outer loss on all of them
    score_all_points: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("outer learning rate must be positive")
        if not 0 < self.point_keep <= 1:
            raise ValueError("point_keep must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros(np.shape(p)) for p in params], [np.zeros(np.shape(p)) for p in params])


def adam_step(state: AdamState, params: list, grads: list, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state differ in length")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------- plateau scheduler


class PlateauScheduler:
    """Multiply the rate by ``decay`` after ``patience`` epochs without relative improvement."""

    def __init__(self, lr: float, decay: float, patience: int = 250, threshold: float = 0.01,
                 min_lr: float = 1e-5):
        if not 0 < decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1 - self.threshold) or self.best == np.inf:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
        if self.bad >= self.patience:
            self.lr = max(self.lr * self.decay, self.min_lr)
            self.bad = 0
        return self.lr


def plateau_scheduler(trace, lr: float, patience: int, decay: float, threshold: float = 0.01,
                      min_lr: float = 1e-5) -> list:
    """Learning rate in effect after each entry of a loss trace."""
    sched = PlateauScheduler(lr, decay, patience, threshold, min_lr)
    return [sched.step(float(x)) for x in trace]


def _scheduler(cfg: OuterConfig):
    if cfg.scheduler_decay is None or cfg.scheduler_decay <= 0:
        return None
    return PlateauScheduler(cfg.lr, cfg.scheduler_decay, cfg.patience, cfg.threshold, cfg.min_lr)


# ---------------------------------------------------------------- INR meta-training


@dataclass
class MetaState:
    """Everything the outer loop updates: the model, alpha and both optimizers."""

    inr: InrModel
    alpha: np.ndarray
    opt: AdamState
    alpha_opt: AdamState
    epoch: int = 0


def init_meta_state(inr: InrModel, enc: EncoderConfig) -> MetaState:
    alpha = np.array(enc.alpha, dtype=np.float64)
    return MetaState(inr, alpha, AdamState.zeros_like(inr.leaves()), AdamState.zeros_like([alpha]))


def outer_loss_and_grads(inr: InrModel, coords, values, alpha, K: int, learn_alpha: bool = False,
                         first_order: bool = False, query=None):
    """Mean reconstruction loss after K inner steps and its gradients.

    ``query=(coords, values)`` scores the codes on other points than the
    ones they were fitted on.  Returns
    ``(loss, per_sample_losses, grads_for_leaves, grad_alpha)``.
    """
    leaves = [dc.variable(x) for x in inr.leaves()]
    model = inr.with_leaves(leaves)
    a = dc.variable(alpha) if learn_alpha else dc.constant(alpha)
    inner = []
    try:
        z = inner_loop(model, coords, values, a, K, create_graph=not first_order, trace=inner)
        losses = batch_losses(model, z, *(query or (coords, values)))
    except (EncodeError, dc.NonFiniteError) as exc:
        raise TrainingError(f"outer step aborted: {exc}; inner losses {inner}") from None
    loss = dc.mean(losses)
    wrt = leaves + ([a] if learn_alpha else [])
    grads = dc.gradient(loss, wrt, create_graph=False)
    g_alpha = grads.pop().value if learn_alpha else None
    return float(loss.value), np.array(losses.value), [g.value for g in grads], g_alpha


def outer_step(state: MetaState, coords, values, enc: EncoderConfig, lr: float,
               alpha_lr: float = 0.0, first_order: bool = False, query=None) -> float:
    """One Adam update of the shared INR weights through the unrolled inner loop."""
    if enc.K < 1:
        raise ValueError("outer_step needs K >= 1")
    learn_alpha = alpha_lr > 0
    loss, per_sample, grads, g_alpha = outer_loss_and_grads(
        state.inr, coords, values, state.alpha, enc.K, learn_alpha, first_order, query)
    if not np.isfinite(loss):
        bad = int(np.argmax(~np.isfinite(per_sample)))
        raise TrainingError(f"non-finite outer loss (sample {bad})")
    params, state.opt = adam_step(state.opt, state.inr.leaves(), grads, lr)
    state.inr = state.inr.with_leaves(params)
    if learn_alpha:
        (alpha,), state.alpha_opt = adam_step(state.alpha_opt, [state.alpha], [g_alpha], alpha_lr)
        state.alpha = np.maximum(alpha, ALPHA_FLOOR)
    return loss


def _stack_batch(samples, idx):
    grids = [samples[i].grid for i in idx]
    if all(g is grids[0] for g in grids):
        coords = grids[0].points
    else:
        if len({len(g) for g in grids}) != 1:
            raise ValueError("samples in one batch must have equal point counts")
        coords = np.stack([g.points for g in grids])
    return coords, np.stack([samples[i].values for i in idx])


def _drop_points(coords, values, keep, rng):
    """Random subset of the observed points, shared by the whole batch."""
    n = values.shape[1]
    idx = np.sort(rng.choice(n, size=max(1, int(np.ceil(keep * n))), replace=False))
    coords = coords[idx] if coords.ndim == 2 else coords[:, idx]
    return coords, values[:, idx]


def _batches(samples, order, batch_size):
    # group by point count so every batch stacks into dense arrays
    groups: dict = {}
    for i in order:
        groups.setdefault(len(samples[i].grid), []).append(i)
    out = []
    for idx in groups.values():
        out += [idx[lo:lo + batch_size] for lo in range(0, len(idx), batch_size)]
    return out


def train_inr(samples: list, inr: InrModel, enc: EncoderConfig, cfg: OuterConfig,
              state: Optional[MetaState] = None, callback=None):
    """Meta-train ``inr`` on FieldSamples; returns ``(MetaState, trace)``.

    Each trace row is ``{"epoch", "loss", "lr", "alpha"}``.
    """
    if not samples:
        raise ValueError("train_inr: empty dataset")
    state = state or init_meta_state(inr, enc)
    rng = np.random.default_rng(cfg.seed)
    sched = _scheduler(cfg)
    lr = cfg.lr
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for idx in _batches(samples, order, cfg.batch_size):
            coords, values = _stack_batch(samples, idx)
            query = (coords, values) if cfg.score_all_points else None
            if cfg.point_keep < 1:
                coords, values = _drop_points(coords, values, cfg.point_keep, rng)
            loss = outer_step(state, coords, values, enc, lr, cfg.alpha_lr, cfg.first_order, query)
            total += loss * len(idx)
            count += len(idx)
        state.epoch += 1
        if sched is not None:
            lr = sched.step(total / count)
        row = {"epoch": state.epoch, "loss": total / count, "lr": lr,
               "alpha": float(np.mean(state.alpha))}
        trace.append(row)
        if callback is not None:
            callback(row)
    return state, trace


# ---------------------------------------------------------------- processor regression


def _mse(pred: dc.Node, target) -> dc.Node:
    return dc.mean(dc.square(pred - target))


def train_processor(z_in: np.ndarray, z_out: np.ndarray, psi, cfg: OuterConfig, callback=None):
    """Fit ``psi`` so that ``psi(z_in) ~ z_out`` (fixed, normalized codes).

    Returns ``(psi, trace)``; trace rows are ``{"epoch", "loss", "lr"}``.
    """
    z_in = np.asarray(z_in, dtype=np.float64)
    z_out = np.asarray(z_out, dtype=np.float64)
    if z_in.shape != z_out.shape or z_in.shape[1] != psi.d_z:
        raise ValueError(f"train_processor: codes {z_in.shape}/{z_out.shape} vs processor d_z={psi.d_z}")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.zeros_like(psi.leaves())
    sched = _scheduler(cfg)
    lr = cfg.lr
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(z_in))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            leaves = [dc.variable(x) for x in psi.leaves()]
            loss = _mse(psi.with_leaves(leaves)(z_in[idx]), z_out[idx])
            grads = dc.gradient(loss, leaves, create_graph=False)
            params, opt = adam_step(opt, [l.value for l in leaves], [g.value for g in grads], lr)
            psi = psi.with_leaves(params)
            total += float(loss.value) * len(idx)
        epoch_loss = total / len(order)
        if sched is not None:
            lr = sched.step(epoch_loss)
        row = {"epoch": epoch + 1, "loss": epoch_loss, "lr": lr}
        trace.append(row)
        if callback is not None:
            callback(row)
    return psi, trace


def train_node(codes: np.ndarray, field, schedule, cfg: OuterConfig, substeps: int = 2,
               callback=None):
    """Fit a latent vector field on trajectories of normalized codes (n, T, d_z).

    Rollouts restart from the ground-truth code with probability given by
    ``schedule`` at each epoch, one draw per trajectory and timestep.
    """
    from .processor import epsilon_at, rollout_loss

    codes = np.asarray(codes, dtype=np.float64)
    n, T, d = codes.shape
    if d != field.d_z:
        raise ValueError(f"train_node: codes have d_z={d}, field expects {field.d_z}")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.zeros_like(field.leaves())
    sched = _scheduler(cfg)
    lr = cfg.lr
    trace = []
    for epoch in range(cfg.epochs):
        eps = epsilon_at(schedule, epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            mask = (rng.random((len(idx), T - 1)) < eps).astype(np.float64)
            leaves = [dc.variable(x) for x in field.leaves()]
            try:
                loss = rollout_loss(field.with_leaves(leaves), codes[idx], mask, substeps)
            except ArithmeticError as exc:
                raise TrainingError(f"epoch {epoch}, trajectories {idx.tolist()}: {exc}") from None
            grads = dc.gradient(loss, leaves, create_graph=False)
            params, opt = adam_step(opt, [l.value for l in leaves], [g.value for g in grads], lr)
            field = field.with_leaves(params)
            total += float(loss.value) * len(idx)
        epoch_loss = total / n
        if sched is not None:
            lr = sched.step(epoch_loss)
        row = {"epoch": epoch + 1, "loss": epoch_loss, "lr": lr, "epsilon": eps}
        trace.append(row)
        if callback is not None:
            callback(row)
    return field, trace


def write_trace_csv(path, trace: list) -> None:
    if not trace:
        return
    keys = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(trace)
