"""Auto-decoding encoder, reconstruction loss and latent code normalization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import container
from . import diffcore as dc
from .data import FieldSample
from .inr import InrModel, decode_values

SPACES = ("raw", "normalized")
NORM_MODES = ("shared-featurewise", "separate-featurewise", "separate-scalar", "input-only")
STD_FLOOR = 1e-8
KIND_NORM = 4


class SpaceError(TypeError):
    """A code was handed to a consumer expecting the other latent space."""


class EncodeError(ArithmeticError):
    pass


@dataclass
class LatentCode:
    """A code (d_z,) or a batch of codes (B, d_z), tagged with its space."""

    values: Union[np.ndarray, dc.Node]
    space: str = "raw"

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown latent space {self.space!r}")

    def numpy(self) -> np.ndarray:
        return np.asarray(dc.eval_graph(self.values))


def require_space(z: LatentCode, space: str, consumer: str) -> None:
    if not isinstance(z, LatentCode):
        raise SpaceError(f"{consumer} expects a tagged LatentCode, got {type(z).__name__}")
    if z.space != space:
        raise SpaceError(f"{consumer} expects a {space} code, got a {z.space} one")


@dataclass
class EncoderConfig:
    alpha: Union[float, np.ndarray] = 1e-2
    K: int = 3
    learnable: bool = False

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if np.any(np.asarray(self.alpha) <= 0):
            raise ValueError("alpha must be positive")


# ---------------------------------------------------------------- losses


def recon_loss(predicted: FieldSample, target: FieldSample) -> float:
    """Mean squared difference over grid points and channels."""
    if predicted.grid is not target.grid and not np.array_equal(predicted.grid.points, target.grid.points):
        raise ValueError("recon_loss: fields live on different grids")
    if predicted.values.shape != target.values.shape:
        raise ValueError(f"recon_loss: shapes {predicted.values.shape} vs {target.values.shape}")
    return float(np.mean((predicted.values - target.values) ** 2))


def batch_losses(inr: InrModel, z, coords, values) -> dc.Node:
    """Per-sample reconstruction losses, shape (B,), for codes (B, d_z)."""
    pred = decode_values(inr, z, coords)
    err = dc.square(pred - values)
    n = values.shape[1] * values.shape[2]
    return dc.sum_axis(err, (1, 2)) * (1.0 / n)


def inner_loop(inr: InrModel, coords, values, alpha, K: int, create_graph: bool,
               z0=None, trace: Optional[list] = None) -> dc.Node:
    """K steps of gradient descent on the codes, starting from zero (or ``z0``).

    ``values`` is (B, N, c); ``coords`` is (N, d) shared or (B, N, d).
    With ``create_graph`` the returned codes stay differentiable with
    respect to the model parameters and ``alpha`` (second order).
    """
    values = dc.as_node(values)
    B = values.shape[0]
    z = dc.constant(np.zeros((B, inr.d_z))) if z0 is None else dc.as_node(z0)
    alpha = dc.as_node(alpha)
    if alpha.ndim == 1:
        alpha = dc.expand(alpha, (B, inr.d_z))
    for k in range(K):
        try:
            # the code gradient is needed even when the caller disabled recording
            with dc.enable_grad():
                zk = z if z.requires_grad else dc.variable(z.value)
                losses = batch_losses(inr, zk, coords, values)
                if trace is not None:
                    trace.append(np.array(losses.value))
                (g,) = dc.gradient(dc.total(losses), [zk], create_graph=create_graph)
                z = zk - alpha * g
        except dc.NonFiniteError as exc:
            raise EncodeError(f"non-finite value in inner step {k}: {exc}") from None
        if not create_graph:
            z = z.detach()
    return z


def encode(target: FieldSample, inr: InrModel, cfg: EncoderConfig, z0=None) -> LatentCode:
    """Auto-decode ``target`` into a raw code."""
    vals = target.values[None]
    start = None if z0 is None else np.asarray(dc.eval_graph(z0)).reshape(1, -1)
    z = inner_loop(inr, target.grid.points, vals, cfg.alpha, cfg.K, create_graph=False, z0=start)
    return LatentCode(np.array(z.value[0]), "raw")


def encode_batch(targets: list, inr: InrModel, cfg: EncoderConfig, chunk: int = 64) -> np.ndarray:
    """Raw codes (M, d_z) for many targets; targets on a common grid are batched."""
    out = np.zeros((len(targets), inr.d_z))
    groups: dict = {}
    for i, t in enumerate(targets):
        groups.setdefault(len(t.grid), []).append(i)
    for idx in groups.values():
        for lo in range(0, len(idx), chunk):
            part = idx[lo:lo + chunk]
            grids = [targets[i].grid for i in part]
            if all(g is grids[0] for g in grids):
                coords = grids[0].points
            else:
                coords = np.stack([g.points for g in grids])
            vals = np.stack([targets[i].values for i in part])
            z = inner_loop(inr, coords, vals, cfg.alpha, cfg.K, create_graph=False)
            out[part] = z.value
    return out


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    mode: str = "shared-featurewise"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ValueError("normalization statistics must be finite")

    @classmethod
    def identity(cls, d_z: int, mode: str = "input-only") -> "NormStats":
        return cls(np.zeros(d_z), np.ones(d_z), mode)


def _as_matrix(codes) -> np.ndarray:
    if isinstance(codes, LatentCode):
        codes = [codes]
    if isinstance(codes, (list, tuple)):
        if not codes:
            raise ValueError("fit_norm: empty code collection")
        rows = []
        for c in codes:
            if isinstance(c, LatentCode):
                require_space(c, "raw", "fit_norm")
                c = c.numpy()
            rows.append(np.asarray(c, dtype=np.float64).reshape(-1, np.shape(c)[-1]))
        return np.concatenate(rows, axis=0)
    m = np.asarray(codes, dtype=np.float64)
    if m.size == 0:
        raise ValueError("fit_norm: empty code collection")
    return m.reshape(-1, m.shape[-1])


def fit_norm(codes, mode: str = "shared-featurewise") -> NormStats:
    """Z-score statistics: feature-wise, or a single scalar for ``separate-scalar``."""
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    m = _as_matrix(codes)
    if mode == "separate-scalar":
        return NormStats(np.full(m.shape[1], m.mean()), np.full(m.shape[1], m.std()), mode)
    return NormStats(m.mean(axis=0), m.std(axis=0), mode)


def normalize(z: LatentCode, stats: NormStats) -> LatentCode:
    require_space(z, "raw", "normalize")
    vals = z.values
    if isinstance(vals, dc.Node):
        out = (vals - np.broadcast_to(stats.mean, vals.shape)) / np.broadcast_to(stats.std, vals.shape)
    else:
        out = (np.asarray(vals) - stats.mean) / stats.std
    return LatentCode(out, "normalized")


def denormalize(z: LatentCode, stats: NormStats) -> LatentCode:
    require_space(z, "normalized", "denormalize")
    vals = z.values
    if isinstance(vals, dc.Node):
        out = vals * np.broadcast_to(stats.std, vals.shape) + np.broadcast_to(stats.mean, vals.shape)
    else:
        out = np.asarray(vals) * stats.std + stats.mean
    return LatentCode(out, "raw")


@dataclass
class CodeNormalizer:
    """Statistics for the input and output code spaces of one task."""

    inp: NormStats
    out: NormStats
    mode: str = field(default="shared-featurewise")


def fit_code_norm(z_in, z_out, mode: str) -> CodeNormalizer:
    """Pair statistics per task variant (shared, separate, scalar, input-only)."""
    z_in, z_out = _as_matrix(z_in), _as_matrix(z_out)
    if mode == "shared-featurewise":
        s = fit_norm(np.concatenate([z_in, z_out]), mode)
        return CodeNormalizer(s, s, mode)
    if mode in ("separate-featurewise", "separate-scalar"):
        return CodeNormalizer(fit_norm(z_in, mode), fit_norm(z_out, mode), mode)
    if mode == "input-only":
        return CodeNormalizer(fit_norm(z_in, mode), NormStats.identity(z_out.shape[1]), mode)
    raise ValueError(f"unknown normalization mode {mode!r}")


def norm_to_container(cn: CodeNormalizer) -> container.Container:
    d = cn.inp.mean.shape[0]
    return container.Container(KIND_NORM, [NORM_MODES.index(cn.mode), d],
                               [cn.inp.mean, cn.inp.std, cn.out.mean, cn.out.std])


def norm_from_container(c: container.Container) -> CodeNormalizer:
    if c.kind != KIND_NORM or len(c.blocks) != 4:
        raise container.FormatVersionError(f"not a normalization block (kind {c.kind})")
    mode = NORM_MODES[c.dims[0]]
    m_in, s_in, m_out, s_out = c.blocks
    return CodeNormalizer(NormStats(m_in, s_in, mode), NormStats(m_out, s_out, mode), mode)
