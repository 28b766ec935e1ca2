"""SIREN, shift-modulated SIREN and the linear hypernetwork decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import container
from . import diffcore as dc
from .data import FieldSample, Grid

KIND_INR = 1


@dataclass
class SirenParams:
    """Weights ``W_0..W_L`` (``W_i`` of shape out x in), biases ``b_0..b_L``."""

    weights: list
    biases: list
    omega0: float

    def __post_init__(self):
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need at least one sine layer and one output layer")

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class HypernetParams:
    """Per-layer ``phi_i = V_i z + c_i`` for the ``depth`` sine layers."""

    V: list
    c: list

    @property
    def d_z(self) -> int:
        return self.V[0].shape[1]


@dataclass
class Modulations:
    shifts: list


@dataclass
class InrModel:
    siren: SirenParams
    hyper: HypernetParams

    @property
    def d_z(self) -> int:
        return self.hyper.d_z

    def leaves(self) -> list:
        return [*self.siren.weights, *self.siren.biases, *self.hyper.V, *self.hyper.c]

    def with_leaves(self, leaves) -> "InrModel":
        leaves = list(leaves)
        n = len(self.siren.weights)
        m = len(self.hyper.V)
        siren = SirenParams(leaves[:n], leaves[n:2 * n], self.siren.omega0)
        hyper = HypernetParams(leaves[2 * n:2 * n + m], leaves[2 * n + m:2 * n + 2 * m])
        return InrModel(siren, hyper)

    def numpy(self) -> "InrModel":
        return self.with_leaves([dc.eval_graph(x) for x in self.leaves()])


def siren_init(d_in: int, d_out: int, width: int, depth: int, omega0: float, rng_seed: int) -> SirenParams:
    """First layer ``U(-1/d_in, 1/d_in)``, later layers ``U(+-sqrt(6/fan_in)/omega0)``, zero biases."""
    if min(d_in, d_out, width, depth) < 1:
        raise ValueError("d_in, d_out, width and depth must all be >= 1")
    if omega0 <= 0:
        raise ValueError("omega0 must be positive")
    rng = np.random.default_rng(rng_seed)
    dims = [d_in] + [width] * depth + [d_out]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return SirenParams(weights, biases, float(omega0))


def hypernet_init(d_z: int, width: int, depth: int, rng_seed: int) -> HypernetParams:
    rng = np.random.default_rng(rng_seed)
    bound = 1.0 / math.sqrt(d_z)
    V = [rng.uniform(-bound, bound, size=(width, d_z)) for _ in range(depth)]
    c = [np.zeros(width) for _ in range(depth)]
    return HypernetParams(V, c)


def inr_init(d_in: int, d_out: int, d_z: int, width: int, depth: int, omega0: float, seed: int) -> InrModel:
    ss = np.random.SeedSequence(seed).spawn(2)
    return InrModel(
        siren_init(d_in, d_out, width, depth, omega0, int(ss[0].generate_state(1)[0])),
        hypernet_init(d_z, width, depth, int(ss[1].generate_state(1)[0])),
    )


# ---------------------------------------------------------------- forward passes


def _linear(h: dc.Node, W, shift) -> dc.Node:
    """``h W^T + shift`` over the last axis; ``shift`` is (out,) or (B, out)."""
    W = dc.as_node(W)
    shift = dc.as_node(shift)
    lead = h.shape[:-1]
    out = dc.matmul(dc.reshape(h, (-1, h.shape[-1])), dc.transpose(W))
    out = dc.reshape(out, lead + (W.shape[0],))
    if shift.ndim == 2:
        # per-sample shift, h is (B, N, k)
        shift = dc.reshape(shift, (shift.shape[0], 1, shift.shape[1]))
    return out + dc.expand(shift, out.shape)


def _coords(x, batch: int | None) -> dc.Node:
    if isinstance(x, Grid):
        x = x.points
    x = dc.as_node(x)
    if x.ndim == 2 and batch is not None:
        x = dc.expand(x, (batch,) + x.shape)
    return x


def siren_forward(params: SirenParams, x) -> dc.Node:
    """Plain SIREN on coordinates of shape (N, d_in) or (B, N, d_in)."""
    h = _coords(x, None)
    if h.shape[-1] != params.d_in:
        raise dc.ShapeError(f"siren_forward: coordinates have {h.shape[-1]} dims, network expects {params.d_in}")
    w0 = params.omega0
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        h = dc.sin(_linear(h, w0 * dc.as_node(W), w0 * dc.as_node(b)))
    return _linear(h, params.weights[-1], params.biases[-1])


def hypernet_modulations(hyper: HypernetParams, z) -> Modulations:
    """Shifts for code ``z`` of shape (d_z,) or a batch (B, d_z)."""
    z = dc.as_node(z)
    if z.shape[-1] != hyper.d_z:
        raise dc.ShapeError(f"hypernet: code has length {z.shape[-1]}, expected {hyper.d_z}")
    if z.ndim == 1:
        zc = dc.reshape(z, (1, -1))
        shifts = [dc.reshape(dc.matmul(zc, dc.transpose(V)), (V.shape[0],)) + c
                  for V, c in zip(hyper.V, hyper.c)]
    else:
        shifts = [_linear(z, V, c) for V, c in zip(hyper.V, hyper.c)]
    return Modulations(shifts)


def modulated_forward(params: SirenParams, mods: Modulations, x) -> dc.Node:
    """SIREN with ``sin(omega0 (W h + b + phi))`` in every hidden layer.

    Shifts of shape (width,) act on coordinates (N, d_in); batched shifts
    (B, width) act on (B, N, d_in) or on a shared (N, d_in) grid.
    """
    shifts = [dc.as_node(s) for s in mods.shifts]
    if len(shifts) != params.depth:
        raise ValueError(f"{len(shifts)} modulation layers for a depth-{params.depth} SIREN")
    batch = shifts[0].shape[0] if shifts[0].ndim == 2 else None
    w0 = params.omega0
    h = _coords(x, batch)
    if h.shape[-1] != params.d_in:
        raise dc.ShapeError(f"modulated_forward: coordinates have {h.shape[-1]} dims, network expects {params.d_in}")
    for W, b, phi in zip(params.weights[:-1], params.biases[:-1], shifts):
        bias = dc.as_node(b)
        if phi.ndim == 2:
            bias = dc.expand(bias, phi.shape)
        # omega0 is folded into the small operands, not the N-point activations
        h = dc.sin(_linear(h, w0 * dc.as_node(W), w0 * (bias + phi)))
    return _linear(h, params.weights[-1], params.biases[-1])


def decode_values(inr: InrModel, z, x) -> dc.Node:
    return modulated_forward(inr.siren, hypernet_modulations(inr.hyper, z), x)


def decode(inr: InrModel, z, grid: Grid) -> FieldSample:
    """Evaluate the function represented by raw code ``z`` on ``grid``."""
    from .codec import LatentCode, require_space

    if isinstance(z, LatentCode):
        require_space(z, "raw", "decode")
        z = z.values
    with dc.no_grad():
        vals = decode_values(inr, z, grid.points).value
    return FieldSample(grid, np.array(vals))


# ---------------------------------------------------------------- serialization


def inr_to_container(inr: InrModel) -> container.Container:
    s = inr.numpy().siren
    dims = [s.d_in, s.d_out, s.width, s.depth, inr.d_z]
    return container.Container(KIND_INR, dims, inr.numpy().leaves(), {"omega0": s.omega0})


def inr_from_container(c: container.Container) -> InrModel:
    if c.kind != KIND_INR or len(c.dims) != 5:
        raise container.FormatVersionError(f"not an INR checkpoint (kind {c.kind})")
    d_in, d_out, width, depth, d_z = c.dims
    template = inr_init(d_in, d_out, d_z, width, depth, c.meta["omega0"], 0)
    expect = [leaf.shape for leaf in template.leaves()]
    if [b.shape for b in c.blocks] != expect:
        raise container.CountMismatchError("INR weight blocks do not match the declared dimensions")
    return template.with_leaves(c.blocks)


def save_inr(path, inr: InrModel) -> None:
    container.write(path, container.CHECKPOINT_MAGIC, inr_to_container(inr))


def load_inr(path) -> InrModel:
    return inr_from_container(container.read(path, container.CHECKPOINT_MAGIC))
