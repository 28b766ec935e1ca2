"""Latent processors: Swish skip-block MLP and an RK4 neural ODE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import diffcore as dc
from .codec import LatentCode, require_space

KIND_MLP = 2
KIND_NODE = 3
KIND_LINEAR = 5
BLOWUP_NORM = 1e6


class BlowUpError(ArithmeticError):
    """Rollout state norm exceeded the blow-up threshold."""


def swish(x, beta):
    """``x * sigmoid(beta * x)``."""
    x = dc.as_node(x)
    return x * dc.sigmoid(dc.as_node(beta) * x)


def _dense(z: dc.Node, W, b) -> dc.Node:
    """``z W^T + b`` for z of shape (B, in) or (in,)."""
    W, b = dc.as_node(W), dc.as_node(b)
    if z.ndim == 1:
        out = dc.reshape(dc.matmul(dc.reshape(z, (1, -1)), dc.transpose(W)), (W.shape[0],))
        return out + b
    out = dc.matmul(z, dc.transpose(W))
    return out + dc.expand(b, out.shape)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- skip MLP


@dataclass
class SkipBlock:
    W1: object
    b1: object
    W2: object
    b2: object
    beta1: object = 1.0
    beta2: object = 1.0

    def leaves(self):
        return [self.W1, self.b1, self.W2, self.b2, self.beta1, self.beta2]


def block_forward(block: SkipBlock, z) -> dc.Node:
    """``z + swish(W2 swish(W1 z + b1) + b2)``."""
    z = dc.as_node(z)
    d = np.shape(dc.eval_graph(block.W1))[1]
    if z.shape[-1] != d or np.shape(dc.eval_graph(block.W2))[0] != d:
        raise dc.ShapeError(f"block_forward: code length {z.shape[-1]} vs block dim {d}")
    h = swish(_dense(z, block.W1, block.b1), block.beta1)
    return z + swish(_dense(h, block.W2, block.b2), block.beta2)


@dataclass
class SkipMlp:
    blocks: list

    @property
    def d_z(self) -> int:
        return np.shape(dc.eval_graph(self.blocks[0].W1))[1]

    @property
    def hidden(self) -> int:
        return np.shape(dc.eval_graph(self.blocks[0].W1))[0]

    def leaves(self):
        return [x for b in self.blocks for x in b.leaves()]

    def with_leaves(self, leaves):
        leaves = list(leaves)
        return SkipMlp([SkipBlock(*leaves[6 * i:6 * i + 6]) for i in range(len(self.blocks))])

    def __call__(self, z) -> dc.Node:
        z = dc.as_node(z)
        for block in self.blocks:
            z = block_forward(block, z)
        return z


def skip_mlp_init(d_z: int, hidden: int, n_blocks: int, seed: int, zero: bool = False) -> SkipMlp:
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_blocks):
        if zero:
            blocks.append(SkipBlock(np.zeros((hidden, d_z)), np.zeros(hidden),
                                    np.zeros((d_z, hidden)), np.zeros(d_z), np.array(1.0), np.array(1.0)))
        else:
            blocks.append(SkipBlock(_uniform(rng, d_z, (hidden, d_z)), _uniform(rng, d_z, hidden),
                                    _uniform(rng, hidden, (d_z, hidden)), _uniform(rng, hidden, d_z),
                                    np.array(1.0), np.array(1.0)))
    return SkipMlp(blocks)


def mlp_process(psi, z: LatentCode) -> LatentCode:
    """Map a normalized input code to a normalized output code."""
    require_space(z, "normalized", "mlp_process")
    out = psi(z.values)
    if not isinstance(z.values, dc.Node) or not z.values.requires_grad:
        out = np.array(out.value)
    return LatentCode(out, "normalized")


@dataclass
class LinearMap:
    """Affine ``z W^T + b``; the linear-capacity processor."""

    W: object
    b: object

    @property
    def d_z(self) -> int:
        return np.shape(dc.eval_graph(self.W))[1]

    def leaves(self):
        return [self.W, self.b]

    def with_leaves(self, leaves):
        return LinearMap(*leaves)

    def __call__(self, z) -> dc.Node:
        return _dense(dc.as_node(z), self.W, self.b)


def linear_init(d_z: int, seed: int) -> LinearMap:
    rng = np.random.default_rng(seed)
    return LinearMap(_uniform(rng, d_z, (d_z, d_z)), _uniform(rng, d_z, d_z))


# ---------------------------------------------------------------- neural ODE


@dataclass
class OdeField:
    """Autonomous vector field: an MLP with Swish between its linear layers."""

    weights: list
    biases: list
    betas: list

    @property
    def d_z(self) -> int:
        return np.shape(dc.eval_graph(self.weights[0]))[1]

    def leaves(self):
        return [*self.weights, *self.biases, *self.betas]

    def with_leaves(self, leaves):
        leaves = list(leaves)
        n = len(self.weights)
        return OdeField(leaves[:n], leaves[n:2 * n], leaves[2 * n:])

    def __call__(self, z) -> dc.Node:
        h = dc.as_node(z)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = _dense(h, W, b)
            if i < last:
                h = swish(h, self.betas[i])
        return h


def ode_field_init(d_z: int, width: int = 512, depth: int = 3, seed: int = 0,
                   out_scale: float = 1.0) -> OdeField:
    """``depth`` linear layers d_z -> width -> ... -> d_z."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [d_z] + [width] * (depth - 1) + [d_z]
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        Ws.append(_uniform(rng, fan_in, (fan_out, fan_in)))
        bs.append(_uniform(rng, fan_in, fan_out))
    Ws[-1] = Ws[-1] * out_scale
    bs[-1] = bs[-1] * out_scale
    return OdeField(Ws, bs, [np.array(1.0) for _ in range(depth - 1)])


def rk4_step(field, z, h: float) -> dc.Node:
    """One classical fourth-order Runge-Kutta step of ``dz/dt = field(z)``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    z = dc.as_node(z)
    try:
        k1 = field(z)
        k2 = field(z + (h / 2) * k1)
        k3 = field(z + (h / 2) * k2)
        k4 = field(z + h * k3)
    except dc.NonFiniteError as exc:
        raise BlowUpError(f"non-finite vector field output: {exc}") from None
    return z + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def node_solve(field, z0, timestamps, substeps: int = 2, t0: float = 0.0) -> list:
    """States at each timestamp, integrating sequentially from ``z0`` at ``t0``."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return []
    if np.any(np.diff(np.concatenate([[t0], ts])) <= 0):
        raise ValueError("timestamps must be strictly increasing and after t0")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    out = []
    z = dc.as_node(z0)
    prev = t0
    for t in ts:
        h = (t - prev) / substeps
        for _ in range(substeps):
            z = rk4_step(field, z, h)
        norm = float(np.sqrt(np.sum(z.value ** 2, axis=-1)).max())
        if norm > BLOWUP_NORM:
            raise BlowUpError(f"rollout norm {norm:.3g} exceeds {BLOWUP_NORM:g} at t={t}")
        out.append(z)
        prev = t
    return out


@dataclass
class SamplingSchedule:
    eps_init: float = 0.99
    decay: float = 0.99
    period: int = 10

    def __post_init__(self):
        if not 0 < self.eps_init <= 1:
            raise ValueError("eps_init must lie in (0, 1]")


def epsilon_at(schedule: SamplingSchedule, epoch: int) -> float:
    """Restart probability: ``eps_init * decay ** (epoch // period)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.eps_init * schedule.decay ** (epoch // schedule.period)


def rollout_loss(field, codes, restart_mask, substeps: int = 2) -> dc.Node:
    """Mean squared rollout error over trajectories, timesteps and features.

    ``codes`` is (n_traj, T, d_z); ``restart_mask[:, t]`` is 1 where the
    step into frame ``t + 1`` restarts from the ground-truth code ``t``.
    """
    n, T, d = codes.shape
    z = dc.constant(codes[:, 0])
    total = None
    for t in range(1, T):
        m = restart_mask[:, t - 1:t]
        if t > 1 and m.any():
            keep = np.broadcast_to(1.0 - m, (n, d))
            z = z * keep + dc.constant(codes[:, t - 1] * m)
        (z,) = node_solve(field, z, [1.0], substeps=substeps)
        err = dc.total(dc.square(z - codes[:, t]))
        total = err if total is None else total + err
    return total * (1.0 / (n * (T - 1) * d))


# ---------------------------------------------------------------- serialization


def processor_to_container(psi) -> container.Container:
    leaves = [np.asarray(dc.eval_graph(x), dtype=np.float64) for x in psi.leaves()]
    if isinstance(psi, SkipMlp):
        return container.Container(KIND_MLP, [psi.d_z, psi.hidden, len(psi.blocks)], leaves)
    if isinstance(psi, OdeField):
        width = leaves[0].shape[0]
        return container.Container(KIND_NODE, [psi.d_z, width, len(psi.weights)], leaves)
    if isinstance(psi, LinearMap):
        return container.Container(KIND_LINEAR, [psi.d_z], leaves)
    raise TypeError(f"cannot serialize processor {type(psi).__name__}")


def processor_from_container(c: container.Container):
    if c.kind == KIND_MLP:
        template = skip_mlp_init(*c.dims[:2], c.dims[2], seed=0)
    elif c.kind == KIND_NODE:
        template = ode_field_init(c.dims[0], c.dims[1], c.dims[2])
    elif c.kind == KIND_LINEAR:
        template = linear_init(c.dims[0], 0)
    else:
        raise container.FormatVersionError(f"not a processor checkpoint (kind {c.kind})")
    if [np.shape(x) for x in template.leaves()] != [b.shape for b in c.blocks]:
        raise container.CountMismatchError("processor blocks do not match the declared dimensions")
    return template.with_leaves(c.blocks)


def save_processor(path, psi) -> None:
    container.write(path, container.CHECKPOINT_MAGIC, processor_to_container(psi))


def load_processor(path):
    return processor_from_container(container.read(path, container.CHECKPOINT_MAGIC))
