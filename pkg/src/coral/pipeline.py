"""Encode-process-decode tasks: configs, training chains, evaluation protocols."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import codec, container
from . import diffcore as dc
from . import inr as inr_mod
from . import metatrain as mt
from . import processor as pr
from .codec import EncoderConfig, LatentCode
from .data import (FieldSample, GeometryFamily, GeometryPrior, Grid, gen_geometry_task, gen_heat2d,
                   gen_advection2d, gen_ivp_heat, read_dataset, regular_grid,
                   subsample_indices)

log = logging.getLogger(__name__)

IN_T = 20
HORIZON = 40


class ConfigError(ValueError):
    """A config file is readable but does not match the schema."""


# ---------------------------------------------------------------- configs


@dataclass
class InrArch:
    d_z: int = 32
    width: int = 64
    depth: int = 3
    omega0: float = 10.0


@dataclass
class ProcessorArch:
    hidden: int = 128
    blocks: int = 3
    node_width: int = 512
    node_depth: int = 3
    substeps: int = 2
    out_scale: float = 0.1


@dataclass
class DataConfig:
    pde: str = "heat2d"
    n_train: int = 64
    n_test: int = 16
    grid_res: int = 16
    pct: float = 20.0
    dt: float = 0.05
    nu: float = 0.05
    k_max: int = 1
    velocity: tuple = (0.5, 0.0)
    t_out: float = 0.1
    prior: dict = field(default_factory=dict)
    # optional dataset files written by ``coral generate``; generated in memory when unset
    train_path: Optional[str] = None
    test_path: Optional[str] = None


@dataclass
class TaskConfig:
    task: str = "dynamics"
    seed: int = 0
    inr: InrArch = field(default_factory=InrArch)
    out_inr: Optional[InrArch] = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    inr_train: mt.OuterConfig = field(default_factory=lambda: mt.OuterConfig(lr=5e-6))
    processor: ProcessorArch = field(default_factory=ProcessorArch)
    processor_train: mt.OuterConfig = field(default_factory=lambda: mt.OuterConfig(lr=1e-3))
    norm_mode: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    # K / alpha used at inference; None reuses the training values
    infer_K: Optional[int] = None
    infer_alpha: Optional[float] = None

    def __post_init__(self):
        if self.task not in ("ivp", "dynamics", "geometry"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.norm_mode is None:
            self.norm_mode = {"ivp": "shared-featurewise", "dynamics": "shared-featurewise",
                              "geometry": "input-only"}[self.task]
        if self.norm_mode not in codec.NORM_MODES:
            raise ConfigError(f"unknown normalization mode {self.norm_mode!r}")
        if self.task == "dynamics" and self.norm_mode not in ("shared-featurewise", "separate-scalar"):
            # one latent space in, the same one out
            raise ConfigError(f"mode {self.norm_mode!r} does not fit the dynamics task")

    def inference_encoder(self, alpha=None) -> EncoderConfig:
        a = self.infer_alpha if self.infer_alpha is not None else (self.encoder.alpha if alpha is None else alpha)
        K = self.encoder.K if self.infer_K is None else self.infer_K
        return EncoderConfig(a, K)


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{key}")
        elif key == "velocity":
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (TaskConfig, "inr"): InrArch,
    (TaskConfig, "out_inr"): InrArch,
    (TaskConfig, "encoder"): EncoderConfig,
    (TaskConfig, "inr_train"): mt.OuterConfig,
    (TaskConfig, "processor"): ProcessorArch,
    (TaskConfig, "processor_train"): mt.OuterConfig,
    (TaskConfig, "data"): DataConfig,
}


def config_from_dict(raw: dict) -> TaskConfig:
    cfg = _build(TaskConfig, raw, "config")
    _check_types(cfg)
    return cfg


def _check_types(cfg):
    for name, typ in [("seed", int), ("task", str)]:
        if not isinstance(getattr(cfg, name), typ):
            raise ConfigError(f"config.{name} must be {typ.__name__}")
    for arch in (cfg.inr, cfg.out_inr):
        if arch is None:
            continue
        for k in ("d_z", "width", "depth"):
            v = getattr(arch, k)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"inr.{k} must be a positive integer, got {v!r}")


def config_to_dict(cfg: TaskConfig) -> dict:
    def conv(x):
        if is_dataclass(x):
            return {k: conv(v) for k, v in asdict(x).items()}
        if isinstance(x, np.ndarray):
            return x.tolist()
        if isinstance(x, tuple):
            return list(x)
        return x
    return conv(cfg)


def load_config(path) -> TaskConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return config_from_dict(raw)


# ---------------------------------------------------------------- metrics and reports


def relative_l2(pred, truth) -> float:
    """``||pred - truth|| / ||truth||`` over one sample's grid."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    den = np.linalg.norm(truth)
    if den == 0:
        raise ValueError("relative L2 undefined for a zero reference field")
    return float(np.linalg.norm(pred - truth) / den)


@dataclass
class EvalReport:
    grid: str
    mse: dict = field(default_factory=dict)
    rel_l2: Optional[float] = None
    per_step: Optional[np.ndarray] = None
    seconds: float = 0.0

    def as_row(self) -> dict:
        row = {"grid": self.grid, **self.mse}
        if self.rel_l2 is not None:
            row["rel_l2"] = self.rel_l2
        return row


@dataclass
class ValueStats:
    mean: float = 0.0
    std: float = 1.0

    def apply(self, v):
        return (np.asarray(v) - self.mean) / self.std


# ---------------------------------------------------------------- shared training pieces


def _init_inr(arch: InrArch, d_in, d_out, seed) -> inr_mod.InrModel:
    return inr_mod.inr_init(d_in, d_out, arch.d_z, arch.width, arch.depth, arch.omega0, seed)


def fit_inr(samples, arch: InrArch, enc: EncoderConfig, train: mt.OuterConfig, seed: int, callback=None):
    """Meta-train one modulated INR; returns ``(MetaState, trace)``."""
    d_in = samples[0].grid.d
    d_out = samples[0].values.shape[1]
    model = _init_inr(arch, d_in, d_out, seed)
    return mt.train_inr(samples, model, enc, train, callback=callback)


def _decode_batch(inr, z, coords) -> np.ndarray:
    with dc.no_grad():
        return np.asarray(dc.eval_graph(inr_mod.decode_values(inr, z, coords)))


@dataclass
class Run:
    """Everything needed for inference after training."""

    cfg: TaskConfig
    inr: inr_mod.InrModel
    alpha: np.ndarray
    processor: object
    norm: codec.CodeNormalizer
    out_inr: Optional[inr_mod.InrModel] = None
    out_alpha: Optional[np.ndarray] = None
    values: ValueStats = field(default_factory=ValueStats)
    traces: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------- dynamics


def _from_files(cfg: TaskConfig, task: str):
    d = cfg.data
    if d.train_path is None and d.test_path is None:
        return None
    if d.train_path is None or d.test_path is None:
        raise ConfigError("data.train_path and data.test_path must be given together")
    out = []
    for path in (d.train_path, d.test_path):
        if not Path(path).exists():
            raise FileNotFoundError(f"missing dataset file {path}")
        ds = read_dataset(path)
        if ds.header.task != task:
            raise ConfigError(f"{path} holds a {ds.header.task} dataset, the config asks for {task}")
        out.append(ds.samples)
    return out


def dynamics_data(cfg: TaskConfig):
    """Train/test trajectories on the regular grid, plus train and test point indices."""
    d = cfg.data
    files = _from_files(cfg, "dynamics")
    if files is not None:
        train, test = files
        if train[0].values.shape[0] < HORIZON:
            raise ConfigError(f"dynamics trajectories need {HORIZON} frames")
        n = len(train[0].grid)
        return (train, test, subsample_indices(n, d.pct, cfg.seed + 11),
                subsample_indices(n, d.pct, cfg.seed + 12))
    if d.pde == "heat2d":
        gen = lambda n, s: gen_heat2d(n, d.grid_res, HORIZON, d.dt, d.nu, d.k_max, s)
    elif d.pde == "advection2d":
        gen = lambda n, s: gen_advection2d(n, d.grid_res, HORIZON, d.dt, d.velocity, d.k_max, s)
    else:
        raise ConfigError(f"unknown pde {d.pde!r}")
    train = gen(d.n_train, cfg.seed)
    test = gen(d.n_test, cfg.seed + 1)
    n = d.grid_res ** 2
    idx_tr = subsample_indices(n, d.pct, cfg.seed + 11)
    idx_te = subsample_indices(n, d.pct, cfg.seed + 12)
    return train, test, idx_tr, idx_te


def _dynamics_samples(train, idx_tr, vstats):
    base = train[0].grid
    g_tr = Grid(base.points[idx_tr], base.periodic)
    in_t = np.stack([tr.values[:IN_T, idx_tr] for tr in train])
    return [FieldSample(g_tr, vstats.apply(v)) for v in in_t.reshape(-1, *in_t.shape[2:])]


def fit_dynamics_inr(cfg: TaskConfig, data, callback=None) -> Run:
    """Phase one: a single INR over every In-t frame of the training trajectories."""
    train, _, idx_tr, _ = data
    in_t = np.stack([tr.values[:IN_T, idx_tr] for tr in train])
    vstats = ValueStats(float(in_t.mean()), float(in_t.std()))
    samples = _dynamics_samples(train, idx_tr, vstats)
    state, trace = fit_inr(samples, cfg.inr, cfg.encoder, cfg.inr_train, cfg.seed, callback)
    return Run(cfg, state.inr, state.alpha, None, None, values=vstats, traces={"inr": trace})


def fit_dynamics_processor(run: Run, data, callback=None) -> Run:
    """Phase two: encode the training frames once, then fit the latent NODE on fixed codes."""
    cfg = run.cfg
    train, _, idx_tr, _ = data
    samples = _dynamics_samples(train, idx_tr, run.values)
    enc = EncoderConfig(run.alpha, cfg.encoder.K)
    codes = codec.encode_batch(samples, run.inr, enc).reshape(len(train), IN_T, -1)
    flat = codes.reshape(-1, codes.shape[-1])
    run.norm = codec.fit_code_norm(flat, flat, cfg.norm_mode)
    zn = codec.normalize(LatentCode(codes), run.norm.inp).values
    p = cfg.processor
    field_ = pr.ode_field_init(cfg.inr.d_z, p.node_width, p.node_depth, cfg.seed, p.out_scale)
    run.processor, run.traces["processor"] = mt.train_node(
        zn, field_, pr.SamplingSchedule(), cfg.processor_train, p.substeps, callback)
    return run


def dynamics_reports(run: Run, data) -> list:
    _, test, idx_tr, idx_te = data
    reps = [evaluate_dynamics(run, test, idx_te, "test grid"),
            evaluate_dynamics(run, test, idx_tr, "train grid")]
    if len(test[0].grid) != len(idx_te):
        reps.append(evaluate_dynamics(run, test, None, "full grid"))
    return reps


def run_dynamics(cfg: TaskConfig, callback=None, data=None) -> Run:
    """Train both phases and evaluate on the test, train and full grids."""
    t0 = time.time()
    data = data or dynamics_data(cfg)
    run = fit_dynamics_inr(cfg, data, callback)
    run = fit_dynamics_processor(run, data, callback)
    run.extras.update(test=data[1], idx_te=data[3], train_seconds=time.time() - t0)
    run.reports = dynamics_reports(run, data)
    return run


def forecast(run: Run, u0: FieldSample, horizon: int = HORIZON - 1) -> np.ndarray:
    """Normalized codes rolled out from the (normalized-value) initial field, (horizon + 1, d_z)."""
    enc = run.cfg.inference_encoder(run.alpha)
    z0 = codec.encode(u0, run.inr, enc)
    zn = codec.normalize(z0, run.norm.inp).values
    with dc.no_grad():
        states = pr.node_solve(run.processor, zn, np.arange(1, horizon + 1), run.cfg.processor.substeps)
    return np.stack([zn] + [s.value for s in states])


def _rollout_codes(run: Run, z0_raw: np.ndarray, horizon: int) -> np.ndarray:
    zn = codec.normalize(LatentCode(z0_raw), run.norm.inp).values
    with dc.no_grad():
        states = pr.node_solve(run.processor, zn, np.arange(1, horizon + 1), run.cfg.processor.substeps)
    traj = np.stack([zn] + [s.value for s in states], axis=1)
    return codec.denormalize(LatentCode(traj, "normalized"), run.norm.out).values


def evaluate_dynamics(run: Run, trajectories, idx, label: str, horizon: int = HORIZON - 1,
                      query=None) -> EvalReport:
    """Encode u_0 on the observation points, roll out, decode on ``query`` (default: same points).

    ``idx`` selects observation points of the base grid (None: all of them);
    ``query`` is an optional denser Grid where the analytic truth is evaluated.
    """
    t0 = time.time()
    base = trajectories[0].grid
    obs = base if idx is None else Grid(base.points[idx], base.periodic)
    rv = lambda tr: tr.values if idx is None else tr.values[:, idx]
    u0 = [FieldSample(obs, run.values.apply(rv(tr)[0])) for tr in trajectories]
    enc = run.cfg.inference_encoder(run.alpha)
    z0 = codec.encode_batch(u0, run.inr, enc)
    z = _rollout_codes(run, z0, horizon)
    qgrid = obs if query is None else query
    if query is None:
        truth = np.stack([run.values.apply(rv(tr)[:horizon + 1]) for tr in trajectories])
    else:
        truth = np.stack([run.values.apply(tr.on_grid(query).values[:horizon + 1]) for tr in trajectories])
    per_step = np.zeros(horizon + 1)
    for t in range(horizon + 1):
        pred = _decode_batch(run.inr, z[:, t], qgrid.points)
        per_step[t] = np.mean((pred - truth[:, t]) ** 2)
    rep = EvalReport(label, per_step=per_step)
    rep.mse = {"in_t": float(per_step[1:IN_T].mean()), "out_t": float(per_step[IN_T:].mean()),
               "t0": float(per_step[0])}
    rep.seconds = time.time() - t0
    return rep


def run_upsampling_eval(run: Run, resolutions) -> list:
    """Encode on the sparse test observations, decode on denser regular grids."""
    test = run.extras["test"]
    out = []
    for res in resolutions:
        q = regular_grid(res)
        out.append(evaluate_dynamics(run, test, run.extras["idx_te"], f"{res}x{res}", query=q))
    return out


# ---------------------------------------------------------------- paired tasks (IVP, geometry)


def _encode_pairs(inr, alpha, samples, K):
    return codec.encode_batch(samples, inr, EncoderConfig(alpha, K))


def fit_pair_inrs(cfg: TaskConfig, pairs, callback=None) -> Run:
    """Phase one for paired tasks: input and output INRs, trained independently."""
    out_arch = cfg.out_inr or cfg.inr
    if cfg.inr.d_z != out_arch.d_z:
        raise ConfigError("input and output code sizes must agree for the skip-block processor")
    st_in, tr_in = fit_inr([a for a, _ in pairs], cfg.inr, cfg.encoder, cfg.inr_train, cfg.seed, callback)
    st_out, tr_out = fit_inr([u for _, u in pairs], out_arch, cfg.encoder, cfg.inr_train, cfg.seed + 1,
                             callback)
    return Run(cfg, st_in.inr, st_in.alpha, None, None, st_out.inr, st_out.alpha,
               traces={"inr": tr_in, "out_inr": tr_out})


def fit_pair_processor(run: Run, pairs, callback=None) -> Run:
    """Phase two: fixed codes of both spaces, normalized per the task mode, then the MLP."""
    cfg = run.cfg
    z_a = _encode_pairs(run.inr, run.alpha, [a for a, _ in pairs], cfg.encoder.K)
    z_u = _encode_pairs(run.out_inr, run.out_alpha, [u for _, u in pairs], cfg.encoder.K)
    run.norm = codec.fit_code_norm(z_a, z_u, cfg.norm_mode)
    zn_a = codec.normalize(LatentCode(z_a), run.norm.inp).values
    zn_u = codec.normalize(LatentCode(z_u), run.norm.out).values
    p = cfg.processor
    psi = pr.skip_mlp_init(cfg.inr.d_z, p.hidden, p.blocks, cfg.seed)
    run.processor, run.traces["processor"] = mt.train_processor(zn_a, zn_u, psi, cfg.processor_train, callback)
    return run


def _train_pairs(cfg: TaskConfig, pairs, callback=None) -> Run:
    return fit_pair_processor(fit_pair_inrs(cfg, pairs, callback), pairs, callback)


def predict(run: Run, a: FieldSample, query: Grid) -> np.ndarray:
    """Encode, normalize, process, denormalize, decode on ``query``."""
    return predict_batch(run, [a], [query])[0]


def predict_batch(run: Run, inputs, queries) -> list:
    enc = run.cfg.inference_encoder(run.alpha)
    z_a = codec.encode_batch(inputs, run.inr, enc)
    zn = codec.normalize(LatentCode(z_a), run.norm.inp)
    zu = codec.denormalize(pr.mlp_process(run.processor, zn), run.norm.out).values
    out = []
    for i, q in enumerate(queries):
        out.append(_decode_batch(run.out_inr, zu[i], q.points))
    return out


def ivp_data(cfg: TaskConfig):
    d = cfg.data
    files = _from_files(cfg, "ivp")
    if files is not None:
        return files
    train = gen_ivp_heat(d.n_train, d.grid_res, d.t_out, d.nu, d.k_max, cfg.seed)
    test = gen_ivp_heat(d.n_test, d.grid_res, d.t_out, d.nu, d.k_max, cfg.seed + 1)
    return train, test


def _normalize_pairs(pairs, vs_in: ValueStats, vs_out: ValueStats):
    return [(FieldSample(a.grid, vs_in.apply(a.values)), FieldSample(u.grid, vs_out.apply(u.values)))
            for a, u in pairs]


def run_ivp(cfg: TaskConfig, callback=None, data=None) -> Run:
    """Heat IVP u(0) -> u(t_out); Full and Sparse (20% input nodes) protocols."""
    t0 = time.time()
    train_n, test_n, vs = ivp_normalized(data or ivp_data(cfg))
    run = _train_pairs(cfg, train_n, callback)
    run.values = vs
    run.extras.update(train_seconds=time.time() - t0)
    run.reports = ivp_reports(run, train_n, test_n)
    return run


def ivp_normalized(data):
    """Both splits z-scored by one scalar mean/std over all training values."""
    train, test = data
    allv = np.concatenate([np.concatenate([a.values, u.values]) for a, u in train])
    vs = ValueStats(float(allv.mean()), float(allv.std()))
    return _normalize_pairs(train, vs, vs), _normalize_pairs(test, vs, vs), vs


def ivp_reports(run: Run, train_n, test_n) -> list:
    return [evaluate_pairs(run, test_n, "full"), evaluate_pairs(run, test_n, "sparse", sparse_pct=20.0),
            evaluate_pairs(run, train_n, "train")]


def evaluate_pairs(run: Run, pairs, label: str, sparse_pct: Optional[float] = None,
                   raw: Optional[ValueStats] = None) -> EvalReport:
    """MSE in the given (normalized) value space; relative L2 after undoing ``raw`` when given."""
    t0 = time.time()
    inputs = []
    for i, (a, _) in enumerate(pairs):
        if sparse_pct is not None:
            idx = subsample_indices(len(a.grid), sparse_pct, run.cfg.seed * 7919 + i)
            a = a.restrict(idx)
        inputs.append(a)
    preds = predict_batch(run, inputs, [u.grid for _, u in pairs])
    mse = np.mean([np.mean((p - u.values) ** 2) for p, (_, u) in zip(preds, pairs)])
    back = (lambda v: v) if raw is None else (lambda v: v * raw.std + raw.mean)
    rel = np.mean([relative_l2(back(p), back(u.values)) for p, (_, u) in zip(preds, pairs)])
    return EvalReport(label, {"mse": float(mse)}, float(rel), seconds=time.time() - t0)


def geometry_data(cfg: TaskConfig):
    files = _from_files(cfg, "geometry")
    if files is not None:
        return files
    prior = GeometryPrior(**cfg.data.prior)
    train, _ = gen_geometry_task(cfg.data.n_train, prior, cfg.seed)
    test, _ = gen_geometry_task(cfg.data.n_test, prior, cfg.seed + 1)
    return train, test


def geometry_normalized(data):
    """Outputs z-scored by one scalar mean/std of the training fields; inputs are coordinates already."""
    train, test = data
    allu = np.concatenate([u.values for _, u in train])
    vs = ValueStats(float(allu.mean()), float(allu.std()))
    ident = ValueStats()
    return _normalize_pairs(train, ident, vs), _normalize_pairs(test, ident, vs), vs


def run_geometry(cfg: TaskConfig, callback=None, data=None) -> Run:
    """Deformed-grid input -> steady field on the deformed domain; relative L2 on test samples."""
    t0 = time.time()
    train, test, vs = geometry_normalized(data or geometry_data(cfg))
    run = _train_pairs(cfg, train, callback)
    run.values = vs
    run.extras.update(train_seconds=time.time() - t0)
    run.reports = geometry_reports(run, train, test)
    return run


def geometry_reports(run: Run, train, test) -> list:
    # relative L2 of the physical field, not of its z-score
    return [evaluate_pairs(run, test, "test", raw=run.values), evaluate_pairs(run, train, "train", raw=run.values)]


# ---------------------------------------------------------------- inverse design


def design_objective(run: Run, fam: GeometryFamily, p: dc.Node, target: float) -> dc.Node:
    """``(mean of the predicted field over the deformed grid - target)^2``, differentiable in ``p``."""
    return dc.square(design_mean(run, fam, p) - target)


def design_mean(run: Run, fam: GeometryFamily, p: dc.Node) -> dc.Node:
    """Grid mean of the predicted physical field for design ``p``; the K-step encoder stays in the graph."""
    xy = fam.deform_normalized(p)
    a_vals = dc.reshape(xy, (1,) + xy.shape)
    K = run.cfg.inference_encoder().K
    z = codec.inner_loop(run.inr, fam.reference_grid.points, a_vals, run.alpha, K, create_graph=True)
    zn = codec.normalize(LatentCode(z), run.norm.inp)
    zu = codec.denormalize(pr.mlp_process(run.processor, zn), run.norm.out).values
    u = inr_mod.decode_values(run.out_inr, dc.reshape(zu, (run.out_inr.d_z,)), xy)
    return dc.mean(u) * run.values.std + run.values.mean


def inverse_design(run: Run, p0, target: float, steps: int = 50, lr: float = 1e-2, fam=None):
    """Adam on the design parameters; returns ``(p, trace)``."""
    fam = fam or GeometryFamily(GeometryPrior(**run.cfg.data.prior))
    p = np.array(p0, dtype=np.float64)
    opt = mt.AdamState.zeros_like([p])
    trace = []
    for it in range(steps):
        var = dc.variable(p)
        try:
            J = design_objective(run, fam, var, target)
        except (dc.NonFiniteError, codec.EncodeError) as exc:
            raise mt.TrainingError(f"inverse design iteration {it}: {exc}") from None
        (g,) = dc.gradient(J, [var], create_graph=False)
        trace.append(float(J.value))
        (p,), opt = mt.adam_step(opt, [p], [g.value], lr)
    return p, trace


# ---------------------------------------------------------------- checkpoints


def save_run(run: Run, directory) -> None:
    """Write every model piece plus the config into ``directory`` (atomic per file)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    inr_mod.save_inr(d / "inr.bin", run.inr)
    if run.out_inr is not None:
        inr_mod.save_inr(d / "out_inr.bin", run.out_inr)
    if run.processor is not None:
        pr.save_processor(d / "processor.bin", run.processor)
        container.write(d / "norm.bin", container.CHECKPOINT_MAGIC, codec.norm_to_container(run.norm))
    meta = {"config": config_to_dict(run.cfg), "alpha": np.asarray(run.alpha).tolist(),
            "out_alpha": None if run.out_alpha is None else np.asarray(run.out_alpha).tolist(),
            "values": asdict(run.values)}
    container.atomic_write(d / "run.json", json.dumps(meta, indent=2, sort_keys=True).encode())


def load_run(directory, need_processor: bool = True) -> Run:
    d = Path(directory)
    needed = ["run.json", "inr.bin"] + (["processor.bin", "norm.bin"] if need_processor else [])
    for name in needed:
        if not (d / name).exists():
            raise FileNotFoundError(f"missing checkpoint file {d / name}")
    meta = json.loads((d / "run.json").read_text())
    cfg = config_from_dict(meta["config"])
    out_inr = inr_mod.load_inr(d / "out_inr.bin") if (d / "out_inr.bin").exists() else None
    psi = norm = None
    if (d / "processor.bin").exists() and (d / "norm.bin").exists():
        psi = pr.load_processor(d / "processor.bin")
        norm = codec.norm_from_container(container.read(d / "norm.bin", container.CHECKPOINT_MAGIC))
    out_alpha = None if meta["out_alpha"] is None else np.asarray(meta["out_alpha"])
    return Run(cfg, inr_mod.load_inr(d / "inr.bin"), np.asarray(meta["alpha"]), psi, norm, out_inr,
               out_alpha, ValueStats(**meta["values"]))
