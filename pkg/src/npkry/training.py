"""Two-phase training: residual pretraining, then Krylov-angle fine-tuning."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import unet
from .autodiff import ModelParams, Tape, Variable, ops, save_checkpoint
from .krylov import NetworkPreconditioner, ag_m
from .problems import ProblemInstance, build_rhs_set

__all__ = [
    "Adam",
    "LossReport",
    "TrainConfig",
    "TrainingDiverged",
    "alpha_norm",
    "dynamic_loss_and_grad",
    "evaluate_sines",
    "load_config",
    "loss_dynamic",
    "loss_static",
    "read_metrics",
    "static_batches",
    "train",
    "write_metrics",
]

logger = logging.getLogger(__name__)

PHASE_DEFAULTS = {
    "static": {"epochs": 250, "batch": 5},
    "dynamic": {"epochs": 150, "batch": 20},
}


@dataclass
class TrainConfig:
    """Optimization settings for one phase.

    ``batch`` counts problem instances per optimizer step. ``gamma`` is the
    per-epoch exponential learning-rate decay. ``M`` is the angle window used
    by the dynamic loss and by the logged sine diagnostics.
    """

    phase: str = "static"
    lr: float = 1e-3
    epochs: int = 250
    batch: int = 5
    M: int = 10
    gamma: float = 0.99
    seed: int = 0
    n_augment: int = 4
    checkpoint_every: int = 0
    patience: Optional[int] = None
    divergence_factor: float = 10.0
    divergence_epochs: int = 5

    def __post_init__(self):
        if self.phase not in PHASE_DEFAULTS:
            raise ValueError(f"phase must be 'static' or 'dynamic', got {self.phase!r}")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be positive and epochs nonnegative")

    @classmethod
    def for_phase(cls, phase, **overrides):
        return cls(phase=phase, **{**PHASE_DEFAULTS[phase], **overrides})


def load_config(path, phase=None) -> TrainConfig:
    """Read ``key = value`` lines (an optional ``[train]`` header is allowed)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep ``M`` distinct from lowercase keys
    if not text.lstrip().startswith("["):
        text = "[train]\n" + text
    parser.read_string(text)
    section = parser[parser.sections()[0]]
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for key, raw in section.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        kind = types[key]
        if raw.strip().lower() in ("none", ""):
            values[key] = None
        elif kind in ("int", "Optional[int]"):
            values[key] = int(raw)
        elif kind == "float":
            values[key] = float(raw)
        else:
            values[key] = raw.strip()
    phase = phase or values.pop("phase", "static")
    values.pop("phase", None)
    return TrainConfig.for_phase(phase, **values)


@dataclass
class LossReport:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    mean_sines: np.ndarray
    wall_time: float = 0.0

    def row(self):
        return [self.epoch, self.phase, repr(float(self.train_loss)), repr(float(self.val_loss))] + [
            repr(float(s)) for s in self.mean_sines]


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, reports):
        super().__init__(msg)
        self.reports = reports


# --- losses -----------------------------------------------------------------


def alpha_norm(instances) -> float:
    """Inverse of the mean diagonal RMS ``||diag(A)|| / sqrt(N)`` over instances."""
    instances = list(instances)
    if not instances:
        raise ValueError("alpha_norm needs at least one instance")
    rms = [np.linalg.norm(inst.A.diagonal()) / np.sqrt(inst.n) for inst in instances]
    mean = float(np.mean(rms))
    if mean == 0.0:
        raise ValueError("zero diagonal norm")
    return 1.0 / mean


def static_batches(instances, n_augment=4, seed=0):
    """Pair each instance with its normalized right-hand-side set."""
    return [(inst, build_rhs_set(inst, n_augment, seed=[seed, i]))
            for i, inst in enumerate(instances)]


def loss_static(params: ModelParams, batch, alpha: float, theta=None, precond=None):
    """Mean squared residual ``||v - A N(v) / alpha||^2`` over the batch.

    ``batch`` holds ``(instance, rhs_set)`` pairs. The network runs once on
    every vector of every set. ``precond(V, instance)`` replaces the network
    when given (used to check the loss against reference operators).
    """
    vecs = [rhs.vectors for _, rhs in batch]
    if precond is None:
        V = np.vstack(vecs)
        D = np.vstack([np.broadcast_to(inst.d, vs.shape) for (inst, _), vs in zip(batch, vecs)])
        out = unet.forward(params, V, D, theta=theta)
    total = None
    start = 0
    for (inst, rhs), vs in zip(batch, vecs):
        k = vs.shape[0]
        if precond is None:
            Y = ops.index(out, slice(start, start + k))
        else:
            Y = precond(vs, inst)
        start += k
        res = ops.sub(vs, ops.scale(ops.matvec_const(inst.A, Y), 1.0 / alpha))
        term = ops.scale(ops.dot(res, res), 1.0 / k)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / len(batch))


def _instance_sines(params, inst, M, theta=None, precond=None):
    r0 = inst.b / np.linalg.norm(inst.b)
    if precond is not None:
        fn = precond(inst)
    else:
        pre = NetworkPreconditioner(params, inst.d)
        fn = pre.bind(theta) if theta is not None else pre.apply
    sines = ag_m(inst.A, r0, fn, M)
    if any(not np.isfinite(float(ops.value_of(s))) for s in sines):
        raise FloatingPointError(f"non-finite sine for geometry seed {inst.mu.seed}")
    return sines


def loss_dynamic(params: ModelParams, instances, M: int, theta=None, precond=None):
    """``(1/M) sum_j mean_batch |s_j|`` with ``r0 = b / ||b||`` per instance.

    ``precond(instance)`` may supply a reference ``v -> z`` map in place of
    the network.
    """
    total = None
    for inst in instances:
        for s in _instance_sines(params, inst, M, theta, precond):
            total = s if total is None else ops.add(total, s)
    return ops.scale(total, 1.0 / (M * len(instances)))


def evaluate_sines(params: ModelParams, instances, M: int) -> np.ndarray:
    """Plain (untaped) sines, one row per instance."""
    return np.array([[float(s) for s in _instance_sines(params, inst, M)] for inst in instances])


def dynamic_loss_and_grad(params: ModelParams, instances, M: int):
    """Dynamic loss and gradient, one tape per instance, reduced in order.

    Returns ``(loss, grad, sines)`` with ``sines`` of shape ``(B, M)``.
    """
    B = len(instances)
    grad = np.zeros_like(params.theta)
    rows = []
    for inst in instances:
        tape = Tape()
        th = tape.leaf(params.theta)
        sines = _instance_sines(params, inst, M, theta=th)
        total = sines[0]
        for s in sines[1:]:
            total = ops.add(total, s)
        rows.append([float(ops.value_of(s)) for s in sines])
        if isinstance(total, Variable):
            tape.backward(total)
            grad += th.grad
    sines = np.array(rows)
    grad /= M * B
    return float(sines.mean()), grad, sines


def static_loss_and_grad(params: ModelParams, batch, alpha: float):
    tape = Tape()
    th = tape.leaf(params.theta)
    loss = loss_static(params, batch, alpha, theta=th)
    tape.backward(loss)
    return float(loss.value), th.grad.copy()


# --- optimizer --------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def step(self, theta, grad):
        """Return the updated parameters (``theta`` is not modified)."""
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- training loop ----------------------------------------------------------


def _val_metrics(params, config, val, val_batches, alpha):
    if not val:
        return float("nan"), np.full(config.M, np.nan)
    sines = evaluate_sines(params, val, config.M)
    mean_sines = sines.mean(axis=0)
    if config.phase == "dynamic":
        return float(mean_sines.mean()), mean_sines
    return float(ops.value_of(loss_static(params, val_batches, alpha))), mean_sines


def train(config: TrainConfig, train_set, val_set=(), params: Optional[ModelParams] = None,
          alpha: Optional[float] = None, out_dir=None, metrics_path=None):
    """Optimize ``params`` on ``train_set`` for one phase.

    Parameters
    ----------
    config : TrainConfig
    train_set, val_set : sequence of ProblemInstance
    params : ModelParams
        Starting point (freshly initialized for the static phase, a static
        checkpoint for the dynamic one).
    alpha : float, optional
        Static-loss normalization; computed from ``train_set`` if omitted.
    out_dir : path, optional
        Where periodic and final checkpoints go.
    metrics_path : path, optional
        CSV file the reports are appended to.

    Returns
    -------
    params : ModelParams
        Final parameters.
    reports : list of LossReport
        Epoch 0 is the evaluation before any update.
    """
    if params is None:
        raise ValueError("train needs initial parameters")
    train_set, val_set = list(train_set), list(val_set)
    alpha = alpha_norm(train_set) if alpha is None else alpha
    params = params.copy()
    static = config.phase == "static"
    train_batches = static_batches(train_set, config.n_augment, config.seed) if static else None
    val_batches = static_batches(val_set, config.n_augment, config.seed + 1) if static and val_set else None
    opt = Adam(lr=config.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def full_train_loss():
        if static:
            return float(ops.value_of(loss_static(params, train_batches, alpha)))
        return float(evaluate_sines(params, train_set, config.M).mean())

    reports = []

    def log(epoch, train_loss, t0):
        val_loss, mean_sines = _val_metrics(params, config, val_set, val_batches, alpha)
        rep = LossReport(epoch, config.phase, train_loss, val_loss, mean_sines, time.perf_counter() - t0)
        reports.append(rep)
        if metrics_path is not None:
            write_metrics(metrics_path, [rep], append=True)
        logger.info("%s epoch %d train %.6g val %.6g", config.phase, epoch, train_loss, val_loss)
        return rep

    t0 = time.perf_counter()
    initial = full_train_loss()
    log(0, initial, t0)
    best_val, stale, bad = np.inf, 0, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        weighted, count = 0.0, 0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            if static:
                loss, grad = static_loss_and_grad(params, [train_batches[i] for i in idx], alpha)
            else:
                loss, grad, _ = dynamic_loss_and_grad(params, [train_set[i] for i in idx], config.M)
            params.theta = opt.step(params.theta, grad)
            weighted += loss * len(idx)
            count += len(idx)
        opt.lr *= config.gamma
        rep = log(epoch, weighted / count, t0)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"{config.phase}_epoch{epoch:04d}.npk", params)
        bad = bad + 1 if rep.train_loss > config.divergence_factor * initial else 0
        if bad >= config.divergence_epochs:
            raise TrainingDiverged(f"loss above {config.divergence_factor}x initial for {bad} epochs",
                                   reports)
        if config.patience is not None and np.isfinite(rep.val_loss):
            if rep.val_loss < best_val:
                best_val, stale = rep.val_loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
    if out_dir is not None:
        save_checkpoint(out_dir / f"{config.phase}_final.npk", params)
    return params, reports


def metrics_header(M):
    return ["epoch", "phase", "train_loss", "val_loss"] + [f"mean_sine_{j}" for j in range(1, M + 1)]


def write_metrics(path, reports, append=False):
    path = Path(path)
    reports = list(reports)
    if not reports:
        return
    M = len(reports[0].mean_sines)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(metrics_header(M))
        for rep in reports:
            writer.writerow(rep.row())


def read_metrics(path):
    """Parse a metrics CSV back into :class:`LossReport` objects."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no epochs recorded")
    required = ["epoch", "phase", "train_loss", "val_loss", "mean_sine_1"]
    for col in required:
        if col not in rows[0]:
            raise ValueError(f"{path}: missing column {col!r}")
    M = sum(1 for k in rows[0] if k.startswith("mean_sine_"))
    return [LossReport(int(r["epoch"]), r["phase"], float(r["train_loss"]), float(r["val_loss"]),
                       np.array([float(r[f"mean_sine_{j}"]) for j in range(1, M + 1)]))
            for r in rows]
