"""Bilevel training loops: inner optimizers, warm-up, IML with early stopping, T1-T2.

The loops only talk to a *problem* object that exposes flat-vector
derivatives (see :class:`MlpProblem` and :class:`QuadraticToy`), so the same
code drives the MLP experiments and the closed-form scalar checks.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from . import model as M
from .data import Dataset
from .hypergrad import ApproxSpec, HypergradError, hypergradient
from .metrics import HessianComparison, compare_to_exact, comparison_due

NO_REG_LAMBDA = -1e3


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class Schedule(str, enum.Enum):
    IML = "iml"
    T1T2 = "t1t2"


@dataclass
class InnerOptState:
    """SGD (optionally with momentum) or bias-corrected Adam on a flat vector."""

    kind: str = "adam"
    lr: float = 1e-4
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind == "sgd":
            if self.momentum:
                self.m = g.copy() if self.m is None else self.momentum * self.m + g
                return x - self.lr * self.m
            return x - self.lr * g
        if self.kind != "adam":
            raise ValueError(f"unknown inner optimizer {self.kind!r}")
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class MetaOptState:
    """RMSprop without momentum."""

    lr: float = 0.1
    decay: float = 0.99
    eps: float = 1e-8
    square_avg: np.ndarray | None = None

    def step(self, lam: np.ndarray, hypergrad: np.ndarray) -> np.ndarray:
        if self.square_avg is None:
            self.square_avg = np.zeros_like(lam)
        self.square_avg = self.decay * self.square_avg + (1 - self.decay) * hypergrad * hypergrad
        return lam - self.lr * hypergrad / (np.sqrt(self.square_avg) + self.eps)


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 50
    meta_updates: int = 1000
    warmup_steps: int = 0
    batch_size: int = 32
    approx: ApproxSpec = field(default_factory=lambda: ApproxSpec.neumann(3))
    early_stop_patience: int | None = None
    seed: int = 0
    schedule: Schedule = Schedule.IML
    hidden: int | None = None
    hyper_mode: M.HyperMode = M.HyperMode.PER_PARAMETER
    lambda_init_mean: float = 0.0
    lambda_init_std: float = 0.1
    inner_optimizer: str = "adam"
    inner_lr: float = 1e-4
    inner_momentum: float = 0.0
    meta_lr: float = 0.1
    eval_every: int = 1
    es_continue: bool = False
    compare_every: int = 0
    compare_specs: tuple[ApproxSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "hyper_mode", M.HyperMode(self.hyper_mode))
        if self.schedule == Schedule.T1T2 and self.inner_steps != 1:
            raise ValueError("T1-T2 alternates single inner steps; set inner_steps=1")
        if self.inner_steps < 1 or self.meta_updates < 0 or self.warmup_steps < 0 or self.batch_size < 1:
            raise ValueError("inner_steps/batch_size must be positive, counts non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def method(self) -> str:
        return "T1-T2" if self.schedule == Schedule.T1T2 else self.approx.label


class BilevelProblem(Protocol):
    n_train: int

    def init(self, rng: np.random.Generator, lam_rng: np.random.Generator, config: MetaConfig): ...
    def train_loss_grad(self, w, lam, idx): ...
    def train_loss(self, w, lam) -> float: ...
    def val_grad(self, w): ...
    def hvp(self, w, lam, v): ...
    def mixed(self, w, lam, v): ...
    def evaluate(self, w, lam) -> dict: ...
    def test_accuracy(self, w) -> float: ...


class MlpProblem:
    """Softplus-L2 regularized MLP on fixed train/val/test splits.

    Curvature (HVPs and mixed partials) is always taken on the full training split.
    """

    def __init__(self, train: Dataset, val: Dataset, test: Dataset | None = None,
                 hidden: int | None = None, mode=M.HyperMode.PER_PARAMETER):
        self.train, self.val, self.test = train, val, test
        self.d_in = train.dim
        self.hidden = hidden or train.dim
        self.n_out = train.num_classes
        self.mode = M.HyperMode(mode)
        self.template = M.MlpParams.zeros(self.d_in, self.hidden, self.n_out)
        self.hyper_template = M.HyperSet.constant(self.mode, self.template, 0.0)
        self._train_batch = train.batch()
        self._val_batch = val.batch()

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_params(self) -> int:
        return self.template.size

    def params(self, w) -> M.MlpParams:
        return self.template.like(w)

    def hypers(self, lam) -> M.HyperSet:
        return self.hyper_template.like(lam)

    def init(self, rng, lam_rng, config: MetaConfig):
        params = M.MlpParams.init(rng, self.d_in, self.hidden, self.n_out)
        hypers = M.HyperSet.random(self.mode, params, lam_rng, config.lambda_init_mean, config.lambda_init_std)
        return params.flat(), hypers.flat()

    def train_loss_grad(self, w, lam, idx):
        loss, g = M.loss_and_grad(M.LossKind.TRAIN, self.params(w), self.hypers(lam), self.train.batch(idx))
        return loss, g.flat()

    def train_loss(self, w, lam) -> float:
        return M.train_loss(self.params(w), self.hypers(lam), self._train_batch)

    def val_grad(self, w):
        return M.grad_w(M.LossKind.VAL, self.params(w), None, self._val_batch).flat()

    def hvp(self, w, lam, v):
        return M.hvp_ww(self.params(w), self.hypers(lam), self._train_batch, v)

    def mixed(self, w, lam, v):
        return M.mixed_vjp(self.params(w), self.hypers(lam), self._train_batch, v).flat()

    def evaluate(self, w, lam) -> dict:
        p = self.params(w)
        return {
            "train_loss": M.train_loss(p, self.hypers(lam), self._train_batch),
            "val_loss": M.val_loss(p, self._val_batch),
            "train_acc": M.accuracy(p, self._train_batch),
            "val_acc": M.accuracy(p, self._val_batch),
        }

    def test_accuracy(self, w) -> float:
        if self.test is None:
            return float("nan")
        return M.accuracy(self.params(w), self.test.batch())


class QuadraticToy:
    """L_T = a/2 (w - lam)^2, L_V = w^2/2; the best response is w* = lam."""

    n_train = 1

    def __init__(self, a: float = 1.0, w0: float | None = None, lam0: float = 3.0):
        self.a, self.w0, self.lam0 = float(a), w0, float(lam0)

    def init(self, rng, lam_rng, config):
        w0 = self.lam0 if self.w0 is None else self.w0
        return np.array([float(w0)]), np.array([self.lam0])

    def train_loss_grad(self, w, lam, idx):
        return self.train_loss(w, lam), self.a * (w - lam)

    def train_loss(self, w, lam) -> float:
        return float(0.5 * self.a * np.sum((w - lam) ** 2))

    def val_grad(self, w):
        return np.array(w, dtype=np.float64)

    def hvp(self, w, lam, v):
        return self.a * np.asarray(v)

    def mixed(self, w, lam, v):
        return -self.a * np.asarray(v)

    def evaluate(self, w, lam) -> dict:
        return {"train_loss": self.train_loss(w, lam), "val_loss": float(0.5 * np.sum(w**2)),
                "train_acc": float("nan"), "val_acc": float("nan")}

    def test_accuracy(self, w) -> float:
        return float("nan")


class MinibatchStream:
    """Endless seeded stream of minibatch indices, reshuffled every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def make_inner_opt(config: MetaConfig) -> InnerOptState:
    return InnerOptState(kind=config.inner_optimizer, lr=config.inner_lr, momentum=config.inner_momentum)


def inner_step(problem, w, lam, idx, opt: InnerOptState, step: int = 0):
    loss, g = problem.train_loss_grad(w, lam, idx)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise TrainingDivergenceError("non-finite training loss", step)
    w_new = opt.step(w, g)
    if not np.all(np.isfinite(w_new)):
        raise TrainingDivergenceError("non-finite parameters", step)
    return w_new


def inner_train(problem, w, lam, steps: int, opt: InnerOptState, batches: MinibatchStream, trace=None):
    """Run ``steps`` minibatch updates; optionally append the full train loss after each."""
    if steps < 1:
        raise ValueError("inner_train needs steps >= 1")
    for s in range(steps):
        w = inner_step(problem, w, lam, batches.next(), opt, s)
        if trace is not None:
            trace.append(problem.train_loss(w, lam))
    return w


def warmup(problem, w, lam, steps: int, opt: InnerOptState, batches: MinibatchStream):
    """Train under the initial meta-knowledge only; returns (w, train-loss trajectory)."""
    trajectory = [problem.train_loss(w, lam)]
    if steps == 0:
        return w, trajectory
    w = inner_train(problem, w, lam, steps, opt, batches, trace=trajectory)
    return w, trajectory


@dataclass(frozen=True)
class LossJump:
    minimum_step: int
    jump_step: int
    peak_step: int
    recovered: bool


def detect_loss_jump(trajectory, factor: float = 1.1) -> LossJump | None:
    """First t with loss(t) > factor * min(loss[0..t]), and whether it comes back down."""
    traj = np.asarray(trajectory, dtype=np.float64)
    running_min = np.minimum.accumulate(traj)
    hits = np.flatnonzero(traj > factor * running_min)
    if hits.size == 0:
        return None
    t = int(hits[0])
    min_step = int(np.argmin(traj[:t + 1]))
    after = traj[t:]
    # the excursion ends at the first return below the jump threshold
    below = np.flatnonzero(after <= factor * running_min[t])
    end = t + int(below[0]) if below.size else traj.size
    peak = t + int(np.argmax(traj[t:end]))
    recovered = bool(np.any(traj[peak:] < traj[peak] / factor))
    return LossJump(min_step, t, peak, recovered)


def meta_step(problem, w, lam, spec: ApproxSpec, meta_opt: MetaOptState):
    """One IFT meta-update. Returns (new lam, ApproxReport, hypergradient)."""
    v1 = problem.val_grad(w)
    hg, report = hypergradient(v1, spec, lambda v: problem.hvp(w, lam, v), lambda v: problem.mixed(w, lam, v))
    return meta_opt.step(lam, hg), report, hg


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    epoch_time_ns: int
    approx_time_ns: int
    approx_allocs: int


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    w: np.ndarray
    lam: np.ndarray


@dataclass
class RunMetrics:
    name: str = ""
    seed: int = 0
    method: str = ""
    records: list[EpochRecord] = field(default_factory=list)
    best_val_epoch: int = -1
    best_val_loss: float = float("inf")
    final_test_acc: float = float("nan")
    es_test_acc: float | None = None
    es_epoch: int | None = None
    es_stop_epoch: int | None = None
    checkpoint: Checkpoint | None = None
    final_w: np.ndarray | None = None
    final_lam: np.ndarray | None = None
    warmup_trajectory: list[float] = field(default_factory=list)
    # inner steps taken before each meta-update was applied
    meta_update_positions: list[int] = field(default_factory=list)
    comparisons: list[HessianComparison] = field(default_factory=list)
    unstable: bool = False
    failed_epoch: int | None = None
    failure: str | None = None

    @property
    def max_train_acc(self) -> float:
        return max((r.train_acc for r in self.records), default=float("nan"))

    @property
    def max_val_acc(self) -> float:
        return max((r.val_acc for r in self.records), default=float("nan"))

    @property
    def last(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None

    def mean_of(self, attr: str, skip_first: bool = True) -> float:
        recs = self.records[1:] if skip_first else self.records
        return float(np.mean([getattr(r, attr) for r in recs])) if recs else 0.0


ES_MIN_DELTA = 1e-6


def _run_bilevel(config: MetaConfig, problem, spec: ApproxSpec, inner_steps: int, name: str) -> RunMetrics:
    init_ss, lam_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(3)
    w, lam = problem.init(np.random.default_rng(init_ss), np.random.default_rng(lam_ss), config)
    batches = MinibatchStream(problem.n_train, config.batch_size, np.random.default_rng(shuffle_ss))
    opt = make_inner_opt(config)
    meta_opt = MetaOptState(lr=config.meta_lr)
    metrics = RunMetrics(name=name, seed=config.seed, method=config.method)
    es_enabled = config.early_stop_patience is not None
    es_best: Checkpoint | None = None
    es_best_loss = float("inf")
    stale = 0

    def record(epoch, w, lam, epoch_ns, approx_ns, allocs):
        nonlocal es_best, es_best_loss, stale
        ev = problem.evaluate(w, lam)
        rec = EpochRecord(epoch, ev["train_loss"], ev["val_loss"], ev["train_acc"], ev["val_acc"],
                          int(epoch_ns), int(approx_ns), int(allocs))
        metrics.records.append(rec)
        if not np.isfinite(rec.val_loss):
            raise TrainingDivergenceError("non-finite validation loss", epoch)
        snapshot = Checkpoint(epoch, w.copy(), lam.copy())
        if rec.val_loss < metrics.best_val_loss:
            metrics.best_val_loss = rec.val_loss
            metrics.best_val_epoch = epoch
            metrics.checkpoint = snapshot
        if es_enabled and metrics.es_stop_epoch is None:
            if rec.val_loss < es_best_loss - ES_MIN_DELTA or es_best is None:
                es_best, es_best_loss, stale = snapshot, rec.val_loss, 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    metrics.es_stop_epoch = epoch
                    return True
        return False

    step = 0
    try:
        w, metrics.warmup_trajectory = warmup(problem, w, lam, config.warmup_steps, opt, batches)
        record(0, w, lam, 0, 0, 0)
        stopped = False
        acc_ns = acc_approx_ns = allocs = 0
        for step in range(1, config.meta_updates + 1):
            t0 = time.perf_counter_ns()
            w = inner_train(problem, w, lam, inner_steps, opt, batches)
            lam_next, report, _ = meta_step(problem, w, lam, spec, meta_opt)
            acc_ns += time.perf_counter_ns() - t0
            acc_approx_ns += report.wall_time_ns
            allocs = report.transient_floats_allocated
            if comparison_due(step, config.compare_every):
                metrics.comparisons.extend(compare_to_exact(
                    lambda v: problem.hvp(w, lam, v), problem.val_grad(w), config.compare_specs, step))
            if step % config.eval_every == 0:
                stopped = record(step // config.eval_every, w, lam, acc_ns, acc_approx_ns, allocs)
                acc_ns = acc_approx_ns = 0
            lam = lam_next
            metrics.meta_update_positions.append(config.warmup_steps + step * inner_steps)
            if not np.all(np.isfinite(lam)):
                raise TrainingDivergenceError("non-finite meta-knowledge", step)
            if stopped and not config.es_continue:
                break
    except (TrainingDivergenceError, HypergradError) as exc:
        metrics.unstable = True
        metrics.failed_epoch = step
        metrics.failure = str(exc)

    metrics.final_w, metrics.final_lam = w, lam
    metrics.final_test_acc = problem.test_accuracy(w)
    if es_enabled and es_best is not None:
        metrics.es_epoch = es_best.epoch
        metrics.es_test_acc = problem.test_accuracy(es_best.w)
    return metrics


def run_iml(config: MetaConfig, problem, name: str = "iml") -> RunMetrics:
    """Warm-up, then ``meta_updates`` rounds of inner training and one IFT meta-step."""
    if config.schedule != Schedule.IML:
        raise ValueError("run_iml needs schedule=iml")
    return _run_bilevel(config, problem, config.approx, config.inner_steps, name)


def run_t1t2(config: MetaConfig, problem, name: str = "t1t2") -> RunMetrics:
    """Greedy alternation of one inner step and one identity-approximated meta step.

    ``meta_updates`` counts alternations; ``eval_every`` sets the record cadence.
    """
    if config.schedule != Schedule.T1T2:
        raise ValueError("run_t1t2 needs schedule=t1t2")
    return _run_bilevel(config, problem, ApproxSpec.identity(), 1, name)


def run(config: MetaConfig, problem, name: str = "") -> RunMetrics:
    if config.schedule == Schedule.T1T2:
        return run_t1t2(config, problem, name or "t1t2")
    return run_iml(config, problem, name or "iml")


def l2_to_lambda(coefficient: float) -> float:
    """lambda whose softplus squared equals a plain L2 coefficient."""
    if coefficient <= 0:
        return NO_REG_LAMBDA
    return M.inverse_softplus(float(np.sqrt(coefficient)))


def train_fixed(problem: MlpProblem, config: MetaConfig, l2: float, steps: int):
    """Train one model with a uniform, fixed L2 coefficient; returns (w, lam)."""
    init_ss, lam_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(3)
    w, _ = problem.init(np.random.default_rng(init_ss), np.random.default_rng(lam_ss), config)
    lam = np.full(problem.hyper_template.size, l2_to_lambda(l2))
    if steps > 0:
        batches = MinibatchStream(problem.n_train, config.batch_size, np.random.default_rng(shuffle_ss))
        w = inner_train(problem, w, lam, steps, make_inner_opt(config), batches)
    return w, lam


@dataclass(frozen=True)
class BaselineRow:
    l2: float
    train_acc: float
    val_acc: float
    test_acc: float


def grid_search_baseline(l2_values, problem: MlpProblem, train_steps: int, config: MetaConfig) -> list[BaselineRow]:
    rows = []
    for l2 in l2_values:
        w, lam = train_fixed(problem, config, l2, train_steps)
        ev = problem.evaluate(w, lam)
        rows.append(BaselineRow(float(l2), ev["train_acc"], ev["val_acc"], problem.test_accuracy(w)))
    return rows


APPENDIX_L2_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 5e-1, 1.0, 2.0, 3.0)
INNER_STEPS_ABLATION = (50, 100, 200, 300, 400, 500)


def ablation_configs(base: MetaConfig, steps=INNER_STEPS_ABLATION, meta_updates: int = 50):
    return [replace(base, inner_steps=s, meta_updates=meta_updates) for s in steps]
