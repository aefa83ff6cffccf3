"""Confidence-network weighting of FixMatch-style consistency losses, at toy scale.

The base classifier minimizes

    CE(labeled) + mean_u C(weak(u); omega) * L_u(u; theta)

where ``L_u`` is the thresholded pseudo-label cross-entropy on a strong view.
The confidence net C is meta-learned with the IFT hypergradient, using the
identity in place of the inverse Hessian by default. Image augmentations are
replaced by isotropic Gaussian noise: weak noise is small and applied with
probability one half, strong noise is large and always applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import Dataset, class_means
from .hypergrad import ApproxKind, ApproxSpec, approx_inverse_hvp
from .metaopt import InnerOptState, MetaOptState

log = logging.getLogger(__name__)

WARMUP_BAND = (0.9, 1.1)


@dataclass(frozen=True)
class SslDataset:
    labeled: Dataset
    unlabeled_in: np.ndarray
    unlabeled_ood: np.ndarray
    val: Dataset
    test: Dataset

    @property
    def unlabeled(self) -> np.ndarray:
        return np.concatenate([self.unlabeled_in, self.unlabeled_ood])

    @property
    def ood_mask(self) -> np.ndarray:
        return np.r_[np.zeros(len(self.unlabeled_in), bool), np.ones(len(self.unlabeled_ood), bool)]


@dataclass(frozen=True)
class SslConfig:
    seed: int = 0
    tau: float = 0.95
    sigma_weak: float = 0.05
    sigma_strong: float = 0.5
    weak_prob: float = 0.5
    hidden: int = 32
    cn_hidden: int = 16
    base_lr: float = 0.1
    cn_warmup_steps: int = 2000
    cn_warmup_lr: float = 1e-2
    base_warmup_steps: int = 500
    total_steps: int = 3000
    meta_every: int = 100
    meta_lr: float = 3e-3
    labeled_batch: int = 16
    unlabeled_batch: int = 64
    meta_batch: int = 256
    phase2_steps: int = 3000
    approx: ApproxSpec = field(default_factory=ApproxSpec.identity)

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.sigma_strong <= self.sigma_weak:
            raise ValueError("strong augmentation must be stronger than weak")
        if self.meta_every < 1 or self.cn_warmup_steps < 1:
            raise ValueError("meta_every and cn_warmup_steps must be positive")


def gen_ssl_toy(seed: int, num_classes: int = 4, labeled_per_class: int = 4, unlabeled_per_class: int = 150,
                n_ood: int = 300, val_per_class: int = 25, test_per_class: int = 250,
                spread: float = 0.35, radius: float = 2.0, ood_center=None, ood_spread: float | None = None
                ) -> SslDataset:
    """2-D class blobs on a circle plus one out-of-distribution cluster.

    By default the OOD cluster sits on the circle halfway between classes 0
    and 1, where a classifier assigns it confident but arbitrary labels.
    """
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, 2, radius)
    ood_spread = spread if ood_spread is None else ood_spread
    if ood_center is None:
        ood_center = radius * np.array([np.cos(np.pi / num_classes), np.sin(np.pi / num_classes)])
    ood_center = np.asarray(ood_center, dtype=np.float64)
    if np.min(np.linalg.norm(means - ood_center, axis=1)) <= 3 * max(spread, ood_spread):
        raise ValueError("OOD cluster must sit more than 3 spreads from every class mean")

    def draw(per_class):
        labels = np.repeat(np.arange(num_classes), per_class)
        x = means[labels] + spread * rng.standard_normal((labels.size, 2))
        order = rng.permutation(labels.size)
        return x[order], labels[order]

    xl, yl = draw(labeled_per_class)
    xu, _ = draw(unlabeled_per_class)
    xv, yv = draw(val_per_class)
    xt, yt = draw(test_per_class)
    xo = ood_center + ood_spread * rng.standard_normal((n_ood, 2))
    return SslDataset(
        Dataset(xl, yl, num_classes, "ssl-labeled"),
        xu,
        xo,
        Dataset(xv, yv, num_classes, "ssl-val"),
        Dataset(xt, yt, num_classes, "ssl-test"),
    )


def weak_augment(x: np.ndarray, rng: np.random.Generator, sigma_weak: float, prob: float = 0.5) -> np.ndarray:
    noise = rng.standard_normal(x.shape)
    applied = rng.random(x.shape[0]) < prob
    return x + sigma_weak * noise * applied[:, None]


def strong_augment(x: np.ndarray, rng: np.random.Generator, sigma_strong: float) -> np.ndarray:
    return x + sigma_strong * rng.standard_normal(x.shape)


@dataclass(frozen=True)
class Views:
    weak: np.ndarray
    strong: np.ndarray


def draw_views(u: np.ndarray, rng: np.random.Generator, cfg: SslConfig) -> Views:
    return Views(weak_augment(u, rng, cfg.sigma_weak, cfg.weak_prob), strong_augment(u, rng, cfg.sigma_strong))


def cn_forward(cn: M.MlpParams, x: np.ndarray) -> np.ndarray:
    return M.mlp_forward(cn, x)[:, 0]


def constant_cn(d_in: int, hidden: int, value: float) -> M.MlpParams:
    """A confidence net whose output is exactly ``value`` everywhere."""
    z = M.MlpParams.zeros(d_in, hidden, 1)
    return M.MlpParams(z.W1, z.b1, z.W2, np.array([float(value)]))


@dataclass(frozen=True)
class UnsupTerms:
    losses: np.ndarray
    mask: np.ndarray
    pseudo: np.ndarray
    probs_strong: np.ndarray


def unsup_terms(params: M.MlpParams, views: Views, tau: float) -> UnsupTerms:
    q = M.softmax(M.mlp_forward(params, views.weak))
    pseudo = q.argmax(axis=1)
    mask = q.max(axis=1) >= tau
    logp = M.log_softmax(M.mlp_forward(params, views.strong))
    ce = -logp[np.arange(len(pseudo)), pseudo]
    return UnsupTerms(np.where(mask, ce, 0.0), mask, pseudo, np.exp(logp))


def fixmatch_unsup_loss(params: M.MlpParams, u_batch: np.ndarray, tau: float, rng: np.random.Generator,
                        cfg: SslConfig | None = None):
    """Per-instance masked consistency losses and the confidence mask."""
    cfg = cfg or SslConfig(tau=tau)
    t = unsup_terms(params, draw_views(u_batch, rng, cfg), tau)
    return t.losses, t.mask


def _onehot(labels, n):
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def ssl_loss_grad(params: M.MlpParams, labeled: M.Batch, views: Views, weights: np.ndarray, tau: float):
    """Composite loss and its theta-gradient; pseudo-labels and mask are constants."""
    sup_loss, g = M.ce_grad(params, labeled)
    t = unsup_terms(params, views, tau)
    m = len(weights)
    loss = sup_loss + float(np.sum(weights * t.losses)) / m
    coef = weights * t.mask / m
    dlogits = coef[:, None] * (t.probs_strong - _onehot(t.pseudo, params.n_out))
    gu = M.backprop(params, views.strong, dlogits)
    grad = M.MlpParams(*(a + b for a, b in zip(g.tensors, gu.tensors)))
    return loss, grad, t


def ssl_inner_step(params: M.MlpParams, cn: M.MlpParams | None, labeled: M.Batch, u_batch: np.ndarray,
                   tau: float, lr: float, rng: np.random.Generator, cfg: SslConfig) -> M.MlpParams:
    """One SGD step on the confidence-weighted objective; ``cn=None`` weighs uniformly."""
    views = draw_views(u_batch, rng, cfg)
    weights = np.ones(len(u_batch)) if cn is None else cn_forward(cn, views.weak)
    loss, grad, _ = ssl_loss_grad(params, labeled, views, weights, tau)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite SSL training loss")
    return params.like(params.flat() - lr * grad.flat())


def supervised_step(params: M.MlpParams, labeled: M.Batch, lr: float) -> M.MlpParams:
    _, g = M.ce_grad(params, labeled)
    return params.like(params.flat() - lr * g.flat())


def _weighted_ce_hvp(params, X, labels, weights, v):
    # sum_i weights_i * CE_i / n, expressed through the uniform-mean HVP per row group
    out = np.zeros(params.size)
    for i in np.flatnonzero(weights):
        out += weights[i] * M.ce_hvp(params, X[i:i + 1], labels[i:i + 1], v)
    return out / len(weights)


def ssl_train_hvp(params, labeled: M.Batch, views: Views, weights, tau):
    t = unsup_terms(params, views, tau)
    w_eff = weights * t.mask

    def hvp(v):
        return M.ce_hvp(params, labeled.inputs, labeled.labels, v) + \
            _weighted_ce_hvp(params, views.strong, t.pseudo, w_eff, v)
    return hvp


def instance_alignment(params: M.MlpParams, views: Views, tau: float, direction: np.ndarray) -> np.ndarray:
    """<direction, dL_u/dtheta> for every unlabeled instance, via one forward-mode pass."""
    t = unsup_terms(params, views, tau)
    _, r_logits = M.mlp_jvp(params, views.strong, params.like(direction))
    resid = t.probs_strong - _onehot(t.pseudo, params.n_out)
    return t.mask * np.sum(resid * r_logits, axis=1)


def ssl_hypergradient(params: M.MlpParams, cn: M.MlpParams, val: M.Batch, views: Views, tau: float,
                      labeled: M.Batch | None = None, spec: ApproxSpec | None = None) -> np.ndarray:
    """IFT hypergradient of the validation CE with respect to the CN parameters (flat)."""
    spec = spec or ApproxSpec.identity()
    v1 = M.grad_w(M.LossKind.VAL, params, None, val).flat()
    if spec.kind == ApproxKind.IDENTITY:
        v2 = v1
    else:
        if labeled is None:
            raise ValueError("non-identity approximations need the labeled batch for the Hessian")
        weights = cn_forward(cn, views.weak)
        v2 = approx_inverse_hvp(spec, ssl_train_hvp(params, labeled, views, weights, tau), v1).result
    s = instance_alignment(params, views, tau, v2)
    v3 = M.backprop(cn, views.weak, (s / len(s))[:, None])
    return -v3.flat()


def ssl_meta_update(params: M.MlpParams, cn: M.MlpParams, val: M.Batch, u_batch: np.ndarray, tau: float,
                    meta_opt: MetaOptState, rng: np.random.Generator, cfg: SslConfig,
                    labeled: M.Batch | None = None) -> M.MlpParams:
    views = draw_views(u_batch, rng, cfg)
    hg = ssl_hypergradient(params, cn, val, views, tau, labeled, cfg.approx)
    new = meta_opt.step(cn.flat(), hg)
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("non-finite confidence-net parameters")
    return cn.like(new)


@dataclass
class CnWarmupResult:
    cn: M.MlpParams
    in_band_fraction: float
    complete: bool
    variance_trajectory: list[float]


def cn_warmup(cn: M.MlpParams, unlabeled: np.ndarray, steps: int, lr: float, rng: np.random.Generator,
              cfg: SslConfig, batch_size: int = 128, record_every: int = 50) -> CnWarmupResult:
    """Regress the confidence net onto 1 for weakly augmented unlabeled points (Adam)."""
    if steps < 1:
        raise ValueError("cn_warmup needs steps >= 1")
    opt = InnerOptState(kind="adam", lr=lr)
    x = cn.flat()
    variances = []
    for step in range(steps):
        idx = rng.choice(len(unlabeled), size=min(batch_size, len(unlabeled)), replace=False)
        weak = weak_augment(unlabeled[idx], rng, cfg.sigma_weak, cfg.weak_prob)
        net = cn.like(x)
        out = cn_forward(net, weak)
        g = M.backprop(net, weak, (2.0 * (out - 1.0) / len(out))[:, None])
        x = opt.step(x, g.flat())
        if step % record_every == 0 or step == steps - 1:
            variances.append(float(np.var(cn_forward(cn.like(x), unlabeled))))
    cn = cn.like(x)
    out = cn_forward(cn, weak_augment(unlabeled, rng, cfg.sigma_weak, cfg.weak_prob))
    frac = float(np.mean((out >= WARMUP_BAND[0]) & (out <= WARMUP_BAND[1])))
    complete = frac >= 0.95
    if not complete:
        log.warning("confidence-net warm-up incomplete: %.1f%% of points in band", 100 * frac)
    return CnWarmupResult(cn, frac, complete, variances)


@dataclass
class SslRunReport:
    seed: int
    warmup: CnWarmupResult
    meta_updates: int
    best_val_loss: float
    best_meta_update: int
    test_acc_with_cn: float
    test_acc_uniform: float
    weight_original: np.ndarray
    weight_weak: np.ndarray
    ood_mask: np.ndarray
    val_losses: list[float] = field(default_factory=list)
    unstable: bool = False
    failure: str | None = None

    @property
    def mean_weight_ood(self) -> float:
        return float(self.weight_original[self.ood_mask].mean())

    @property
    def mean_weight_in(self) -> float:
        return float(self.weight_original[~self.ood_mask].mean())

    @property
    def mean_weight_original(self) -> float:
        return float(self.weight_original.mean())

    @property
    def mean_weight_weak(self) -> float:
        return float(self.weight_weak.mean())

    def histogram(self, bins: int = 20):
        return np.histogram(self.weight_original, bins=bins)

    def weight_rows(self):
        for i, (ood, wo, ww) in enumerate(zip(self.ood_mask, self.weight_original, self.weight_weak)):
            yield {"instance_id": i, "is_ood": int(ood), "weight_original": float(wo),
                   "weight_weak_augmented": float(ww)}


def _train_base(params, cn, data: SslDataset, cfg: SslConfig, steps: int, rng: np.random.Generator):
    unl = data.unlabeled
    for _ in range(steps):
        li = rng.choice(len(data.labeled), size=min(cfg.labeled_batch, len(data.labeled)), replace=False)
        ui = rng.choice(len(unl), size=min(cfg.unlabeled_batch, len(unl)), replace=False)
        params = ssl_inner_step(params, cn, data.labeled.batch(li), unl[ui], cfg.tau, cfg.base_lr, rng, cfg)
    return params


def run_ssl_toy(cfg: SslConfig, data: SslDataset) -> SslRunReport:
    """Meta-train a confidence net, then retrain two fresh classifiers with and without it."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    init_rng, cn_rng, train_rng, meta_rng, weak_rng = (np.random.default_rng(s) for s in seeds[:5])
    d, C = data.labeled.dim, data.labeled.num_classes
    unl = data.unlabeled
    val = data.val.batch()
    params = M.MlpParams.init(init_rng, d, cfg.hidden, C)
    cn0 = M.MlpParams.init(cn_rng, d, cfg.cn_hidden, 1)
    warm = cn_warmup(cn0, unl, cfg.cn_warmup_steps, cfg.cn_warmup_lr, cn_rng, cfg)
    cn = warm.cn
    meta_opt = MetaOptState(lr=cfg.meta_lr)
    best_cn, best_loss, best_k, val_losses = cn, float("inf"), 0, []
    unstable, failure, k = False, None, 0
    try:
        params = _train_base(params, cn, data, cfg, cfg.base_warmup_steps, train_rng)
        steps_done = 0
        while True:
            loss = M.val_loss(params, val)
            val_losses.append(loss)
            if loss < best_loss:
                best_cn, best_loss, best_k = cn, loss, k
            if steps_done >= cfg.total_steps:
                break
            if steps_done > 0:
                # meta-updates land every meta_every inner steps, never after the last one
                mi = meta_rng.choice(len(unl), size=min(cfg.meta_batch, len(unl)), replace=False)
                li = meta_rng.choice(len(data.labeled), size=min(cfg.labeled_batch, len(data.labeled)), replace=False)
                cn = ssl_meta_update(params, cn, val, unl[mi], cfg.tau, meta_opt, meta_rng, cfg,
                                     data.labeled.batch(li))
                k += 1
            chunk = min(cfg.meta_every, cfg.total_steps - steps_done)
            params = _train_base(params, cn, data, cfg, chunk, train_rng)
            steps_done += chunk
    except FloatingPointError as exc:
        unstable, failure = True, str(exc)

    # phase 2: identical seeds, frozen saved CN versus uniform weights
    init2, train2 = (np.random.default_rng(s) for s in seeds[5].spawn(2))
    fresh = M.MlpParams.init(init2, d, cfg.hidden, C)
    state = train2.bit_generator.state
    with_cn = _train_base(fresh, best_cn, data, cfg, cfg.phase2_steps, train2)
    train2.bit_generator.state = state
    uniform = _train_base(fresh, None, data, cfg, cfg.phase2_steps, train2)
    test = data.test.batch()

    return SslRunReport(
        seed=cfg.seed,
        warmup=warm,
        meta_updates=k,
        best_val_loss=best_loss,
        best_meta_update=best_k,
        test_acc_with_cn=M.accuracy(with_cn, test),
        test_acc_uniform=M.accuracy(uniform, test),
        weight_original=cn_forward(best_cn, unl),
        weight_weak=cn_forward(best_cn, weak_augment(unl, weak_rng, cfg.sigma_weak, cfg.weak_prob)),
        ood_mask=data.ood_mask,
        val_losses=val_losses,
        unstable=unstable,
        failure=failure,
    )
