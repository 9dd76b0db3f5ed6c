"""The semi-supervised training loop and its optimizer plumbing.

One iteration follows the co-training recipe end to end: TET loss on a
weakly augmented labeled batch; weak and strong views of the unlabeled
batch pushed through the same network; collection-level pseudo-labels with
distribution alignment and agreement gating; a single STBP backward pass
over the combined objective; one SGD-with-momentum step under a cosine
learning-rate schedule; and an EMA shadow of the weights for evaluation.

Everything is deterministic given the run seed: batching, augmentation and
init draw from separate counter-keyed substreams, so the labeled pipeline
is unaffected by the unlabeled one (a lambda = 0 run updates weights
bit-identically to a purely supervised run) and worker threads cannot
reorder results.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .analysis import CalibrationReport, ece
from .augment import strong_augment, weak_augment
from .data import Dataset, SslSplit, make_split, sample_batches, sample_labeled_batches
from .network import (
    Network,
    backward_stbp,
    forward_sequence,
    init_weights,
    make_network,
    save_checkpoint,
)
from .neuronal import NeuronConfig
from .objectives import softmax, tet_loss, total_loss
from .pseudolabel import (
    ABLATION_MODES,
    DaState,
    GroupingScheme,
    build_collections,
    group_outputs,
    make_grouping,
    spread_collection_grad,
    unsupervised_loss,
    unsupervised_loss_grad,
)

METRICS_HEADER = "iter,loss_s,loss_u,util_ratio,acc,ema_acc,ece"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Every knob of a training run; mirrors the run-config file keys."""

    data: str = ""
    test_data: str = ""
    arch: str = "c8k3pp-d64"
    num_steps: int = 4
    num_collections: int = 3
    lam: float = 1.0
    mu: int = 7
    batch_size: int = 32
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    iterations: int = 4096
    eval_every: int = 64
    n_per_class: int = 4
    tau: float = 0.5
    v_th: float = 1.0
    reset_mode: str = "hard"
    surrogate: str = "triangular"
    gamma: float = 1.0
    width: float = 0.5
    ablation: str = "spikematch"
    conf_threshold: float = 0.8
    randaug_n: int = 3
    randaug_magnitude: float = 0.5
    seed: int = 0
    accumulate_readout: bool = False
    da_per_collection: bool = False
    da_decay: float = 0.999
    threads: int = 1

    def __post_init__(self):
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}")
        for name in ("num_steps", "num_collections", "mu", "batch_size",
                     "iterations", "eval_every", "n_per_class", "randaug_n",
                     "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_collections > self.num_steps:
            raise ValueError("num_collections cannot exceed num_steps")
        if self.lam < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lam, lr, weight_decay out of range")
        if not 0.0 <= self.momentum < 1.0 or not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("momentum/ema_decay out of range")

    def neuron(self) -> NeuronConfig:
        return NeuronConfig(
            tau=self.tau,
            v_th=self.v_th,
            reset_mode=self.reset_mode,
            surrogate=self.surrogate,
            gamma=self.gamma,
            width=self.width,
        )

    def grouping(self) -> GroupingScheme:
        m = 1 if self.ablation == "averaged" else self.num_collections
        return make_grouping(self.num_steps, m)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=0.0):
    """In-place SGD with momentum and decoupled-from-loss weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. Returns ``params`` for chaining.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must align")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter/gradient shape mismatch")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def ema_update(ema_params, params, decay=0.999):
    """``ema <- decay * ema + (1 - decay) * param``, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for e, p in zip(ema_params, params):
        e *= decay
        e += (1.0 - decay) * p
    return ema_params


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """FixMatch-style schedule: ``lr * cos(7 pi k / (16 K))``."""
    return base_lr * math.cos(7.0 * math.pi * iteration / (16.0 * total))


# ---------------------------------------------------------------------------
# One training iteration
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    loss_s: float
    loss_u: float
    lam: float

    @property
    def total(self) -> float:
        return total_loss(self.loss_s, self.loss_u, self.lam)


@dataclass
class IterationStats:
    losses: LossTerms
    used_pairs: int
    total_pairs: int
    lr: float


def _augment_batch(images, fn, pool):
    jobs = range(len(images))
    if pool is None:
        return np.stack([fn(j) for j in jobs])
    return np.stack(list(pool.map(fn, jobs)))


def train_iteration(
    model: Network,
    ema_model: Network,
    velocity: list[np.ndarray],
    labeled_images: np.ndarray,
    labeled_onehot: np.ndarray,
    unlabeled_images: np.ndarray | None,
    cfg: RunConfig,
    da: DaState,
    iteration: int,
    pool: ThreadPoolExecutor | None = None,
) -> IterationStats:
    """Run one combined supervised + unsupervised update in place.

    ``unlabeled_images`` may be None (or ``lam`` 0) for purely supervised
    training; the parameter update is then bit-identical to a run that
    never saw unlabeled data, because the unsupervised branch is skipped
    entirely and all random streams are purpose-keyed.
    """
    ncfg = cfg.neuron()
    scheme = cfg.grouping()
    seed = cfg.seed

    xw = _augment_batch(
        labeled_images,
        lambda j: weak_augment(
            labeled_images[j], rngmod.substream(seed, rngmod.AUG_LABELED, iteration, j)
        ),
        pool,
    )
    trace_l, tape_l = forward_sequence(xw, model, cfg.num_steps, ncfg)
    loss_s = tet_loss(trace_l.O, labeled_onehot)
    b = labeled_images.shape[0]
    dl_dO = (softmax(trace_l.O) - labeled_onehot[None]) / (b * cfg.num_steps)
    grads = backward_stbp(tape_l, dl_dO, model, ncfg)

    loss_u, used, total_pairs = 0.0, 0, 0
    run_unsup = (
        unlabeled_images is not None and len(unlabeled_images) > 0 and cfg.lam > 0
    )
    if run_unsup:
        uw = _augment_batch(
            unlabeled_images,
            lambda j: weak_augment(
                unlabeled_images[j],
                rngmod.substream(seed, rngmod.AUG_UNLABELED_WEAK, iteration, j),
            ),
            pool,
        )
        us = _augment_batch(
            unlabeled_images,
            lambda j: strong_augment(
                unlabeled_images[j],
                cfg.randaug_n,
                cfg.randaug_magnitude,
                rngmod.substream(seed, rngmod.AUG_UNLABELED_STRONG, iteration, j),
            ),
            pool,
        )
        trace_w, _ = forward_sequence(
            uw, model, cfg.num_steps, ncfg, record_tape=False
        )
        trace_s, tape_s = forward_sequence(us, model, cfg.num_steps, ncfg)
        g_weak = group_outputs(trace_w.O, scheme).transpose(1, 0, 2)
        g_strong = group_outputs(trace_s.O, scheme).transpose(1, 0, 2)
        collections = build_collections(
            g_weak, g_strong, da, cfg.ablation, cfg.conf_threshold
        )
        loss_u, used = unsupervised_loss(collections)
        total_pairs = int(collections.gate.size)
        grad_g = unsupervised_loss_grad(collections)
        du_dO = spread_collection_grad(cfg.lam * grad_g, scheme)
        for gw, gu in zip(grads, backward_stbp(tape_s, du_dO, model, ncfg)):
            gw += gu

    lr_t = cosine_lr(cfg.lr, iteration, cfg.iterations)
    sgd_step(model.weights, grads, velocity, lr_t, cfg.momentum, cfg.weight_decay)
    ema_update(ema_model.weights, model.weights, cfg.ema_decay)
    return IterationStats(LossTerms(loss_s, loss_u, cfg.lam), used, total_pairs, lr_t)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray
    mean_prediction: np.ndarray
    calibration: CalibrationReport


def evaluate(
    net: Network,
    ds: Dataset,
    ncfg: NeuronConfig,
    num_steps: int,
    indices=None,
    batch_size: int = 256,
    bins: int = 10,
) -> EvalReport:
    """Accuracy of the time-averaged prediction over a dataset.

    The prediction for a sample is the argmax of softmax(mean_t O^t); the
    same softmax maximum is the confidence fed to calibration.
    """
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("evaluation set is empty")
    probs = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        trace, _ = forward_sequence(
            ds.images[chunk], net, num_steps, ncfg, record_tape=False
        )
        probs.append(softmax(trace.O.mean(axis=0)))
    probs = np.concatenate(probs)
    labels = ds.labels[idx]
    preds = np.argmax(probs, axis=1)
    correct = preds == labels
    per_class = np.array(
        [
            correct[labels == c].mean() if np.any(labels == c) else np.nan
            for c in range(ds.classes)
        ]
    )
    calibration = ece(probs.max(axis=1), correct, bins=bins)
    return EvalReport(
        accuracy=float(correct.mean()),
        per_class_accuracy=per_class,
        mean_prediction=probs.mean(axis=0),
        calibration=calibration,
    )


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    model: Network
    ema_model: Network
    metrics: list[dict] = field(default_factory=list)
    config: RunConfig | None = None
    split: SslSplit | None = None


def _append_metrics_row(path, row: dict) -> None:
    line = (
        f"{row['iter']},{row['loss_s']:.10g},{row['loss_u']:.10g},"
        f"{row['util_ratio']:.10g},{row['acc']:.10g},{row['ema_acc']:.10g},"
        f"{row['ece']:.10g}\n"
    )
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(METRICS_HEADER + "\n")
        fh.write(line)


def _atomic_checkpoint(path, net, ncfg, run_config) -> None:
    tmp = f"{path}.tmp"
    save_checkpoint(tmp, net, ncfg, run_config)
    os.replace(tmp, path)


def run_training(
    ds: Dataset,
    cfg: RunConfig,
    eval_ds: Dataset | None = None,
    out_dir: str | None = None,
    supervised_only: bool = False,
) -> RunResult:
    """Train from scratch on ``ds`` under ``cfg``; returns the run result.

    Evaluation (on ``eval_ds``, or on ``ds`` itself when absent) happens
    every ``eval_every`` iterations and at the end; each evaluation appends
    one metrics row and refreshes the checkpoints when ``out_dir`` is set.
    ``supervised_only`` drops the unlabeled stream for baseline runs.
    """
    ncfg = cfg.neuron()
    eval_set = eval_ds if eval_ds is not None else ds
    split = make_split(ds, cfg.n_per_class, cfg.seed)
    model = init_weights(
        make_network(cfg.arch, ds.image_shape, ds.classes, cfg.accumulate_readout),
        cfg.seed,
    )
    ema_model = model.copy()
    velocity = [np.zeros_like(w) for w in model.weights]
    da = DaState.uniform(
        ds.classes,
        cfg.da_decay,
        num_collections=cfg.grouping().num_collections,
        per_collection=cfg.da_per_collection,
    )
    labeled_only = supervised_only or cfg.lam == 0 or len(split.unlabeled) == 0
    if labeled_only:
        lab_stream = sample_labeled_batches(split, cfg.batch_size, cfg.seed)
        batches = ((lab, None) for lab in lab_stream)
    else:
        batches = sample_batches(split, cfg.batch_size, cfg.mu, cfg.seed)
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None

    result = RunResult(model, ema_model, config=cfg, split=split)
    window: list[IterationStats] = []
    run_cfg_dict = dataclasses.asdict(cfg)
    try:
        for it in range(cfg.iterations):
            lab_idx, unl_idx = next(batches)
            unl_images = None if unl_idx is None else ds.images[unl_idx]
            stats = train_iteration(
                model,
                ema_model,
                velocity,
                ds.images[lab_idx],
                ds.onehot(lab_idx),
                unl_images,
                cfg,
                da,
                it,
                pool,
            )
            window.append(stats)
            if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations:
                raw = evaluate(model, eval_set, ncfg, cfg.num_steps)
                ema = evaluate(ema_model, eval_set, ncfg, cfg.num_steps)
                pairs = sum(s.total_pairs for s in window)
                row = {
                    "iter": it + 1,
                    "loss_s": float(np.mean([s.losses.loss_s for s in window])),
                    "loss_u": float(np.mean([s.losses.loss_u for s in window])),
                    "util_ratio": (
                        sum(s.used_pairs for s in window) / pairs if pairs else 0.0
                    ),
                    "acc": raw.accuracy,
                    "ema_acc": ema.accuracy,
                    "ece": ema.calibration.ece,
                }
                result.metrics.append(row)
                window.clear()
                if out_dir is not None:
                    _append_metrics_row(os.path.join(out_dir, "metrics.csv"), row)
                    _atomic_checkpoint(
                        os.path.join(out_dir, "model.spkm"), model, ncfg, run_cfg_dict
                    )
                    _atomic_checkpoint(
                        os.path.join(out_dir, "ema.spkm"), ema_model, ncfg, run_cfg_dict
                    )
    finally:
        if pool is not None:
            pool.shutdown()
    return result
