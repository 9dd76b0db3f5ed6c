"""Agreement-based pseudo-labeling over temporally grouped predictions.

The T readout rows of an unlabeled sample are partitioned into M
contiguous collections and averaged, giving M predictions per view. On the
weakly augmented view the collection softmax rows (optionally aligned
against a running class marginal) act as candidate pseudo-labels: each
collection m receives the row of the most confident OTHER collection, and
trains the strongly augmented view's collection m only when all other
collections agree on one class. Everything here is pure numpy on batched
arrays of shape (N, M, C); vector inputs (M, C) work unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objectives import cross_entropy, softmax

ABLATION_MODES = ("spikematch", "averaged", "intra", "no_da", "threshold")


# ---------------------------------------------------------------------------
# Temporal grouping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupingScheme:
    """Contiguous ordered partition of time steps {1..T} into M segments."""

    num_steps: int
    num_collections: int
    segments: tuple[tuple[int, ...], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.segments)


def make_grouping(num_steps: int, num_collections: int) -> GroupingScheme:
    """Partition {1..T} into M contiguous segments of near-equal size.

    When M divides T every segment has T/M steps. Otherwise the extra steps
    go to the outermost segments, last one first, working inward: T=4, M=3
    gives sizes (1, 1, 2); T=8, M=3 gives (3, 2, 3).
    """
    T, M = num_steps, num_collections
    if T < 1 or M < 1:
        raise ValueError("num_steps and num_collections must be >= 1")
    if M > T:
        raise ValueError(f"cannot form {M} collections from {T} steps")
    base, rem = divmod(T, M)
    sizes = [base] * M
    order: list[int] = []
    lo, hi = 0, M - 1
    while lo <= hi:
        order.append(hi)
        if lo < hi:
            order.append(lo)
        lo += 1
        hi -= 1
    for idx in order[:rem]:
        sizes[idx] += 1
    segments = []
    start = 1
    for size in sizes:
        segments.append(tuple(range(start, start + size)))
        start += size
    return GroupingScheme(T, M, tuple(segments))


def group_outputs(outputs, scheme: GroupingScheme) -> np.ndarray:
    """Average readout rows within each segment.

    ``outputs`` is (T, ..., C) (an ``OutputTrace.O`` or a plain matrix);
    the result is (M, ..., C) with row m the mean over segment m.
    """
    O = np.asarray(getattr(outputs, "O", outputs), dtype=np.float64)
    if O.shape[0] != scheme.num_steps:
        raise ValueError(
            f"trace has {O.shape[0]} steps but grouping expects {scheme.num_steps}"
        )
    rows = [np.mean(O[[t - 1 for t in seg]], axis=0) for seg in scheme.segments]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Distribution alignment
# ---------------------------------------------------------------------------


@dataclass
class DaState:
    """Running model marginal for distribution alignment.

    ``p_model`` tracks an EMA (decay 0.999) of the mean predicted
    distribution on weakly augmented unlabeled data; alignment rescales
    each prediction by ``p_target / p_model`` and renormalizes. With
    ``per_collection`` one marginal is kept per collection (shape (M, C))
    instead of a single shared one.
    """

    p_target: np.ndarray
    p_model: np.ndarray = field(default=None)  # type: ignore[assignment]
    decay: float = 0.999
    per_collection: bool = False

    def __post_init__(self):
        self.p_target = np.asarray(self.p_target, dtype=np.float64)
        if self.p_model is None:
            self.p_model = self.p_target.copy()
        self.p_model = np.asarray(self.p_model, dtype=np.float64)

    @classmethod
    def uniform(cls, classes: int, decay: float = 0.999, num_collections: int = 1,
                per_collection: bool = False) -> "DaState":
        target = np.full(classes, 1.0 / classes)
        model = (
            np.full((num_collections, classes), 1.0 / classes)
            if per_collection
            else target.copy()
        )
        return cls(target, model, decay, per_collection)

    def update(self, q_rows: np.ndarray) -> None:
        """EMA-update the model marginal from a batch of predictions.

        ``q_rows`` is (..., M, C); the shared marginal averages over every
        row, the per-collection variant over the batch axes only.
        """
        q = np.asarray(q_rows, dtype=np.float64)
        if self.per_collection:
            mean = q.reshape(-1, q.shape[-2], q.shape[-1]).mean(axis=0)
        else:
            mean = q.reshape(-1, q.shape[-1]).mean(axis=0)
        self.p_model = self.decay * self.p_model + (1.0 - self.decay) * mean


def distribution_align(q_raw, da: DaState) -> np.ndarray:
    """Rescale predictions by ``p_target / p_model`` and renormalize rows.

    Accepts a single distribution or stacked rows (..., C); with
    ``per_collection`` the second-to-last axis must be the collection
    axis. The running marginal is clamped at 1e-6 before division. In a
    training step the marginal is EMA-updated from the batch first
    (``DaState.update``), then the same batch is aligned.
    """
    q = np.asarray(q_raw, dtype=np.float64)
    ratio = da.p_target / np.clip(da.p_model, 1e-6, None)
    aligned = q * ratio
    return aligned / np.sum(aligned, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Cross-collection selection and agreement
# ---------------------------------------------------------------------------


def select_pseudo_labels(q) -> tuple[np.ndarray, np.ndarray]:
    """Pick each collection's pseudo-label from its most confident peer.

    For every m the candidate set is all other collections; the one whose
    row maximum is largest wins (ties: lowest index) and its full row
    becomes ``q_hat[m]``; ``c_hat[m]`` is that row's argmax class (ties:
    lowest class). ``q`` is (..., M, C) with M >= 2; M = 1 has no peers
    and must use the averaged ablation path instead.
    """
    q = np.asarray(q, dtype=np.float64)
    M = q.shape[-2]
    if M < 2:
        raise ValueError("cross-collection selection needs M >= 2")
    conf = q.max(axis=-1)  # (..., M)
    q_hat = np.empty_like(q)
    c_hat = np.empty(q.shape[:-1], dtype=np.int64)
    for m in range(M):
        masked = conf.copy()
        masked[..., m] = -np.inf
        best = np.argmax(masked, axis=-1)  # (...,) lowest index on ties
        chosen = np.take_along_axis(q, best[..., None, None], axis=-2)[..., 0, :]
        q_hat[..., m, :] = chosen
        c_hat[..., m] = np.argmax(chosen, axis=-1)
    return q_hat, c_hat


def agreement_mask(q) -> np.ndarray:
    """Per-collection indicator that all OTHER collections share one argmax.

    For M = 2 the peer set is a singleton, so the mask is all ones; for
    M = 1 (averaged ablation) it is the single one.
    """
    q = np.asarray(q, dtype=np.float64)
    M = q.shape[-2]
    classes = np.argmax(q, axis=-1)  # (..., M)
    if M == 1:
        return np.ones(classes.shape, dtype=np.float64)
    mask = np.empty(classes.shape, dtype=np.float64)
    idx_all = np.arange(M)
    for m in range(M):
        peers = classes[..., idx_all != m]
        mask[..., m] = np.all(peers == peers[..., :1], axis=-1)
    return mask


# ---------------------------------------------------------------------------
# Unsupervised loss
# ---------------------------------------------------------------------------


@dataclass
class CollectionSet:
    """Grouped predictions for a batch of unlabeled samples.

    Arrays are (N, M, C) except ``c_hat``/``agree``/``gate`` which are
    (N, M). ``gate`` is the final usage indicator: the agreement mask,
    additionally and-ed with the confidence test in threshold mode.
    """

    g_weak: np.ndarray
    g_strong: np.ndarray
    q: np.ndarray
    q_hat: np.ndarray
    c_hat: np.ndarray
    agree: np.ndarray
    gate: np.ndarray


def build_collections(
    g_weak: np.ndarray,
    g_strong: np.ndarray,
    da: DaState | None,
    mode: str = "spikematch",
    conf_threshold: float = 0.8,
) -> CollectionSet:
    """Run the pseudo-label pipeline on grouped logits of both views.

    ``g_weak``/``g_strong`` are (N, M, C) collection logits. The weak rows
    are softmaxed, aligned (unless ``mode == 'no_da'`` or ``da`` is None;
    the running marginal is updated from this batch first), then used for
    selection and agreement. Ablations: ``averaged`` requires M = 1 and
    self-labels with an always-open gate; ``intra`` self-labels but keeps
    the agreement mask; ``threshold`` additionally requires the selected
    label's confidence to reach ``conf_threshold``.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    g_weak = np.asarray(g_weak, dtype=np.float64)
    g_strong = np.asarray(g_strong, dtype=np.float64)
    if g_weak.shape != g_strong.shape or g_weak.ndim != 3:
        raise ValueError("g_weak and g_strong must both be (N, M, C)")
    M = g_weak.shape[1]
    if mode == "averaged" and M != 1:
        raise ValueError("averaged ablation requires M = 1")
    if mode != "averaged" and M < 2:
        raise ValueError(f"mode {mode!r} requires M >= 2")

    q_raw = softmax(g_weak)
    if da is not None and mode != "no_da":
        da.update(q_raw)
        q = distribution_align(q_raw, da)
    else:
        q = q_raw

    if mode == "averaged":
        q_hat = q.copy()
        c_hat = np.argmax(q, axis=-1)
        agree = np.ones(q.shape[:-1])
        gate = agree.copy()
    else:
        q_hat, c_hat = select_pseudo_labels(q)
        agree = agreement_mask(q)
        if mode == "intra":
            q_hat = q.copy()
            c_hat = np.argmax(q, axis=-1)
        gate = agree.copy()
        if mode == "threshold":
            gate = gate * (q_hat.max(axis=-1) >= conf_threshold)

    return CollectionSet(g_weak, g_strong, q, q_hat, c_hat, agree, gate)


def unsupervised_loss(collections: CollectionSet) -> tuple[float, int]:
    """Masked cross-entropy of the strong view against the pseudo-labels.

    Returns ``(loss, used)`` where the loss is
    ``(1/N) * sum_b sum_m gate[b,m] * H(q_hat[b,m], g_strong[b,m])`` and
    ``used`` counts the contributing (sample, collection) pairs. The
    pseudo-label branch carries no gradient: targets are constants here.
    """
    n = collections.g_strong.shape[0]
    if n == 0:
        return 0.0, 0
    terms = cross_entropy(collections.q_hat, collections.g_strong)  # (N, M)
    loss = float(np.sum(collections.gate * terms) / n)
    return loss, int(np.sum(collections.gate))


def unsupervised_loss_grad(collections: CollectionSet) -> np.ndarray:
    """Gradient of ``unsupervised_loss`` w.r.t. the strong collection logits."""
    n = collections.g_strong.shape[0]
    p = softmax(collections.g_strong)
    return collections.gate[..., None] * (p - collections.q_hat) / n


def spread_collection_grad(grad_g: np.ndarray, scheme: GroupingScheme) -> np.ndarray:
    """Map per-collection logit gradients back onto readout steps.

    Collection m is the mean over its segment, so each step in the segment
    receives ``grad_g[:, m] / |segment|``. ``grad_g`` is (N, M, C); the
    result is (T, N, C), ready for ``backward_stbp``.
    """
    grad_g = np.asarray(grad_g, dtype=np.float64)
    n, m, c = grad_g.shape
    if m != scheme.num_collections:
        raise ValueError("gradient does not match grouping")
    out = np.zeros((scheme.num_steps, n, c))
    for mi, seg in enumerate(scheme.segments):
        share = grad_g[:, mi, :] / len(seg)
        for t in seg:
            out[t - 1] = share
    return out
