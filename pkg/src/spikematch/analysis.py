"""Diagnostics: temporal-diversity metrics, calibration, utilization,
membrane-divergence checks, and the synaptic-energy estimator.

Diversity metrics operate on per-time-step feature matrices (T, D) — by
convention the last spiking layer's spike vectors — and on per-step
predicted distributions (T, C). Calibration uses 10 equal-width confidence
bins over (0, 1]. Energy follows the direct-input-coding model: the first
layer does multiply-accumulates on real inputs (4.6 pJ each), later layers
accumulate binary spikes (0.9 pJ), scaled by the observed spiking activity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuronal import NeuronConfig, membrane_update
from .network import LayerSpec, Network, TemporalTape, _conv_out_hw


# ---------------------------------------------------------------------------
# Temporal diversity
# ---------------------------------------------------------------------------


def cosine_diversity(features) -> tuple[np.ndarray, float]:
    """Pairwise cosine matrix of feature rows and its mean upper-triangle.

    Rows of ``features`` (T, D) are per-step feature vectors. Pairs
    involving an all-zero row are undefined: their entries are NaN and
    they are excluded from the mean.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] == 0:
        raise ValueError(f"features must be (T, D) with D >= 1, got {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    valid = norms > 0
    safe = np.where(valid, norms, 1.0)
    unit = f / safe[:, None]
    mat = unit @ unit.T
    mat[~valid, :] = np.nan
    mat[:, ~valid] = np.nan
    np.fill_diagonal(mat, np.where(valid, 1.0, np.nan))
    iu = np.triu_indices(f.shape[0], k=1)
    pairs = mat[iu]
    defined = pairs[~np.isnan(pairs)]
    mean = float(defined.mean()) if defined.size else float("nan")
    return mat, mean


def pairwise_kl(dists) -> np.ndarray:
    """KL(p_i || p_j) for every row pair of a (T, C) distribution matrix.

    Entries are clamped at 1e-12 before the log; the diagonal is exactly 0.
    """
    p = np.asarray(dists, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"dists must be (T, C), got {p.shape}")
    if np.any(p < -1e-9) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability distributions")
    q = np.clip(p, 1e-12, None)
    logq = np.log(q)
    kl = np.einsum("ic,ijc->ij", q, logq[:, None, :] - logq[None, :, :])
    np.fill_diagonal(kl, 0.0)
    return kl


def temporal_variance(features) -> float:
    """Mean over features of the unbiased variance across time steps."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need a (T, D) matrix with T >= 2")
    return float(np.mean(np.var(f, axis=0, ddof=1)))


def effective_rank(features) -> float:
    """exp of the entropy of the normalized singular-value spectrum.

    Singular values at or below 1e-12 of the largest are treated as zero
    and excluded, so an exactly rank-1 matrix scores exactly 1.0.
    """
    f = np.asarray(features, dtype=np.float64)
    sv = np.linalg.svd(f, compute_uv=False)
    if sv.size == 0 or sv[0] <= 0.0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    sv = sv[sv > sv[0] * 1e-12]
    p = sv / sv.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


@dataclass
class DiversityReport:
    """Temporal-diversity metrics of one (T, D) feature matrix plus the
    matching (T, C) per-step prediction matrix."""

    cosine: np.ndarray
    mean_cosine: float
    kl: np.ndarray
    variance: float
    erank: float

    @classmethod
    def from_features(cls, features, dists) -> "DiversityReport":
        mat, mean = cosine_diversity(features)
        return cls(
            cosine=mat,
            mean_cosine=mean,
            kl=pairwise_kl(dists),
            variance=temporal_variance(features),
            erank=effective_rank(features),
        )

    def summary(self) -> dict:
        return {
            "mean_cosine": self.mean_cosine,
            "mean_kl": float(self.kl[~np.eye(len(self.kl), dtype=bool)].mean()),
            "temporal_variance": self.variance,
            "effective_rank": self.erank,
        }


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    """Per-bin confidence/accuracy/count over (0, 1] plus the ECE scalar."""

    bin_confidence: np.ndarray
    bin_accuracy: np.ndarray
    bin_count: np.ndarray
    ece: float

    @property
    def bins(self) -> int:
        return len(self.bin_count)


def ece(confidences, correct, bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width bins of (0, 1].

    ``ECE = sum_b (n_b / N) * |acc_b - conf_b|``; empty bins contribute 0.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.ndim != 1 or conf.shape != corr.shape or conf.size < 1:
        raise ValueError("need matching 1-D confidence/correctness arrays")
    if np.any(conf <= 0.0) or np.any(conf > 1.0):
        raise ValueError("confidences must lie in (0, 1]")
    # bin i covers (i/bins, (i+1)/bins]
    idx = np.minimum((np.ceil(conf * bins) - 1).astype(np.int64), bins - 1)
    idx = np.maximum(idx, 0)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=bins)
    nonzero = count > 0
    bin_conf = np.zeros(bins)
    bin_acc = np.zeros(bins)
    bin_conf[nonzero] = conf_sum[nonzero] / count[nonzero]
    bin_acc[nonzero] = acc_sum[nonzero] / count[nonzero]
    value = float(np.sum(count / conf.size * np.abs(bin_acc - bin_conf)))
    return CalibrationReport(bin_conf, bin_acc, count, value)


def utilization_ratio(used: int, total: int) -> float:
    """Fraction of (sample, collection) pairs whose pseudo-label was used."""
    if total <= 0:
        raise ValueError("total must be positive")
    return used / total


# ---------------------------------------------------------------------------
# Membrane divergence (firing disabled)
# ---------------------------------------------------------------------------


def membrane_divergence(tau: float, u_start: float, inputs, t: int, t_prime: int) -> float:
    """|u(t) - u(t')| of a non-firing neuron, checked two ways.

    ``inputs[i]`` is the injected drive at step t'+1+i (length t - t').
    The leak recursion is simulated step by step and compared against the
    closed form ``(tau^(t-t') - 1) u(t') + sum_i tau^(t-i) in(i)``; the two
    must agree within 1e-10 relative error.
    """
    if not 1 <= t_prime < t:
        raise ValueError("need 1 <= t' < t")
    inputs = np.asarray(inputs, dtype=np.float64)
    steps = t - t_prime
    if inputs.shape != (steps,):
        raise ValueError(f"need {steps} inputs for steps {t_prime + 1}..{t}")
    cfg = NeuronConfig(tau=tau, v_th=np.inf)
    u = np.array([u_start])
    for k in range(steps):
        u = membrane_update(u, inputs[k : k + 1], cfg)
    simulated = abs(float(u[0]) - u_start)

    powers = tau ** np.arange(steps - 1, -1, -1, dtype=np.float64)
    closed = abs((tau**steps - 1.0) * u_start + float(powers @ inputs))
    if abs(simulated - closed) > 1e-10 * max(1.0, abs(closed)):
        raise AssertionError(
            f"simulation {simulated} deviates from closed form {closed}"
        )
    return simulated


# ---------------------------------------------------------------------------
# Synaptic energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyModel:
    """Per-operation energies (pJ): multiply-accumulate vs accumulate."""

    e_mac: float = 4.6
    e_ac: float = 0.9

    def __post_init__(self):
        if self.e_mac <= 0 or self.e_ac <= 0:
            raise ValueError("operation energies must be positive")


def layer_op_count(spec: LayerSpec, zeta: float, input_hw=None) -> float:
    """Activity-scaled synaptic operations of one layer.

    Conv: ``k^2 * H_out * W_out * C_in * C_out * zeta``; dense/readout:
    ``in_dim * out_dim * zeta``. ``input_hw`` gives the conv input size.
    """
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must lie in [0, 1]")
    if spec.kind == "conv2d":
        if input_hw is None:
            raise ValueError("conv layers need input_hw to size the output map")
        h_out, w_out = _conv_out_hw(spec, *input_hw)
        return spec.kernel**2 * h_out * w_out * spec.c_in * spec.c_out * zeta
    return spec.in_dim * spec.out_dim * zeta


def energy_estimate(
    net: Network,
    zetas,
    input_hw: tuple[int, int] | None = None,
    model: EnergyModel = EnergyModel(),
):
    """Total inference energy and per-layer breakdown.

    ``zetas[l]`` is the spiking activity entering layer l; the first entry
    is forced to 1 (real-valued input, every connection active) and billed
    at MAC cost, all later layers at AC cost. Returns
    ``(total_pj, rows)`` with one (ops, energy_pj) row per layer.
    """
    zetas = list(zetas)
    if len(zetas) != len(net.layers):
        raise ValueError(
            f"need one zeta per layer ({len(net.layers)}), got {len(zetas)}"
        )
    zetas[0] = 1.0
    rows = []
    total = 0.0
    hw = input_hw
    for l, spec in enumerate(net.layers):
        ops = layer_op_count(spec, zetas[l], hw)
        cost = model.e_mac if l == 0 else model.e_ac
        energy = ops * cost
        rows.append({"layer": l + 1, "kind": spec.kind, "ops": ops, "energy_pj": energy})
        total += energy
        if spec.kind == "conv2d":
            h, w = _conv_out_hw(spec, *hw)
            for _ in range(spec.pool):
                h //= 2
                w //= 2
            hw = (h, w)
        else:
            hw = None
    return total, rows


def measured_zetas(net: Network, tape: TemporalTape) -> list[float]:
    """Per-layer input activity from a forward tape (layer 1 gets 1.0)."""
    zetas = [1.0]
    for l in range(1, len(net.layers)):
        acts = tape.inputs[l]
        zetas.append(float(np.mean([a.mean() for a in acts])))
    return zetas


# ---------------------------------------------------------------------------
# Feature extraction for diversity probes
# ---------------------------------------------------------------------------


def last_layer_features(net: Network, tape: TemporalTape) -> np.ndarray:
    """Per-step spike vectors of the last spiking layer, shape (B, T, D)."""
    spiking = [l for l, spec in enumerate(net.layers) if spec.has_neuron]
    if not spiking:
        raise ValueError("network has no spiking layers")
    per_step = tape.spikes[spiking[-1]]  # T arrays of (B, ...)
    stacked = np.stack([s.reshape(s.shape[0], -1) for s in per_step], axis=1)
    return stacked


def diversity_probe(net: Network, cfg: NeuronConfig, images, num_steps: int) -> dict:
    """Seed-comparable diversity summary on a probe batch.

    Runs one forward pass, extracts last-spiking-layer features and
    per-step softmax predictions, computes each metric per sample and
    averages over the batch. A sample with no defined cosine pairs or an
    all-zero feature matrix (a silent network) counts as maximally
    redundant: cosine 1.0 and effective rank 1.0, keeping the summary
    finite for every model.
    """
    from .network import forward_sequence
    from .objectives import softmax

    trace, tape = forward_sequence(images, net, num_steps, cfg)
    feats = last_layer_features(net, tape)  # (B, T, D)
    dists = softmax(trace.O).transpose(1, 0, 2)  # (B, T, C)
    cos, kl, var, erk = [], [], [], []
    for b in range(feats.shape[0]):
        _, mean_cos = cosine_diversity(feats[b])
        cos.append(1.0 if np.isnan(mean_cos) else mean_cos)
        kl_mat = pairwise_kl(dists[b])
        kl.append(float(kl_mat[~np.eye(len(kl_mat), dtype=bool)].mean()))
        var.append(temporal_variance(feats[b]))
        erk.append(effective_rank(feats[b]) if np.any(feats[b]) else 1.0)
    return {
        "mean_cosine": float(np.mean(cos)),
        "mean_kl": float(np.mean(kl)),
        "temporal_variance": float(np.mean(var)),
        "effective_rank": float(np.mean(erk)),
    }
