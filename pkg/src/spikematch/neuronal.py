"""Leaky integrate-and-fire neuron dynamics.

Discrete-time LIF update: the pre-spike potential at step t is
``u_pre = tau * u_prev + presyn`` where ``tau`` is the leakage factor and
``presyn`` the integrated pre-synaptic input. A neuron fires when
``u_pre >= v_th`` (ties fire), after which the potential is reset either to
zero (hard reset) or by subtracting the threshold (soft reset). The
Heaviside firing step is non-differentiable; training substitutes a
triangular or rectangular pseudo-derivative centred on the threshold.

All functions are pure and elementwise, accepting arrays of any shape, so
they serve both scalar unit tests and batched network simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RESET_MODES = ("hard", "soft")
SURROGATE_KINDS = ("triangular", "rectangular")


@dataclass(frozen=True)
class NeuronConfig:
    """LIF neuron parameters shared by every neuron of a network.

    ``tau`` in [0, 1) is the leakage factor (0 = memoryless). ``v_th`` is the
    firing threshold; ``np.inf`` is accepted as a sentinel that disables
    firing for analysis runs. ``gamma`` is the triangular surrogate
    half-width, ``width`` the rectangular one.
    """

    tau: float = 0.5
    v_th: float = 1.0
    reset_mode: str = "hard"
    surrogate: str = "triangular"
    gamma: float = 1.0
    width: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if not self.v_th > 0.0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if self.surrogate not in SURROGATE_KINDS:
            raise ValueError(f"surrogate must be one of {SURROGATE_KINDS}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.width > 0.0:
            raise ValueError(f"width must be positive, got {self.width}")


def _as_finite(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def membrane_update(u_prev, presyn, cfg: NeuronConfig) -> np.ndarray:
    """Pre-spike potential ``tau * u_prev + presyn``, elementwise."""
    u_prev = _as_finite("u_prev", u_prev)
    presyn = _as_finite("presyn", presyn)
    if u_prev.shape != presyn.shape:
        raise ValueError(
            f"shape mismatch: u_prev {u_prev.shape} vs presyn {presyn.shape}"
        )
    return cfg.tau * u_prev + presyn


def fire(u_pre, cfg: NeuronConfig) -> np.ndarray:
    """Binary spikes: 1 where ``u_pre >= v_th``, else 0."""
    u_pre = _as_finite("u_pre", u_pre)
    return (u_pre >= cfg.v_th).astype(np.float64)


def reset(u_pre, spikes, cfg: NeuronConfig) -> np.ndarray:
    """Post-spike potential under the configured reset mode.

    Hard reset zeroes fired entries; soft reset subtracts ``v_th`` per spike.
    ``spikes`` must be exactly 0/1.
    """
    u_pre = _as_finite("u_pre", u_pre)
    spikes = np.asarray(spikes, dtype=np.float64)
    if u_pre.shape != spikes.shape:
        raise ValueError(
            f"shape mismatch: u_pre {u_pre.shape} vs spikes {spikes.shape}"
        )
    if not np.all((spikes == 0.0) | (spikes == 1.0)):
        raise ValueError("spikes must be binary 0/1")
    if cfg.reset_mode == "hard":
        return u_pre * (1.0 - spikes)
    # np.where instead of spikes * v_th: keeps the v_th = inf sentinel NaN-free.
    return u_pre - np.where(spikes == 1.0, cfg.v_th, 0.0)


def surrogate_gradient(u_pre, cfg: NeuronConfig) -> np.ndarray:
    """Pseudo-derivative of the spike step w.r.t. the pre-spike potential.

    Triangular: ``(1/gamma^2) * max(0, gamma - |u_pre - v_th|)``, peaking at
    ``1/gamma`` on the threshold with support ``[v_th - gamma, v_th + gamma]``.
    Rectangular: ``1/(2*width)`` inside ``|u_pre - v_th| <= width``, else 0.
    """
    u_pre = _as_finite("u_pre", u_pre)
    dist = np.abs(u_pre - cfg.v_th)
    if cfg.surrogate == "triangular":
        g = cfg.gamma
        return np.maximum(0.0, g - dist) / (g * g)
    w = cfg.width
    return np.where(dist <= w, 1.0 / (2.0 * w), 0.0)


def lif_step(u_prev, presyn, cfg: NeuronConfig):
    """One LIF step: integrate, fire, reset.

    Returns ``(u_post, spikes, u_pre)``; the pre-spike potential is included
    so callers can tape it for the backward pass.
    """
    u_pre = membrane_update(u_prev, presyn, cfg)
    spikes = fire(u_pre, cfg)
    u_post = reset(u_pre, spikes, cfg)
    return u_post, spikes, u_pre
