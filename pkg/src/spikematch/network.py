"""Layered spiking networks and spatio-temporal backpropagation.

A network is a stack of LIF layers (dense or stride-1 2-D convolution,
optionally followed by 2x2 average pooling) closed by a non-spiking readout
layer. The same static input is injected at every time step (direct input
coding); the readout emits one value row per step, never thresholded or
reset. A forward pass records a complete tape (inputs, pre-spike
potentials, spikes per layer and step) from which ``backward_stbp``
accumulates weight gradients over both layers and time, substituting the
configured surrogate pseudo-derivative at each spike site.

A smooth-relaxation mode replaces the Heaviside step with a sigmoid during
forward simulation and differentiates it exactly in the backward pass; it
exists purely to validate the gradient machinery against finite
differences and is never used for training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .neuronal import NeuronConfig, lif_step, membrane_update, surrogate_gradient
from .objectives import softmax
from .rng import INIT, substream

CHECKPOINT_MAGIC = b"SPKM"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or unreadable model checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


# ---------------------------------------------------------------------------
# Network structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """Shape and kind of one layer.

    ``dense``/``readout`` use (in_dim, out_dim); ``conv2d`` uses
    (kernel, c_in, c_out) with stride 1 and zero padding. ``pool`` counts
    2x2 average poolings applied to the spikes. The readout is always the
    final layer and the only one without LIF dynamics.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    c_in: int = 0
    c_out: int = 0
    padding: int = 0
    pool: int = 0

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "readout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel < 1 or self.c_in < 1 or self.c_out < 1:
                raise ValueError("conv2d needs kernel, c_in, c_out >= 1")
        elif self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"{self.kind} needs in_dim, out_dim >= 1")
        if self.pool and self.kind != "conv2d":
            raise ValueError("pooling is only supported after conv2d layers")

    @property
    def has_neuron(self) -> bool:
        return self.kind != "readout"

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.c_out, self.c_in, self.kernel, self.kernel)
        return (self.out_dim, self.in_dim)


@dataclass
class Network:
    """Layer specs plus their weight tensors (no bias terms)."""

    layers: list[LayerSpec]
    weights: list[np.ndarray]
    accumulate_readout: bool = False

    def __post_init__(self):
        if not self.layers or self.layers[-1].kind != "readout":
            raise ValueError("the final layer must be a readout layer")
        if any(l.kind == "readout" for l in self.layers[:-1]):
            raise ValueError("only the final layer may be a readout")
        if len(self.weights) != len(self.layers):
            raise ValueError("one weight tensor required per layer")
        for spec, w in zip(self.layers, self.weights):
            if w.shape != spec.weight_shape():
                raise ValueError(
                    f"weight shape {w.shape} does not match spec {spec.weight_shape()}"
                )

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Network":
        return Network(
            list(self.layers),
            [w.copy() for w in self.weights],
            self.accumulate_readout,
        )


def make_network(
    arch: str,
    input_shape: tuple[int, int, int] | int,
    classes: int,
    accumulate_readout: bool = False,
) -> Network:
    """Build a zero-weight network from a compact arch string.

    Tokens are dash-separated: ``c<out>k<kernel>`` adds a conv layer
    (padding kernel//2), each trailing ``p`` a 2x2 average pooling;
    ``d<n>`` adds a dense layer. A readout onto ``classes`` is appended.
    Example: ``"c8k3pp-d64"``.
    """
    if isinstance(input_shape, int):
        c, h, w = 1, 1, input_shape
        flat = input_shape
        spatial = None
    else:
        c, h, w = input_shape
        flat = c * h * w
        spatial = (c, h, w)

    layers: list[LayerSpec] = []
    for token in filter(None, arch.split("-")) if arch else []:
        if token.startswith("c"):
            body = token[1:]
            pools = len(body) - len(body.rstrip("p"))
            body = body.rstrip("p")
            c_out_s, _, k_s = body.partition("k")
            if not c_out_s.isdigit() or not k_s.isdigit():
                raise ValueError(f"bad conv token {token!r}")
            if spatial is None:
                raise ValueError("conv layer after a dense layer is not supported")
            c_out, k = int(c_out_s), int(k_s)
            pad = k // 2
            layers.append(
                LayerSpec("conv2d", kernel=k, c_in=c, c_out=c_out, padding=pad, pool=pools)
            )
            h = h + 2 * pad - k + 1
            w = w + 2 * pad - k + 1
            for _ in range(pools):
                if h % 2 or w % 2:
                    raise ValueError(f"cannot 2x2-pool odd spatial dims ({h}x{w})")
                h //= 2
                w //= 2
            c = c_out
            flat = c * h * w
        elif token.startswith("d") and token[1:].isdigit():
            n = int(token[1:])
            layers.append(LayerSpec("dense", in_dim=flat, out_dim=n))
            spatial = None
            flat = n
        else:
            raise ValueError(f"bad arch token {token!r}")
    layers.append(LayerSpec("readout", in_dim=flat, out_dim=classes))
    weights = [np.zeros(l.weight_shape()) for l in layers]
    return Network(layers, weights, accumulate_readout)


def init_weights(net: Network, seed: int) -> Network:
    """Fan-in-scaled uniform init (bound sqrt(6/fan_in)), deterministic in seed."""
    weights = []
    for i, spec in enumerate(net.layers):
        if spec.kind == "conv2d":
            fan_in = spec.c_in * spec.kernel * spec.kernel
        else:
            fan_in = spec.in_dim
        bound = np.sqrt(6.0 / fan_in)
        gen = substream(seed, INIT, i)
        weights.append(gen.uniform(-bound, bound, size=spec.weight_shape()))
    return Network(list(net.layers), weights, net.accumulate_readout)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, P, C*k*k) patch matrix for stride-1 convolution."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    h_out, w_out = windows.shape[2], windows.shape[3]
    # (B, C, Ho, Wo, k, k) -> (B, Ho*Wo, C*k*k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h_out * w_out, c * k * k)


def _col2im(g_col: np.ndarray, x_shape: tuple, k: int, pad: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto the input grid."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    h_out, w_out = hp - k + 1, wp - k + 1
    g = g_col.reshape(b, h_out, w_out, c, k, k)
    out = np.zeros((b, c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h_out, j : j + w_out] += g[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def _conv_out_hw(spec: LayerSpec, h: int, w: int) -> tuple[int, int]:
    return h + 2 * spec.padding - spec.kernel + 1, w + 2 * spec.padding - spec.kernel + 1


def _apply_layer(spec: LayerSpec, weight: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.kind == "conv2d":
        if a.ndim != 4 or a.shape[1] != spec.c_in:
            raise ValueError(
                f"conv2d expects (B, {spec.c_in}, H, W) input, got {a.shape}"
            )
        b = a.shape[0]
        h_out, w_out = _conv_out_hw(spec, a.shape[2], a.shape[3])
        col = _im2col(a, spec.kernel, spec.padding)
        z = col @ weight.reshape(spec.c_out, -1).T
        return z.transpose(0, 2, 1).reshape(b, spec.c_out, h_out, w_out)
    flat = a.reshape(a.shape[0], -1)
    if flat.shape[1] != spec.in_dim:
        raise ValueError(
            f"{spec.kind} expects {spec.in_dim} input features, got {flat.shape[1]}"
        )
    return flat @ weight.T


def _layer_weight_grad(spec: LayerSpec, g_z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.kind == "conv2d":
        b = a.shape[0]
        col = _im2col(a, spec.kernel, spec.padding)
        g2 = g_z.reshape(b, spec.c_out, -1).transpose(0, 2, 1)
        grad = np.einsum("bpo,bpk->ok", g2, col)
        return grad.reshape(spec.weight_shape())
    return g_z.T @ a.reshape(a.shape[0], -1)


def _layer_input_grad(
    spec: LayerSpec, weight: np.ndarray, g_z: np.ndarray, a_shape: tuple
) -> np.ndarray:
    if spec.kind == "conv2d":
        b = a_shape[0]
        g2 = g_z.reshape(b, spec.c_out, -1).transpose(0, 2, 1)
        g_col = g2 @ weight.reshape(spec.c_out, -1)
        return _col2im(g_col, a_shape, spec.kernel, spec.padding)
    return (g_z @ weight).reshape(a_shape)


def _avg_pool(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"average pooling needs even spatial dims, got {h}x{w}")
    return a.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avg_unpool(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0


# ---------------------------------------------------------------------------
# Forward simulation
# ---------------------------------------------------------------------------


@dataclass
class OutputTrace:
    """Readout values per time step: array of shape (T, B, C)."""

    O: np.ndarray

    def __post_init__(self):
        self.O = np.asarray(self.O, dtype=np.float64)
        if self.O.ndim != 3:
            raise ValueError(f"trace must be (T, B, C), got {self.O.shape}")
        if not np.all(np.isfinite(self.O)):
            raise ValueError("trace contains non-finite values")

    @property
    def num_steps(self) -> int:
        return self.O.shape[0]


@dataclass
class TemporalTape:
    """Everything the backward pass needs, per layer and time step.

    ``inputs[l][t-1]`` is the activation entering layer l at step t (the raw
    input for l = 0), ``u_pre``/``spikes`` the LIF internals of spiking
    layers (empty lists for the readout). In smooth mode ``spikes`` holds
    the continuous sigmoid outputs instead of binary values.
    """

    x: np.ndarray
    num_steps: int
    inputs: list[list[np.ndarray]]
    u_pre: list[list[np.ndarray]]
    spikes: list[list[np.ndarray]]
    spike_mode: str = "heaviside"
    smooth_k: float = 4.0
    pooled: list[list[np.ndarray]] = field(default_factory=list)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_sequence(
    x,
    net: Network,
    num_steps: int,
    cfg: NeuronConfig,
    spike_mode: str = "heaviside",
    smooth_k: float = 4.0,
    record_tape: bool = True,
):
    """Simulate ``num_steps`` LIF steps of the whole network on a batch.

    ``x`` is (B, ...) and is injected unchanged at every step; membrane
    states start at zero. Returns ``(OutputTrace, TemporalTape | None)``.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if spike_mode not in ("heaviside", "smooth"):
        raise ValueError(f"unknown spike_mode {spike_mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("input must include a batch dimension")

    n_layers = len(net.layers)
    u: list[np.ndarray | None] = [None] * n_layers
    tape = (
        TemporalTape(
            x,
            num_steps,
            inputs=[[] for _ in range(n_layers)],
            u_pre=[[] for _ in range(n_layers)],
            spikes=[[] for _ in range(n_layers)],
            spike_mode=spike_mode,
            smooth_k=smooth_k,
        )
        if record_tape
        else None
    )

    readout_rows = []
    for _ in range(num_steps):
        a = x
        for l, spec in enumerate(net.layers):
            if tape is not None:
                tape.inputs[l].append(a)
            z = _apply_layer(spec, net.weights[l], a)
            if not spec.has_neuron:
                readout_rows.append(z)
                break
            if u[l] is None:
                u[l] = np.zeros_like(z)
            if spike_mode == "heaviside":
                u_post, s, u_pre = lif_step(u[l], z, cfg)
            else:
                u_pre = membrane_update(u[l], z, cfg)
                s = _sigmoid(smooth_k * (u_pre - cfg.v_th))
                if cfg.reset_mode == "hard":
                    u_post = u_pre * (1.0 - s)
                else:
                    u_post = u_pre - s * cfg.v_th
            u[l] = u_post
            if tape is not None:
                tape.u_pre[l].append(u_pre)
                tape.spikes[l].append(s)
            a = s
            for _ in range(spec.pool):
                a = _avg_pool(a)

    O = np.stack(readout_rows)
    if net.accumulate_readout:
        O = np.cumsum(O, axis=0)
    return OutputTrace(O), tape


def softmax_prediction(trace: OutputTrace, t: int) -> np.ndarray:
    """Predicted class distribution at 1-based step ``t``: softmax(O^t)."""
    if not 1 <= t <= trace.num_steps:
        raise IndexError(f"step {t} outside 1..{trace.num_steps}")
    return softmax(trace.O[t - 1])


def spike_rate(tape: TemporalTape) -> list[float]:
    """Mean spiking activity per spiking layer, over neurons and steps."""
    rates = []
    for l, per_step in enumerate(tape.spikes):
        if not per_step:
            continue  # readout layer
        if len(per_step) != tape.num_steps:
            raise ValueError("incomplete tape")
        rates.append(float(np.mean([s.mean() for s in per_step])))
    return rates


# ---------------------------------------------------------------------------
# Backward pass (STBP)
# ---------------------------------------------------------------------------


def backward_stbp(
    tape: TemporalTape, dL_dO: np.ndarray, net: Network, cfg: NeuronConfig
) -> list[np.ndarray]:
    """Weight gradients for a scalar loss with readout gradient ``dL_dO``.

    ``dL_dO`` has shape (T, B, C) matching the trace. The spike
    non-linearity contributes through the configured surrogate; the
    temporal recurrence carries ``tau`` times the reset-path factor
    (1 - s(t) under hard reset with s treated as constant, 1 under soft).
    In smooth mode the exact sigmoid derivative is used, including the
    reset product term, so the result is the true gradient of the smooth
    forward pass.
    """
    dL_dO = np.asarray(dL_dO, dtype=np.float64)
    n_layers = len(net.layers)
    if len(tape.inputs) != n_layers:
        raise ValueError("tape does not match network layer count")
    T = tape.num_steps
    if dL_dO.shape[0] != T or dL_dO.shape[-1] != net.num_classes:
        raise ValueError(
            f"dL_dO shape {dL_dO.shape} does not match trace (T={T}, C={net.num_classes})"
        )
    if not np.all(np.isfinite(dL_dO)):
        raise ValueError("dL_dO contains non-finite values")

    grads = [np.zeros_like(w) for w in net.weights]
    smooth = tape.spike_mode == "smooth"
    k = tape.smooth_k

    # Readout layer: linear in its per-step input. In accumulate mode
    # O(t) = sum_{t'<=t} W a(t'), so each step's contribution receives the
    # suffix sum of the output gradients.
    ro = n_layers - 1
    spec = net.layers[ro]
    g_eff = np.cumsum(dL_dO[::-1], axis=0)[::-1] if net.accumulate_readout else dL_dO
    g_below = []
    for t in range(T):
        a = tape.inputs[ro][t]
        grads[ro] += _layer_weight_grad(spec, g_eff[t], a)
        g_below.append(_layer_input_grad(spec, net.weights[ro], g_eff[t], a.shape))

    for l in range(n_layers - 2, -1, -1):
        spec = net.layers[l]
        # Gradient w.r.t. this layer's spikes: undo the pooling stack.
        g_s_list = []
        for t in range(T):
            g = g_below[t]
            for _ in range(spec.pool):
                g = _avg_unpool(g)
            g_s_list.append(g)

        g_below = [None] * T
        carry = 0.0  # dL/du_pre(t+1)
        for t in range(T - 1, -1, -1):
            u_pre = tape.u_pre[l][t]
            s = tape.spikes[l][t]
            if smooth:
                phi = k * s * (1.0 - s)
                if cfg.reset_mode == "hard":
                    reset_factor = (1.0 - s) - u_pre * phi
                else:
                    reset_factor = 1.0 - cfg.v_th * phi
            else:
                phi = surrogate_gradient(u_pre, cfg)
                reset_factor = (1.0 - s) if cfg.reset_mode == "hard" else 1.0
            g_upre = g_s_list[t] * phi + cfg.tau * reset_factor * carry
            carry = g_upre
            a = tape.inputs[l][t]
            grads[l] += _layer_weight_grad(spec, g_upre, a)
            g_below[t] = _layer_input_grad(spec, net.weights[l], g_upre, a.shape)

    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path, net: Network, cfg: NeuronConfig, run_config: dict | None = None
) -> None:
    """Write a versioned binary checkpoint (magic ``SPKM``).

    Layout: magic, u32 version, u32 header length, JSON header (layer
    specs, neuron config, run config), then per-layer little-endian
    float32 weights in layer order.
    """
    header = {
        "layers": [
            {
                "kind": l.kind,
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "kernel": l.kernel,
                "c_in": l.c_in,
                "c_out": l.c_out,
                "padding": l.padding,
                "pool": l.pool,
            }
            for l in net.layers
        ],
        "neuron": {
            "tau": cfg.tau,
            "v_th": cfg.v_th,
            "reset_mode": cfg.reset_mode,
            "surrogate": cfg.surrogate,
            "gamma": cfg.gamma,
            "width": cfg.width,
        },
        "accumulate_readout": net.accumulate_readout,
        "run_config": run_config,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for w in net.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(Network, NeuronConfig, run_config)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header payload")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    layers = [LayerSpec(**entry) for entry in header["layers"]]
    cfg = NeuronConfig(**header["neuron"])

    weights = []
    offset = 12 + header_len
    for spec in layers:
        shape = spec.weight_shape()
        nbytes = int(np.prod(shape)) * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated weight payload")
        weights.append(
            np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        )
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after weights")
    net = Network(layers, weights, bool(header.get("accumulate_readout", False)))
    return net, cfg, header.get("run_config")
