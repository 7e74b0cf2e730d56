"""Compression mechanisms: pruning masks and uniform affine quantization.

Pruning is rank-based: exactly floor(ratio * d) weights (or channels) are
zeroed per ranking scope, with ties broken by ascending ParamId and then by
element order (stable sort). Quantization is simulated: quantized values are
stored back as 64-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .network import Conv2d, Dense, Network

SCOPES = ("local", "global")
STRUCTURES = ("unstructured", "channel")
SCORES = ("l1", "l2", "grad_mag")


@dataclass(frozen=True)
class PruneSpec:
    """Fraction of weights removed, ranking scope/granularity, and score."""

    ratio: float
    scope: str = "local"
    structure: str = "unstructured"
    score: str = "l1"

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ConfigError(f"prune ratio must lie in [0, 1), got {self.ratio}")
        if self.scope not in SCOPES:
            raise ConfigError(f"prune scope must be one of {SCOPES}, got {self.scope!r}")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"prune structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.score not in SCORES:
            raise ConfigError(f"prune score must be one of {SCORES}, got {self.score!r}")


@dataclass
class PruningMask:
    """0/1 float masks for every parameter; non-target parameters are all-ones."""

    masks: dict
    spec: PruneSpec
    sparsity: float


def target_param_ids(net: Network) -> list:
    """Weight tensors of Dense/Conv2d layers, in canonical order."""
    return [
        pid
        for pid in net.param_ids()
        if pid[1] == "weight" and isinstance(net.layers[pid[0]], (Dense, Conv2d))
    ]


def _element_scores(w: np.ndarray, score: str, g) -> np.ndarray:
    if score == "l1":
        return np.abs(w)
    if score == "l2":
        return w * w
    return np.abs(g * w)


def _channel_scores(layer, w: np.ndarray, score: str, g) -> np.ndarray:
    """One score per output channel (Dense columns, Conv2d output filters)."""
    axes = (0,) if isinstance(layer, Dense) else (1, 2, 3)
    if score == "l1":
        return np.abs(w).sum(axis=axes)
    if score == "l2":
        return np.sqrt((w * w).sum(axis=axes))
    return np.sqrt(((g * w) ** 2).sum(axis=axes))


def _channel_count(layer, w: np.ndarray) -> int:
    return w.shape[1] if isinstance(layer, Dense) else w.shape[0]


def _zero_channels(layer, mask: np.ndarray, channels: np.ndarray) -> None:
    if isinstance(layer, Dense):
        mask[:, channels] = 0.0
    else:
        mask[channels] = 0.0


def compute_mask(net: Network, spec: PruneSpec, grads: dict | None = None) -> PruningMask:
    """Mask for the current weights under the given ranking rules.

    grads (ParamId -> array) is required for the gradient-magnitude score.
    Structured pruning errors out rather than leave any layer with zero
    surviving channels.
    """
    targets = target_param_ids(net)
    if spec.score == "grad_mag":
        if grads is None:
            raise ConfigError("grad_mag pruning score requires a gradient snapshot")
        missing = [pid for pid in targets if pid not in grads]
        if missing:
            raise ConfigError(f"gradient snapshot missing parameters {missing}")

    masks = {pid: np.ones_like(p.data) for pid, p in net.params.items()}

    if spec.structure == "unstructured":
        scores = {
            pid: _element_scores(net.params[pid].data, spec.score, grads.get(pid) if grads else None)
            for pid in targets
        }
        if spec.scope == "local":
            for pid in targets:
                flat = scores[pid].ravel()
                k = int(np.floor(spec.ratio * flat.size))
                if k:
                    order = np.argsort(flat, kind="stable")
                    masks[pid].ravel()[order[:k]] = 0.0
        else:
            flat_all = np.concatenate([scores[pid].ravel() for pid in targets])
            k = int(np.floor(spec.ratio * flat_all.size))
            if k:
                order = np.argsort(flat_all, kind="stable")
                removed = np.zeros(flat_all.size, dtype=bool)
                removed[order[:k]] = True
                off = 0
                for pid in targets:
                    n = scores[pid].size
                    masks[pid].ravel()[removed[off : off + n]] = 0.0
                    off += n
    else:
        layer_info = []
        for pid in targets:
            layer = net.layers[pid[0]]
            w = net.params[pid].data
            cs = _channel_scores(layer, w, spec.score, grads.get(pid) if grads else None)
            layer_info.append((pid, layer, w, cs))
        if spec.scope == "local":
            for pid, layer, w, cs in layer_info:
                c = _channel_count(layer, w)
                k = int(np.floor(spec.ratio * c))
                if k >= c:
                    raise ConfigError(f"pruning would remove all channels of layer {pid[0]}")
                if k:
                    order = np.argsort(cs, kind="stable")
                    _zero_channels(layer, masks[pid], order[:k])
        else:
            # Channels compete across layers on size-normalized scores.
            normed = []
            for pid, layer, w, cs in layer_info:
                per_channel_size = w.size / _channel_count(layer, w)
                normed.append(cs / per_channel_size)
            pooled = np.concatenate(normed)
            total = pooled.size
            k = int(np.floor(spec.ratio * total))
            if k:
                order = np.argsort(pooled, kind="stable")
                removed = np.zeros(total, dtype=bool)
                removed[order[:k]] = True
                off = 0
                for pid, layer, w, cs in layer_info:
                    c = cs.size
                    gone = np.nonzero(removed[off : off + c])[0]
                    if gone.size == c:
                        raise ConfigError(f"pruning would remove all channels of layer {pid[0]}")
                    _zero_channels(layer, masks[pid], gone)
                    off += c

    d_target = sum(net.params[pid].data.size for pid in targets)
    zeros = sum(int((masks[pid] == 0.0).sum()) for pid in targets)
    return PruningMask(masks, spec, zeros / d_target if d_target else 0.0)


class MaskedView:
    """Network view computing on params * mask; masked weights get zero gradient."""

    def __init__(self, netlike, mask: PruningMask):
        self.network = netlike.network
        self.mask = mask
        for pid, p in self.network.params.items():
            m = mask.masks.get(pid)
            if m is None or m.shape != p.data.shape:
                raise ShapeError(f"mask misaligned with parameter {pid}")
        self._mask_tensors = {
            pid: T.Tensor(m) for pid, m in mask.masks.items() if not np.all(m == 1.0)
        }

    def effective_params(self) -> dict:
        out = {}
        for pid, p in self.network.params.items():
            m = self._mask_tensors.get(pid)
            out[pid] = T.mul(p, m) if m is not None else p
        return out


def apply_mask(netlike, mask: PruningMask) -> MaskedView:
    return MaskedView(netlike, mask)


def bake_mask(net: Network, mask: PruningMask) -> Network:
    """Clone with the mask multiplied into the stored weights."""
    out = net.clone()
    for pid, m in mask.masks.items():
        if pid not in out.params:
            raise ShapeError(f"mask names unknown parameter {pid}")
        out.params[pid].data = out.params[pid].data * m
    return out


def round_half_away_from_zero(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def lattice_round(v, step: float) -> np.ndarray:
    """Nearest multiple of step, halves rounding up (toward +infinity)."""
    if step <= 0:
        raise ConfigError(f"lattice step must be > 0, got {step}")
    return step * np.floor(np.asarray(v, dtype=np.float64) / step + 0.5)


@dataclass(frozen=True)
class QuantSpec:
    """Uniform affine quantizer: levels q * scale + zero_point for integer
    q in [q_min, q_max]; q_step equals scale."""

    bits: int
    scale: float
    zero_point: float
    q_min: int
    q_max: int

    def __post_init__(self):
        if self.bits < 2:
            raise ConfigError(f"quantization bits must be >= 2, got {self.bits}")
        if self.scale <= 0:
            raise ConfigError(f"quantization scale must be > 0, got {self.scale}")
        if self.q_max - self.q_min != 2**self.bits - 1:
            raise ConfigError("q_max - q_min must equal 2^bits - 1")

    @property
    def q_step(self) -> float:
        return self.scale

    def range(self) -> tuple:
        """Representable value range [lowest level, highest level]."""
        return (self.q_min * self.scale + self.zero_point, self.q_max * self.scale + self.zero_point)


def calibrate_quant(weights: np.ndarray, bits: int) -> QuantSpec:
    """Min/max calibration: the lowest level lands exactly on min(weights)
    and the highest on max(weights). A constant tensor degenerates to
    scale 1 with the constant as the zero point (quantization is then exact)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("cannot calibrate an empty weight tensor")
    q_min = -(2 ** (bits - 1))
    q_max = 2 ** (bits - 1) - 1
    wmin = float(w.min())
    wmax = float(w.max())
    if wmax <= wmin:
        return QuantSpec(bits, 1.0, wmin, q_min, q_max)
    scale = (wmax - wmin) / (q_max - q_min)
    zero = wmin - q_min * scale
    return QuantSpec(bits, scale, zero, q_min, q_max)


def quantize_values(w, spec: QuantSpec) -> np.ndarray:
    q = round_half_away_from_zero((np.asarray(w, dtype=np.float64) - spec.zero_point) / spec.scale)
    return np.clip(q, spec.q_min, spec.q_max) * spec.scale + spec.zero_point


QUANT_ROLES = ("weight", "bias")


def calibrate_network(net: Network, bits: int, granularity: str = "per_layer") -> dict:
    """QuantSpec per quantized ParamId (weights and biases of Dense/Conv2d).

    per_layer: one spec from the pooled weight+bias statistics of each layer;
    per_tensor: one spec per parameter tensor.
    """
    if granularity not in ("per_layer", "per_tensor"):
        raise ConfigError(f"granularity must be per_layer or per_tensor, got {granularity!r}")
    ids = [
        pid
        for pid in net.param_ids()
        if pid[1] in QUANT_ROLES and isinstance(net.layers[pid[0]], (Dense, Conv2d))
    ]
    specs = {}
    if granularity == "per_tensor":
        for pid in ids:
            specs[pid] = calibrate_quant(net.params[pid].data, bits)
    else:
        by_layer: dict = {}
        for pid in ids:
            by_layer.setdefault(pid[0], []).append(pid)
        for layer_idx, pids in by_layer.items():
            pooled = np.concatenate([net.params[pid].data.ravel() for pid in pids])
            spec = calibrate_quant(pooled, bits)
            for pid in pids:
                specs[pid] = spec
    return specs


def quantize_weights(net: Network, bits: int | None = None, granularity: str = "per_layer", specs: dict | None = None):
    """Clone of the network with quantized parameters, plus the specs used.

    BatchNorm parameters and running statistics are untouched. Quantizing an
    already-quantized network with the same specs is a no-op (idempotence).
    """
    if specs is None:
        if bits is None:
            raise ConfigError("quantize_weights needs either bits or explicit specs")
        specs = calibrate_network(net, bits, granularity)
    out = net.clone()
    for pid, spec in specs.items():
        if pid not in out.params:
            raise ShapeError(f"quant spec names unknown parameter {pid}")
        out.params[pid].data = quantize_values(out.params[pid].data, spec)
    return out, specs


def ste_quantize(t, spec: QuantSpec) -> T.Tensor:
    """Forward: quantize. Backward: identity inside the clamp range, zero
    outside (straight-through estimator)."""
    t = t if isinstance(t, T.Tensor) else T.Tensor(t)
    u = (t.data - spec.zero_point) / spec.scale
    q = round_half_away_from_zero(u)
    out = np.clip(q, spec.q_min, spec.q_max) * spec.scale + spec.zero_point
    mask = (u >= spec.q_min) & (u <= spec.q_max)

    def backward(g):
        return (g * mask,)

    return T._record(out, (t,), backward)
