"""Feed-forward network description, parameter store, forward pass, checkpoints.

A Network is an ordered list of layer specs plus a dict of parameter tensors
addressed by ParamId = (layer_index, role). Roles are "weight", "bias",
"bn_gamma", "bn_beta"; BatchNorm running statistics are state, not
parameters. Parameter tensors are rebound (never mutated in place) so tapes
recorded against old values stay valid.

Views: anything with a `.network` attribute (the base Network) and an
`effective_params()` method can be passed wherever a Network is accepted;
`forward`, bound propagation, and the losses resolve parameters through that
protocol. A Network is its own trivial view. Views always run BatchNorm with
frozen running statistics.

Checkpoint container (version 1), all multi-byte integers little-endian:

    bytes 0..7    magic b"CACTUS01"
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes of UTF-8 JSON header
    then          raw section payloads, concatenated in header order

The JSON header holds {"version": 1, "layers": [...], "input_shape": ...,
"mode": ..., "meta": {...}, "sections": [{"name", "dtype", "shape"}, ...]}.
Parameter sections are named "param:<layer>:<role>", BatchNorm state
"bn_mean:<layer>" / "bn_var:<layer>"; extra sections (optimizer moments,
masks) use caller-chosen names. Arrays are serialized as raw little-endian
bytes of the stated dtype, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, ShapeError

ROLE_ORDER = {"weight": 0, "bias": 1, "bn_gamma": 2, "bn_beta": 3}


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    has_bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class BatchNorm:
    features: int
    momentum: float = 0.1
    eps: float = 1e-5


LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "flatten": Flatten, "batchnorm": BatchNorm}


def _kind_name(layer) -> str:
    for name, cls in LAYER_KINDS.items():
        if isinstance(layer, cls):
            return name
    raise TypeError(f"unknown layer spec {layer!r}")


class Network:
    """Layer specs plus parameters; mode is "train" or "eval"."""

    def __init__(self, layers, params, bn_mean, bn_var, input_shape=None, mode="train"):
        self.layers = tuple(layers)
        self.params = params
        self.bn_mean = bn_mean
        self.bn_var = bn_var
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.mode = mode

    @property
    def network(self) -> "Network":
        return self

    def effective_params(self) -> dict:
        return self.params

    def param_ids(self) -> list:
        """All ParamIds in the canonical (layer, role) order."""
        return sorted(self.params.keys(), key=lambda pid: (pid[0], ROLE_ORDER[pid[1]]))

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_features
            if isinstance(layer, Conv2d):
                raise ShapeError("network does not end in a Dense layer")
        raise ShapeError("network has no Dense layer")

    def clone(self) -> "Network":
        """Deep copy: fresh parameter tensors and BN state arrays."""
        params = {pid: T.Tensor(np.array(p.data)) for pid, p in self.params.items()}
        bn_mean = {i: np.array(v) for i, v in self.bn_mean.items()}
        bn_var = {i: np.array(v) for i, v in self.bn_var.items()}
        return Network(self.layers, params, bn_mean, bn_var, self.input_shape, self.mode)

    def __repr__(self) -> str:
        return f"Network(layers={len(self.layers)}, params={self.num_params()}, mode={self.mode!r})"


class WeightShiftView:
    """View evaluating the base network at params + shift.

    Shifts are held as tensors: when the base parameters are watched on a
    tape, gradients flow to them with identity Jacobian (the shift acts as a
    constant); conversely, watching the shift tensors gives the gradient with
    respect to the perturbation itself.
    """

    def __init__(self, network: Network, shifts: dict):
        self.network = network
        self.shifts = {
            pid: (s if isinstance(s, T.Tensor) else T.Tensor(s)) for pid, s in shifts.items()
        }

    def effective_params(self) -> dict:
        out = {}
        for pid, p in self.network.params.items():
            s = self.shifts.get(pid)
            out[pid] = T.add(p, s) if s is not None else p
        return out


def _validate_chain(layers, input_shape=None):
    """Pairwise (and, when input_shape is given, full) shape validation.

    Returns the propagated per-layer output shapes when input_shape is known,
    else None. Shapes exclude the batch axis: (features,) or (C, H, W).
    """
    shape = tuple(input_shape) if input_shape is not None else None
    shapes = []
    prev = None
    for idx, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if shape is not None:
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ShapeError(
                        f"layer {idx} (Dense): expects ({layer.in_features},), got {shape}"
                        + (f" after layer {idx - 1} ({_kind_name(prev)})" if prev else "")
                    )
                shape = (layer.out_features,)
            elif isinstance(prev, Dense) and prev.out_features != layer.in_features:
                raise ShapeError(
                    f"layers {idx - 1} -> {idx} (Dense -> Dense): "
                    f"{prev.out_features} outputs feed {layer.in_features} inputs"
                )
        elif isinstance(layer, Conv2d):
            if shape is not None:
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(
                        f"layer {idx} (Conv2d): expects ({layer.in_channels}, H, W), got {shape}"
                    )
                c, h, w = shape
                ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if ho <= 0 or wo <= 0:
                    raise ShapeError(
                        f"layer {idx} (Conv2d): kernel {layer.kernel} does not fit input {shape}"
                    )
                shape = (layer.out_channels, ho, wo)
            elif isinstance(prev, Conv2d) and prev.out_channels != layer.in_channels:
                raise ShapeError(
                    f"layers {idx - 1} -> {idx} (Conv2d -> Conv2d): "
                    f"{prev.out_channels} channels feed {layer.in_channels}"
                )
        elif isinstance(layer, BatchNorm):
            feat = None
            if shape is not None:
                feat = shape[0]
            elif isinstance(prev, Conv2d):
                feat = prev.out_channels
            elif isinstance(prev, Dense):
                feat = prev.out_features
            if feat is not None and feat != layer.features:
                raise ShapeError(
                    f"layer {idx} (BatchNorm): features {layer.features} != incoming {feat}"
                )
        elif isinstance(layer, Flatten):
            if shape is not None:
                shape = (int(np.prod(shape)),)
        elif not isinstance(layer, ReLU):
            raise TypeError(f"unknown layer spec at index {idx}: {layer!r}")
        shapes.append(shape)
        prev = layer
    return shapes if input_shape is not None else None


def build(layers, seed: int, input_shape=None) -> Network:
    """Construct a network with Kaiming-uniform (fan-in) weights.

    Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero, BatchNorm
    gamma 1 / beta 0 with running mean 0 / variance 1. Fully determined by
    the seed: draws happen in layer order, weight before bias.
    """
    layers = tuple(layers)
    _validate_chain(layers, input_shape)
    rng = np.random.default_rng(seed)
    params: dict = {}
    bn_mean: dict = {}
    bn_var: dict = {}
    for idx, layer in enumerate(layers):
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / layer.in_features)
            w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            params[(idx, "weight")] = T.Tensor(w)
            if layer.has_bias:
                params[(idx, "bias")] = T.Tensor(np.zeros(layer.out_features))
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(
                -bound, bound, size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            )
            params[(idx, "weight")] = T.Tensor(w)
            if layer.has_bias:
                params[(idx, "bias")] = T.Tensor(np.zeros(layer.out_channels))
        elif isinstance(layer, BatchNorm):
            params[(idx, "bn_gamma")] = T.Tensor(np.ones(layer.features))
            params[(idx, "bn_beta")] = T.Tensor(np.zeros(layer.features))
            bn_mean[idx] = np.zeros(layer.features)
            bn_var[idx] = np.ones(layer.features)
    return Network(layers, params, bn_mean, bn_var, input_shape, mode="train")


def forward(netlike, x, bn: str = "auto") -> T.Tensor:
    """Logits for a batch x of shape (N,) + input_shape.

    bn: "auto" uses batch statistics (and updates running stats) only when
    `netlike` is a bare Network in train mode; "running" forces frozen
    statistics; "batch" forces batch statistics without updating state.
    Views always run with frozen statistics under "auto".
    """
    net = netlike.network
    params = netlike.effective_params()
    if bn == "auto":
        bn = "train" if (netlike is net and net.mode == "train") else "running"
    if bn not in ("train", "batch", "running"):
        raise ValueError(f"forward: unknown bn mode {bn!r}")

    t = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if t.ndim < 2:
        raise ShapeError(f"forward: input must include a batch axis, got shape {t.shape}")
    if net.input_shape is not None and tuple(t.shape[1:]) != net.input_shape:
        raise ShapeError(f"forward: input shape {tuple(t.shape[1:])} != expected {net.input_shape}")

    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            if t.ndim != 2 or t.shape[1] != layer.in_features:
                raise ShapeError(
                    f"layer {idx} (Dense): expects (N, {layer.in_features}), got {t.shape}"
                )
            t = T.matmul(t, params[(idx, "weight")])
            if layer.has_bias:
                t = T.add(t, params[(idx, "bias")])
        elif isinstance(layer, Conv2d):
            b = params.get((idx, "bias"))
            t = T.conv2d(t, params[(idx, "weight")], b, stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, ReLU):
            t = T.relu(t)
        elif isinstance(layer, Flatten):
            t = T.reshape(t, (t.shape[0], -1))
        elif isinstance(layer, BatchNorm):
            t = _batchnorm_forward(net, params, idx, layer, t, bn)
    if t.ndim != 2:
        raise ShapeError(f"forward: network output has shape {t.shape}, expected (N, classes)")
    return t


def _batchnorm_forward(net, params, idx, layer: BatchNorm, t, bn: str):
    axes = (0,) if t.ndim == 2 else (0, 2, 3)
    if t.shape[1] != layer.features:
        raise ShapeError(f"layer {idx} (BatchNorm): features {layer.features} != input {t.shape}")
    if bn in ("train", "batch"):
        m = t.data.mean(axis=axes)
        v = t.data.var(axis=axes)
        if bn == "train":
            n = t.data.size / layer.features
            unbiased = v * (n / max(n - 1.0, 1.0))
            mom = layer.momentum
            net.bn_mean[idx] = (1.0 - mom) * net.bn_mean[idx] + mom * m
            net.bn_var[idx] = (1.0 - mom) * net.bn_var[idx] + mom * unbiased
    else:
        m = net.bn_mean[idx]
        v = net.bn_var[idx]
    inv = 1.0 / np.sqrt(v + layer.eps)
    ndim = t.ndim
    shaped = (lambda a: a if ndim == 2 else a.reshape(1, -1, 1, 1))
    gamma = params[(idx, "bn_gamma")]
    beta = params[(idx, "bn_beta")]
    xhat = T.mul(T.sub(t, shaped(m)), shaped(inv))
    g = gamma if ndim == 2 else T.reshape(gamma, (1, layer.features, 1, 1))
    b = beta if ndim == 2 else T.reshape(beta, (1, layer.features, 1, 1))
    return T.add(T.mul(xhat, g), b)


def predict(netlike, x) -> np.ndarray:
    """Argmax class per sample (ties to the lowest index); never updates BN state."""
    logits = forward(netlike, x, bn="running")
    return np.argmax(logits.data, axis=1)


def preset_layers(name: str, input_shape, n_classes: int = 10, hidden=(128, 128)) -> list:
    """Named architectures. "mlp" and "linear" accept any input shape (multi-axis
    inputs are flattened first); "conv3" and "cnn7" expect (C, H, W) inputs."""
    if name in ("linear", "mlp"):
        d = 1
        for s in input_shape:
            d *= int(s)
        layers: list = [Flatten()] if len(input_shape) > 1 else []
        if name == "linear":
            layers.append(Dense(d, n_classes))
            return layers
        prev = d
        for h in hidden:
            layers += [Dense(prev, h), ReLU()]
            prev = h
        layers.append(Dense(prev, n_classes))
        return layers
    if name == "conv3":
        c, h, w = input_shape
        layers = [
            Conv2d(c, 8, kernel=3, stride=2, padding=1),
            ReLU(),
            Conv2d(8, 16, kernel=3, stride=2, padding=1),
            ReLU(),
            Flatten(),
        ]
        ho, wo = (h + 1) // 2, (w + 1) // 2
        ho, wo = (ho + 1) // 2, (wo + 1) // 2
        layers.append(Dense(16 * ho * wo, n_classes))
        return layers
    if name == "cnn7":
        c, h, w = input_shape
        chans = [64, 64, 128, 128, 128]
        strides = [1, 1, 2, 1, 1]
        layers = []
        prev_c, ph, pw = c, h, w
        for ch, st in zip(chans, strides):
            layers += [Conv2d(prev_c, ch, kernel=3, stride=st, padding=1), BatchNorm(ch), ReLU()]
            ph = (ph + 2 - 3) // st + 1
            pw = (pw + 2 - 3) // st + 1
            prev_c = ch
        layers += [Flatten(), Dense(prev_c * ph * pw, 512), BatchNorm(512), ReLU(), Dense(512, n_classes)]
        return layers
    raise ConfigError(f"unknown architecture {name!r}")


def flatten_params(net: Network) -> np.ndarray:
    """Concatenation of all parameter tensors in ParamId order."""
    return np.concatenate([net.params[pid].data.reshape(-1) for pid in net.param_ids()])


def assign_flat(net: Network, vec: np.ndarray) -> None:
    """Inverse of flatten_params; rebinds each parameter tensor's data."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != net.num_params():
        raise ShapeError(f"assign_flat: got {vec.size} values for {net.num_params()} parameters")
    off = 0
    for pid in net.param_ids():
        p = net.params[pid]
        n = p.data.size
        p.data = vec[off : off + n].reshape(p.data.shape).copy()
        off += n


MAGIC = b"CACTUS01"


def _layer_to_json(layer) -> dict:
    d = {"kind": _kind_name(layer)}
    for f in fields(layer):
        d[f.name] = getattr(layer, f.name)
    return d


def _layer_from_json(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise DataFormatError(f"checkpoint: unknown layer kind {kind!r}")
    try:
        return cls(**d)
    except TypeError as e:
        raise DataFormatError(f"checkpoint: bad fields for layer {kind!r}: {e}") from None


def save_checkpoint(path, net: Network, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write the container described in the module docstring.

    `meta` must be JSON-serializable; `extra` maps section names to numpy
    arrays stored alongside the parameters (optimizer state, masks, ...).
    """
    sections: list[tuple[str, np.ndarray]] = []
    for pid in net.param_ids():
        sections.append((f"param:{pid[0]}:{pid[1]}", net.params[pid].data))
    for idx in sorted(net.bn_mean):
        sections.append((f"bn_mean:{idx}", net.bn_mean[idx]))
        sections.append((f"bn_var:{idx}", net.bn_var[idx]))
    for name in sorted(extra or {}):
        sections.append((name, np.asarray(extra[name])))

    header = {
        "version": 1,
        "layers": [_layer_to_json(l) for l in net.layers],
        "input_shape": list(net.input_shape) if net.input_shape is not None else None,
        "mode": net.mode,
        "meta": meta or {},
        "sections": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)} for name, arr in sections
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in sections:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


@dataclass
class Checkpoint:
    net: Network
    meta: dict
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: corrupt header: {e}") from None
    if header.get("version") != 1:
        raise DataFormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")

    layers = tuple(_layer_from_json(d) for d in header["layers"])
    arrays = {}
    off = 12 + hlen
    for sec in header["sections"]:
        dtype = np.dtype(sec["dtype"])
        shape = tuple(sec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise DataFormatError(f"{path}: truncated section {sec['name']!r}")
        arrays[sec["name"]] = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes

    params = {}
    bn_mean = {}
    bn_var = {}
    extra = {}
    for name, arr in arrays.items():
        parts = name.split(":")
        if parts[0] == "param":
            params[(int(parts[1]), parts[2])] = T.Tensor(arr)
        elif parts[0] == "bn_mean":
            bn_mean[int(parts[1])] = arr
        elif parts[0] == "bn_var":
            bn_var[int(parts[1])] = arr
        else:
            extra[name] = arr
    input_shape = header.get("input_shape")
    net = Network(layers, params, bn_mean, bn_var, input_shape, header.get("mode", "eval"))
    expected = {(i, r) for i, l in enumerate(layers) for r in _expected_roles(l)}
    if set(params.keys()) != expected:
        raise DataFormatError(f"{path}: parameter sections do not match architecture")
    return Checkpoint(net, header.get("meta", {}), extra)


def _expected_roles(layer) -> list:
    if isinstance(layer, (Dense, Conv2d)):
        return ["weight", "bias"] if layer.has_bias else ["weight"]
    if isinstance(layer, BatchNorm):
        return ["bn_gamma", "bn_beta"]
    return []
