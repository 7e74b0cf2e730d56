"""Interval bound propagation, its classification loss, and certification.

Affine layers propagate the box in center/radius form (mu' = W mu + b,
r' = |W| r); monotone layers apply endpoint-wise. BatchNorm always enters
bound propagation as a fixed affine map built from the running statistics;
batch statistics are never derived from perturbed inputs.

Everything here records on the active gradient tape, so the loss
backpropagates both to network parameters and to the box center (the latter
is what drives the box-center attack).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .network import BatchNorm, Conv2d, Dense, Flatten, ReLU


@dataclass
class IntervalTensor:
    """Elementwise bounds; invariant lower <= upper."""

    lower: T.Tensor
    upper: T.Tensor

    def __post_init__(self):
        if not isinstance(self.lower, T.Tensor):
            self.lower = T.Tensor(self.lower)
        if not isinstance(self.upper, T.Tensor):
            self.upper = T.Tensor(self.upper)
        if self.lower.shape != self.upper.shape:
            raise ShapeError(
                f"IntervalTensor: lower {self.lower.shape} != upper {self.upper.shape}"
            )
        if not np.all(self.lower.data <= self.upper.data):
            raise ValueError("IntervalTensor: lower bound exceeds upper bound")

    @property
    def shape(self):
        return self.lower.shape

    def center_radius(self) -> tuple:
        mu = T.scale(T.add(self.lower, self.upper), 0.5)
        r = T.scale(T.sub(self.upper, self.lower), 0.5)
        return mu, r


def input_box(x, radius: float, domain=(0.0, 1.0)) -> IntervalTensor:
    """Box of the given radius around x, clipped to the input domain.

    x may be a (tracked) Tensor; the resulting bounds then carry gradients
    back to the center. radius must be >= 0.
    """
    if radius < 0:
        raise ValueError(f"input_box: negative radius {radius}")
    xt = x if isinstance(x, T.Tensor) else T.Tensor(x)
    lo, hi = domain
    lower = T.clamp(T.add(xt, -float(radius)), lo, hi)
    upper = T.clamp(T.add(xt, float(radius)), lo, hi)
    return IntervalTensor(lower, upper)


def ibp_forward(netlike, box: IntervalTensor) -> IntervalTensor:
    """Sound elementwise bounds on the logits over the input box."""
    net = netlike.network
    params = netlike.effective_params()
    mu, r = box.center_radius()
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Dense):
            if mu.ndim != 2 or mu.shape[1] != layer.in_features:
                raise ShapeError(f"layer {idx} (Dense): expects (N, {layer.in_features}), got {mu.shape}")
            w = params[(idx, "weight")]
            mu = T.matmul(mu, w)
            if layer.has_bias:
                mu = T.add(mu, params[(idx, "bias")])
            r = T.matmul(r, T.absolute(w))
        elif isinstance(layer, Conv2d):
            w = params[(idx, "weight")]
            b = params.get((idx, "bias"))
            mu = T.conv2d(mu, w, b, stride=layer.stride, padding=layer.padding)
            r = T.conv2d(r, T.absolute(w), None, stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, ReLU):
            lower = T.relu(T.sub(mu, r))
            upper = T.relu(T.add(mu, r))
            mu = T.scale(T.add(lower, upper), 0.5)
            r = T.scale(T.sub(upper, lower), 0.5)
        elif isinstance(layer, Flatten):
            mu = T.reshape(mu, (mu.shape[0], -1))
            r = T.reshape(r, (r.shape[0], -1))
        elif isinstance(layer, BatchNorm):
            mu, r = _bn_interval(net, params, idx, layer, mu, r)
    return IntervalTensor(T.sub(mu, r), T.add(mu, r))


def _bn_interval(net, params, idx, layer: BatchNorm, mu, r):
    inv = 1.0 / np.sqrt(net.bn_var[idx] + layer.eps)
    gamma = params[(idx, "bn_gamma")]
    beta = params[(idx, "bn_beta")]
    a = T.mul(gamma, inv)
    shift = T.sub(beta, T.mul(a, net.bn_mean[idx]))
    if mu.ndim == 4:
        a = T.reshape(a, (1, layer.features, 1, 1))
        shift = T.reshape(shift, (1, layer.features, 1, 1))
    mu = T.add(T.mul(mu, a), shift)
    r = T.mul(r, T.absolute(a))
    return mu, r


def _worst_logits(bounds: IntervalTensor, y: np.ndarray) -> T.Tensor:
    """Upper bound everywhere except the true class, which gets its lower bound."""
    onehot = np.zeros(bounds.lower.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return T.add(bounds.upper, T.mul(T.sub(bounds.lower, bounds.upper), onehot))


def ibp_loss(bounds: IntervalTensor, y, reduction: str = "mean") -> T.Tensor:
    """log(1 + sum_{i != y} exp(upper_i - lower_y)), batched.

    Equals softmax cross-entropy on the worst-case logit vector, which is how
    it is computed (numerically stable log-sum-exp).
    """
    y = np.asarray(y)
    if bounds.lower.ndim != 2:
        raise ShapeError(f"ibp_loss: bounds must be (N, K), got {bounds.lower.shape}")
    return T.softmax_cross_entropy(_worst_logits(bounds, y), y, reduction=reduction)


def ibp_loss_at(netlike, x, y, radius: float, reduction: str = "mean") -> T.Tensor:
    """ibp_loss of the radius-box around x; differentiable in x and params."""
    return ibp_loss(ibp_forward(netlike, input_box(x, radius)), y, reduction=reduction)


def certify(netlike, x, y, eps: float) -> np.ndarray:
    """Per-sample soundness verdicts: True = certified, False = unknown.

    A sample is certified when every pairwise logit margin o_y - o_i (i != y)
    is provably positive over the eps-box. Margins are bounded by propagating
    the box to the penultimate activation and applying the final Dense layer
    in row-difference form, which is tighter than comparing independent
    per-logit bounds. The final layer must be Dense.
    """
    net = netlike.network
    params = netlike.effective_params()
    if not isinstance(net.layers[-1], Dense):
        raise ShapeError("certify: network must end in a Dense layer")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    k = net.layers[-1].out_features
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"certify: labels out of range [0, {k})")

    head = _PartialView(netlike, len(net.layers) - 1)
    box = input_box(x, eps)
    pen = ibp_forward(head, box)
    mu = ((pen.lower.data + pen.upper.data) / 2.0)
    r = ((pen.upper.data - pen.lower.data) / 2.0)

    last = len(net.layers) - 1
    w = params[(last, "weight")].data
    b = params[(last, "bias")].data if net.layers[-1].has_bias else np.zeros(k)

    certified = np.ones(n, dtype=bool)
    for yi in np.unique(y):
        rows = np.nonzero(y == yi)[0]
        d = w[:, yi : yi + 1] - w  # (in, K): column j holds w_y - w_j
        margin_lb = mu[rows] @ d - r[rows] @ np.abs(d) + (b[yi] - b)
        margin_lb[:, yi] = np.inf
        certified[rows] = np.all(margin_lb > 0.0, axis=1)
    return certified


class _PartialView:
    """View of a prefix of the layers (used to stop before the final Dense)."""

    def __init__(self, netlike, upto: int):
        base = netlike.network
        self.network = _Prefix(base, upto)
        self._params = netlike.effective_params()

    def effective_params(self):
        return self._params


class _Prefix:
    def __init__(self, base, upto: int):
        self.layers = base.layers[:upto]
        self.bn_mean = base.bn_mean
        self.bn_var = base.bn_var
        self.input_shape = base.input_shape
        self.mode = "eval"

    @property
    def network(self):
        return self
