"""Compression-aware certified training.

The compression set holds the identity element plus pruned-view and
weight-perturbation-proxy elements; each batch the set is refreshed (masks
recomputed from current weights, sampled ratios redrawn), the per-element
combined losses are averaged, and one Adam step is taken on the average
(optionally one step per element).

Schedule: iterations are 1-based. For the first `warmup_iters` iterations
the effective mixing weight is 1 (standard loss only) and the effective
radius is 0; over the next `ramp_iters` iterations the weight ramps linearly
to `lambda_final` while the radius ramps linearly to its target; both stay
constant afterwards.

Reproducibility: each epoch draws its randomness from
numpy.random.default_rng([seed, epoch]) — shuffling, sampled prune ratios,
PGD initializations, everything — so resuming from an epoch-boundary
checkpoint consumes the identical random stream the uninterrupted run would
have. Metrics rows format floats with repr(), making CSV comparison
bit-exact.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attack import AttackConfig, AWPConfig, awp_loss, sabr_centers
from .bounds import ibp_loss_at
from .compress import PruneSpec, PruningMask, apply_mask, compute_mask
from .errors import ConfigError, DivergenceError
from .network import Network, forward, save_checkpoint


@dataclass
class Identity:
    """The uncompressed network itself; required in every compression set."""


@dataclass
class Prune:
    """A pruned-view element. ratio None means the set strategy draws it."""

    scope: str = "local"
    structure: str = "unstructured"
    score: str = "l1"
    ratio: float | None = None
    mask: PruningMask | None = None
    last_ratio: float | None = None


@dataclass
class QuantProxy:
    """Quantization stand-in: contributes the adversarial-weight loss."""

    awp: AWPConfig = field(default_factory=AWPConfig)


@dataclass(frozen=True)
class Fixed:
    """Prune elements use their own fixed ratios."""


@dataclass(frozen=True)
class Sampled:
    """Ratios drawn per refresh: uniform on [low, high], or from `choices`."""

    low: float = 0.25
    high: float = 0.75
    choices: tuple | None = None

    def draw(self, rng) -> float:
        if self.choices is not None:
            return float(self.choices[rng.integers(len(self.choices))])
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Progressive:
    """Ratio interpolates linearly from start to end across epochs."""

    start: float = 0.25
    end: float = 0.75

    def at(self, epoch: int, total_epochs: int) -> float:
        frac = epoch / max(total_epochs - 1, 1)
        return self.start + (self.end - self.start) * frac


class CompressionSet:
    """Ordered compression elements plus the ratio strategy for Prune slots."""

    def __init__(self, elements, strategy=Fixed()):
        elements = list(elements)
        if not elements:
            raise ConfigError("compression set must not be empty")
        if not any(isinstance(e, Identity) for e in elements):
            raise ConfigError("compression set must include the identity element")
        if isinstance(strategy, Fixed):
            for e in elements:
                if isinstance(e, Prune) and e.ratio is None:
                    raise ConfigError("Fixed strategy requires an explicit ratio on every Prune element")
        self.elements = elements
        self.strategy = strategy

    def needs_grad_snapshot(self) -> bool:
        return any(isinstance(e, Prune) and e.score == "grad_mag" for e in self.elements)

    def refresh(self, net: Network, *, rng, epoch: int = 0, total_epochs: int = 1, grads=None) -> None:
        """Recompute masks from current weights; redraw sampled ratios."""
        for e in self.elements:
            if not isinstance(e, Prune):
                continue
            if isinstance(self.strategy, Sampled):
                ratio = self.strategy.draw(rng)
            elif isinstance(self.strategy, Progressive):
                ratio = self.strategy.at(epoch, total_epochs)
            else:
                ratio = e.ratio
            spec = PruneSpec(ratio=ratio, scope=e.scope, structure=e.structure, score=e.score)
            e.mask = compute_mask(net, spec, grads=grads)
            e.last_ratio = ratio


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    warmup_iters: int = 250
    ramp_iters: int = 250
    lambda_final: float = 0.75
    seed: int = 0
    per_element_updates: bool = False
    checkpoint_every: int = 1
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.1))

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.lambda_final <= 1.0):
            raise ConfigError(f"lambda_final must lie in [0, 1], got {self.lambda_final}")
        if self.warmup_iters < 0 or self.ramp_iters < 0:
            raise ConfigError("warmup_iters and ramp_iters must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def schedule(iteration: int, cfg: TrainConfig) -> tuple:
    """(effective lambda, radius scale) for a 1-based iteration index."""
    w, r = cfg.warmup_iters, cfg.ramp_iters
    if iteration <= w:
        return 1.0, 0.0
    if r > 0 and iteration <= w + r:
        frac = (iteration - w) / r
        return 1.0 + (cfg.lambda_final - 1.0) * frac, frac
    return cfg.lambda_final, 1.0


@dataclass
class LossParts:
    loss: T.Tensor
    std: float
    cert: float
    logits: np.ndarray | None
    selection: object


def combined_loss(netlike, x, y, lam: float, attack_cfg: AttackConfig, rng=None, centers=None, bn: str = "auto", return_parts: bool = False):
    """lam * cross-entropy + (1 - lam) * box-center certified loss.

    With lam == 1 the certified term is skipped entirely (it would carry
    weight zero). Pass `centers` to freeze the box-center selection.
    """
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    y = np.asarray(y)
    logits = forward(netlike, x, bn=bn)
    std = T.softmax_cross_entropy(logits, y)
    if lam == 1.0 and centers is None:
        loss, cert_val = std, 0.0
    else:
        if centers is None:
            centers = sabr_centers(netlike, x, y, attack_cfg, rng=rng)
        cert = ibp_loss_at(netlike, centers, y, attack_cfg.resolved_tau())
        cert_val = cert.item()
        loss = T.add(T.scale(std, lam), T.scale(cert, 1.0 - lam))
    if return_parts:
        return LossParts(loss, std.item(), cert_val, logits.data, centers)
    return loss


def _element_loss(net, element, x, y, lam, attack_cfg, awp_default=None, rng=None, selection=None) -> LossParts:
    if isinstance(element, Identity):
        return combined_loss(net, x, y, lam, attack_cfg, rng=rng, centers=selection, return_parts=True)
    if isinstance(element, Prune):
        if element.mask is None:
            raise ConfigError("compression set not refreshed: Prune element has no mask")
        view = apply_mask(net, element.mask)
        return combined_loss(view, x, y, lam, attack_cfg, rng=rng, centers=selection, return_parts=True)
    if isinstance(element, QuantProxy):
        awp_cfg = element.awp if element.awp is not None else awp_default
        centers, perturbation = selection if selection is not None else (None, None)
        loss, std, cert, perturbation, centers = awp_loss(
            net, x, y, lam, attack_cfg, awp_cfg, rng=rng,
            perturbation=perturbation, centers=centers, return_parts=True,
        )
        return LossParts(loss, std, cert, None, (centers, perturbation))
    raise ConfigError(f"unknown compression element {element!r}")


@dataclass
class CactusLossResult:
    loss: T.Tensor
    element_losses: list
    std: float
    cert: float
    logits: np.ndarray
    selections: list


def cactus_loss(net, cset: CompressionSet, x, y, lam: float, attack_cfg: AttackConfig, awp_cfg=None, rng=None, selections=None) -> CactusLossResult:
    """Mean of per-element combined losses over the compression set.

    `selections` (aligned with the elements) freezes all attack/perturbation
    choices; when omitted they are drawn from rng in element order. The
    returned selections can be fed back in to re-evaluate the identical
    deterministic function (finite-difference testing relies on this).
    """
    if not isinstance(cset, CompressionSet):
        raise ConfigError("cactus_loss needs a CompressionSet")
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    elements = cset.elements
    parts = []
    for i, element in enumerate(elements):
        sel = selections[i] if selections is not None else None
        parts.append(_element_loss(net, element, x, y, lam, attack_cfg, awp_cfg, rng=rng, selection=sel))
    total = parts[0].loss
    for p in parts[1:]:
        total = T.add(total, p.loss)
    total = T.scale(total, 1.0 / len(parts))
    logits = next(p.logits for p, e in zip(parts, elements) if isinstance(e, Identity))
    return CactusLossResult(
        loss=total,
        element_losses=[p.loss.item() for p in parts],
        std=float(np.mean([p.std for p in parts])),
        cert=float(np.mean([p.cert for p in parts])),
        logits=logits,
        selections=[p.selection for p in parts],
    )


def refresh_set(net, cset: CompressionSet, batch=None, *, lam: float = 1.0, attack_cfg=None, rng, epoch: int = 0, total_epochs: int = 1) -> None:
    """Per-batch set refresh: recompute masks (and the gradient snapshot for
    gradient-magnitude scores) from the current weights."""
    grads = None
    if cset.needs_grad_snapshot():
        if batch is None:
            raise ConfigError("grad_mag pruning requires the current batch at refresh time")
        xb, yb = batch
        with T.stop_recording():
            with T.Tape() as tape:
                for p in net.params.values():
                    tape.watch(p)
                loss = combined_loss(net, xb, yb, lam, attack_cfg, rng=rng, bn="running")
            g = tape.gradient(loss)
        grads = {pid: g[p].data for pid, p in net.params.items()}
    cset.refresh(net, rng=rng, epoch=epoch, total_epochs=total_epochs, grads=grads)


class Adam:
    """Adam with L2 weight decay added to the gradient; updates rebind
    parameter arrays so recorded tapes stay valid."""

    def __init__(self, net: Network, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {pid: np.zeros_like(p.data) for pid, p in net.params.items()}
        self.v = {pid: np.zeros_like(p.data) for pid, p in net.params.items()}

    @classmethod
    def from_config(cls, net, cfg: TrainConfig) -> "Adam":
        return cls(net, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for pid in self.net.param_ids():
            p = self.net.params[pid]
            g = grads[pid]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[pid] = self.beta1 * self.m[pid] + (1.0 - self.beta1) * g
            self.v[pid] = self.beta2 * self.v[pid] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[pid] / bc1
            vhat = self.v[pid] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict:
        order = self.net.param_ids()
        return {
            "adam_m": np.concatenate([self.m[pid].reshape(-1) for pid in order]),
            "adam_v": np.concatenate([self.v[pid].reshape(-1) for pid in order]),
        }

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = int(t)
        total = sum(p.data.size for p in self.net.params.values())
        for name, store in (("adam_m", self.m), ("adam_v", self.v)):
            flat = arrays[name]
            if flat.size != total:
                raise ConfigError(
                    f"optimizer state {name} has {flat.size} values, expected {total}"
                )
            off = 0
            for pid in self.net.param_ids():
                n = store[pid].size
                store[pid] = flat[off : off + n].reshape(store[pid].shape).copy()
                off += n


METRIC_COLUMNS_FIXED = ["iter", "epoch", "lambda", "eps", "loss_total", "loss_std", "loss_cert"]


def metrics_header(n_elements: int) -> list:
    return METRIC_COLUMNS_FIXED + [f"elem_{i}" for i in range(n_elements)] + ["train_acc"]


def _format_row(row: dict, header: list) -> str:
    toks = []
    for col in header:
        v = row[col]
        toks.append(str(v) if isinstance(v, int) else repr(float(v)))
    return ",".join(toks)


@dataclass
class TrainResult:
    rows: list
    header: list
    checkpoints: list
    metrics_path: str | None


def train(net: Network, x, y, cfg: TrainConfig, cset: CompressionSet, out_dir=None, start_epoch: int = 0, adam: Adam | None = None) -> TrainResult:
    """Run the training loop; see the module docstring for semantics.

    Raises DivergenceError the moment any loss turns non-finite. When
    out_dir is given, metrics.csv is streamed row by row and a checkpoint is
    written every `checkpoint_every` epochs (always at the final epoch).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("training data is empty")
    net.mode = "train"
    adam = adam or Adam.from_config(net, cfg)
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    it = start_epoch * iters_per_epoch
    header = metrics_header(len(cset.elements))
    rows: list = []
    checkpoints: list = []

    metrics_path = None
    metrics_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        metrics_file = open(metrics_path, "w")
        metrics_file.write(",".join(header) + "\n")

    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            perm = rng.permutation(n)
            for b0 in range(0, n, cfg.batch_size):
                idx = perm[b0 : b0 + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                it += 1
                lam, radius_scale = schedule(it, cfg)
                acfg = cfg.attack.scaled(radius_scale)
                refresh_set(net, cset, (xb, yb), lam=lam, attack_cfg=acfg, rng=rng,
                            epoch=epoch, total_epochs=cfg.epochs)

                if cfg.per_element_updates:
                    elem_losses = []
                    stds, certs = [], []
                    logits = None
                    for element in cset.elements:
                        with T.Tape() as tape:
                            for p in net.params.values():
                                tape.watch(p)
                            part = _element_loss(net, element, xb, yb, lam, acfg, rng=rng)
                        val = part.loss.item()
                        if not np.isfinite(val):
                            raise DivergenceError(f"non-finite loss at iteration {it}")
                        g = tape.gradient(part.loss)
                        adam.step({pid: g[p].data for pid, p in net.params.items()})
                        elem_losses.append(val)
                        stds.append(part.std)
                        certs.append(part.cert)
                        if isinstance(element, Identity) and logits is None:
                            logits = part.logits
                    total_val = float(np.mean(elem_losses))
                    std_val = float(np.mean(stds))
                    cert_val = float(np.mean(certs))
                else:
                    with T.Tape() as tape:
                        for p in net.params.values():
                            tape.watch(p)
                        res = cactus_loss(net, cset, xb, yb, lam, acfg, rng=rng)
                    total_val = res.loss.item()
                    if not np.isfinite(total_val):
                        raise DivergenceError(f"non-finite loss at iteration {it}")
                    g = tape.gradient(res.loss)
                    adam.step({pid: g[p].data for pid, p in net.params.items()})
                    elem_losses = res.element_losses
                    std_val, cert_val, logits = res.std, res.cert, res.logits

                acc = float(np.mean(np.argmax(logits, axis=1) == yb))
                row = {
                    "iter": it, "epoch": epoch, "lambda": lam, "eps": acfg.epsilon,
                    "loss_total": total_val, "loss_std": std_val, "loss_cert": cert_val,
                    "train_acc": acc,
                }
                for i, v in enumerate(elem_losses):
                    row[f"elem_{i}"] = v
                rows.append(row)
                if metrics_file is not None:
                    metrics_file.write(_format_row(row, header) + "\n")
                    metrics_file.flush()

            if out_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                path = os.path.join(out_dir, f"ckpt_epoch{epoch + 1}.ckpt")
                save_train_checkpoint(path, net, cfg, adam, epoch + 1, it)
                checkpoints.append(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    return TrainResult(rows, header, checkpoints, metrics_path)


def save_train_checkpoint(path, net: Network, cfg: TrainConfig, adam: Adam, epochs_completed: int, iteration: int) -> None:
    meta = {
        "epochs_completed": epochs_completed,
        "iteration": iteration,
        "seed": cfg.seed,
        "adam_t": adam.t,
    }
    save_checkpoint(path, net, meta=meta, extra=adam.state_arrays())


def resume_train(checkpoint, cfg: TrainConfig, x, y, cset: CompressionSet, out_dir=None) -> TrainResult:
    """Continue training from a checkpoint written by `train`.

    The checkpoint must sit on an epoch boundary; the continuation is
    bit-identical to the uninterrupted run within one build.
    """
    net = checkpoint.net
    meta = checkpoint.meta
    if "epochs_completed" not in meta or "adam_t" not in meta:
        raise ConfigError("checkpoint lacks training state; cannot resume")
    adam = Adam.from_config(net, cfg)
    adam.load_state_arrays(checkpoint.extra, meta["adam_t"])
    start_epoch = int(meta["epochs_completed"])
    if start_epoch >= cfg.epochs:
        raise ConfigError(f"checkpoint already covers {start_epoch} epochs >= target {cfg.epochs}")
    return train(net, x, y, cfg, cset, out_dir=out_dir, start_epoch=start_epoch, adam=adam)
