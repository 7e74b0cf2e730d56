"""Adversarial search: PGD over inputs, the shrunken-box certified loss, and
weight-space adversarial perturbation (the differentiable quantization proxy).

Selection results (PGD endpoints, box centers, weight deltas) are constants
for the outer gradient: callers differentiate the loss evaluated at the
selected points, never through the selection itself. All loss functions here
accept precomputed selections so tests can differentiate exactly the same
frozen-selection function the analytic gradient sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bounds import ibp_loss_at
from .errors import ConfigError
from .network import WeightShiftView, forward


@dataclass(frozen=True)
class AttackConfig:
    """Robustness radius epsilon, box radius tau (None = 0.4 * epsilon), and
    PGD parameters. The PGD step size defaults to 0.25 * attack radius."""

    epsilon: float
    tau: float | None = None
    pgd_steps: int = 8
    pgd_step_size: float | None = None
    restarts: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.tau is not None and not (0.0 <= self.tau <= self.epsilon):
            raise ConfigError(f"tau must lie in [0, epsilon], got tau={self.tau} eps={self.epsilon}")
        if self.pgd_steps < 1:
            raise ConfigError(f"pgd_steps must be >= 1, got {self.pgd_steps}")
        if self.pgd_step_size is not None and self.pgd_step_size <= 0:
            raise ConfigError(f"pgd_step_size must be > 0, got {self.pgd_step_size}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")

    def resolved_tau(self) -> float:
        return 0.4 * self.epsilon if self.tau is None else self.tau

    def scaled(self, factor: float) -> "AttackConfig":
        """Config with epsilon and tau multiplied by factor (schedule ramp)."""
        return AttackConfig(
            epsilon=self.epsilon * factor,
            tau=self.resolved_tau() * factor,
            pgd_steps=self.pgd_steps,
            pgd_step_size=self.pgd_step_size,
            restarts=self.restarts,
        )


@dataclass(frozen=True)
class AWPConfig:
    """l-infinity weight perturbation of radius eta, found by awp_steps
    rounds of projected signed-gradient ascent. Roles listed in
    excluded_roles keep a zero perturbation; BatchNorm running statistics are
    not parameters and are never perturbed."""

    eta: float = 0.25
    awp_steps: int = 1
    excluded_roles: tuple = ()

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.awp_steps < 1:
            raise ConfigError(f"awp_steps must be >= 1, got {self.awp_steps}")


@dataclass
class WeightPerturbation:
    """Per-parameter additive deltas, aligned with the network's ParamIds."""

    deltas: dict

    def norm_inf(self) -> float:
        vals = [float(np.max(np.abs(d))) for d in self.deltas.values() if d.size]
        return max(vals) if vals else 0.0

    @staticmethod
    def zeros(net) -> "WeightPerturbation":
        return WeightPerturbation({pid: np.zeros_like(p.data) for pid, p in net.params.items()})


def _ce_objective(netlike, xt, y):
    return T.softmax_cross_entropy(forward(netlike, xt, bn="running"), y, reduction="none")


def pgd_attack(netlike, x, y, radius: float, cfg: AttackConfig, objective=None, rng=None, domain=(0.0, 1.0)) -> np.ndarray:
    """Signed-gradient ascent inside B(x, radius) intersected with the domain.

    objective(netlike, x_tensor, y) must return per-sample losses; default is
    cross-entropy. Returns, per sample, the iterate with the highest
    objective across all steps and restarts. Deterministic given rng.
    """
    x = np.asarray(x, dtype=np.float64)
    if radius < 0:
        raise ConfigError(f"pgd_attack: negative radius {radius}")
    if radius == 0.0:
        return x.copy()
    if objective is None:
        objective = _ce_objective
    if rng is None:
        rng = np.random.default_rng(0)
    y = np.asarray(y)
    lo = np.maximum(x - radius, domain[0])
    hi = np.minimum(x + radius, domain[1])
    step = cfg.pgd_step_size if cfg.pgd_step_size is not None else 0.25 * radius

    best_x = x.copy()
    best_val = np.full(x.shape[0], -np.inf)

    def consider(cur, vals):
        improved = vals > best_val
        if np.any(improved):
            best_x[improved] = cur[improved]
            best_val[improved] = vals[improved]

    with T.stop_recording():
        for _ in range(cfg.restarts):
            cur = np.clip(x + rng.uniform(-radius, radius, size=x.shape), lo, hi)
            for _ in range(cfg.pgd_steps):
                with T.Tape() as tape:
                    xt = T.Tensor(cur)
                    tape.watch(xt)
                    per = objective(netlike, xt, y)
                    total = T.tensor_sum(per)
                g = tape.gradient(total)[xt].data
                consider(cur, per.data)
                cur = np.clip(cur + step * np.sign(g), lo, hi)
            final = objective(netlike, T.Tensor(cur), y)
            consider(cur, final.data)
    return best_x


def sabr_centers(netlike, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Box centers: PGD with radius epsilon - tau, maximizing the tau-box
    certified loss, then re-clamped so the tau-box stays inside the
    epsilon-ball (a no-op safety net given the PGD projection)."""
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    tau = cfg.resolved_tau()

    def objective(nl, xt, yy):
        return ibp_loss_at(nl, xt, yy, tau, reduction="none")

    slack = eps - tau
    adv = pgd_attack(netlike, x, y, slack, cfg, objective=objective, rng=rng)
    return np.clip(adv, x - slack, x + slack)


def sabr_loss(netlike, x, y, cfg: AttackConfig, rng=None, centers=None, reduction: str = "mean") -> T.Tensor:
    """Certified loss of the tau-box around adversarially selected centers.

    tau = epsilon collapses the search ball: the loss equals the full-ball
    certified loss at x. tau = 0 collapses the box: the loss equals
    cross-entropy at the PGD point. Pass `centers` to reuse or freeze a
    selection; gradients flow to parameters only, never into the selection.
    """
    if centers is None:
        centers = sabr_centers(netlike, x, y, cfg, rng=rng)
    return ibp_loss_at(netlike, centers, y, cfg.resolved_tau(), reduction=reduction)


def _combined_value(netlike, x, y, centers, tau: float) -> float:
    """Unweighted CE + certified loss, evaluated without recording."""
    with T.stop_recording():
        std = T.softmax_cross_entropy(forward(netlike, x, bn="running"), y)
        cert = ibp_loss_at(netlike, centers, y, tau)
    return std.item() + cert.item()


def awp_perturb(net, x, y, attack_cfg: AttackConfig, awp_cfg: AWPConfig, rng=None, centers=None) -> WeightPerturbation:
    """Approximate worst-case weight perturbation within the eta ball.

    Maximizes the unweighted sum of the standard and certified losses by
    awp_steps rounds of projected signed-gradient ascent with step
    2 * eta / awp_steps (one step reduces to eta * sign(gradient)). The box
    centers are selected once at the unperturbed weights and held fixed. If
    no iterate improves on the unperturbed objective, the zero perturbation
    is returned, so the ascent property holds by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    zeros = WeightPerturbation.zeros(net)
    if awp_cfg.eta == 0.0:
        return zeros
    tau = attack_cfg.resolved_tau()
    if centers is None:
        centers = sabr_centers(net, x, y, attack_cfg, rng=rng)

    eta = awp_cfg.eta
    alpha = 2.0 * eta / awp_cfg.awp_steps
    perturbable = [
        pid for pid in net.param_ids() if pid[1] not in awp_cfg.excluded_roles
    ]
    delta = {pid: np.zeros_like(net.params[pid].data) for pid in perturbable}
    base_val = _combined_value(net, x, y, centers, tau)
    best_val = base_val
    best_delta = None

    with T.stop_recording():
        for _ in range(awp_cfg.awp_steps):
            shifts = {pid: T.Tensor(d) for pid, d in delta.items()}
            view = WeightShiftView(net, shifts)
            with T.Tape() as tape:
                for pid in perturbable:
                    tape.watch(shifts[pid])
                loss = T.add(
                    T.softmax_cross_entropy(forward(view, x, bn="running"), y),
                    ibp_loss_at(view, centers, y, tau),
                )
            grads = tape.gradient(loss)
            delta = {
                pid: np.clip(delta[pid] + alpha * np.sign(grads[shifts[pid]].data), -eta, eta)
                for pid in perturbable
            }
            val = _combined_value(WeightShiftView(net, delta), x, y, centers, tau)
            if val > best_val:
                best_val = val
                best_delta = {pid: d.copy() for pid, d in delta.items()}

    if best_delta is None:
        return zeros
    out = zeros.deltas
    out.update(best_delta)
    return WeightPerturbation(out)


def awp_loss(net, x, y, lam: float, attack_cfg: AttackConfig, awp_cfg: AWPConfig, rng=None, perturbation=None, centers=None, return_parts: bool = False):
    """lam * CE + (1 - lam) * certified loss, evaluated at the adversarially
    shifted weights. The shift is a constant: gradients flow to the base
    parameters. Box centers are selected once and shared by the shift search
    and the final loss. Base weights are never modified."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    tau = attack_cfg.resolved_tau()
    if centers is None:
        centers = sabr_centers(net, x, y, attack_cfg, rng=rng)
    if perturbation is None:
        perturbation = awp_perturb(net, x, y, attack_cfg, awp_cfg, rng=rng, centers=centers)
    view = WeightShiftView(net, perturbation.deltas)
    std = T.softmax_cross_entropy(forward(view, x, bn="running"), y)
    if lam == 1.0:
        loss, cert_val = std, 0.0
    else:
        cert = ibp_loss_at(view, centers, y, tau)
        cert_val = cert.item()
        loss = T.add(T.scale(std, lam), T.scale(cert, 1.0 - lam))
    if return_parts:
        return loss, std.item(), cert_val, perturbation, centers
    return loss
