"""Evaluation of trained checkpoints under compression variants.

A variant descriptor names one post-training compression:

    none                    the checkpoint as-is
    prune:<code>:<ratio>    magnitude pruning; <code> is scope + structure +
                            score, e.g. lul1 = local unstructured l1,
                            gsl2 = global structured (channel) l2
    quant:int<bits>         uniform affine weight quantization (also quant:<bits>)

Certified accuracy counts a sample only when the prediction is correct AND
the interval certificate holds; counts are exact integers over the split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import certify
from .compress import PruneSpec, bake_mask, compute_mask, quantize_weights
from .errors import CactusError, ConfigError
from .network import Network, predict

_SCOPE_CODES = {"l": "local", "g": "global"}
_STRUCTURE_CODES = {"u": "unstructured", "s": "channel"}
_SCORE_CODES = {"l1": "l1", "l2": "l2"}


@dataclass(frozen=True)
class Variant:
    kind: str                      # none | prune | quant
    label: str
    prune: PruneSpec | None = None
    bits: int | None = None


def parse_variant(text: str) -> Variant:
    """Parse a variant descriptor (see module docstring)."""
    text = text.strip().lower()
    if text == "none":
        return Variant("none", "none")
    parts = text.split(":")
    if parts[0] == "prune":
        if len(parts) != 3:
            raise ConfigError(f"variant {text!r}: expected prune:<code>:<ratio>")
        code, ratio_text = parts[1], parts[2]
        if len(code) < 3 or code[0] not in _SCOPE_CODES or code[1] not in _STRUCTURE_CODES or code[2:] not in _SCORE_CODES:
            raise ConfigError(
                f"variant {text!r}: bad pruning code {code!r} "
                "(want <l|g><u|s><l1|l2>, e.g. lul1 or gsl2)"
            )
        try:
            ratio = float(ratio_text)
        except ValueError:
            raise ConfigError(f"variant {text!r}: bad ratio {ratio_text!r}") from None
        spec = PruneSpec(ratio=ratio, scope=_SCOPE_CODES[code[0]],
                         structure=_STRUCTURE_CODES[code[1]], score=_SCORE_CODES[code[2:]])
        return Variant("prune", text, prune=spec)
    if parts[0] == "quant":
        if len(parts) != 2:
            raise ConfigError(f"variant {text!r}: expected quant:int<bits>")
        bits_text = parts[1][3:] if parts[1].startswith("int") else parts[1]
        try:
            bits = int(bits_text)
        except ValueError:
            raise ConfigError(f"variant {text!r}: bad bit width {parts[1]!r}") from None
        return Variant("quant", text, bits=bits)
    raise ConfigError(f"unknown variant kind {parts[0]!r} in {text!r}")


def materialize(net: Network, variant: Variant) -> Network:
    """Build the compressed network a variant describes (eval mode)."""
    try:
        if variant.kind == "none":
            out = net.clone()
        elif variant.kind == "prune":
            out = bake_mask(net, compute_mask(net, variant.prune))
        elif variant.kind == "quant":
            out, _ = quantize_weights(net, bits=variant.bits)
        else:
            raise ConfigError(f"unknown variant kind {variant.kind!r}")
    except CactusError as exc:
        raise type(exc)(f"variant {variant.label!r}: {exc}") from exc
    out.mode = "eval"
    return out


@dataclass
class EvalRow:
    variant: str
    eps: float
    n: int
    std_correct: int
    cert_correct: int

    @property
    def std_acc(self) -> float:
        return 100.0 * self.std_correct / self.n

    @property
    def cert_acc(self) -> float:
        return 100.0 * self.cert_correct / self.n


@dataclass
class EvalReport:
    n: int
    rows: list

    CSV_HEADER = "variant,eps,n,std_correct,std_acc,cert_correct,cert_acc"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.variant},{repr(float(r.eps))},{r.n},"
                f"{r.std_correct},{repr(r.std_acc)},{r.cert_correct},{repr(r.cert_acc)}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = ["variant", "eps", "std acc %", "cert acc %", "std", "cert", "n"]
        body = [
            [r.variant, f"{r.eps:g}", f"{r.std_acc:.2f}", f"{r.cert_acc:.2f}",
             str(r.std_correct), str(r.cert_correct), str(r.n)]
            for r in self.rows
        ]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines = [fmt.format(*head), fmt.format(*["-" * w for w in widths])]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines)


def evaluate(net: Network, x, y, eps_list, variants) -> EvalReport:
    """Standard and certified accuracy for each variant at each radius."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("evaluation split is empty")
    eps_list = [float(e) for e in (eps_list if np.iterable(eps_list) else [eps_list])]
    rows = []
    for variant in variants:
        if isinstance(variant, str):
            variant = parse_variant(variant)
        vnet = materialize(net, variant)
        pred = predict(vnet, x)
        correct = pred == y
        std_correct = int(correct.sum())
        for eps in eps_list:
            cert = certify(vnet, x, y, eps)
            cert_correct = int((correct & cert).sum())
            rows.append(EvalRow(variant.label, eps, n, std_correct, cert_correct))
    return EvalReport(n, rows)
