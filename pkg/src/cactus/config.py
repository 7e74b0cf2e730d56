"""Run configuration: flat INI-style `key = value` text with sections.

Unknown sections or keys are rejected; every key has a documented default
(the SCHEMA table below is the single source of truth). Empty values mean
"use the built-in default" for optional keys.
"""

from __future__ import annotations

import configparser
import io

from .attack import AttackConfig, AWPConfig
from .data import Dataset, load_cifar10, load_mnist, make_synthetic
from .errors import ConfigError
from .network import Network, build, preset_layers
from .train import (
    CompressionSet,
    Fixed,
    Identity,
    Progressive,
    Prune,
    QuantProxy,
    Sampled,
    TrainConfig,
)

# (type, default) per key; type one of str/int/float/bool/opt_float/opt_int/ints/words
SCHEMA = {
    "data": {
        "dataset": ("str", "blobs"),          # blobs | moons | mnist | cifar10
        "path": ("str", ""),                  # data directory (mnist/cifar); '' = default
        "n": ("int", 1000),                   # synthetic train-split size
        "noise": ("float", 0.05),             # synthetic noise level
        "data_seed": ("int", 0),              # synthetic generation seed
        "train_size": ("opt_int", None),      # subsample train split to first N
        "test_size": ("opt_int", None),       # subsample test split to first N
    },
    "model": {
        "arch": ("str", "mlp"),               # linear | mlp | conv3 | cnn7
        "hidden": ("ints", (128, 128)),       # mlp hidden layer widths
    },
    "train": {
        "epochs": ("int", 5),
        "batch_size": ("int", 64),
        "lr": ("float", 1e-4),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "adam_eps": ("float", 1e-8),
        "weight_decay": ("float", 1e-5),
        "warmup_iters": ("int", 250),
        "ramp_iters": ("int", 250),
        "lambda_final": ("float", 0.75),
        "seed": ("int", 0),
        "per_element_updates": ("bool", False),
        "checkpoint_every": ("int", 1),
    },
    "attack": {
        "epsilon": ("float", 0.1),
        "tau": ("opt_float", None),           # '' = 0.4 * epsilon
        "pgd_steps": ("int", 8),
        "pgd_step_size": ("opt_float", None),  # '' = 0.25 * attack radius
        "restarts": ("int", 1),
    },
    "awp": {
        "eta": ("float", 0.25),
        "awp_steps": ("int", 1),
    },
    "compression": {
        "elements": ("words", ("identity",)),  # identity | prune | quant, comma list
        "strategy": ("str", "sampled"),        # fixed | sampled | progressive
        "ratio": ("opt_float", None),          # fixed-strategy prune ratio
        "ratio_low": ("float", 0.25),          # sampled-strategy bounds
        "ratio_high": ("float", 0.75),
        "ratio_start": ("float", 0.25),        # progressive-strategy endpoints
        "ratio_end": ("float", 0.75),
        "prune_scope": ("str", "local"),       # local | global
        "prune_structure": ("str", "unstructured"),  # unstructured | channel
        "prune_score": ("str", "l1"),          # l1 | l2 | grad_mag
    },
    "output": {
        "dir": ("str", "runs/out"),
    },
}

EVAL_EPS_PRESETS = {"mnist": (0.1, 0.3), "blobs": (0.05,), "moons": (0.05,)}


def _convert(section: str, key: str, kind: str, raw: str):
    raw = raw.strip()
    where = f"[{section}] {key}"
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "opt_int":
            return None if raw == "" else int(raw)
        if kind == "opt_float":
            return None if raw == "" else float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
        if kind == "words":
            return tuple(tok.strip().lower() for tok in raw.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{where}: unknown schema kind {kind}")


class RunConfig:
    """Typed view over the parsed key/value table, with object builders."""

    def __init__(self, values: dict):
        self._values = values

    def get(self, section: str, key: str):
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"no such config key [{section}] {key}") from None

    @property
    def seed(self) -> int:
        return self.get("train", "seed")

    @property
    def out_dir(self) -> str:
        return self.get("output", "dir")

    @property
    def dataset_name(self) -> str:
        return self.get("data", "dataset")

    def with_value(self, section: str, key: str, value) -> "RunConfig":
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"no such config key [{section}] {key}")
        values = {s: dict(kv) for s, kv in self._values.items()}
        values[section][key] = value
        return RunConfig(values)

    def dataset(self) -> Dataset:
        name = self.dataset_name
        path = self.get("data", "path") or None
        if name in ("blobs", "moons"):
            ds = make_synthetic(name, n=self.get("data", "n"),
                                noise=self.get("data", "noise"),
                                seed=self.get("data", "data_seed"))
        elif name == "mnist":
            ds = load_mnist(path)
        elif name == "cifar10":
            if path is None:
                raise ConfigError("[data] path is required for cifar10")
            ds = load_cifar10(path)
        else:
            raise ConfigError(f"[data] dataset: unknown dataset {name!r}")
        n_tr, n_te = self.get("data", "train_size"), self.get("data", "test_size")
        if n_tr is not None or n_te is not None:
            ds = ds.subsample(n_tr, n_te)
        return ds

    def network(self, input_shape, n_classes: int, seed=None) -> Network:
        arch = self.get("model", "arch")
        hidden = self.get("model", "hidden")
        layers = preset_layers(arch, input_shape, n_classes=n_classes, hidden=hidden)
        return build(layers, seed=self.seed if seed is None else seed, input_shape=input_shape)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.get("attack", "epsilon"),
            tau=self.get("attack", "tau"),
            pgd_steps=self.get("attack", "pgd_steps"),
            pgd_step_size=self.get("attack", "pgd_step_size"),
            restarts=self.get("attack", "restarts"),
        )

    def awp_config(self) -> AWPConfig:
        return AWPConfig(eta=self.get("awp", "eta"), awp_steps=self.get("awp", "awp_steps"))

    def train_config(self) -> TrainConfig:
        t = self._values["train"]
        return TrainConfig(attack=self.attack_config(), **t)

    def compression_set(self) -> CompressionSet:
        c = self._values["compression"]
        name = c["strategy"].lower()
        if name == "fixed":
            strategy = Fixed()
        elif name == "sampled":
            if not (0.0 <= c["ratio_low"] <= c["ratio_high"] < 1.0):
                raise ConfigError(
                    f"[compression] need 0 <= ratio_low <= ratio_high < 1, "
                    f"got {c['ratio_low']} and {c['ratio_high']}"
                )
            strategy = Sampled(c["ratio_low"], c["ratio_high"])
        elif name == "progressive":
            strategy = Progressive(c["ratio_start"], c["ratio_end"])
        else:
            raise ConfigError(f"[compression] strategy: unknown strategy {name!r}")
        elements = []
        for word in c["elements"]:
            if word == "identity":
                elements.append(Identity())
            elif word == "prune":
                elements.append(Prune(scope=c["prune_scope"], structure=c["prune_structure"],
                                      score=c["prune_score"], ratio=c["ratio"]))
            elif word == "quant":
                elements.append(QuantProxy(awp=self.awp_config()))
            else:
                raise ConfigError(f"[compression] elements: unknown element {word!r}")
        return CompressionSet(elements, strategy=strategy)

    def eval_eps_presets(self) -> tuple:
        return EVAL_EPS_PRESETS.get(self.dataset_name, (0.1,))

    def dump(self) -> str:
        out = []
        for section in SCHEMA:
            out.append(f"[{section}]")
            for key in SCHEMA[section]:
                v = self._values[section][key]
                if isinstance(v, tuple):
                    v = ",".join(str(t) for t in v)
                out.append(f"{key} = {'' if v is None else v}")
            out.append("")
        return "\n".join(out)


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_file(io.StringIO(text))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
            kind = SCHEMA[section][key][0]
            values[section][key] = _convert(section, key, kind, raw)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path!r}: {exc}") from None
    return parse_config(text)
