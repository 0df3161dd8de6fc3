"""Experiment configuration and its flat ``key = value`` file format.

One line per field, ``#`` starts a comment. Lists are comma separated
(``layer_dims = 784, 64, 10``); ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, fields

from .model_data import param_count
from .privacy_ops import PrivacyParams

SCHEMES = ("pa-imfl", "unidirectional-sample-baseline", "no-defense-fedavg")
DATASETS = ("mnist", "synthetic")
CLIENT_ORDERS = ("forward", "reverse")


class ConfigError(ValueError):
    """Rejected configuration; ``key``/``line`` locate the offending entry."""

    category = "config"

    def __init__(self, msg, key=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    rounds: int = 30
    clients: int = 10
    scheme: str = "pa-imfl"
    master_seed: int = 0
    # privacy pipeline
    gamma: float = 0.07
    epsilon: float = 0.1
    delta: float = 0.0
    t: int = 100
    beta: float = 0.9
    clip: float = 1.0
    sensitivity: float | None = None
    exact_sign_counts: bool = False
    # optimisation
    eta: float = 0.01
    decay: float = 1e-4
    batch_size: int = 50
    local_steps: int = 1
    local_lr: float | None = None
    momentum: float = 0.0
    drift_correction: bool = False
    # model and data
    layer_dims: tuple = (784, 64, 10)
    dataset: str = "mnist"
    data_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    classes_per_client: int = 2
    synthetic_classes: int = 10
    synthetic_per_class: int = 200
    synthetic_separation: float = 5.0
    # execution
    client_order: str = "forward"
    attack: bool = False
    attack_targets: int = 50
    attack_steps: int = 2000
    attack_step_size: float = 10.0
    attack_distance: str = "cosine"

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(v) for v in self.layer_dims))
        self.validate()

    @property
    def d(self) -> int:
        return param_count(self.layer_dims)

    @property
    def privacy(self) -> PrivacyParams:
        return PrivacyParams(epsilon=self.epsilon, sensitivity=self.sensitivity,
                             delta=self.delta, gamma=self.gamma, t=self.t, clip=self.clip,
                             beta=self.beta, exact_sign_counts=self.exact_sign_counts)

    def validate(self):
        try:
            self.privacy.check_dimension(self.d)
        except ValueError as exc:
            key = str(exc).split()[0]
            raise ConfigError(str(exc), key=key if key in _FIELDS else None) from None
        checks = [
            ("rounds", self.rounds >= 0, "R ≥ 0 required"),
            ("clients", self.clients >= 0, "m ≥ 0 required"),
            ("scheme", self.scheme in SCHEMES, f"must be one of {SCHEMES}"),
            ("dataset", self.dataset in DATASETS, f"must be one of {DATASETS}"),
            ("client_order", self.client_order in CLIENT_ORDERS, f"must be one of {CLIENT_ORDERS}"),
            ("eta", self.eta > 0, "must be > 0"),
            ("decay", self.decay >= 0, "must be ≥ 0"),
            ("batch_size", self.batch_size >= 1, "must be ≥ 1"),
            ("local_steps", self.local_steps >= 1, "must be ≥ 1"),
            ("local_lr", self.local_lr is None or self.local_lr > 0, "must be > 0"),
            ("momentum", 0 <= self.momentum < 1, "must be in [0, 1)"),
            ("layer_dims", len(self.layer_dims) >= 2 and min(self.layer_dims) >= 1,
             "needs at least input and output sizes"),
            ("classes_per_client", self.classes_per_client >= 1, "must be ≥ 1"),
            ("attack_targets", self.attack_targets >= 1, "must be ≥ 1"),
            ("attack_steps", self.attack_steps >= 0, "must be ≥ 0"),
            ("attack_distance", self.attack_distance in ("squared-l2", "cosine"),
             "must be squared-l2 or cosine"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg} (got {getattr(self, key)!r})", key=key)

    def replace(self, **kw) -> "ExperimentConfig":
        try:
            return dataclasses.replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_HINTS = typing.get_type_hints(ExperimentConfig)


def _base_type(hint):
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if typing.get_origin(hint) in (typing.Union, types.UnionType) and args:
        return args[0], True
    return hint, False


def _convert(key, text, line=None):
    hint, optional = _base_type(_HINTS[key])
    raw = text.strip()
    if optional and raw.lower() == "none":
        return None
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            v = float(raw)
            if math.isnan(v):
                raise ValueError("nan not allowed")
            return v
        if hint is tuple:
            return tuple(int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(str(exc), key=key, line=line) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = body.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError("unknown key", key=key, line=lineno)
        values[key] = _convert(key, val, lineno)
        lines[key] = lineno
    return build_config(values, base, lines)


def build_config(values: dict, base: ExperimentConfig | None = None, lines=None) -> ExperimentConfig:
    lines = lines or {}
    for key in values:
        if key not in _FIELDS:
            raise ConfigError("unknown key", key=key, line=lines.get(key))
    try:
        return dataclasses.replace(base or ExperimentConfig(), **values)
    except ConfigError as exc:
        if exc.key in lines and exc.line is None:
            raise ConfigError(str(exc).split(": ", 1)[-1], key=exc.key, line=lines[exc.key]) from None
        raise


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def parse_overrides(pairs) -> dict:
    """``["gamma=0.1", ...]`` -> typed dict (command-line overrides)."""
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not key=value")
        key, _, val = p.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError("unknown key", key=key)
        out[key] = _convert(key, val)
    return out


def format_config(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    rows = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    for k, v in (extra or {}).items():
        rows.append(f"# {k} = {v}")
    return "\n".join(rows) + "\n"
