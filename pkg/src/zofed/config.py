"""Run configuration: strict TOML parsing and canonical serialization.

Example::

    rounds = 300
    ema_coeff = 0.995

    [model]
    preset = "mlp"              # or an explicit `layers` list
    sizes = [2, 32, 32, 2]
    activation = "hardswish"

    [dataset]
    kind = "spirals"

    [partition]
    kind = "iid"
    clients = 10

    [estimator]
    sigma = 1e-4
    k = 500
    scheme = "central"

    [mode]
    kind = "fedsgd"
    batch_size = 32

    [optimizer]
    kind = "adam"
    lr = 0.01

    [seeds]
    master = 0

Explicit layers are inline tables with a ``type`` of ``dense`` (``in``,
``out``, ``bias``), ``conv2d`` (``in_ch``, ``out_ch``, ``kernel``, ``stride``,
``bias``), ``activation`` (``fn``), ``groupnorm`` (``groups``, ``channels``,
``eps``) or ``flatten``. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields
from typing import Optional, Union

import tomli
import tomli_w

from .data import DatasetConfig
from .errors import ConfigError
from .estimator import EstimatorConfig
from .federation import Adam, PartitionSpec, SGD
from .nn import Activation, Conv2d, Dense, Flatten, GroupNorm, ModelSpec, lenet_lite, mlp

REQUIRED_KEYS = ("model", "dataset", "rounds")
PRECISIONS = ("f32", "f64")


@dataclass(frozen=True)
class FedSGDMode:
    kind: str = "fedsgd"
    batch_size: int = 32
    participation: float = 1.0


@dataclass(frozen=True)
class FedAvgMode:
    kind: str = "fedavg"
    local_epochs: int = 1
    local_batch: int = 32
    participation: float = 1.0


@dataclass(frozen=True)
class Seeds:
    master: int = 0
    partition: int = 0
    mask: int = 0
    init: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    dataset: DatasetConfig
    rounds: int
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mode: Union[FedSGDMode, FedAvgMode] = field(default_factory=FedSGDMode)
    optimizer: Union[SGD, Adam] = field(default_factory=Adam)
    ema_coeff: float = 0.995
    seeds: Seeds = field(default_factory=Seeds)
    precision: str = "f64"
    output_dir: str = "runs/default"
    mask_scale: Optional[float] = None

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0", key="rounds")
        if not 0.0 <= self.ema_coeff < 1.0:
            raise ConfigError("ema_coeff must lie in [0, 1)", key="ema_coeff")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}", key="precision")
        if self.mask_scale is not None and not self.mask_scale > 0:
            raise ConfigError("mask_scale must be > 0", key="mask_scale")
        if not 0.0 < self.mode.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]", key="mode.participation")


_TOP_KEYS = {
    "rounds": int,
    "ema_coeff": float,
    "precision": str,
    "output_dir": str,
    "mask_scale": float,
}
_TABLES = ("model", "dataset", "partition", "estimator", "mode", "optimizer", "seeds")

_LAYER_KEYS = {
    "dense": {"in": int, "out": int, "bias": bool},
    "conv2d": {"in_ch": int, "out_ch": int, "kernel": int, "stride": int, "bias": bool},
    "activation": {"fn": str},
    "groupnorm": {"groups": int, "channels": int, "eps": float},
    "flatten": {},
}
_MODEL_KEYS = {
    "preset": str,
    "sizes": list,
    "activation": str,
    "groupnorm": int,
    "input_shape": list,
    "num_classes": int,
    "layers": list,
}


def _key_lines(text: str) -> dict:
    """Map dotted key paths to the 1-based line where they are assigned."""
    lines = {}
    table = ""
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([A-Za-z0-9_.\-]+)\]", stripped)
        if m:
            table = m.group(1)
            lines.setdefault(table, no)
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", stripped)
        if m:
            path = f"{table}.{m.group(1)}" if table else m.group(1)
            lines.setdefault(path, no)
    return lines


def _check_type(value, typ, key, lines):
    ok = (
        (typ is bool and isinstance(value, bool))
        or (typ is int and isinstance(value, int) and not isinstance(value, bool))
        or (typ is float and isinstance(value, (int, float)) and not isinstance(value, bool))
        or (typ is str and isinstance(value, str))
        or (typ is list and isinstance(value, list))
    )
    if not ok:
        raise ConfigError(f"expected {typ.__name__}, got {type(value).__name__}", key=key, line=lines.get(key))
    return float(value) if typ is float else value


def _dataclass_from(cls, table: dict, path: str, lines: dict, skip=()):
    known = {f.name: f.type for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in table.items():
        full = f"{path}.{key}"
        if key not in known:
            raise ConfigError(f"unknown key (allowed: {sorted(known)})", key=full, line=lines.get(full))
        typ = {"int": int, "float": float, "str": str, "bool": bool}.get(str(known[key]), None)
        if typ is None:
            raise ConfigError("unsupported key", key=full, line=lines.get(full))
        kwargs[key] = _check_type(value, typ, full, lines)
    return _construct(cls, kwargs, path, lines)


def _construct(cls, kwargs, path, lines):
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        key = exc.key or path
        raise ConfigError(exc.message, key=key, line=lines.get(key, lines.get(path))) from None


def _layer_from(entry, i, lines):
    base = f"model.layers[{i}]"
    line = lines.get("model.layers")
    if not isinstance(entry, dict) or "type" not in entry:
        raise ConfigError("layer must be a table with a 'type'", key=base, line=line)
    kind = entry["type"]
    if kind not in _LAYER_KEYS:
        raise ConfigError(f"unknown layer type {kind!r} (allowed: {sorted(_LAYER_KEYS)})", key=base, line=line)
    spec = _LAYER_KEYS[kind]
    vals = {}
    for key, value in entry.items():
        if key == "type":
            continue
        if key not in spec:
            raise ConfigError(f"unknown key for {kind} layer (allowed: {sorted(spec)})", key=f"{base}.{key}", line=line)
        vals[key] = _check_type(value, spec[key], f"{base}.{key}", lines)
    try:
        if kind == "dense":
            return Dense(vals["in"], vals["out"], vals.get("bias", True))
        if kind == "conv2d":
            return Conv2d(vals["in_ch"], vals["out_ch"], vals["kernel"], vals.get("stride", 1), vals.get("bias", True))
        if kind == "activation":
            return Activation(vals["fn"])
        if kind == "groupnorm":
            return GroupNorm(vals["groups"], vals["channels"], vals.get("eps", 1e-5))
        return Flatten()
    except KeyError as exc:
        raise ConfigError(f"missing required key {exc.args[0]!r}", key=base, line=line) from None
    except ConfigError as exc:
        raise ConfigError(exc.message, key=base, line=line) from None


def _model_from(table: dict, lines: dict) -> ModelSpec:
    for key, value in table.items():
        full = f"model.{key}"
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown key (allowed: {sorted(_MODEL_KEYS)})", key=full, line=lines.get(full))
        _check_type(value, _MODEL_KEYS[key], full, lines)
    try:
        preset = table.get("preset")
        if preset == "mlp":
            if "sizes" not in table:
                raise ConfigError("preset 'mlp' requires sizes", key="model.sizes")
            return mlp(table["sizes"], table.get("activation", "hardswish"), table.get("groupnorm", 0))
        if preset == "lenet_lite":
            return lenet_lite(
                tuple(table.get("input_shape", (1, 28, 28))),
                table.get("num_classes", 10),
                table.get("activation", "hardswish"),
            )
        if preset is not None:
            raise ConfigError(f"unknown preset {preset!r} (allowed: lenet_lite, mlp)", key="model.preset")
        for key in ("layers", "input_shape", "num_classes"):
            if key not in table:
                raise ConfigError("required when no preset is given", key=f"model.{key}")
        layers = tuple(_layer_from(e, i, lines) for i, e in enumerate(table["layers"]))
        return ModelSpec(layers, tuple(table["input_shape"]), table["num_classes"])
    except ConfigError as exc:
        if exc.line is not None:
            raise
        key = exc.key or "model"
        raise ConfigError(exc.message, key=key, line=lines.get(key, lines.get("model"))) from None


def _optimizer_from(table: dict, lines: dict):
    kind = table.get("kind", "adam")
    rest = {k: v for k, v in table.items() if k != "kind"}
    if kind == "adam":
        opt = _dataclass_from(Adam, rest, "optimizer", lines)
    elif kind == "sgd":
        opt = _dataclass_from(SGD, rest, "optimizer", lines)
    else:
        raise ConfigError("kind must be 'adam' or 'sgd'", key="optimizer.kind", line=lines.get("optimizer.kind"))
    if not opt.lr > 0:
        raise ConfigError("lr must be > 0", key="optimizer.lr", line=lines.get("optimizer.lr"))
    return opt


def _mode_from(table: dict, lines: dict):
    kind = table.get("kind", "fedsgd")
    if kind == "fedsgd":
        return _dataclass_from(FedSGDMode, table, "mode", lines)
    if kind == "fedavg":
        mode = _dataclass_from(FedAvgMode, table, "mode", lines)
        if mode.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1", key="mode.local_epochs", line=lines.get("mode.local_epochs"))
        return mode
    raise ConfigError("kind must be 'fedsgd' or 'fedavg'", key="mode.kind", line=lines.get("mode.kind"))


def config_from_dict(raw: dict, lines: Optional[dict] = None) -> RunConfig:
    lines = lines or {}
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _TOP_KEYS:
            kwargs[key] = _check_type(value, _TOP_KEYS[key], key, lines)
        elif key in _TABLES:
            if not isinstance(value, dict):
                raise ConfigError("expected a table", key=key, line=lines.get(key))
        else:
            allowed = sorted(list(_TOP_KEYS) + list(_TABLES))
            raise ConfigError(f"unknown key (allowed: {allowed})", key=key, line=lines.get(key))
    seeds = _dataclass_from(Seeds, raw.get("seeds", {}), "seeds", lines)
    kwargs["model"] = _model_from(raw["model"], lines)
    kwargs["dataset"] = _dataclass_from(DatasetConfig, raw["dataset"], "dataset", lines)
    part = dict(raw.get("partition", {}))
    if "seed" in part:
        raise ConfigError("set the partition seed under [seeds]", key="partition.seed", line=lines.get("partition.seed"))
    part["seed"] = seeds.partition
    kwargs["partition"] = _dataclass_from(PartitionSpec, part, "partition", lines)
    kwargs["estimator"] = _dataclass_from(EstimatorConfig, raw.get("estimator", {}), "estimator", lines)
    kwargs["mode"] = _mode_from(raw.get("mode", {}), lines)
    kwargs["optimizer"] = _optimizer_from(raw.get("optimizer", {}), lines)
    kwargs["seeds"] = seeds
    return _construct(RunConfig, kwargs, "", lines)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values use TOML syntax, bare words are strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-table value", key=path)
        node[parts[-1]] = _parse_value(value.strip())
    return raw


def parse_config(text: str, overrides=()) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from None
    apply_overrides(raw, overrides)
    return config_from_dict(raw, _key_lines(text))


def load_config(path, overrides=()) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), overrides)


def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"type": "dense", "in": layer.in_features, "out": layer.out_features, "bias": layer.bias}
    if isinstance(layer, Conv2d):
        return {
            "type": "conv2d",
            "in_ch": layer.in_channels,
            "out_ch": layer.out_channels,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "bias": layer.bias,
        }
    if isinstance(layer, Activation):
        return {"type": "activation", "fn": layer.kind}
    if isinstance(layer, GroupNorm):
        return {"type": "groupnorm", "groups": layer.groups, "channels": layer.channels, "eps": layer.eps}
    return {"type": "flatten"}


def _plain(obj, skip=()) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}


def config_to_dict(cfg: RunConfig) -> dict:
    out = {
        "rounds": cfg.rounds,
        "ema_coeff": cfg.ema_coeff,
        "precision": cfg.precision,
        "output_dir": cfg.output_dir,
    }
    if cfg.mask_scale is not None:
        out["mask_scale"] = cfg.mask_scale
    out["model"] = {
        "input_shape": list(cfg.model.input_shape),
        "num_classes": cfg.model.num_classes,
        "layers": [_layer_to_dict(layer) for layer in cfg.model.layers],
    }
    out["dataset"] = _plain(cfg.dataset)
    out["partition"] = _plain(cfg.partition, skip=("seed",))
    out["estimator"] = _plain(cfg.estimator)
    out["mode"] = _plain(cfg.mode)
    out["optimizer"] = {"kind": "adam" if isinstance(cfg.optimizer, Adam) else "sgd", **_plain(cfg.optimizer)}
    out["seeds"] = _plain(cfg.seeds)
    return out


def serialize_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
