"""
Experiment files.

YAML, every key optional; omitted keys take the defaults in fedxray.constants.
Unknown keys are rejected so that a typo never silently falls back to a default.
"""

import difflib
from dataclasses import MISSING, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Tuple

import yaml

from fedxray import constants
from fedxray.aggregation import AggregatorConfig
from fedxray.attacks import AttackConfig
from fedxray.loggers import setup_logger
from fedxray.network import LAYER_TYPES, PRESETS
from fedxray.simulation import DataConfig, ExperimentConfig, OutputConfig

logger = setup_logger(__name__)


class ConfigError(ValueError):
    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


SECTIONS = {
    "data": DataConfig,
    "attack": AttackConfig,
    "aggregator": AggregatorConfig,
    "output": OutputConfig,
}
NETWORK_KEYS = ("preset", "input_shape", "layers", "name", "dtype")
TOP_LEVEL_KEYS = ("schema_version",) + tuple(f.name for f in fields(ExperimentConfig))


def _check_keys(mapping: Dict[str, Any], allowed, where: str) -> None:
    for key in mapping:
        if key in allowed:
            continue
        hint = difflib.get_close_matches(str(key), list(allowed), n=1)
        suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
        raise ConfigError(f"unknown key {key!r} in {where}{suggestion}")


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_types(mapping: Dict[str, Any], cls, where: str) -> None:
    """Numbers where the default is a number, booleans where it is a boolean."""
    for f in fields(cls):
        if f.name not in mapping or f.default is MISSING or f.default is None:
            continue
        value = mapping[f.name]
        if value is None and "None" in str(f.type):
            continue
        if isinstance(f.default, bool):
            ok = isinstance(value, bool)
        elif isinstance(f.default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(f.default, float):
            ok = _is_number(value)
        elif isinstance(f.default, str):
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{where}.{f.name}: expected {type(f.default).__name__}, got {value!r}")


def _section(raw: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = raw.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigError(f"{name} must be a mapping, got {type(section).__name__}")
    return section


def _build(cls, values: Dict[str, Any], where: str):
    _check_keys(values, [f.name for f in fields(cls)], where)
    _check_types(values, cls, where)
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _check_network(network: Dict[str, Any]) -> Dict[str, Any]:
    _check_keys(network, NETWORK_KEYS, "network")
    if not network:
        return {"preset": "lenet-lite"}
    if "preset" in network:
        if network["preset"] not in PRESETS:
            preset = network["preset"]
            raise ConfigError(f"network.preset: unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        return dict(network)
    if "layers" not in network:
        raise ConfigError("network needs either a preset or a list of layers")
    for index, layer in enumerate(network["layers"]):
        if not isinstance(layer, dict) or layer.get("type") not in LAYER_TYPES:
            raise ConfigError(f"network.layers[{index}]: type must be one of {sorted(LAYER_TYPES)}")
    return dict(network)


def config_from_dict(raw: Dict[str, Any] | None, seed: int | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    _check_keys(raw, TOP_LEVEL_KEYS, "the experiment file")
    version = raw.pop("schema_version", constants.SCHEMA_VERSION)
    if version != constants.SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version!r} is not supported, expected {constants.SCHEMA_VERSION}")
    if seed is not None:
        raw["seed"] = seed

    top = {k: v for k, v in raw.items() if k not in SECTIONS and k != "network"}
    _check_types(top, ExperimentConfig, "experiment")
    sections = {name: _build(cls, _section(raw, name), name) for name, cls in SECTIONS.items()}
    if "attack" not in raw and top.get("malicious_fraction", constants.MALICIOUS_FRACTION) == 0:
        sections["attack"] = AttackConfig(kind="none")
    network = _check_network(_section(raw, "network"))

    try:
        return ExperimentConfig(**top, **sections, network=network)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invariant violated: {e}") from e


def load_yaml(text: str, source: str = "<string>") -> Dict[str, Any]:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{where}: cannot parse YAML: {problem}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: the experiment file must be a mapping, got {type(raw).__name__}")
    return raw


def parse_config(path, seed: int | None = None) -> ExperimentConfig:
    return parse_config_with_raw(path, seed)[0]


def parse_config_with_raw(path, seed: int | None = None) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    """The parsed config and the raw mapping it came from (with any seed override applied)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw = load_yaml(path.read_text(encoding="utf-8"), str(path))
    config = config_from_dict(raw, seed)
    if seed is not None:
        raw = {**raw, "seed": seed}
    logger.debug(f"parsed {path}: seed={config.seed}, aggregator={config.aggregator.kind}")
    return config, raw


def config_to_dict(config) -> Dict[str, Any]:
    """Plain mapping of a (nested) config dataclass, suitable for yaml.safe_dump."""
    if is_dataclass(config):
        return {f.name: config_to_dict(getattr(config, f.name)) for f in fields(config)}
    if isinstance(config, (list, tuple)):
        return [config_to_dict(v) for v in config]
    if isinstance(config, dict):
        return {k: config_to_dict(v) for k, v in config.items()}
    return config
