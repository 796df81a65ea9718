from pathlib import Path

import pytest
import yaml

from fedxray.config import ConfigError, config_from_dict, config_to_dict, load_yaml, parse_config
from fedxray.simulation import ExperimentConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_empty_file_gives_the_defaults():
    config = config_from_dict({})
    assert config == ExperimentConfig()
    assert config.attack.kind == "trigger" and config.aggregator.kind == "fedavg"
    assert config.network == {"preset": "lenet-lite"}


def test_sections_are_built_into_their_dataclasses():
    config = config_from_dict(
        {
            "seed": 9,
            "malicious_fraction": 0.4,
            "attack": {"kind": "krum-attack"},
            "aggregator": {"kind": "krum", "f": 4},
            "data": {"source": "synthetic", "classes": 3},
            "output": {"record_timing": True},
        }
    )
    assert config.seed == 9 and config.malicious_per_round == 12
    assert config.attack.is_adaptive and config.aggregator.f == 4
    assert config.data.classes == 3 and config.output.record_timing


def test_no_attack_section_and_no_attackers_means_no_attack():
    assert config_from_dict({"malicious_fraction": 0}).attack.kind == "none"


def test_majority_of_attackers_is_rejected():
    with pytest.raises(ConfigError, match="invariant violated.*fewer than 50%"):
        config_from_dict({"malicious_fraction": 0.6})


def test_unknown_key_is_named_with_a_suggestion():
    with pytest.raises(ConfigError, match="unknown key 'aggegator'.*did you mean 'aggregator'"):
        config_from_dict({"aggegator": {"kind": "xmam"}})
    with pytest.raises(ConfigError, match="unknown key 'delt' in aggregator.*'delta'"):
        config_from_dict({"aggregator": {"kind": "ndc", "delt": 1.0}})


def test_wrong_types_are_rejected():
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"batch_size": "32"})
    with pytest.raises(ConfigError, match="aggregator.sum_preserved"):
        config_from_dict({"aggregator": {"sum_preserved": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"attack": ["trigger"]})


def test_bad_values_inside_sections_are_config_errors():
    with pytest.raises(ConfigError, match="aggregator"):
        config_from_dict({"aggregator": {"kind": "median"}})
    with pytest.raises(ConfigError, match="attack"):
        config_from_dict({"attack": {"kind": "none"}, "malicious_fraction": 0.2})


def test_schema_version():
    assert config_from_dict({"schema_version": 1}) == ExperimentConfig()
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_dict({"schema_version": 2})


def test_network_section():
    assert config_from_dict({"network": {"preset": "probe-net"}}).network == {"preset": "probe-net"}
    with pytest.raises(ConfigError, match="preset"):
        config_from_dict({"network": {"preset": "resnet"}})
    with pytest.raises(ConfigError, match="layers"):
        config_from_dict({"network": {"input_shape": [1, 5, 5]}})
    with pytest.raises(ConfigError, match=r"layers\[1\]"):
        config_from_dict({"network": {"input_shape": [1, 2, 2], "layers": [{"type": "flatten"}, {"type": "gelu"}]}})


def test_seed_override_wins():
    assert config_from_dict({"seed": 3}, seed=11).seed == 11


def test_yaml_errors_carry_the_line():
    with pytest.raises(ConfigError, match=r"exp.yaml:3: cannot parse YAML"):
        load_yaml("seed: 1\nlr: 0.1\n  bad: x\n", "exp.yaml")
    with pytest.raises(ConfigError, match="mapping"):
        load_yaml("- 1\n- 2\n")
    assert load_yaml("") == {}


def test_parse_config_reads_files(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 5\nmalicious_fraction: 0\naggregator:\n  kind: rfa\n")
    config = parse_config(path)
    assert config.seed == 5 and config.aggregator.kind == "rfa" and config.attack.kind == "none"
    assert parse_config(path, seed=8).seed == 8
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "missing.yaml")


def test_config_round_trips_through_yaml():
    config = config_from_dict({"seed": 4, "malicious_fraction": 0.4, "attack": {"kind": "xmam-attack"}})
    dumped = yaml.safe_dump(config_to_dict(config))
    assert config_from_dict(yaml.safe_load(dumped)) == config


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_experiment_files_parse(path):
    config = parse_config(path)
    assert config.global_iterations > 0
