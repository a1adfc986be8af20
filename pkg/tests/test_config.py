import pytest

from otdro.core.config import (
    KEYS,
    RunConfig,
    config_field_names,
    flatten_config,
    get_config_value,
    load_run_config,
    read_config_document,
    set_config_value,
    write_config_document,
)
from otdro.core.errors import ConfigurationError

NESTED = {
    "delta": 0.04,
    "step": {"alpha": 0.3, "tau": 0.6},
    "data": {"synthetic": {"n": 100, "d": 3}},
    "cost": {"kind": "constant", "matrix": [[2.0, 0.0], [0.0, 1.0]]},
}


def test_nested_and_flat_documents_agree():
    flat = {
        "delta": 0.04,
        "step.alpha": 0.3,
        "step.tau": 0.6,
        "data.synthetic.n": 100,
        "data.synthetic.d": 3,
        "cost": "constant",
        "cost.matrix": [[2.0, 0.0], [0.0, 1.0]],
    }
    assert flatten_config(NESTED) == flat
    assert load_run_config(overrides=NESTED) == load_run_config(overrides=flat)


def test_loaded_values_are_parsed():
    config = load_run_config(overrides=NESTED)
    assert config.delta == 0.04
    assert config.step_alpha == 0.3
    assert config.synthetic_n == 100
    assert config.cost_matrix == ((2.0, 0.0), (0.0, 1.0))
    assert config.iterations == RunConfig().iterations


def test_auto_step_size_is_kept_as_text():
    assert load_run_config(overrides={"step.alpha": "auto"}).step_alpha == "auto"


def test_every_failure_is_reported_together():
    with pytest.raises(ConfigurationError) as info:
        load_run_config(overrides={"delta": -1, "iterations": 0, "bogus": 1, "loss": "cauchy"})
    message = str(info.value)
    assert message.startswith("invalid configuration:")
    for key in ("delta:", "iterations:", "bogus: unknown configuration key", "loss:"):
        assert key in message


@pytest.mark.parametrize(
    "overrides, key",
    [
        ({"method": "two_timescale", "step.tau": 0.55, "lambda_step.tau": 0.6}, "lambda_step.tau"),
        ({"loss": "hinge"}, "step.xi"),
        ({"cost": "constant"}, "cost.matrix"),
        ({"L_bounds": [0.3, 0.1]}, "L_bounds"),
        ({"nondegeneracy": [1.0, 1.0, 2.0]}, "nondegeneracy"),
    ],
)
def test_cross_checks(overrides, key):
    with pytest.raises(ConfigurationError, match=key):
        load_run_config(overrides=overrides)


def test_data_path_must_exist():
    with pytest.raises(ConfigurationError, match="no such file"):
        load_run_config(overrides={"data": {"path": "/nonexistent/samples.csv", "label": "y"}})


def test_resolved_method():
    assert RunConfig().resolved_method == "smooth"
    assert RunConfig(loss="hinge").resolved_method == "nonsmooth"
    assert RunConfig(loss="hinge", method="smooth").resolved_method == "smooth"


def test_get_and_set_dotted_keys():
    document = {"cost": "constant", "step": {"alpha": 0.5}}
    assert get_config_value(document, "step.alpha") == 0.5
    assert get_config_value(document, "step.tau") is None
    assert get_config_value({"step.alpha": 0.1}, "step.alpha") == 0.1

    set_config_value(document, "cost.matrix", [[1.0]])
    set_config_value(document, "step.tau", 0.7)
    assert document == {"cost": {"kind": "constant", "matrix": [[1.0]]}, "step": {"alpha": 0.5, "tau": 0.7}}
    assert flatten_config(document)["cost"] == "constant"


def test_yaml_round_trip(tmp_path):
    path = tmp_path / "run.yaml"
    write_config_document(path, NESTED)
    assert read_config_document(path) == NESTED
    config = load_run_config(path, overrides={"delta": 0.09})
    assert config.delta == 0.09
    assert config.step_tau == 0.6


def test_bad_documents(tmp_path):
    with pytest.raises(ConfigurationError, match="no such config file"):
        read_config_document(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("delta: [1\n")
    with pytest.raises(ConfigurationError, match="cannot parse"):
        read_config_document(broken)
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError, match="mapping"):
        read_config_document(listing)


def test_key_table_covers_every_field():
    assert {name for name, _, _ in KEYS.values()} == set(config_field_names())
    assert set(RunConfig().to_json()) == set(KEYS)
