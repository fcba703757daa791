"""Strict YAML config parsing, defaults, and the run digest."""

import pytest

from elastic_ssl.archspace import DimRange
from elastic_ssl.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    load_config,
    parse_budget_flag,
)


def minimal_record(**sections):
    record = {}
    record.update(sections)
    return record


class TestDefaults:
    def test_empty_document_gives_all_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == RunConfig()

    def test_none_path_gives_defaults(self):
        assert load_config(None) == RunConfig()

    def test_defaults_are_fully_materialized(self):
        record = RunConfig().to_dict()
        for section in ("model", "train", "search", "probe", "rank",
                        "ablation", "data"):
            assert section in record
        assert record["train"]["temperature"] == 0.2
        assert record["model"]["space"]["stage_widths"]
        assert record["data"]["source"] == "synthetic"

    def test_partial_document_keeps_other_defaults(self):
        config = config_from_dict({"train": {"iterations": 7}})
        assert config.train.iterations == 7
        assert config.train.temperature == RunConfig().train.temperature
        assert config.search == RunConfig().search


class TestStrictness:
    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="trainer: unknown section"):
            config_from_dict({"trainer": {}})

    def test_unknown_keys_are_all_listed(self):
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(
                {
                    "train": {"lr": 0.1, "iterations": 3},
                    "search": {"budget": "3G"},
                    "probe": {"solver": "sgd"},
                }
            )
        message = str(excinfo.value)
        assert "train.lr: unknown key" in message
        assert "search.budget: unknown key" in message
        assert "probe.solver: unknown key" in message

    def test_invalid_values_are_all_listed(self):
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict(
                {
                    "train": {"temperature": 0.0, "batch_size": 0},
                    "rank": {"subnets": 1},
                    "data": {"source": "imagenet"},
                }
            )
        message = str(excinfo.value)
        assert "temperature" in message
        assert "batch_size" in message
        assert "subnets" in message
        assert "source" in message

    def test_problems_are_not_duplicated(self):
        with pytest.raises(ConfigError) as excinfo:
            config_from_dict({"train": {"temperature": 0.0}})
        assert len(excinfo.value.problems) == 1

    def test_non_mapping_document_rejected(self):
        with pytest.raises(ConfigError, match="mapping"):
            config_from_dict(["train"])

    def test_bad_space_record_is_reported(self):
        with pytest.raises(ConfigError, match="model.space"):
            config_from_dict({"model": {"space": {"stem": "wide"}}})


class TestSections:
    def test_model_space_round_trips_through_yaml(self, tmp_path):
        config = RunConfig()
        path = tmp_path / "full.yaml"
        path.write_text(config.to_yaml())
        assert load_config(path) == config

    def test_custom_space_parses(self):
        record = {
            "model": {
                "embed_dim": 64,
                "space": RunConfig().model.space.to_dict(),
            }
        }
        config = config_from_dict(record)
        assert config.model.embed_dim == 64
        assert config.model.space.stem == DimRange(
            **RunConfig().model.space.to_dict()["stem"]
        )

    def test_boundaries_list_becomes_tuple(self):
        config = config_from_dict(
            {"search": {"boundaries": [0, 1000, 2000]}}
        )
        assert config.search.boundaries == (0, 1000, 2000)
        budget = config.search.budget_spec()
        assert budget.lower == 0
        assert budget.upper == 2000
        assert budget.boundaries == (0, 1000, 2000)

    def test_explicit_window_overrides_boundary_span(self):
        config = config_from_dict(
            {"search": {"boundaries": [0, 1000, 2000], "lower": 500, "upper": 1500}}
        )
        budget = config.search.budget_spec()
        assert (budget.lower, budget.upper) == (500, 1500)

    def test_window_must_come_in_pairs(self):
        with pytest.raises(ConfigError, match="together"):
            config_from_dict({"search": {"lower": 5}})

    def test_descending_boundaries_rejected(self):
        with pytest.raises(ConfigError, match="ascending"):
            config_from_dict({"search": {"boundaries": [10, 5]}})

    def test_ablation_seeds_parse(self):
        config = config_from_dict({"ablation": {"seeds": [3, 4]}})
        assert config.ablation.seeds == (3, 4)
        with pytest.raises(ConfigError, match="seeds"):
            config_from_dict({"ablation": {"seeds": []}})

    def test_cifar_source_requires_path(self):
        with pytest.raises(ConfigError, match="path"):
            config_from_dict({"data": {"source": "cifar10"}})
        config = config_from_dict(
            {"data": {"source": "cifar10", "path": "/data/cifar"}}
        )
        assert config.data.path == "/data/cifar"


class TestDigest:
    def test_digest_is_stable(self):
        assert RunConfig().digest() == RunConfig().digest()
        assert len(RunConfig().digest()) == 64

    def test_digest_changes_with_any_field(self):
        base = RunConfig().digest()
        changed = config_from_dict({"train": {"seed": 9}}).digest()
        assert changed != base

    def test_digest_survives_yaml_round_trip(self, tmp_path):
        config = config_from_dict({"train": {"iterations": 11}})
        path = tmp_path / "config.yaml"
        path.write_text(config.to_yaml())
        assert load_config(path).digest() == config.digest()


class TestBudgetFlag:
    def test_group_label(self):
        assert parse_budget_flag("3G~4G") == (3_000_000_000, 4_000_000_000)

    def test_explicit_window(self):
        assert parse_budget_flag("100M:250M") == (100_000_000, 250_000_000)

    def test_plain_numbers(self):
        assert parse_budget_flag("1000:2000") == (1000, 2000)

    def test_rejects_bad_forms(self):
        with pytest.raises(ValueError, match="budget"):
            parse_budget_flag("3G")
        with pytest.raises(ValueError, match="lower < upper"):
            parse_budget_flag("4G~3G")
