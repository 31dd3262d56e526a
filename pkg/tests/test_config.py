from __future__ import annotations

import pytest

from structmem.config import ParadigmConfig, env_overrides, load_config
from structmem.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.paradigm.paradigm == "structmem"
    assert cfg.paradigm.consolidation.time_threshold_secs == 3600
    assert cfg.paradigm.retrieval.entry_count == 60
    assert cfg.harness.skip_categories == ("5",)


def test_precedence_cli_over_env_over_file(tmp_path):
    path = write(tmp_path, "[consolidation]\nseed_k = 3\ntime_threshold_secs = 60\n[retrieval]\nentries = 10\n")
    env = {"STRUCTMEM__CONSOLIDATION__SEED_K": "7", "STRUCTMEM__RETRIEVAL__ENTRY_COUNT": "20"}
    cfg = load_config(path, {"retrieval": {"entry_count": 30}}, environ=env)
    assert cfg.paradigm.consolidation.seed_k == 7
    assert cfg.paradigm.consolidation.time_threshold_secs == 60
    assert cfg.paradigm.retrieval.entry_count == 30


def test_env_parsing():
    assert env_overrides({"STRUCTMEM__SEED": "3", "OTHER": "x", "STRUCTMEM__HARNESS__JUDGES": "a,b"}) == {
        "seed": "3", "harness": {"judges": "a,b"}}
    cfg = load_config(environ={"STRUCTMEM__HARNESS__JUDGES": "a, b", "STRUCTMEM__SEED": "4",
                               "STRUCTMEM__CONSOLIDATION__INCLUDE_SYNTHESIS_SEEDS": "false"})
    assert cfg.harness.judges == ("a", "b") and cfg.seed == 4
    assert cfg.paradigm.consolidation.include_synthesis_seeds is False


def test_graph_rejects_consolidation_keys_by_name(tmp_path):
    path = write(tmp_path, "paradigm = 'structmem'\n[consolidation]\nseed_k = 3\n")
    with pytest.raises(ConfigError, match=r"consolidation\.seed_k"):
        load_config(path, {"paradigm": "graph"}, environ={})


def test_non_structmem_has_no_synthesis_circuit():
    cfg = ParadigmConfig(paradigm="flat")
    assert cfg.consolidation is None and cfg.retrieval.synthesis_count == 0


@pytest.mark.parametrize("text,needle", [
    ("paradigm = 'tree'\n", "paradigm"),
    ("[retrieval]\nbogus = 1\n", "retrieval.bogus"),
    ("[consolidation]\nseed_k = 'many'\n", "seed_k"),
    ("[consolidation]\ntime_threshold_secs = -1\n", "time_threshold"),
    ("[harness]\ncategory_map = {1 = 'riddles'}\n", "category_map"),
    ("nonsense = 1\n", "nonsense"),
    ("[retrieval\n", "invalid"),
])
def test_invalid_configs(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(write(tmp_path, text), environ={})


def test_hash_and_round_trip():
    a = load_config(overrides={"seed": 3}, environ={})
    b = load_config(overrides=a.to_mapping(), environ={})
    assert a.to_dict() == b.to_dict() and a.hash() == b.hash()
    assert a.hash() != load_config(overrides={"seed": 4}, environ={}).hash()
