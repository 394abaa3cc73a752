import json
from dataclasses import replace

import pytest

from fedsurg.bench import format_table, run_variants
from helpers import tiny_config


def _variants(rounds):
    def make(method):
        cfg = tiny_config(method, rounds=rounds, epochs=2, n=10)
        return lambda seed: replace(cfg, train=replace(cfg.train, seed=seed))
    return {"local": make("local"), "fedavg": make("fedavg")}


def test_baseline_scores_zero_and_json_written(tmp_path):
    res = run_variants(_variants(3), seeds=(1,), out_root=tmp_path)
    saved = json.loads((tmp_path / "benchmark.json").read_text())
    assert saved["methods"] == ["local", "fedavg"]
    local = res["runs"]["local"][1]
    assert set(local["diagnostics"]) == {"initial_train_loss", "final_train_loss"}
    if res["median_delta_m"]["local"] is not None:
        assert res["median_delta_m"]["local"] == 0.0
    table = format_table(res)
    assert table.splitlines()[0].startswith("method")
    assert len(table.splitlines()) == 3


def test_undefined_delta_m_reported_not_raised():
    res = {"seeds": [1], "methods": ["local"], "median_delta_m": {"local": None},
           "runs": {"local": {1: {"delta_m": {"average": None, "error": "zero baseline"}}}}}
    assert "n/a" in format_table(res)


def test_missing_baseline_rejected():
    with pytest.raises(ValueError):
        run_variants({"fedavg": lambda s: tiny_config("fedavg")}, seeds=(1,))
