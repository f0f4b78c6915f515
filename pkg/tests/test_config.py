from __future__ import annotations

import pytest

from lrf_lab.config import ConfigError, config_from_dict, load_config, preset_names

PRESETS = ["ablate-lift", "constraint-stability", "degenerate", "lrf-vs-ctr", "two-model"]


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_presets_shipped():
    assert preset_names() == PRESETS


@pytest.mark.parametrize("name", PRESETS + ["ablation-lift"])
def test_presets_load(name):
    cfg = config_from_dict({"preset": name})
    assert cfg.iterations >= 1
    assert cfg.preset in PRESETS


def test_overrides_merge_into_preset(tmp_path):
    cfg = load_config(write(tmp_path, "preset: lrf-vs-ctr\nworld:\n  n: 4\n"), seed=7,
                      output_dir=str(tmp_path / "o"))
    assert cfg.world.n == 4
    assert cfg.world.num_items == 50
    assert cfg.seed == 7 and cfg.world.seed == 7
    assert cfg.output_dir == str(tmp_path / "o")


def test_hash_tracks_content():
    a = config_from_dict({"preset": "lrf-vs-ctr"})
    b = config_from_dict({"preset": "lrf-vs-ctr"})
    c = config_from_dict({"preset": "lrf-vs-ctr", "epsilon": 0.2})
    assert a.config_hash() == b.config_hash() != c.config_hash()


@pytest.mark.parametrize("text,line,needle", [
    ("iterations: 3\nbogus: 1\n", 2, "unknown key"),
    ("world:\n  n: 5\n  wat: 1\n", 3, "unknown world key"),
    ("epsilon: 1.5\n", 1, "epsilon"),
    ("iterations: -1\n", 1, "iterations"),
    ("world:\n  n: 2.5\n", 2, "world.n"),
    ("algorithm: 2\nworld:\n  m: 2\n", 1, "targets"),
    ("world:\n  m: 2\ntargets:\n  alpha: [1.2]\nalgorithm: 2\n", 4, "outside"),
    ("world:\n  m: 3\ntargets:\n  alpha: [0.1]\nalgorithm: 2\n", 4, "needs 2 entries"),
    ("world:\n  feature_dim: 0\n", 1, "feature_dim"),
    ("preset: nope\n", 1, "unknown preset"),
    ("policy: magic\n", 1, "policy"),
    ("a: [1,\n", None, "YAML"),
])
def test_errors_carry_line_numbers(tmp_path, text, line, needle):
    path = write(tmp_path, text)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    err = info.value
    assert needle in err.message
    if line is not None:
        assert err.line == line
        assert err.render().startswith(f"{path}:{line}:")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "absent.yaml")
    assert "absent.yaml" in info.value.render()


def test_fixed_weights_validation():
    with pytest.raises(ConfigError):
        config_from_dict({"world": {"m": 2}, "policy": "heuristic_fixed_w",
                          "fixed_weights": [0.5, 1.0]})
    cfg = config_from_dict({"world": {"m": 2}, "policy": "heuristic_fixed_w",
                            "fixed_weights": [1.0, 0.3]})
    assert cfg.fixed_weights == (1.0, 0.3)


def test_final_hidden_follows_arch_change():
    cfg = config_from_dict({"preset": "constraint-stability"})
    assert cfg.final_hidden == (64, 64)
    short = config_from_dict({"preset": "constraint-stability", "iterations": 5})
    assert short.final_hidden == (32, 32)
