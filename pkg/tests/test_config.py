import pytest

from privoptics.config import ConfigInvalid, load_config, parse_config
from privoptics.training import GapConfig, IsConfig, TrainConfig


def test_defaults():
    cfg = parse_config({})
    assert cfg.sensor_geometry().output_size == (32, 32)
    assert isinstance(cfg.strategy_config(), TrainConfig)
    assert cfg.analyzer_spec().input_size == (32, 32)


def test_strategy_configs():
    gap = parse_config({"strategy": "gap", "gap": {"lam": 0.5, "n_adv_steps": 5}, "seed": 3})
    c = gap.strategy_config()
    assert isinstance(c, GapConfig) and c.lam == 0.5 and c.n_adv_steps == 5 and c.seed == 3
    is_ = parse_config({"strategy": "is", "is": {"lam": 2.0}})
    assert isinstance(is_.strategy_config(), IsConfig) and is_.strategy_config().batch_size == 32


@pytest.mark.parametrize("bad", [
    {"gap": {"lam": -1}},
    {"gap": {"lamda": 1}},
    {"strategy": "dp"},
    {"geometry": {"kernel_size": [100, 100], "input_size": [8, 8], "pad": 0}},
    {"pair": {"desired": "x", "sensitive": "x"}},
    {"dataset": {"source": "celeba"}},
    {"dataset": {"toy": {"n": 11}}},
    {"unknown_section": {}},
])
def test_rejected(bad):
    with pytest.raises(ConfigInvalid):
        parse_config(bad)


def test_fingerprint_tracks_relevant_fields_only():
    a = parse_config({"strategy": "baseline"})
    assert a.fingerprint() == parse_config({"strategy": "baseline", "out": "elsewhere"}).fingerprint()
    # privacy knobs do not split the baseline run directory
    assert a.fingerprint() == parse_config({"strategy": "baseline", "gap": {"lam": 2.0}}).fingerprint()
    g1 = parse_config({"strategy": "gap", "gap": {"lam": 1.0}})
    g2 = parse_config({"strategy": "gap", "gap": {"lam": 2.0}})
    assert g1.fingerprint() != g2.fingerprint()
    assert parse_config({"seed": 1}).fingerprint() != a.fingerprint()


def test_yaml_roundtrip_and_overrides(tmp_path):
    cfg = parse_config({"strategy": "is", "is": {"lam": 0.5}, "seed": 2})
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    back = load_config(path)
    assert back == cfg and back.fingerprint() == cfg.fingerprint()
    assert load_config(path, seed=9).seed == 9
    assert load_config(path, out="x").run_dir().parent.name == "x"


def test_bad_files(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("a: [1,\n")
    with pytest.raises(ConfigInvalid):
        load_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigInvalid):
        load_config(p)
