import pytest

from descsel.config import RunConfig, apply_overrides, load_config, snapshot
from descsel.errors import DataFormatError, InvalidInputError


def test_defaults_are_episode_protocol_shaped():
    cfg = RunConfig()
    assert cfg.n_way == 5 and cfg.k_shot == 1 and cfg.queries_per_class == 15
    assert cfg.strategy == "adaptive"
    assert cfg.enable_support_selection and cfg.enable_query_selection
    assert cfg.seed is None


def test_require_seed():
    with pytest.raises(InvalidInputError):
        RunConfig().require_seed()
    assert RunConfig(seed=7).require_seed() == 7
    assert RunConfig(seed=0).require_seed() == 0  # zero is a valid seed


def test_load_missing_path_is_defaults():
    assert load_config(None) == RunConfig()


def test_snapshot_load_round_trip(tmp_path):
    cfg = RunConfig(seed=3, n_way=4, strategy="top_tau:7", learning_rate=0.05,
                    use_transform=True, two_phase=True, out="somewhere")
    path = tmp_path / "run.toml"
    path.write_text(snapshot(cfg))
    assert load_config(str(path)) == cfg


def test_snapshot_is_deterministic_and_typed():
    text = snapshot(RunConfig(seed=1))
    assert text == snapshot(RunConfig(seed=1))
    assert "use_transform = false" in text        # toml booleans, not python
    assert "learning_rate = 0.001" in text
    assert 'strategy = "adaptive"' in text
    assert "seed = 1" in text


def test_snapshot_omits_unset_optionals():
    lines = snapshot(RunConfig(seed=1)).splitlines()
    assert not any(l.startswith(("path ", "d ")) for l in lines)
    with_d = snapshot(RunConfig(seed=1, d=16, path="data")).splitlines()
    assert "d = 16" in with_d and 'path = "data"' in with_d


def test_unknown_section_and_key_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(DataFormatError):
        load_config(str(p))
    p.write_text("[model]\nwidth = 3\n")
    with pytest.raises(DataFormatError):
        load_config(str(p))


def test_malformed_toml_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[run\nseed=")
    with pytest.raises(DataFormatError):
        load_config(str(p))


def test_apply_overrides_skips_none():
    cfg = RunConfig(seed=1, epochs=30)
    out = apply_overrides(cfg, epochs=None, seed=9, strategy=None)
    assert out.epochs == 30 and out.seed == 9
    assert out.strategy == "adaptive"


def test_apply_overrides_rejects_unknown_field():
    with pytest.raises(InvalidInputError):
        apply_overrides(RunConfig(), banana=3)
