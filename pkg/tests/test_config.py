import pytest

from flexhev.config import KEYS, ConfigError, dump_config, load_config, parse_config_text


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    cfg = load_config(tmp_path / "c.txt")
    assert cfg.values == load_config(None).values
    p = cfg.model_params()
    assert (p.vehicle.m, p.vehicle.r, p.battery.V_batt, p.battery.R_batt, p.battery.Q_batt) == (1350, 0.28, 202, 0.45, 23400)
    assert (p.powertrain.r_r, p.powertrain.r_s, p.powertrain.k_C) == (0.078, 0.030, 3.9)
    assert cfg.x0 == (0.0, 0.0, 0.6)
    assert cfg.state_grid().n == (15, 15, 41)
    assert len(cfg.input_grid().omega_e) == 31 and len(cfg.input_grid().dTd) == 31


def test_single_override():
    cfg = parse_config_text("# vehicle\nm = 1500   # kg\n")
    assert cfg.model_params().vehicle.m == 1500.0
    changed = {k for k in KEYS if cfg.values[k] != KEYS[k].default}
    assert changed == {"m"} and cfg.lines == {"m": 2}


@pytest.mark.parametrize("text,line", [
    ("mu_R = 1.5\n", 1),
    ("\n\nm = -3\n", 3),
    ("m = 1500\nfoo = 1\n", 2),
    ("m = 1500\nm = 1600\n", 2),
    ("m 1500\n", 1),
    ("n_dx = 2.5\n", 1),
    ("exact_terminal = maybe\n", 1),
    ("rho = nan\n", 1),
])
def test_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert f":{line}:" in str(info.value)


@pytest.mark.parametrize("text", [
    "soc_low = 0.65\n",
    "soc_N_min = 0.45\n",
    "r_s = 0.1\n",
    "optimizer = sgd\n",
    "log_targets = true\nvalue_prior = true\n",
    "hidden = 0,4\n",
    "soc0 = 0.8\n",
    "fuel_map = /nonexistent.csv\n",
])
def test_cross_key_checks(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")


def test_dump_roundtrip(tmp_path):
    cfg = parse_config_text("m = 1500\nseed = 7\nhidden = 16,8\nlog_targets = false\nalpha = 3e-5\n")
    text = dump_config(cfg)
    assert all("#" in line for line in text.splitlines())
    (tmp_path / "c.txt").write_text(text)
    back = load_config(tmp_path / "c.txt")
    assert back.values == cfg.values
    assert dump_config(back) == text
    assert back.training() == cfg.training() and back.hidden_layers == (16, 8)


def test_overrides_revalidate():
    cfg = load_config(None)
    assert cfg.with_overrides(seed=5).training().seed == 5
    with pytest.raises(ConfigError):
        cfg.with_overrides(soc0=0.95)
    with pytest.raises(ConfigError):
        cfg.with_overrides(n_dx="many")
