"""key=value configuration: parsing, typing, precedence, hashing."""

import pytest

from tcfnet import config as cfgmod


def test_parse_text_comments_and_blanks():
    text = "# run\narchitecture = lenet\n\nlr=0.001  # faster\n"
    assert cfgmod.parse_text(text) == {"architecture": "lenet", "lr": "0.001"}


@pytest.mark.parametrize("bad", ["lr 0.1", "=3"])
def test_parse_text_rejects_malformed_lines(bad):
    with pytest.raises(cfgmod.ConfigError, match="<config>:1"):
        cfgmod.parse_text(bad)


def test_resolve_types_and_precedence():
    cfg = cfgmod.resolve({"lr": "0.01", "max_epochs": "7", "architecture": "lenet"}, {"lr": 0.5, "seed": None})
    assert cfg["lr"] == 0.5 and cfg["max_epochs"] == 7 and cfg["architecture"] == "lenet"
    assert cfg["seed"] == 0  # None overrides are ignored
    defaults = cfgmod.resolve()
    assert defaults["lr"] == pytest.approx(1e-4) and defaults["architecture"] == "eeg-tcfnet"


def test_resolve_rejects_unknown_and_uncoercible():
    with pytest.raises(cfgmod.ConfigError, match="unknown config key"):
        cfgmod.resolve({"learning_rate": "1"})
    with pytest.raises(cfgmod.ConfigError, match="max_epochs"):
        cfgmod.resolve({"max_epochs": "many"})


def test_render_roundtrip_and_hash():
    cfg = cfgmod.resolve({"architecture": "eeg-tcnet", "lr": "0.001"})
    again = cfgmod.resolve(cfgmod.parse_text(cfgmod.render(cfg)))
    assert again == cfg
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg)
    assert cfgmod.config_hash(cfgmod.resolve({"seed": "1"})) != cfgmod.config_hash(cfgmod.resolve())


def test_split_builds_component_configs():
    tcfg, mcfg, pcfg = cfgmod.split(cfgmod.resolve({"lr": "0.002", "fnb_k": "3"}))
    assert tcfg.lr == 0.002 and mcfg.fnb_k == 3 and pcfg.factor == 20


def test_read_file_missing(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="not found"):
        cfgmod.read_file(tmp_path / "nope.cfg")
