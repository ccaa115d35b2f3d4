from dataclasses import fields

import pytest
from hypothesis import given
from hypothesis import strategies as st

from moedepth.config import ConfigError, RunConfig

values = {
    "int": st.integers(-10**9, 10**9),
    "float": st.floats(allow_nan=False, allow_infinity=False),
    "bool": st.booleans(),
    "str": st.text(alphabet="0123456789e.,-", max_size=20).map(str.strip),
}


@st.composite
def configs(draw):
    kw = {}
    for f in fields(RunConfig):
        if draw(st.booleans()):
            kw[f.name] = draw(values[f.type if isinstance(f.type, str) else f.type.__name__])
    return RunConfig(**kw)


@given(configs())
def test_print_parse_identity(cfg):
    text = cfg.to_text()
    assert RunConfig.from_text(text) == cfg
    assert RunConfig.from_text(text).to_text() == text


def test_every_field_printed_once():
    lines = RunConfig().to_text().splitlines()
    assert [line.split("=")[0] for line in lines] == [f.name for f in fields(RunConfig)]


def test_unknown_and_malformed_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_text("experts=2\nbanana=1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("experts\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("experts=two\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("freeze_encoder=maybe\n")


def test_comments_dashes_and_overrides():
    cfg = RunConfig.from_text("# run\n\nlambda-e = 0.01\nfreeze_encoder=yes\n")
    assert cfg.lambda_e == 0.01 and cfg.freeze_encoder
    assert cfg.with_overrides({"experts": "1"}).experts == 1


def test_defaults_feed_components():
    cfg = RunConfig()
    assert cfg.net_config().num_experts == 4 and cfg.loss_config().lambda_e == 1e-4
    assert cfg.scene_spec().num_objects is None and cfg.scene_spec().height == 64
    assert cfg.lambda_list() == [1e-2, 1e-3, 1e-4, 0.0]
    assert cfg.edge_config().threshold == 50.0
    with pytest.raises(ConfigError):
        RunConfig(lambdas="1,x").lambda_list()
