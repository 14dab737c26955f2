import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from erpflow.config import ConfigError, FingerprintConfig, PathsConfig, RunConfig
from erpflow.expert import ExpertConfig
from erpflow.inference import ALL_ORDERS, InferenceOptions
from erpflow.seqmoe import SeqTrainConfig


def test_default_round_trip():
    cfg = RunConfig()
    text = cfg.to_text()
    assert RunConfig.from_text(text) == cfg
    assert RunConfig.from_text(text).to_text() == text


@given(
    st.sampled_from([(16, 2), (32, 4), (24, 8)]), st.integers(0, 4), st.floats(0.0, 0.5),
    st.integers(0, 2 ** 31), st.floats(1e-6, 1e-1), st.booleans(), st.sampled_from(ALL_ORDERS),
    st.integers(0, 8), st.text("abc/_.", max_size=12),
)
def test_round_trip_property(dims, rounds, rate, seed, lr, drop, order, n_seeds, path):
    cfg = RunConfig(
        expert=ExpertConfig(embed_dim=dims[0], attn_heads=dims[1], gnn_rounds=rounds, dropout_rate=rate),
        training=SeqTrainConfig(seed=seed, lr=lr, training_dropout=drop),
        inference=InferenceOptions(order=order, n_seeds=n_seeds),
        fingerprint=FingerprintConfig(radius=1, length=512),
        paths=PathsConfig(train=path),
    )
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_seed_lives_in_run_section():
    cfg = RunConfig.from_text("[run]\nseed = 42\n")
    assert cfg.seed == 42 and cfg.training.seed == 42
    with pytest.raises(ConfigError):
        RunConfig.from_text("[training]\nseed = 3\n")


@pytest.mark.parametrize("text", [
    "[expert]\nembed_dims = 32\n",
    "[bogus]\nx = 1\n",
    "[run]\nseeds = 1\n",
    "[expert]\nembed_dim = many\n",
    "[training]\ntraining_dropout = maybe\n",
    "[expert]\nembed_dim = 30\n",
    "[inference]\norder = chief,selected\n",
    "no section header\n",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_keys_are_case_sensitive():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[expert]\nEmbed_Dim = 32\n")


def test_partial_config_keeps_defaults():
    cfg = RunConfig.from_text("[expert]\nembed_dim = 16\nattn_heads = 2\n")
    assert cfg.expert.embed_dim == 16 and cfg.training == dataclasses.replace(SeqTrainConfig())


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.cfg")
