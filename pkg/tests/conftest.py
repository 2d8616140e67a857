import os

import pytest

from pinfer.config import AppConfig
from pinfer.dataset import generate_dataset
from pinfer.sim import EnvConfig


def pytest_collection_modifyitems(config, items):
    if os.getenv("PINFER_SLOW"):
        return
    skip = pytest.mark.skip(reason="training run; set PINFER_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(kind: str | None = None) -> AppConfig:
    """Network sizes small enough for a training step in well under a second."""
    cfg = AppConfig()
    cfg.override("env", kind=kind)
    cfg.override("model", hidden=8, edge_radius=1.5, vp_window=2, vp_hidden=8, vp_channels=[2, 4],
                 grid_size=8, gru_layers=1, inference_window=4, rollout_train_steps=1)
    cfg.override("train", vp_iterations=3, vp_batch=2, dp_epochs=1, dp_batch=4, dp_window_stride=4,
                 inf_epochs=1, inf_batch=2, inf_window_stride=4, log_every=1)
    cfg.override("eval", horizons=[1, 2], t_min=1, t_max=4, window=4, baseline_draws=2000)
    return cfg


@pytest.fixture()
def small_config():
    return tiny_config()


@pytest.fixture(scope="session")
def rigidfall_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("rigidfall")
    return generate_dataset(EnvConfig.preset("rigidfall", steps=12), 11, seed=3, out_dir=root)


@pytest.fixture(scope="session")
def massrope_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("massrope")
    return generate_dataset(EnvConfig.preset("massrope", steps=12), 11, seed=4, out_dir=root)
