"""Shared fixtures: a tiny dataset and a briefly trained three-layer denoiser."""

from pathlib import Path

import pytest

from src.models.config import DatasetConfig, DenoiserConfig, EditConfig, SpectraConfig, TrainingConfig
from src.services.config_manager import ConfigManager
from src.services.denoiser import train
from src.services.spectra import build_benchmark, gen_dataset, load_clip, load_manifest

REPO_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / "config"

TINY_COUNTS = {'instrument': {'piano': 4, 'violin': 4}}


@pytest.fixture(scope="session")
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture(scope="session")
def config_manager(config_dir) -> ConfigManager:
    manager = ConfigManager(config_dir=str(config_dir))
    manager.load_configurations()
    return manager


@pytest.fixture(scope="session")
def registry(config_manager):
    return config_manager.get_registry()


@pytest.fixture(scope="session")
def tiny_spectra() -> SpectraConfig:
    return SpectraConfig(frames=32, bins=16)


@pytest.fixture(scope="session")
def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(layers=3, tokens=32, latent_dim=16, d_eps=16, d_s=16, d_c=16, d_tau=16,
                          heads=2, hidden=32, timesteps=100)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, registry, tiny_spectra) -> Path:
    """Directory holding manifest.json and benchmark.json for 8 clips of 32x16."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    gen_dataset(DatasetConfig(counts=TINY_COUNTS), 7, out, registry, tiny_spectra)
    build_benchmark(out / "manifest.json", registry, 7, out_path=out / "benchmark.json")
    return out


@pytest.fixture(scope="session")
def tiny_training() -> TrainingConfig:
    return TrainingConfig(steps=60, batch_size=8, learning_rate=3e-3, log_every=20)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tiny_training, tiny_denoiser_config, registry):
    return train(tiny_dataset / "manifest.json", tiny_training, tiny_denoiser_config,
                 vocabulary=registry.vocabulary(), patch=(4, 4))


@pytest.fixture(scope="session")
def tiny_checkpoint_path(tmp_path_factory, tiny_checkpoint) -> Path:
    return tiny_checkpoint.save(tmp_path_factory.mktemp("model") / "tiny.mldm")


@pytest.fixture
def tiny_edit_config() -> EditConfig:
    return EditConfig(t_start=60, layer_window=[2, 3], cfg_w=2.0, steps=10, seed=0)


@pytest.fixture(scope="session")
def tiny_source(tiny_dataset):
    manifest = tiny_dataset / "manifest.json"
    return load_clip(manifest, load_manifest(manifest)[0])
