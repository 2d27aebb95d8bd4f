import pytest

from groundcap.data import SyntheticConfig, generate_dataset


@pytest.fixture(scope="session")
def small_config() -> SyntheticConfig:
    return SyntheticConfig(
        num_classes=30,
        regions_per_scene=8,
        feature_dim=64,
        noise_sigma=0.0,
        scenes={"train": 120, "val": 20, "test": 20},
        captions_per_scene=5,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_dataset(small_config)
