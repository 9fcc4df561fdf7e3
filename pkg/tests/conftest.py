import numpy as np
import pytest

from eegrecon.data import SyntheticSpec, generate_synthetic_dataset, split_dataset
from eegrecon.pipeline import default_synthetic_config, run_ablation_matrix, run_pipeline


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Very small dataset for fast unit tests (2 classes, 1 subject)."""
    root = tmp_path_factory.mktemp("tiny-data")
    spec = SyntheticSpec(n_classes=2, images_per_class=4, subjects=1,
                         channels=4, samples=32, height=16, width=16, snr=10.0)
    manifest = generate_synthetic_dataset(spec, seed=5, out_dir=root)
    split = split_dataset(manifest, (0.5, 0.25, 0.25), seed=5)
    return manifest, split


@pytest.fixture(scope="session")
def desk_config(tmp_path_factory):
    return default_synthetic_config(tmp_path_factory.mktemp("desk-run"), seed=0)


@pytest.fixture(scope="session")
def desk_record(desk_config):
    """One full end-to-end synthetic run, shared across the suite."""
    return run_pipeline(desk_config)


@pytest.fixture(scope="session")
def ablation_records(desk_config, desk_record):
    """Five-row ablation matrix; shares the desk run's stage cache."""
    return run_ablation_matrix(desk_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
