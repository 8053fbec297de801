import numpy as np
import pytest

from crosspop import cohort_store, eval_engine
from crosspop.classifier import ModelSpec, TrainSchedule
from crosspop.montage import build_reference_montage
from crosspop.signal_pipeline import DEFAULT_PIPELINE

#: Small site montages that all contain the planted channels C3/C4.
TINY_SITE_A = ("Fp1", "F3", "C3", "C4", "Pz", "O1", "O2")
TINY_SITE_B = ("Fp2", "F4", "C3", "C4", "Cz", "P3", "Oz")
TINY_SITE_C = ("F7", "F8", "C3", "C4", "P4", "O1")


def tiny_synthetic_config(effect_size=1.5, base_seed=10, n_per_class=4):
    populations = (
        cohort_store.PopulationSpec(
            "siteA", n_per_class, n_per_class, TINY_SITE_A, 128.0,
            gain=1.2, site_tone_hz=6.0, spectral_tilt=0.9,
        ),
        cohort_store.PopulationSpec(
            "siteB", n_per_class, n_per_class, TINY_SITE_B, 128.0,
            gain=0.8, site_tone_hz=14.0, spectral_tilt=1.1,
        ),
        cohort_store.PopulationSpec(
            "siteC", n_per_class, n_per_class, TINY_SITE_C, 160.0,
            gain=1.0, site_tone_hz=22.0, spectral_tilt=1.0,
        ),
    )
    return cohort_store.SyntheticConfig(
        populations=populations,
        seconds_range=(35.0, 45.0),
        effect_size=effect_size,
        base_seed=base_seed,
    )


class EngineConfig:
    """Minimal duck-typed run configuration for engine-level tests."""

    def __init__(self, base_seed=10, inner_folds=4, k_subsets=(2, 4, 8)):
        self.model_spec = ModelSpec(kind="band_logistic")
        self.inner_model_spec = ModelSpec(kind="band_logistic")
        self.schedule = TrainSchedule(base_seed=base_seed)
        self.k_subsets = k_subsets
        self.inner_folds = inner_folds
        self.threshold = 0.5
        self.base_seed = base_seed


@pytest.fixture(scope="session")
def montage():
    return build_reference_montage()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    manifests = cohort_store.generate_synthetic(tiny_synthetic_config(), out)
    return manifests


@pytest.fixture(scope="session")
def tiny_store(tiny_corpus, montage):
    return eval_engine.FrameStore(
        tiny_corpus, montage, DEFAULT_PIPELINE, ModelSpec(kind="band_logistic")
    )
