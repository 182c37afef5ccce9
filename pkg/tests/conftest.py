import numpy as np
import pytest

from salemb import datagen, saliency


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small generated corpus with saliency targets, shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = datagen.DataConfig(
        n_train=24, n_eval=12, pool_size=12, bank_per_class=2, seed=11
    )
    datagen.generate_corpus(cfg, root)
    saliency.build_corpus_targets(root, saliency.PipelineConfig())
    return datagen.load_corpus(root)
