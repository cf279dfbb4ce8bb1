import pytest

from diffinv.config import ExperimentConfig
from diffinv.synthetic import generate_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small on-disk corpus: 4 classes, 6 images each, 16x16."""
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, num_classes=4, per_class=6, image_size=16, seed=7)
    return root


@pytest.fixture()
def tiny_cfg(corpus_dir):
    cfg = ExperimentConfig()
    cfg.seed = 3
    cfg.image_size = 16
    cfg.num_classes = 2
    cfg.data.source_dir = str(corpus_dir)
    cfg.data.private_classes = [1, 3]
    return cfg
