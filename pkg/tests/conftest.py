import time
from types import SimpleNamespace

import numpy as np
import pytest

from simco.embed import EmbeddingNet, TrainConfig, oracle_features, train_on_features, type_labels
from simco.shapegen import GeneratorConfig, generate_dataset

DESK_SEED = 2024


def _build(tmp_path_factory, name, num_images, epochs, seed):
    root = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    manifest = generate_dataset(GeneratorConfig(num_images=num_images), seed, root)
    t1 = time.perf_counter()
    ids = type_labels(manifest.records)
    train = oracle_features(manifest, root, "train", type_ids=ids)
    cfg = TrainConfig(epochs=epochs, seed=0)
    net = EmbeddingNet.init(seed=cfg.seed)
    net, curve = train_on_features(net, train, cfg)
    t2 = time.perf_counter()
    return SimpleNamespace(root=root, manifest=manifest, net=net, curve=curve, cfg=cfg, type_ids=ids,
                           gen_seconds=t1 - t0, train_seconds=t2 - t1)


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """300 images, 8 epochs: enough for pipeline fixtures."""
    return _build(tmp_path_factory, "small", 300, 8, 11)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk scale: 2000 images, 30 epochs."""
    return _build(tmp_path_factory, "desk", 2000, 30, DESK_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
