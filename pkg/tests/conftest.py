import numpy as np
import pytest
import torch

from metalgan import datapipe, toydata
from metalgan.taskforge import RandomConvBackbone, build_clusters

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    toydata.make_toy_corpus(root, n_images=48, size=16, seed=1)
    return root


@pytest.fixture(scope="session")
def tiny_index(tiny_corpus):
    return datapipe.split(datapipe.ingest(tiny_corpus), 0.25, seed=0)


@pytest.fixture
def tiny_dataset(tiny_index):
    return datapipe.ColorDataset(tiny_index, image_size=16)


@pytest.fixture(scope="session")
def tiny_clusters(tiny_index):
    ds = datapipe.ColorDataset(tiny_index, image_size=16)
    imgs = [ds.rgb(i) for i in tiny_index.train_ids]
    return build_clusters(imgs, RandomConvBackbone(channels=32, seed=0), k=4, pca_dim=8, seed=0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
