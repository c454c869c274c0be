from __future__ import annotations

import numpy as np
import pytest

from fedmim.data import Dataset, PartitionSpec, dirichlet_partition, synth_dataset
from fedmim.model import ImageGeometry, ModelDims

TINY_CONFIG = """\
run:
  seed: 3
  precision: 64
  stages: [partition, pretrain, finetune, evaluate]
geometry:
  height: 8
  width: 8
  channels: 1
  patch: 4
model:
  dim: 8
  depth: 1
  heads: 2
  decoder_depth: 1
  codebook_size: 4
data:
  classes: 2
  n_per_class: 6
  n_test_per_class: 3
  n_public_per_class: 4
partition:
  num_clients: 2
  alpha: 1.0
federation:
  batch_size: 4
pretrain:
  method: mae
  rounds: 2
  warmup_rounds: 1
  mask_ratio: 0.5
  min_block: 1
finetune:
  rounds: 2
  warmup_rounds: 1
"""


@pytest.fixture
def geometry() -> ImageGeometry:
    return ImageGeometry(height=8, width=8, channels=1, patch=4)


@pytest.fixture
def dims() -> ModelDims:
    return ModelDims(dim=8, depth=1, heads=2, decoder_depth=1, codebook_size=4, num_classes=2)


@pytest.fixture
def tiny_data(geometry):
    return synth_dataset(2, 6, geometry, seed=0, n_test_per_class=3, n_public_per_class=4)


@pytest.fixture
def tiny_partition(tiny_data):
    return dirichlet_partition(tiny_data.train, PartitionSpec(num_clients=2, alpha=1.0, seed=0))


def label_only_dataset(labels, num_classes: int) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.zeros((labels.size, 1, 1, 1)), labels, num_classes)


@pytest.fixture
def tiny_config_text() -> str:
    return TINY_CONFIG


@pytest.fixture
def tiny_config_path(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.yaml"
    path.write_text(tiny_config_text, encoding="utf-8")
    return path
