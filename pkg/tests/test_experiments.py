"""Ordenações de mesa sobre configs/desk_default.yaml (minutos de CPU; rodar com -m slow)."""
from __future__ import annotations

from pathlib import Path

import pytest

from fedmim.config import load_config
from fedmim.experiments import ablate_labels, compare

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_default.yaml"
SEEDS = (0, 1, 2)
NEAR_IID = 100.0

pytestmark = pytest.mark.slow


@pytest.fixture(autouse=True)
def quiet_logs(monkeypatch):
    monkeypatch.setenv("FMIM_LOG", "error")


@pytest.fixture(scope="module")
def desk_cfg():
    return load_config(DESK_CONFIG)


def _accuracy(summary, **keys) -> float:
    rows = summary
    for column, value in keys.items():
        rows = rows[rows[column] == value]
    assert len(rows) == 1, keys
    return float(rows["accuracy_mean"].iloc[0])


def test_pretraining_beats_scratch_and_shrinks_the_non_iid_drop(tmp_path, desk_cfg):
    summary = compare(desk_cfg, tmp_path / "compare", ("fedavg", "scratch"), (NEAR_IID, 0.5), SEEDS)
    pre_iid = _accuracy(summary, arm="fedavg", alpha=NEAR_IID)
    pre_skew = _accuracy(summary, arm="fedavg", alpha=0.5)
    scratch_iid = _accuracy(summary, arm="scratch", alpha=NEAR_IID)
    scratch_skew = _accuracy(summary, arm="scratch", alpha=0.5)

    assert pre_iid >= 0.90
    assert pre_skew - scratch_skew >= 0.03
    assert pre_iid - pre_skew < scratch_iid - scratch_skew
    assert (tmp_path / "compare" / "compare.csv").exists()


def test_pretraining_helps_most_with_few_labels(tmp_path, desk_cfg):
    cfg = desk_cfg.replace("partition", alpha=NEAR_IID)
    summary = ablate_labels(cfg, tmp_path / "labels", (0.1, 0.3, 0.7, 1.0), SEEDS)
    assert sorted(summary["label_fraction"].unique()) == [0.1, 0.3, 0.7, 1.0]
    gain = _accuracy(summary, arm="pretrained", label_fraction=0.1) - _accuracy(summary, arm="scratch", label_fraction=0.1)
    assert gain >= 0.05
