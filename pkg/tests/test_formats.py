from __future__ import annotations

import numpy as np
import pytest
from conftest import label_only_dataset

from fedmim.data import partition_from_manifest
from fedmim.formats import (
    load_checkpoint,
    read_image_dataset,
    read_images,
    read_labels,
    read_manifest,
    save_checkpoint,
    write_images,
    write_labels,
    write_manifest,
)
from fedmim.model import ModelParams, init_pretrain_params
from fedmim.tokenizer import Codebook


def test_checkpoint_roundtrip_is_bitwise(tmp_path, geometry, dims):
    for dtype in (np.float32, np.float64):
        params = init_pretrain_params("mae", geometry, dims, seed=1, dtype=dtype)
        path = save_checkpoint(tmp_path / f"ck_{np.dtype(dtype).name}.fmim", params)
        loaded, codebook = load_checkpoint(path)
        assert codebook is None
        assert list(loaded) == list(params)
        for name in params:
            assert loaded[name].dtype == params[name].dtype
            assert np.array_equal(loaded[name].data, params[name].data)


def test_checkpoint_keeps_codebook(tmp_path):
    params = ModelParams.from_arrays({"enc/x": np.arange(6, dtype=np.float64).reshape(2, 3), "s": np.array(2.5)})
    cb = Codebook(np.array([[0.0, 1.0], [1.0, 0.0]]), iterations=7, inertia=0.125, seed=3)
    loaded, got = load_checkpoint(save_checkpoint(tmp_path / "ck.fmim", params, cb))
    assert np.array_equal(got.centroids, cb.centroids)
    assert (got.iterations, got.inertia, got.seed) == (7, 0.125, 3)
    assert list(loaded) == ["enc/x", "s"]
    assert loaded["s"].shape == ()


def test_checkpoint_is_byte_stable(tmp_path, geometry, dims):
    params = init_pretrain_params("mae", geometry, dims, seed=2)
    a = save_checkpoint(tmp_path / "a.fmim", params).read_bytes()
    b = save_checkpoint(tmp_path / "b.fmim", params.copy()).read_bytes()
    assert a == b
    assert a[:4] == b"FMIM"


def test_checkpoint_rejects_garbage(tmp_path, geometry, dims):
    bad = tmp_path / "bad.fmim"
    bad.write_bytes(b"NOPE0000")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    raw = save_checkpoint(tmp_path / "ok.fmim", init_pretrain_params("mae", geometry, dims, 0)).read_bytes()
    bad.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncado"):
        load_checkpoint(bad)


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_image_container_roundtrip(tmp_path, dtype):
    images = np.random.default_rng(0).random((3, 4, 6, 2)).astype(np.float32 if dtype == "f32" else np.float64)
    back = read_images(write_images(tmp_path / "x.fimg", images, dtype=dtype))
    assert back.dtype == images.dtype
    assert np.array_equal(back, images)


def test_image_container_u8(tmp_path):
    images = np.array([0, 128, 255], dtype=np.float64).reshape(1, 1, 3, 1) / 255.0
    back = read_images(write_images(tmp_path / "x.fimg", images, dtype="u8"))
    np.testing.assert_array_equal(np.rint(back * 255), [[[[0], [128], [255]]]])


def test_labels_and_dataset(tmp_path):
    images = np.random.default_rng(0).random((4, 2, 2, 1))
    write_images(tmp_path / "train.fimg", images, dtype="f64")
    write_labels(tmp_path / "train.csv", np.array([0, 1, 1, 0]), client_ids=np.array([1, 0, 0, 1]))
    labels, clients = read_labels(tmp_path / "train.csv")
    assert labels.tolist() == [0, 1, 1, 0] and clients.tolist() == [1, 0, 0, 1]
    ds, clients = read_image_dataset(tmp_path / "train.fimg", tmp_path / "train.csv", 2)
    assert np.array_equal(ds.images, images)

    write_labels(tmp_path / "plain.csv", np.array([1, 0]))
    assert read_labels(tmp_path / "plain.csv")[1] is None
    with pytest.raises(ValueError):
        read_image_dataset(tmp_path / "train.fimg", tmp_path / "plain.csv", 2)


def test_manifest_roundtrip(tmp_path):
    ds = label_only_dataset([0, 1, 0, 1, 1], 2)
    part = partition_from_manifest(3, np.array([2, 0, 0, 1, 2]), np.arange(5), ds)
    back = read_manifest(write_manifest(tmp_path / "m.csv", part), ds, 3)
    assert [ix.tolist() for ix in back.client_indices] == [[1, 2], [3], [0, 4]]
    np.testing.assert_array_equal(back.proportions, part.proportions)
