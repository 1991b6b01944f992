import numpy as np
import pytest
import torch

from exittrainer.data import (
    DatasetUnavailable,
    load_dataset,
    make_digits,
    split_train_val,
)


def test_digits_deterministic_and_in_range():
    a_images, a_labels = make_digits(64, seed=5)
    b_images, b_labels = make_digits(64, seed=5)
    assert torch.equal(a_images, b_images)
    assert torch.equal(a_labels, b_labels)
    assert a_images.shape == (64, 3, 32, 32)
    assert float(a_images.min()) >= 0.0 and float(a_images.max()) <= 1.0
    c_images, _ = make_digits(64, seed=6)
    assert not torch.equal(a_images, c_images)


def test_digits_all_classes_present():
    _, labels = make_digits(512, seed=1)
    assert set(labels.tolist()) == set(range(10))


def test_split_disjoint_and_deterministic():
    images, labels = make_digits(200, seed=2)
    (tx, ty), (vx, vy) = split_train_val(images, labels, 0.10, seed=3)
    assert len(vx) == 20 and len(tx) == 180
    (tx2, _), (vx2, _) = split_train_val(images, labels, 0.10, seed=3)
    assert torch.equal(tx, tx2) and torch.equal(vx, vx2)
    # disjointness: every validation image differs from every training image
    flat_train = tx.reshape(len(tx), -1)
    flat_val = vx.reshape(len(vx), -1)
    for v in flat_val:
        assert not (flat_train == v).all(dim=1).any()


def test_load_digits_via_dispatcher(tmp_path):
    images, labels, classes = load_dataset("digits", 32, seed=0,
                                           data_root=str(tmp_path))
    assert images.shape == (32, 3, 32, 32)
    assert classes == 10


def test_unknown_dataset_rejected(tmp_path):
    with pytest.raises(DatasetUnavailable):
        load_dataset("imagenet", 16, seed=0, data_root=str(tmp_path))


def test_missing_torchvision_dataset_raises_unavailable(tmp_path):
    # no local data and (in this environment) no way to download it
    try:
        images, labels, classes = load_dataset("svhn", 16, seed=0,
                                               data_root=str(tmp_path))
    except DatasetUnavailable:
        return
    assert images.shape[0] == 16  # environment had the dataset after all
