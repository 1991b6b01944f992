"""Datasets for desk-scale evaluator runs.

``svhn``, ``cifar10`` and ``cifar100`` come from torchvision and require the
data to be present locally (or downloadable). ``digits`` is a built-in,
deterministic, procedurally rendered 10-class dataset (SVHN-shaped 3x32x32
tensors) for environments with no dataset access.
"""

from __future__ import annotations

import numpy as np
import torch


class DatasetUnavailable(Exception):
    pass


# 5x7 digit glyphs; '#' marks foreground
_GLYPHS = [
    ["#####", "#...#", "#...#", "#...#", "#...#", "#...#", "#####"],  # 0
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],  # 1
    ["#####", "....#", "....#", "#####", "#....", "#....", "#####"],  # 2
    ["#####", "....#", "....#", ".####", "....#", "....#", "#####"],  # 3
    ["#...#", "#...#", "#...#", "#####", "....#", "....#", "....#"],  # 4
    ["#####", "#....", "#....", "#####", "....#", "....#", "#####"],  # 5
    ["#####", "#....", "#....", "#####", "#...#", "#...#", "#####"],  # 6
    ["#####", "....#", "...#.", "..#..", "..#..", ".#...", ".#..."],  # 7
    ["#####", "#...#", "#...#", "#####", "#...#", "#...#", "#####"],  # 8
    ["#####", "#...#", "#...#", "#####", "....#", "....#", "#####"],  # 9
]

_GLYPH_MASKS = np.array(
    [[[c == "#" for c in row] for row in glyph] for glyph in _GLYPHS], dtype=np.float32
)


def _render_digit(rng, label):
    """One noisy 3x32x32 image of the given digit, roughly centered."""
    scale = 3                                            # glyph cell size in pixels
    mask = np.kron(_GLYPH_MASKS[label], np.ones((scale, scale), dtype=np.float32))
    h, w = mask.shape
    canvas = np.zeros((32, 32), dtype=np.float32)
    top = (32 - h) // 2 + int(rng.integers(-3, 4))
    left = (32 - w) // 2 + int(rng.integers(-3, 4))
    canvas[top:top + h, left:left + w] = mask

    bg = rng.uniform(0.0, 0.25, size=3).astype(np.float32)
    fg = rng.uniform(0.75, 1.0, size=3).astype(np.float32)
    img = bg[:, None, None] + (fg - bg)[:, None, None] * canvas[None, :, :]
    img += rng.normal(0.0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def make_digits(n, seed):
    """Deterministic procedural digit images; returns (float tensor, labels)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.stack([_render_digit(rng, int(y)) for y in labels])
    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def _load_torchvision(dataset_id, root, n, seed):
    from torchvision import datasets

    try:
        if dataset_id == "svhn":
            ds = datasets.SVHN(root=root, split="train", download=True)
            images = torch.from_numpy(ds.data).float() / 255.0
            labels = torch.from_numpy(ds.labels.astype(np.int64))
        elif dataset_id in ("cifar10", "cifar100"):
            cls = datasets.CIFAR10 if dataset_id == "cifar10" else datasets.CIFAR100
            ds = cls(root=root, train=True, download=True)
            images = torch.from_numpy(ds.data).float().permute(0, 3, 1, 2) / 255.0
            labels = torch.tensor(ds.targets, dtype=torch.int64)
        else:
            raise DatasetUnavailable(f"unknown dataset id {dataset_id!r}")
    except DatasetUnavailable:
        raise
    except Exception as exc:  # download/read failures of any kind
        raise DatasetUnavailable(f"dataset {dataset_id!r} unavailable: {exc}") from exc
    if n is not None and n < len(images):
        idx = torch.randperm(len(images), generator=torch.Generator().manual_seed(seed))[:n]
        images, labels = images[idx], labels[idx]
    return images, labels


def load_dataset(dataset_id, subset_size, seed, data_root="./data"):
    """Returns (images [N,3,32,32] in [0,1], labels [N], num_classes)."""
    if dataset_id == "digits":
        images, labels = make_digits(subset_size or 2000, seed)
        return images, labels, 10
    images, labels = _load_torchvision(dataset_id, data_root, subset_size, seed)
    classes = 100 if dataset_id == "cifar100" else 10
    return images, labels, classes


def split_train_val(images, labels, val_fraction, seed):
    """Deterministic disjoint split; validation is the stated fraction."""
    n = len(images)
    n_val = max(1, int(round(n * val_fraction)))
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed + 1))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return (images[train_idx], labels[train_idx]), (images[val_idx], labels[val_idx])
