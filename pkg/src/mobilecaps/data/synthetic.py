"""Synthetic Gaussian-blob images for desk-scale experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import ArrayDataset
from .manifest import ManifestRecord, write_manifest
from .pgm import write_pgm


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def class_centres(num_classes: int, size: int) -> list[tuple[float, float]]:
    """Class k's blob sits on a circle around the image centre at angle 2*pi*k/K."""
    r = size * 0.28
    c = (size - 1) / 2
    return [(c - r * np.cos(2 * np.pi * k / num_classes), c + r * np.sin(2 * np.pi * k / num_classes))
            for k in range(num_classes)]


def blob_classification_images(n: int, size: int = 32, num_classes: int = 3, seed: int = 0,
                               noise: float = 0.05, jitter: float = 2.0, sigma: float = 3.0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    centres = class_centres(num_classes, size)
    imgs = np.empty((n, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        cy, cx = centres[k]
        dy, dx = rng.uniform(-jitter, jitter, 2)
        img = 0.8 * _blob(size, cy + dy, cx + dx, sigma) + rng.normal(0, noise, (size, size)) + 0.1
        imgs[i] = np.clip(img, 0, 1)
    return imgs, labels


def blob_severity_images(n: int, size: int = 32, seed: int = 0, noise: float = 0.03,
                         sigma: float = 5.0):
    """Blob peak intensity grows linearly with the RALE score."""
    rng = np.random.default_rng(seed)
    rale = rng.integers(1, 9, size=n)
    imgs = np.empty((n, size, size), dtype=np.float32)
    c = (size - 1) / 2
    for i, score in enumerate(rale):
        p = (score - 1) / 7
        dy, dx = rng.uniform(-3, 3, 2)
        img = (0.1 + 0.8 * p) * _blob(size, c + dy, c + dx, sigma) + rng.normal(0, noise, (size, size)) + 0.05
        imgs[i] = np.clip(img, 0, 1)
    return imgs, rale


def _to_rgb(imgs: np.ndarray) -> np.ndarray:
    return np.repeat(imgs[..., None], 3, axis=-1).astype(np.float32)


def make_blob_classification(n: int = 300, size: int = 32, num_classes: int = 3, seed: int = 0,
                             images_per_patient: int = 2, **kwargs) -> ArrayDataset:
    imgs, labels = blob_classification_images(n, size, num_classes, seed, **kwargs)
    return ArrayDataset(_to_rgb(imgs), labels=labels,
                        patient_ids=[f"p{i // images_per_patient:04d}" for i in range(n)])


def make_blob_severity(n: int = 300, size: int = 32, seed: int = 0, images_per_patient: int = 2,
                       **kwargs) -> ArrayDataset:
    imgs, rale = blob_severity_images(n, size, seed, **kwargs)
    return ArrayDataset(_to_rgb(imgs), rale=rale,
                        patient_ids=[f"p{i // images_per_patient:04d}" for i in range(n)])


def write_synthetic_dataset(root, task: str = "classify", n: int = 60, size: int = 32, seed: int = 0,
                            images_per_patient: int = 2, num_classes: int = 3) -> Path:
    """Write PGM images plus ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if task == "classify":
        imgs, labels = blob_classification_images(n, size, num_classes, seed)
        rale = [None] * n
    elif task == "severity":
        imgs, rale = blob_severity_images(n, size, seed)
        labels = [None] * n
    else:
        raise ValueError(f"unknown task {task!r}")
    records = []
    for i in range(n):
        rel = f"images/img_{i:05d}.pgm"
        write_pgm(root / rel, imgs[i])
        records.append(ManifestRecord(
            image_path=rel, patient_id=f"p{i // images_per_patient:04d}",
            label=None if labels[i] is None else int(labels[i]),
            severity=None if rale[i] is None else int(rale[i]), split="train"))
    manifest = root / "manifest.csv"
    write_manifest(manifest, records)
    return manifest
