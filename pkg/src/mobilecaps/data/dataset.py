"""In-memory model-ready datasets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .manifest import LoadedDataset, ManifestRecord
from .transforms import AugmentConfig, augment, preprocess


@dataclass
class ArrayDataset:
    images: np.ndarray                       # float32 [N, H, W, 3] in [0, 1]
    labels: np.ndarray | None = None         # int [N]
    rale: np.ndarray | None = None           # int [N], 1..8
    patient_ids: list[str] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)
    synthetic: np.ndarray | None = None      # bool [N]

    def __post_init__(self):
        n = len(self.images)
        if not self.patient_ids:
            self.patient_ids = [str(i) for i in range(n)]
        if not self.paths:
            self.paths = [f"sample_{i:05d}" for i in range(n)]
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def severity_targets(self) -> np.ndarray:
        return ((self.rale - 1) / 7).astype(np.float32)

    def subset(self, idx) -> ArrayDataset:
        idx = np.asarray(idx, dtype=int)
        return ArrayDataset(
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            rale=None if self.rale is None else self.rale[idx],
            patient_ids=[self.patient_ids[i] for i in idx],
            paths=[self.paths[i] for i in idx],
            synthetic=self.synthetic[idx],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        for arr in (self.labels, self.rale):
            if arr is not None:
                h.update(np.asarray(arr, dtype=np.int64).tobytes())
        h.update("\n".join(self.patient_ids).encode())
        return h.hexdigest()


def materialize(records: list[ManifestRecord], images: dict[str, np.ndarray], size: int,
                aug_cfg: AugmentConfig | None = None) -> ArrayDataset:
    """Preprocess every record to [size, size, 3]; synthetic rows are augmented first."""
    aug_cfg = aug_cfg or AugmentConfig()
    out = np.empty((len(records), size, size, 3), dtype=np.float32)
    for i, rec in enumerate(records):
        img = images[rec.image_path]
        if rec.synthetic:
            img = augment(img, aug_cfg, np.random.default_rng(rec.aug_seed))
        out[i] = preprocess(img, size)
    labels = [r.label for r in records]
    rale = [r.severity for r in records]
    return ArrayDataset(
        images=out,
        labels=np.array(labels, dtype=int) if records and all(v is not None for v in labels) else None,
        rale=np.array(rale, dtype=int) if records and all(v is not None for v in rale) else None,
        patient_ids=[r.patient_id for r in records],
        paths=[r.image_path for r in records],
        synthetic=np.array([r.synthetic for r in records], dtype=bool),
    )


def from_loaded(loaded: LoadedDataset, size: int, aug_cfg: AugmentConfig | None = None) -> ArrayDataset:
    return materialize(loaded.records, loaded.images, size, aug_cfg)
