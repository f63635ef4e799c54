"""Class balancing and patient-wise k-fold splitting."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .manifest import ManifestRecord


def balance_classes(records: list[ManifestRecord], target_per_class: int, rng: np.random.Generator,
                    num_classes: int | None = None) -> list[ManifestRecord]:
    """Resample every class to exactly ``target_per_class`` rows.

    Larger classes are uniformly undersampled without replacement. Smaller
    classes keep all their rows and are topped up with synthetic copies
    (``synthetic=True``) whose ``aug_seed`` drives a random augmentation when
    the image is materialised. Output is grouped by class, originals first.
    """
    if target_per_class < 1:
        raise ValueError(f"target_per_class must be >= 1, got {target_per_class}")
    if any(r.label is None for r in records):
        raise ValueError("balance_classes needs a class label on every record")
    k = num_classes if num_classes is not None else (max(r.label for r in records) + 1 if records else 0)
    by_class: list[list[int]] = [[] for _ in range(k)]
    for i, r in enumerate(records):
        by_class[r.label].append(i)
    out: list[ManifestRecord] = []
    for cls, idx in enumerate(by_class):
        if not idx:
            raise ValueError(f"class {cls} has no records to balance from")
        n = len(idx)
        if n >= target_per_class:
            keep = np.sort(rng.choice(n, size=target_per_class, replace=False))
            out.extend(records[idx[j]] for j in keep)
            continue
        out.extend(records[i] for i in idx)
        extra = target_per_class - n
        order = np.concatenate([rng.permutation(n) for _ in range(-(-extra // n))])[:extra]
        seeds = rng.integers(0, 2**32, size=extra)
        out.extend(replace(records[idx[j]], synthetic=True, aug_seed=int(s)) for j, s in zip(order, seeds))
    return out


def kfold_split(records: list[ManifestRecord], k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """k (train, val) index pairs with every patient confined to one fold.

    Patients are shuffled with ``seed`` and dealt round-robin, so fold sizes
    (in patients) differ by at most one and earlier folds take the remainder.
    """
    patients = sorted({r.patient_id for r in records})
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(patients) < k:
        raise ValueError(f"{len(patients)} distinct patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    fold_of = {patients[p]: f % k for f, p in enumerate(order)}
    assignment = np.array([fold_of[r.patient_id] for r in records])
    all_idx = np.arange(len(records))
    return [(all_idx[assignment != f], all_idx[assignment == f]) for f in range(k)]
