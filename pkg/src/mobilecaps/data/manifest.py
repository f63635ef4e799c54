"""CSV manifest records and dataset ingestion."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pgm import PGMError, read_pgm

MANIFEST_COLUMNS = ("path", "label", "severity", "patient_id", "split")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    patient_id: str
    label: int | None = None
    severity: int | None = None
    split: str | None = None
    synthetic: bool = False
    aug_seed: int | None = None

    def __post_init__(self):
        if self.label is None and self.severity is None:
            raise ValueError(f"{self.image_path}: record needs a label or a severity score")
        if self.severity is not None and not 1 <= self.severity <= 8:
            raise ValueError(f"{self.image_path}: severity {self.severity} outside RALE range 1..8")
        if self.label is not None and self.label < 0:
            raise ValueError(f"{self.image_path}: negative class label {self.label}")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"{self.image_path}: unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RowError:
    row: int
    path: str
    message: str

    def __str__(self) -> str:
        return f"row {self.row} ({self.path}): {self.message}"


@dataclass
class LoadedDataset:
    records: list[ManifestRecord] = field(default_factory=list)
    images: dict[str, np.ndarray] = field(default_factory=dict)  # image_path -> [h, w, 1]
    errors: list[RowError] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _opt_int(value: str | None) -> int | None:
    value = (value or "").strip()
    return int(value) if value else None


def parse_manifest(manifest_path) -> tuple[list[tuple[int, ManifestRecord]], list[RowError]]:
    rows, errors = [], []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return rows, errors
        missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{manifest_path}: manifest header lacks columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            path = (row.get("path") or "").strip()
            try:
                rec = ManifestRecord(
                    image_path=path,
                    patient_id=(row.get("patient_id") or "").strip() or path,
                    label=_opt_int(row.get("label")),
                    severity=_opt_int(row.get("severity")),
                    split=(row.get("split") or "").strip() or None,
                )
            except ValueError as exc:
                errors.append(RowError(lineno, path, str(exc)))
                continue
            rows.append((lineno, rec))
    return rows, errors


def load_dataset(manifest_path, image_root=None) -> LoadedDataset:
    """Decode every well-formed row; malformed rows become :class:`RowError` entries."""
    manifest_path = Path(manifest_path)
    root = Path(image_root) if image_root is not None else manifest_path.parent
    rows, errors = parse_manifest(manifest_path)
    out = LoadedDataset(errors=errors)
    for lineno, rec in rows:
        if rec.image_path not in out.images:
            file = root / rec.image_path
            try:
                out.images[rec.image_path] = read_pgm(file)
            except FileNotFoundError:
                out.errors.append(RowError(lineno, rec.image_path, f"missing file {file}"))
                continue
            except PGMError as exc:
                out.errors.append(RowError(lineno, rec.image_path, str(exc)))
                continue
        out.records.append(rec)
    return out


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.image_path, "" if r.label is None else r.label,
                             "" if r.severity is None else r.severity, r.patient_id, r.split or ""])
