"""Dataset ingestion, preprocessing, augmentation and splitting."""

from .dataset import ArrayDataset, from_loaded, materialize
from .manifest import LoadedDataset, ManifestRecord, RowError, load_dataset, write_manifest
from .pgm import PGMError, decode_pgm, encode_pgm, read_pgm, write_pgm
from .sampling import balance_classes, kfold_split
from .synthetic import make_blob_classification, make_blob_severity, write_synthetic_dataset
from .transforms import AffineParams, AugmentConfig, apply_affine, augment, preprocess, resize_bilinear

__all__ = [
    "AffineParams", "ArrayDataset", "AugmentConfig", "LoadedDataset", "ManifestRecord", "PGMError",
    "RowError", "apply_affine", "augment", "balance_classes", "decode_pgm", "encode_pgm",
    "from_loaded", "kfold_split", "load_dataset", "make_blob_classification", "make_blob_severity",
    "materialize", "preprocess", "read_pgm", "resize_bilinear", "write_manifest", "write_pgm",
    "write_synthetic_dataset",
]
