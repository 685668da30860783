from .dataset import (
    ImageBatch,
    MaskBatch,
    PairedSample,
    batch_iterator,
    load_directory_dataset,
    num_batches,
    save_directory_dataset,
    to_uint8,
    to_unit_range,
)
from .synthetic import SyntheticSpec, generate_synthetic_domains, invert_shift, texture_field
from .transforms import CropSpec, apply_crop, crop_dataset

__all__ = [
    "CropSpec",
    "ImageBatch",
    "MaskBatch",
    "PairedSample",
    "SyntheticSpec",
    "apply_crop",
    "batch_iterator",
    "crop_dataset",
    "generate_synthetic_domains",
    "invert_shift",
    "load_directory_dataset",
    "num_batches",
    "save_directory_dataset",
    "texture_field",
    "to_uint8",
    "to_unit_range",
]
