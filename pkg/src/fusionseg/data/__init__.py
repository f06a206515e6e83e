from .dataset import (DataIOError, Dataset, build_dataset, ingest_slices, load_manifest, read_image,
                      sample_batch, sample_patch, save_cases, split_ids, write_image)
from .phantom import CaseRecord, gen_phantom_case

__all__ = [
    "DataIOError", "Dataset", "build_dataset", "ingest_slices", "load_manifest", "read_image",
    "sample_batch", "sample_patch", "save_cases", "split_ids", "write_image", "CaseRecord",
    "gen_phantom_case",
]
