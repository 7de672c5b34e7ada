from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .manifest import (DatasetManifest, Record, Split, SplitPolicy, load_image, load_split, save_image,
                       split_train_test)
from .store import StoreFormatError, TemplateStore, load_store, save_store
from .synthetic import SyntheticIrisSpec, generate_synthetic_dataset, render_sample

__all__ = [
    "Checkpoint", "CheckpointError", "DatasetManifest", "Record", "Split", "SplitPolicy", "StoreFormatError",
    "SyntheticIrisSpec", "TemplateStore", "generate_synthetic_dataset", "load_checkpoint", "load_image",
    "load_split", "load_store", "render_sample", "save_checkpoint", "save_image", "save_store",
    "split_train_test",
]
