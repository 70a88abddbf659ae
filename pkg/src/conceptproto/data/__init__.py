from .manifest import DatasetManifest, Dataset, Preprocessing, SampleRecord, load_dataset
from .archive import FeatureArchive, load_archive, save_archive
from .store import ArtifactStore, load_train_state, save_train_state

__all__ = [
    "ArtifactStore",
    "Dataset",
    "DatasetManifest",
    "FeatureArchive",
    "Preprocessing",
    "SampleRecord",
    "load_archive",
    "load_dataset",
    "load_train_state",
    "save_archive",
    "save_train_state",
]
