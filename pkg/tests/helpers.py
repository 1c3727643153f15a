import numpy as np

from dicom_ssl.data import Dataset, DatasetManifest, ManifestEntry


def make_dataset(images, labels, splits, n_classes=2, masks=None):
    ids = [f"x{i:04d}" for i in range(len(images))]
    entries = [ManifestEntry(i, f"{i}.png", int(l), s) for i, l, s in zip(ids, labels, splits)]
    manifest = DatasetManifest(entries, {k: f"c{k}" for k in range(n_classes)})
    return Dataset(manifest, np.asarray(images, dtype=np.float32), np.asarray(labels),
                   ids, list(splits), masks)
