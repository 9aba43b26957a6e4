import numpy as np
import pytest

from fewloc.dataio import FeatureStore, SyntheticSpec, gen_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small deterministic dataset: 6 classes (4 train / 2 test)."""
    spec = SyntheticSpec(
        class_count=6,
        videos_per_class=4,
        snippets_min=8,
        snippets_max=12,
        instances_min=1,
        instances_max=2,
        action_len_min=2,
        action_len_max=4,
        separation=4.0,
        noise=1.0,
        seed=11,
    )
    out = tmp_path_factory.mktemp("tiny_dataset")
    ds = gen_synthetic(spec, out)
    return ds


@pytest.fixture(scope="session")
def tiny_store(tiny_dataset):
    return FeatureStore(tiny_dataset.out_dir)


@pytest.fixture(scope="session")
def tiny_features(tiny_dataset, tiny_store):
    feats = {v.video_id: tiny_store.load(v.video_id) for v in tiny_dataset.manifest.videos}
    return feats
