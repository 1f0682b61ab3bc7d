import numpy as np
import pytest

from evfusion.synthetic import Scene, generate_recording, save_recording, write_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six rendered recordings with hand-assigned splits (too few for make_splits)."""
    out = tmp_path_factory.mktemp("tiny")
    scene = Scene(texture_seed=3)
    rng = np.random.default_rng(7)
    splits = ["train", "train", "train", "val", "test1", "test2"]
    entries = []
    for i, split in enumerate(splits):
        rec = generate_recording(f"r{i}", np.random.default_rng(rng.integers(2**63)), scene)
        rec.split = split
        save_recording(rec, out / f"r{i}.abcd")
        entries.append((f"r{i}.abcd", split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
