"""PPM/PGM dataset directory round trip and validation failures."""

import numpy as np
import pytest

from metaseg.dataset_io import load_dataset_dir, save_dataset
from metaseg.episodes import SynthConfig, gen_synthetic, split_classes
from metaseg.errors import ValidationError


@pytest.fixture()
def disk_dataset(tmp_path):
    ds = split_classes(gen_synthetic(SynthConfig(num_classes=5, images_per_class=3, seed=2)), [4])
    save_dataset(ds, tmp_path)
    return ds, tmp_path


def test_round_trip_equal(disk_dataset):
    ds, root = disk_dataset
    loaded = load_dataset_dir(root)
    assert loaded.class_names == ds.class_names
    assert loaded.train_classes == ds.train_classes
    assert loaded.novel_classes == ds.novel_classes
    assert len(loaded.records) == len(ds.records)
    for a, b in zip(ds.records, loaded.records):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.present == b.present


def test_undeclared_mask_value_names_file_and_value(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "masks").glob("*.pgm"))[0]
    data = bytearray(victim.read_bytes())
    data[-1] = 99
    victim.write_bytes(bytes(data))
    with pytest.raises(ValidationError, match=r"99"):
        load_dataset_dir(root)


def test_missing_mask_lists_orphan_image(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "masks").glob("*.pgm"))[1]
    victim.unlink()
    with pytest.raises(ValidationError, match=victim.stem):
        load_dataset_dir(root)


def test_malformed_header(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "images").glob("*.ppm"))[0]
    victim.write_bytes(b"P5\n4 4\n255\n" + bytes(16))
    with pytest.raises(ValidationError, match="P6"):
        load_dataset_dir(root)


def test_truncated_payload(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "images").glob("*.ppm"))[0]
    victim.write_bytes(victim.read_bytes()[:-7])
    with pytest.raises(ValidationError, match="payload"):
        load_dataset_dir(root)


def test_size_mismatch(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "masks").glob("*.pgm"))[0]
    victim.write_bytes(b"P5\n4 4\n255\n" + bytes(16))
    with pytest.raises(ValidationError, match="mask"):
        load_dataset_dir(root)


def test_split_overlap_rejected(disk_dataset):
    _, root = disk_dataset
    (root / "split.txt").write_text("train: 1,2,3,4\nnovel: 4,5\n")
    with pytest.raises(ValidationError, match="both"):
        load_dataset_dir(root)


def test_header_comments_tolerated(disk_dataset):
    _, root = disk_dataset
    victim = sorted((root / "images").glob("*.ppm"))[0]
    raw = victim.read_bytes()
    body = raw.split(b"255\n", 1)[1]
    victim.write_bytes(b"P6\n# a comment\n32 32\n255\n" + body)
    load_dataset_dir(root)  # parses fine
