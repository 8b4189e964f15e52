import numpy as np
import pytest

from vislang.imageio import Dataset, ImageFileError, load_dataset, read_image, write_image


def test_image_roundtrip_exact_for_quantized_values(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (3, 8, 6)).astype(np.float64) / 255.0
    path = tmp_path / "x.rimg"
    write_image(img, path)
    back = read_image(path)
    assert back.shape == (3, 8, 6)
    assert np.array_equal(back, img)


def test_write_clips_out_of_range(tmp_path):
    img = np.full((3, 4, 4), 2.0)
    path = tmp_path / "c.rimg"
    write_image(img, path)
    assert np.array_equal(read_image(path), np.ones((3, 4, 4)))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.rimg"
    path.write_bytes(b"JUNK" + bytes(20))
    with pytest.raises(ImageFileError, match="magic"):
        read_image(path)


def test_truncated_payload(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "t.rimg"
    write_image(rng.uniform(0, 1, (3, 4, 4)), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ImageFileError, match="payload"):
        read_image(path)


def test_load_dataset_sorted_keys(tmp_path):
    rng = np.random.default_rng(2)
    for name in ("b", "a", "c"):
        write_image(rng.uniform(0, 1, (3, 4, 4)), tmp_path / f"{name}.rimg")
    ds = load_dataset(tmp_path)
    assert ds.keys == ("a", "b", "c")
    assert ds.images.shape == (3, 3, 4, 4)


def test_load_dataset_rejects_mixed_shapes(tmp_path):
    rng = np.random.default_rng(3)
    write_image(rng.uniform(0, 1, (3, 4, 4)), tmp_path / "a.rimg")
    write_image(rng.uniform(0, 1, (3, 8, 8)), tmp_path / "b.rimg")
    with pytest.raises(ImageFileError, match="mixed"):
        load_dataset(tmp_path)


def test_load_dataset_empty_dir(tmp_path):
    with pytest.raises(ImageFileError, match="no .rimg"):
        load_dataset(tmp_path)
