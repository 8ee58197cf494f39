import numpy as np
import pytest

from stylevar.data import (LUMA, augment_content, augment_style, data_root, directory_hash, generate_dataset,
                           generate_triplet, load_dataset, make_style, read_image, stylize, write_dataset,
                           write_image)


def test_dataset_is_seed_determined():
    a, b = generate_dataset(5, 11), generate_dataset(5, 11)
    for x, y in zip(a, b):
        assert x.seed == y.seed and np.array_equal(x.target, y.target) and x.split == y.split


def test_regenerable_from_item_seed():
    t = generate_dataset(3, 4)[2]
    assert np.array_equal(generate_triplet(t.seed).target, t.target)


def test_split_95_5():
    tags = [t.split for t in generate_dataset(1000, 0)]
    assert tags.count("train") == 950 and tags.count("val") == 50


def test_pixels_are_8bit_levels():
    t = generate_triplet(1)
    for im in (t.content, t.style, t.target):
        assert im.min() >= 0 and im.max() <= 1
        np.testing.assert_allclose(im * 255, np.round(im * 255), atol=1e-9)


def test_constant_content_maps_to_one_palette_colour():
    rng = np.random.default_rng(0)
    style, palette = make_style(rng, 16)
    content = np.full((16, 16, 3), 0.5)
    out = stylize(content, style, palette)
    band = min(int(0.5 * len(palette)), len(palette) - 1)
    np.testing.assert_allclose(out, np.round(np.clip(0.7 * palette[band] + 0.3 * style, 0, 1) * 255) / 255)


def test_directory_roundtrip_and_hash(tmp_path):
    a, b = write_dataset(tmp_path / "a", 6, 3), write_dataset(tmp_path / "b", 6, 3)
    assert directory_hash(a) == directory_hash(b)
    loaded = load_dataset(a)
    ref = generate_dataset(6, 3)
    for x, y in zip(loaded, ref):
        assert np.array_equal(x.content, y.content) and np.array_equal(x.target, y.target)
        assert x.split == y.split and x.seed == y.seed
    assert directory_hash(write_dataset(tmp_path / "c", 6, 4)) != directory_hash(a)


def test_image_io_roundtrip(tmp_path):
    t = generate_triplet(5)
    for name in ("x.ppm", "x.png"):
        write_image(tmp_path / name, t.target)
        assert np.array_equal(read_image(tmp_path / name), t.target)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        write_dataset(blocker / "sub", 2, 0)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        generate_dataset(0, 0)


def test_env_root_override(monkeypatch, tmp_path):
    monkeypatch.setenv("STYLEVAR_DATA_ROOT", str(tmp_path))
    assert data_root() == tmp_path


def test_augmentations_stay_in_range():
    t = generate_triplet(2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        c, s = augment_content(t.content, rng), augment_style(t.style, rng)
        assert c.shape == t.content.shape and s.shape == t.style.shape
        assert c.min() >= 0 and c.max() <= 1 and s.min() >= 0 and s.max() <= 1
