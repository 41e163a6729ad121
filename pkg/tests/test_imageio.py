import numpy as np
import pytest

from simco.imageio import read_image, read_ppm, write_image, write_ppm


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 11, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    data = (tmp_path / "a.ppm").read_bytes()
    assert data.startswith(b"P6\n11 7\n255\n") and len(data) == 12 + 7 * 11 * 3


def test_ppm_header_comments(tmp_path):
    img = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n3 2\n# depth\n255\n" + img.tobytes())
    assert np.array_equal(read_ppm(tmp_path / "c.ppm"), img)


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p3.ppm")
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "gray.ppm", np.zeros((4, 4), dtype=np.uint8))


def test_png_roundtrip_is_lossless(tmp_path, rng):
    img = rng.integers(0, 256, size=(9, 5, 3), dtype=np.uint8)
    write_image(tmp_path / "a.png", img)
    assert (tmp_path / "a.png").read_bytes()[:4] == b"\x89PNG"
    assert np.array_equal(read_image(tmp_path / "a.png"), img)
