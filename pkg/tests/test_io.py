import numpy as np
import pytest

from cascade_mvs.errors import IoError
from cascade_mvs.io import read_pfm, read_pnm, write_pfm, write_pnm


def test_pfm_layout_is_bottom_up_little_endian(tmp_path):
    depth = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_pfm(tmp_path / "d.pfm", depth)
    raw = (tmp_path / "d.pfm").read_bytes()
    header, rest = raw.split(b"\n", 1)
    assert header == b"Pf"
    dims, rest = rest.split(b"\n", 1)
    scale, body = rest.split(b"\n", 1)
    assert dims.split() == [b"3", b"2"] and float(scale) < 0
    rows = np.frombuffer(body, dtype="<f4").reshape(2, 3)
    np.testing.assert_array_equal(rows[::-1], depth)
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), depth)


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(IoError):
        read_pfm(tmp_path / "x.pfm")


def test_ppm_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(4, 5, 3)) * 255) / 255
    write_pnm(tmp_path / "i.ppm", img)
    np.testing.assert_allclose(read_pnm(tmp_path / "i.ppm"), img, atol=1e-12)
