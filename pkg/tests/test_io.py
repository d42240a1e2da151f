import numpy as np
import pytest

from hvfwi import io
from hvfwi.numerics import Grid1D, Signal


def test_model_round_trip(tmp_path):
    c = np.linspace(1500, 4500, 12).reshape(3, 4)
    io.write_model(tmp_path / "m.fwim", c, 10.0, 12.5)
    back, dx, dz = io.read_model(tmp_path / "m.fwim")
    np.testing.assert_array_equal(back, c.astype(np.float32))
    assert (dx, dz) == (10.0, 12.5)


def test_model_layout_is_little_endian_header_then_z_major(tmp_path):
    c = np.arange(6, dtype=float).reshape(2, 3)
    io.write_model(tmp_path / "m.fwim", c, 1.0, 2.0)
    raw = (tmp_path / "m.fwim").read_bytes()
    assert raw[:4] == b"FWIM"
    assert raw[4:12] == (3).to_bytes(4, "little") + (2).to_bytes(4, "little")
    np.testing.assert_array_equal(np.frombuffer(raw[20:], "<f4"), np.arange(6))


def test_model_truncated_and_bad_magic(tmp_path):
    io.write_model(tmp_path / "m.fwim", np.ones((4, 4)), 1.0, 1.0)
    raw = (tmp_path / "m.fwim").read_bytes()
    (tmp_path / "short.fwim").write_bytes(raw[:-4])
    (tmp_path / "bad.fwim").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError, match="expected 16"):
        io.read_model(tmp_path / "short.fwim")
    with pytest.raises(io.FormatError, match="magic"):
        io.read_model(tmp_path / "bad.fwim")
    with pytest.raises(ValueError):
        io.write_model(tmp_path / "x.fwim", np.ones(3), 1.0, 1.0)


def test_record_round_trip_and_truncation(tmp_path):
    tr = np.random.default_rng(0).standard_normal((5, 17))
    io.write_record(tmp_path / "r.fwir", tr, 0.002)
    back, dt = io.read_record(tmp_path / "r.fwir")
    np.testing.assert_array_equal(back, tr.astype(np.float32))
    assert dt == pytest.approx(0.002)
    (tmp_path / "t.fwir").write_bytes((tmp_path / "r.fwir").read_bytes()[:30])
    with pytest.raises(io.FormatError):
        io.read_record(tmp_path / "t.fwir")


def test_signal_csv_round_trip(tmp_path):
    s = Signal(Grid1D(11), np.sin(np.linspace(0, 3, 11)))
    io.write_signal_csv(tmp_path / "s.csv", s, "rho")
    back = io.read_signal_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, s.values)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "x,rho"


def test_signal_csv_rejects_nonuniform_grid(tmp_path):
    (tmp_path / "s.csv").write_text("0,1\n0.4,2\n1,3\n")
    with pytest.raises(io.FormatError, match="uniform"):
        io.read_signal_csv(tmp_path / "s.csv")
    (tmp_path / "g.csv").write_text("x,y\n0,1\nfoo,2\n1,3\n")
    with pytest.raises(io.FormatError, match="line 3"):
        io.read_signal_csv(tmp_path / "g.csv")


def test_pgm_round_trip_and_two_bands(tmp_path):
    img = np.zeros((40, 60))
    img[20:] = 1.0
    io.write_pgm(tmp_path / "a.pgm", img)
    pix = io.read_pgm(tmp_path / "a.pgm")
    assert pix.shape == (40, 60)
    assert np.count_nonzero(pix == 0) == 1200 and np.count_nonzero(pix == 255) == 1200


def test_constant_image_is_mid_gray(tmp_path):
    io.write_pgm(tmp_path / "c.pgm", np.full((3, 3), 7.0))
    assert np.all(io.read_pgm(tmp_path / "c.pgm") == 128)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with io.atomic_write(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("interrupted")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
