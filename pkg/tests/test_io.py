import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbtrecon import io as dio


@settings(max_examples=30, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]),
              st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=True, allow_infinity=True, width=32)))
def test_volume_roundtrip_bit_exact(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("vol") / "v.vol"
    dio.write_volume(path, v, (0.09, 0.09, 1.0), (-1.0, 2.0, 0.0))
    back = dio.read_volume(path)
    assert back.values.dtype == v.dtype
    assert back.values.tobytes() == v.tobytes()
    assert back.spacing == (0.09, 0.09, 1.0) and back.origin == (-1.0, 2.0, 0.0)


def test_volume_layout_is_x_fastest(tmp_path):
    v = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = dio.write_volume(tmp_path / "v.vol", v)
    payload = np.frombuffer(path.read_bytes()[-v.nbytes:], "<f8")
    assert payload[:2].tolist() == [v[0, 0, 0], v[1, 0, 0]]
    assert path.read_bytes()[:8] == b"DBTVOL\0\0"


def test_projection_roundtrip(tmp_path, rng):
    p = rng.random((3, 5, 4))
    angles = np.array([-15.0, 0.0, 15.0])
    dio.write_projections(tmp_path / "p.prj", p, 0.12, angles)
    back = dio.read_projections(tmp_path / "p.prj")
    assert np.array_equal(back.values, p) and back.pitch == 0.12
    assert np.array_equal(back.angles, angles)
    dio.write_projections(tmp_path / "q.prj", p, 0.12, angles, dtype=np.float32)
    assert np.array_equal(dio.read_projections(tmp_path / "q.prj").values, p.astype(np.float32))
    with pytest.raises(ValueError):
        dio.write_projections(tmp_path / "r.prj", p, 0.12, angles[:2])


def test_truncated_file(tmp_path, rng):
    path = dio.write_volume(tmp_path / "v.vol", rng.random((4, 4, 4)))
    raw = path.read_bytes()
    for cut in (10, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(dio.TruncatedFileError):
            dio.read_volume(path)
    ppath = dio.write_projections(tmp_path / "p.prj", rng.random((2, 3, 3)), 1.0, [0.0, 1.0])
    ppath.write_bytes(ppath.read_bytes()[:-8])
    with pytest.raises(dio.TruncatedFileError):
        dio.read_projections(ppath)


def test_dtype_mismatch(tmp_path, rng):
    path = dio.write_volume(tmp_path / "v.vol", rng.random((2, 2, 2)))
    with pytest.raises(dio.DtypeMismatchError):
        dio.read_volume(path, dtype=np.float32)
    assert dio.read_volume(path, dtype=np.float64).values.dtype == np.float64
    with pytest.raises(TypeError):
        dio.write_volume(tmp_path / "i.vol", np.zeros((2, 2, 2), dtype=np.int32))


def test_version_and_header_errors(tmp_path, rng):
    path = dio.write_volume(tmp_path / "v.vol", rng.random((2, 2, 2)))
    raw = bytearray(path.read_bytes())
    bad = raw.copy()
    bad[8] = 9
    path.write_bytes(bytes(bad))
    with pytest.raises(dio.VersionError):
        dio.read_volume(path)
    path.write_bytes(bytes(raw) + b"\0" * 8)
    with pytest.raises(dio.HeaderMismatchError):
        dio.read_volume(path)
    path.write_bytes(b"NOTAVOL!" + bytes(raw[8:]))
    with pytest.raises(dio.FormatError):
        dio.read_volume(path)
    # distinct error classes, all readable as IOError
    kinds = {dio.VersionError, dio.TruncatedFileError, dio.HeaderMismatchError, dio.DtypeMismatchError}
    assert len(kinds) == 4 and all(issubclass(k, OSError) for k in kinds)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.bin"
    dio.atomic_write_bytes(target, b"old")

    def boom(fh):
        fh.write(b"partial")
        raise RuntimeError("crash")

    with pytest.raises(RuntimeError):
        dio.atomic_write(target, boom)
    assert target.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["out.bin"]


def test_export_constant_slice_mid_gray(tmp_path):
    path = dio.export_slice(np.full((5, 4, 2), 0.3), 1, tmp_path / "s.pgm")
    img = dio.read_pgm(path)
    assert img.shape == (4, 5)
    assert np.all(img == 32768)
    assert path.read_bytes().startswith(b"P5\n5 4\n65535\n")


def test_export_is_deterministic(tmp_path, rng):
    v = rng.random((6, 7, 3))
    a = dio.export_slice(v, 2, tmp_path / "a.pgm").read_bytes()
    b = dio.export_slice(v, 2, tmp_path / "b.pgm").read_bytes()
    assert a == b


def test_export_brightest_pixel_at_mc(tmp_path):
    from dbtrecon.geometry import VoxelGrid, voxel_center
    from dbtrecon.phantom import PhantomSpec, SphereObject, generate_phantom

    grid = VoxelGrid.centered((64, 64, 16), (0.09, 0.09, 1.0))
    obj = SphereObject("MC", voxel_center(grid, 21, 40, 8), 130.0, 0.5)
    v = generate_phantom(PhantomSpec(objects=(obj,)), grid)
    img = dio.read_pgm(dio.export_slice(v, 8, tmp_path / "mc.pgm"))
    row, col = np.unravel_index(np.argmax(img), img.shape)
    assert (col, row) == (21, 40)
    assert (col, row) == np.unravel_index(np.argmax(v[:, :, 8]), v[:, :, 8].shape)


def test_export_window_and_range(tmp_path):
    v = np.linspace(0, 1, 8).reshape(2, 4, 1)
    img = dio.read_pgm(dio.export_slice(v, 0, tmp_path / "w.pgm", window=(0.25, 0.75)))
    assert img.min() == 0 and img.max() == 65535
    with pytest.raises(IndexError):
        dio.export_slice(v, 1, tmp_path / "x.pgm")


def test_sha256(tmp_path):
    p = tmp_path / "f"
    p.write_bytes(b"abc")
    assert dio.sha256_file(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
