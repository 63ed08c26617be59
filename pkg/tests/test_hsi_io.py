import numpy as np
import pytest

from plumekit import hsi_io
from plumekit.errors import (
    InvalidGeometry,
    IoFailure,
    MalformedWavelengthList,
    MissingField,
    OutOfBounds,
    UnsupportedInterleave,
)

HEADER_SMALL = """ENVI
samples = 3
lines = 4
bands = 2
interleave = bil
data type = 4
byte order = 0
wavelength = { 500.0, 600.0 }
"""


def test_parse_header_small():
    meta = hsi_io.parse_envi_header(HEADER_SMALL)
    assert meta.height == 4
    assert meta.width == 3
    assert meta.bands == 2
    assert meta.interleave == "bil"
    np.testing.assert_allclose(meta.wavelengths, [500.0, 600.0])


def test_parse_header_432_band_grid():
    wl = 380.0 + 5.0 * np.arange(432)
    assert wl[-1] == 2535.0 and wl[0] == 380.0
    body = ", ".join(f"{w:.1f}" for w in wl)
    text = (
        "ENVI\nsamples = 10\nlines = 10\nbands = 432\ninterleave = bil\n"
        "data type = 2\nwavelength = { " + body + " }\n"
    )
    meta = hsi_io.parse_envi_header(text)
    assert meta.bands == 432
    assert meta.wavelengths[0] >= 380.0 and meta.wavelengths[-1] <= 2535.0


def test_parse_header_missing_bands():
    text = HEADER_SMALL.replace("bands = 2\n", "")
    with pytest.raises(MissingField):
        hsi_io.parse_envi_header(text)


def test_parse_header_rejects_bsq():
    text = HEADER_SMALL.replace("interleave = bil", "interleave = bsq")
    with pytest.raises(UnsupportedInterleave):
        hsi_io.parse_envi_header(text)


def test_parse_header_bad_wavelengths():
    text = HEADER_SMALL.replace("600.0", "six hundred")
    with pytest.raises(MalformedWavelengthList):
        hsi_io.parse_envi_header(text)
    text = HEADER_SMALL.replace("wavelength = { 500.0, 600.0 }",
                                "wavelength = { 500.0 }")
    with pytest.raises(MalformedWavelengthList):
        hsi_io.parse_envi_header(text)


def test_parse_header_multiline_braces_and_ignore_value():
    text = (
        "ENVI\nsamples = 2\nlines = 2\nbands = 3\ninterleave = bil\n"
        "data type = 5\ndata ignore value = -1.0\n"
        "wavelength = { 400.0,\n 500.0,\n 600.0 }\n"
        "some unknown key = whatever\n"
    )
    meta = hsi_io.parse_envi_header(text)
    assert meta.no_data_value == -1.0
    assert meta.data_type == "float64"
    assert "some unknown key" in meta.extra


def _write_cube(tmp_path, data, wavelengths, **kw):
    hdr, _ = hsi_io.write_cube(tmp_path / "cube", data, wavelengths, **kw)
    return hsi_io.open_cube(hdr)


def test_block_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.uniform(0, 10, size=(4, 3, 2))
    cube = _write_cube(tmp_path, data, [500.0, 600.0], data_type="float64")
    block, valid = cube.read_block((1, 3), (0, 2), (0, 1))
    np.testing.assert_array_equal(block, data[1:3, 0:2, 0:1])
    assert valid.all()


def test_full_read_equals_half_reads(tmp_path):
    rng = np.random.default_rng(8)
    data = rng.uniform(0, 10, size=(6, 5, 3))
    cube = _write_cube(tmp_path, data, [500.0, 600.0, 700.0], data_type="float64")
    full, _ = cube.read_block((0, 6), (0, 5))
    top, _ = cube.read_block((0, 3), (0, 5))
    bottom, _ = cube.read_block((3, 6), (0, 5))
    np.testing.assert_array_equal(full, np.concatenate([top, bottom], axis=0))


def test_block_equals_per_pixel_reads(tmp_path):
    rng = np.random.default_rng(9)
    data = rng.uniform(0, 10, size=(3, 4, 2))
    cube = _write_cube(tmp_path, data, [500.0, 600.0], data_type="float64")
    block, _ = cube.read_block((0, 3), (0, 4))
    for r in range(3):
        for c in range(4):
            np.testing.assert_array_equal(cube.read_pixel(r, c), block[r, c])


def test_read_determinism(tmp_path):
    rng = np.random.default_rng(10)
    data = rng.uniform(0, 10, size=(4, 4, 3)).astype(np.float32)
    cube = _write_cube(tmp_path, data, [500.0, 600.0, 700.0])
    a, _ = cube.read_block((0, 4), (0, 4))
    b, _ = cube.read_block((0, 4), (0, 4))
    assert a.tobytes() == b.tobytes()


def test_no_data_flagging(tmp_path):
    data = np.full((3, 3, 2), 5.0)
    data[1, 2, :] = hsi_io.DEFAULT_NO_DATA
    cube = _write_cube(tmp_path, data, [500.0, 600.0], data_type="float64")
    _, valid = cube.read_block((0, 3), (0, 3))
    assert not valid[1, 2].any()
    assert valid[0, 0].all()
    mask = cube.valid_mask()
    assert mask.sum() == 8


def test_read_block_out_of_bounds(tmp_path):
    data = np.zeros((3, 3, 2))
    cube = _write_cube(tmp_path, data, [500.0, 600.0])
    with pytest.raises(OutOfBounds):
        cube.read_block((0, 4), (0, 3))
    with pytest.raises(OutOfBounds):
        cube.read_block((0, 3), (2, 1))


def test_open_cube_truncated_file(tmp_path):
    data = np.zeros((4, 4, 2))
    hdr, img = hsi_io.write_cube(tmp_path / "cube", data, [500.0, 600.0])
    img.write_bytes(img.read_bytes()[:-8])
    with pytest.raises(IoFailure):
        hsi_io.open_cube(hdr)


def test_from_array_matches_disk(tmp_path):
    rng = np.random.default_rng(11)
    data = rng.uniform(0, 10, size=(5, 4, 3))
    disk = _write_cube(tmp_path, data, [500, 600, 700], data_type="float64")
    mem = hsi_io.HyperCube.from_array(data, [500, 600, 700])
    a, _ = disk.read_block((1, 4), (0, 4), (1, 3))
    b, _ = mem.read_block((1, 4), (0, 4), (1, 3))
    np.testing.assert_array_equal(a, b)


def test_scalar_map_round_trip(tmp_path):
    values = np.arange(12, dtype=np.float32).reshape(3, 4)
    hdr, _ = hsi_io.write_scalar_map(tmp_path / "m", values)
    back, no_data = hsi_io.read_scalar_map(hdr)
    np.testing.assert_array_equal(back, values)
    assert no_data == hsi_io.DEFAULT_NO_DATA


def test_glt_round_trip(tmp_path):
    col = np.array([[0, 1, 2], [3, 4, 598]], dtype=np.int32)
    row = np.array([[0, 10, 11], [12, 13, 14]], dtype=np.int32)
    hdr, _ = hsi_io.write_glt(tmp_path / "glt", col, row)
    glt = hsi_io.read_glt(hdr)
    np.testing.assert_array_equal(glt.orig_col, col)
    np.testing.assert_array_equal(glt.orig_row, row)
    np.testing.assert_array_equal(glt.mapped, col > 0)


def test_glt_rejects_out_of_range(tmp_path):
    col = np.array([[0, 700]], dtype=np.int32)
    row = np.array([[0, 1]], dtype=np.int32)
    hdr, _ = hsi_io.write_glt(tmp_path / "glt", col, row)
    with pytest.raises(OutOfBounds):
        hsi_io.read_glt(hdr)


# --- tiling ---

def origins(tiles):
    return sorted({t.row0 for t in tiles}), sorted({t.col0 for t in tiles})


def test_plan_tiles_exact_fit():
    tiles = hsi_io.plan_tiles(256, 256, 256, 128)
    assert tiles == [hsi_io.TileRect(0, 0, 256)]


def test_plan_tiles_512():
    tiles = hsi_io.plan_tiles(512, 512, 256, 128)
    r, c = origins(tiles)
    assert r == [0, 128, 256]
    assert c == [0, 128, 256]
    assert len(tiles) == 9


def test_plan_tiles_clamped():
    tiles = hsi_io.plan_tiles(300, 300, 256, 128)
    r, c = origins(tiles)
    assert r == [0, 44]
    assert c == [0, 44]
    assert len(tiles) == 4


def test_plan_tiles_invalid_geometry():
    with pytest.raises(InvalidGeometry):
        hsi_io.plan_tiles(512, 512, 128, 128)
    with pytest.raises(InvalidGeometry):
        hsi_io.plan_tiles(100, 100, 256, 128)


def test_plan_tiles_coverage_and_overlap_property():
    rng = np.random.default_rng(42)
    for _ in range(50):
        h = int(rng.integers(8, 90))
        w = int(rng.integers(8, 90))
        size = int(rng.integers(4, min(h, w) + 1))
        overlap = int(rng.integers(0, size))
        tiles = hsi_io.plan_tiles(h, w, size, overlap)
        cover = np.zeros((h, w), dtype=int)
        for t in tiles:
            assert 0 <= t.row0 and t.row0 + size <= h
            assert 0 <= t.col0 and t.col0 + size <= w
            cover[t.row0:t.row0 + size, t.col0:t.col0 + size] += 1
        assert (cover >= 1).all()
        rows = sorted({t.row0 for t in tiles})
        # interior origins step by the stride; the clamped edge overlaps more
        for a, b in zip(rows, rows[1:-1] if len(rows) > 2 else []):
            assert b - a == size - overlap
