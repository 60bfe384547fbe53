import math
import struct

import numpy as np
import pytest

from dsanet import hsidata
from dsanet.errors import ConfigError, DegenerateError, ParseError

# same bytes as the fixture in docs/formats.md: a 2x2x2 cube holding
# [0, 0.5], [1, 1.5] / [0.25, 0.75], [2, 4] spectra
FIXTURE_HEX = (
    "4853494201000000020000000200000002000000"
    "000000000000003f0000803f0000c03f"
    "0000803e0000403f0000004000008040"
)


def random_cube(rng, h=5, w=4, l=3):
    # float32-valued payload so the file round trip is bit-exact
    data = rng.uniform(0.0, 2.0, (h, w, l)).astype(np.float32).astype(np.float64)
    return hsidata.HSICube(h, w, l, data)


# ---------------------------------------------------------------------------
# HSIB round trips and corruption


def test_cube_roundtrip_bit_identical(tmp_path):
    cube = random_cube(np.random.default_rng(0))
    path = tmp_path / "cube.hsib"
    hsidata.save_cube(cube, path)
    loaded, gt = hsidata.load_cube(path)
    assert gt is None
    assert loaded.data.shape == cube.data.shape
    assert np.array_equal(loaded.data, cube.data)
    # save(load(f)) reproduces the file bytes exactly
    path2 = tmp_path / "cube2.hsib"
    hsidata.save_cube(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_hex_fixture_parses(tmp_path):
    path = tmp_path / "fixture.hsib"
    path.write_bytes(bytes.fromhex(FIXTURE_HEX))
    cube, _ = hsidata.load_cube(path)
    assert (cube.height, cube.width, cube.bands) == (2, 2, 2)
    expected = np.array(
        [[[0.0, 0.5], [1.0, 1.5]], [[0.25, 0.75], [2.0, 4.0]]]
    )
    assert np.array_equal(cube.data, expected)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.hsib"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ParseError) as err:
        hsidata.load_cube(path)
    assert err.value.offset == 0


def test_bad_version(tmp_path):
    path = tmp_path / "bad.hsib"
    path.write_bytes(b"HSIB" + struct.pack("<4I", 9, 1, 1, 1) + bytes(4))
    with pytest.raises(ParseError) as err:
        hsidata.load_cube(path)
    assert err.value.offset == 4


def test_zero_dimension(tmp_path):
    path = tmp_path / "bad.hsib"
    path.write_bytes(b"HSIB" + struct.pack("<4I", 1, 2, 0, 2))
    with pytest.raises(ParseError) as err:
        hsidata.load_cube(path)
    assert err.value.offset == 12


def test_dim_overflow(tmp_path):
    path = tmp_path / "bad.hsib"
    path.write_bytes(b"HSIB" + struct.pack("<4I", 1, 2**31, 2**31, 64))
    with pytest.raises(ParseError, match="overflow") as err:
        hsidata.load_cube(path)
    assert err.value.offset == 8


def test_payload_one_float_short(tmp_path):
    cube = random_cube(np.random.default_rng(1))
    path = tmp_path / "short.hsib"
    hsidata.save_cube(cube, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ParseError, match="size mismatch") as err:
        hsidata.load_cube(path)
    assert err.value.offset == 20


def test_nan_payload_offset(tmp_path):
    cube = random_cube(np.random.default_rng(2))
    path = tmp_path / "nan.hsib"
    hsidata.save_cube(cube, path)
    raw = bytearray(path.read_bytes())
    bad_index = 7
    raw[20 + 4 * bad_index : 24 + 4 * bad_index] = struct.pack("<f", math.nan)
    path.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="non-finite") as err:
        hsidata.load_cube(path)
    assert err.value.offset == 20 + 4 * bad_index


def test_negative_payload_rejected(tmp_path):
    cube = random_cube(np.random.default_rng(3))
    path = tmp_path / "neg.hsib"
    hsidata.save_cube(cube, path)
    raw = bytearray(path.read_bytes())
    raw[20:24] = struct.pack("<f", -1.0)
    path.write_bytes(bytes(raw))
    with pytest.raises(ParseError, match="negative") as err:
        hsidata.load_cube(path)
    assert err.value.offset == 20


def test_gt_sidecar_roundtrip(tmp_path):
    cube, gt = hsidata.generate_synthetic(6, 5, 8, 3, 25.0, 0.7, seed=11)
    path = tmp_path / "scene.hsib"
    hsidata.save_cube(cube, path)
    hsidata.save_gt(gt, cube.height, cube.width, hsidata.gt_path(path))
    assert hsidata.gt_path(path).endswith("scene.gt.hsib")
    _, loaded_gt = hsidata.load_cube(path)
    assert loaded_gt is not None
    assert np.array_equal(
        loaded_gt.endmembers, gt.endmembers.astype(np.float32).astype(np.float64)
    )
    assert np.array_equal(
        loaded_gt.abundances, gt.abundances.astype(np.float32).astype(np.float64)
    )
    # sidecar save(load(f)) is also bit-exact
    p2 = tmp_path / "again.gt.hsib"
    hsidata.save_gt(loaded_gt, cube.height, cube.width, p2)
    with open(hsidata.gt_path(path), "rb") as a, open(p2, "rb") as b:
        assert a.read() == b.read()


# ---------------------------------------------------------------------------
# synthetic generator


def test_generator_is_pure_function_of_seed():
    a_cube, a_gt = hsidata.generate_synthetic(8, 7, 12, 3, 30.0, 0.5, seed=5)
    b_cube, b_gt = hsidata.generate_synthetic(8, 7, 12, 3, 30.0, 0.5, seed=5)
    assert np.array_equal(a_cube.data, b_cube.data)
    assert np.array_equal(a_gt.endmembers, b_gt.endmembers)
    assert np.array_equal(a_gt.abundances, b_gt.abundances)
    c_cube, _ = hsidata.generate_synthetic(8, 7, 12, 3, 30.0, 0.5, seed=6)
    assert not np.array_equal(a_cube.data, c_cube.data)


def test_generator_sparse_alpha_yields_near_pure_pixels():
    _, gt = hsidata.generate_synthetic(100, 100, 20, 2, math.inf, 0.01, seed=0)
    frac = np.mean(gt.abundances.max(axis=1) > 0.99)
    assert frac > 0.95


def test_generator_noiseless_single_material():
    cube, gt = hsidata.generate_synthetic(4, 3, 10, 1, math.inf, 0.5, seed=2)
    assert np.array_equal(gt.abundances, np.ones((12, 1)))
    assert np.array_equal(cube.pixels(), np.tile(gt.endmembers[0], (12, 1)))


def test_generator_hits_requested_snr():
    h, w, l, p = 30, 30, 40, 3
    cube, gt = hsidata.generate_synthetic(h, w, l, p, 30.0, 0.5, seed=3)
    clean = gt.abundances @ gt.endmembers
    noise = cube.pixels() - clean
    snr = 10.0 * math.log10(float((clean**2).sum() / (noise**2).sum()))
    assert abs(snr - 30.0) < 0.5


def test_generator_abundances_on_simplex():
    _, gt = hsidata.generate_synthetic(12, 11, 16, 4, 20.0, 0.3, seed=7)
    assert gt.abundances.min() >= 0.0
    assert np.abs(gt.abundances.sum(axis=1) - 1.0).max() < 1e-9


def test_generator_neighbors_correlate():
    _, gt = hsidata.generate_synthetic(40, 40, 10, 3, math.inf, 0.5, seed=9)
    plane = gt.abundances[:, 0].reshape(40, 40)
    a = plane[:, :-1].ravel()
    b = plane[:, 1:].ravel()
    corr = np.corrcoef(a, b)[0, 1]
    assert corr > 0.4


def test_generator_preconditions():
    with pytest.raises(ConfigError):
        hsidata.generate_synthetic(4, 4, 3, 5, 30.0, 0.5, seed=0)   # P > L
    with pytest.raises(ConfigError):
        hsidata.generate_synthetic(1, 1, 8, 2, 30.0, 0.5, seed=0)   # P > pixels
    with pytest.raises(ConfigError):
        hsidata.generate_synthetic(4, 4, 8, 2, -3.0, 0.5, seed=0)   # bad SNR
    with pytest.raises(ConfigError):
        hsidata.generate_synthetic(4, 4, 8, 2, 30.0, 0.0, seed=0)   # bad alpha


# ---------------------------------------------------------------------------
# patches


def cube_with_tags(h=3, w=3, l=2):
    # pixel (r, c) carries the tag value 10*r + c in every band
    data = np.zeros((h, w, l))
    for r in range(h):
        for c in range(w):
            data[r, c, :] = 10 * r + c
    return hsidata.HSICube(h, w, l, data)


def test_patch_k1_is_the_pixel():
    cube = cube_with_tags()
    patch = hsidata.extract_patch(cube, 1, 2, 1)
    assert patch.pixels.shape == (1, 2)
    assert np.array_equal(patch.pixels[0], cube.data[1, 2])
    assert np.array_equal(patch.center, cube.data[1, 2])


def test_patch_center_window_is_whole_cube():
    cube = cube_with_tags()
    patch = hsidata.extract_patch(cube, 1, 1, 3)
    assert np.array_equal(patch.pixels, cube.pixels())
    assert np.array_equal(patch.center, cube.data[1, 1])


def test_patch_corner_mirrors():
    cube = cube_with_tags()
    patch = hsidata.extract_patch(cube, 0, 0, 3)
    # window rows (-1, 0, 1) reflect to (1, 0, 1); cols likewise
    tags = patch.pixels[:, 0].reshape(3, 3)
    expected = np.array([[11.0, 10.0, 11.0], [1.0, 0.0, 1.0], [11.0, 10.0, 11.0]])
    assert np.array_equal(tags, expected)


def test_patch_mirror_only_reindexes():
    rng = np.random.default_rng(12)
    cube = random_cube(rng, 4, 5, 3)
    existing = {tuple(px) for px in cube.pixels()}
    for r in range(4):
        for c in range(5):
            patch = hsidata.extract_patch(cube, r, c, 5)
            for px in patch.pixels:
                assert tuple(px) in existing


def test_patch_index_grid_matches_extract():
    cube = cube_with_tags(4, 5, 2)
    grid = hsidata.patch_index_grid(4, 5, 3)
    pixels = cube.pixels()
    for r in range(4):
        for c in range(5):
            patch = hsidata.extract_patch(cube, r, c, 3)
            assert np.array_equal(pixels[grid[r * 5 + c]], patch.pixels)


def test_patch_argument_errors():
    cube = cube_with_tags()
    with pytest.raises(ConfigError):
        hsidata.extract_patch(cube, 0, 0, 2)
    with pytest.raises(ConfigError):
        hsidata.extract_patch(cube, 3, 0, 3)


# ---------------------------------------------------------------------------
# normalize


def test_normalize_constant_cube():
    cube = hsidata.HSICube(2, 2, 2, np.full((2, 2, 2), 3.0))
    out = hsidata.normalize_cube(cube)
    assert np.array_equal(out.data, np.ones((2, 2, 2)))


def test_normalize_already_unit_max():
    rng = np.random.default_rng(13)
    data = rng.uniform(0.0, 1.0, (3, 3, 4))
    data[1, 1, 1] = 1.0
    cube = hsidata.HSICube(3, 3, 4, data)
    out = hsidata.normalize_cube(cube)
    assert np.array_equal(out.data, data)


def test_normalize_random_cube_max_is_one():
    rng = np.random.default_rng(14)
    cube = hsidata.HSICube(3, 3, 4, rng.uniform(0.0, 7.0, (3, 3, 4)))
    assert hsidata.normalize_cube(cube).data.max() == 1.0


def test_normalize_zero_cube_raises():
    cube = hsidata.HSICube(2, 2, 2, np.zeros((2, 2, 2)))
    with pytest.raises(DegenerateError):
        hsidata.normalize_cube(cube)
