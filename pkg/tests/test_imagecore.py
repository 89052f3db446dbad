import json

import numpy as np
import pytest

from patchprior import imagecore as ic
from patchprior.errors import FormatError, InvalidArgumentError


def test_patch_count_8x8():
    ps = ic.extract_patches(np.zeros((8, 8)), ic.PatchConfig(6, 1))
    assert len(ps) == 9
    assert ps.vectors.shape == (9, 36)


def test_constant_image_gives_constant_patches():
    ps = ic.extract_patches(np.full((10, 9), 0.37), ic.PatchConfig(4, 2))
    assert np.all(ps.vectors == 0.37)


def test_single_patch_is_column_major_flattening():
    img = np.arange(36.0).reshape(6, 6)
    ps = ic.extract_patches(img, ic.PatchConfig(6))
    assert len(ps) == 1
    np.testing.assert_array_equal(ps.vectors[0], img.ravel(order="F"))


@pytest.mark.parametrize("shape,p,s", [((8, 8), 6, 1), ((17, 13), 3, 2), ((20, 20), 5, 4), ((9, 30), 9, 7)])
def test_patch_count_formula(shape, p, s):
    cfg = ic.PatchConfig(p, s)
    expected = ((shape[0] - p) // s + 1) * ((shape[1] - p) // s + 1)
    assert len(ic.extract_patches(np.ones(shape), cfg)) == expected == cfg.count(shape)


def test_patch_too_large():
    with pytest.raises(InvalidArgumentError):
        ic.extract_patches(np.zeros((5, 8)), ic.PatchConfig(6))


def test_invalid_config():
    with pytest.raises(InvalidArgumentError):
        ic.PatchConfig(0)
    with pytest.raises(InvalidArgumentError):
        ic.PatchConfig(3, stride=0)


def test_subset_is_reproducible_and_in_grid():
    img = np.random.default_rng(0).random((16, 16))
    cfg = ic.PatchConfig(4, 1, subset=20, seed=3)
    a = ic.extract_patches(img, cfg)
    b = ic.extract_patches(img, cfg)
    assert len(a) == 20
    np.testing.assert_array_equal(a.origins, b.origins)
    assert len({tuple(o) for o in a.origins}) == 20
    full = ic.extract_patches(img, ic.PatchConfig(4, 1))
    lookup = {tuple(o): v for o, v in zip(full.origins, full.vectors)}
    for o, v in zip(a.origins, a.vectors):
        np.testing.assert_array_equal(lookup[tuple(o)], v)


def test_adjoint_identity_random_pairs():
    rng = np.random.default_rng(1)
    for trial in range(100):
        p = int(rng.integers(1, 6))
        s = int(rng.integers(1, 4))
        cfg = ic.PatchConfig(p, s)
        x = rng.standard_normal((16, 16))
        ps = ic.extract_patches(x, cfg)
        g = rng.standard_normal(ps.vectors.shape)
        lhs = np.sum(ps.vectors * g)
        rhs = np.sum(x * ic.scatter_patch_gradients(g, x.shape, cfg))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_scatter_single_patch_footprint():
    cfg = ic.PatchConfig(3)
    out = ic.scatter_patch_gradients(np.ones((1, 9)), (5, 5), cfg, origins=np.array([[1, 2]]))
    expected = np.zeros((5, 5))
    expected[1:4, 2:5] = 1
    np.testing.assert_array_equal(out, expected)


def test_scatter_non_overlapping_ones():
    cfg = ic.PatchConfig(4, 4)
    n = cfg.count((12, 8))
    np.testing.assert_array_equal(ic.scatter_patch_gradients(np.ones((n, 16)), (12, 8), cfg), np.ones((12, 8)))


def test_scatter_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        ic.scatter_patch_gradients(np.ones((3, 9)), (8, 8), ic.PatchConfig(3))


def test_patch_measure_single_and_pairs():
    m = ic.patch_measure([np.ones((6, 6))], ic.PatchConfig(6))
    assert m.size == 1 and m.weights[0] == 1.0
    rng = np.random.default_rng(2)
    imgs = [rng.random((10, 10)), rng.random((10, 10))]
    m = ic.patch_measure(imgs, ic.PatchConfig(4))
    assert m.size == 2 * 49
    np.testing.assert_allclose(m.weights, 1 / 98)
    assert abs(m.weights.sum() - 1) <= 1e-12


def test_patch_measure_empty():
    with pytest.raises(InvalidArgumentError):
        ic.patch_measure([], ic.PatchConfig(3))


def test_measure_validation():
    with pytest.raises(InvalidArgumentError):
        ic.DiscreteMeasure(np.zeros((3, 2)), [0.5, 0.5, 0.5])
    with pytest.raises(InvalidArgumentError):
        ic.DiscreteMeasure(np.zeros((3, 2)), [0.5, 0.5])
    m = ic.DiscreteMeasure(np.arange(4.0))
    assert m.size == 4 and m.dim == 1


def test_pgm_roundtrip_8bit(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (7, 11)) / 255.0
    ic.save_image(img, tmp_path / "a.pgm")
    np.testing.assert_array_equal(ic.load_image(tmp_path / "a.pgm"), img)


def test_pgm_roundtrip_16bit_ascii(tmp_path):
    img = np.random.default_rng(4).integers(0, 65536, (5, 6)) / 65535.0
    ic.write_pgm(img, tmp_path / "b.pgm", bits=16, binary=False)
    assert (tmp_path / "b.pgm").read_bytes().startswith(b"P2")
    np.testing.assert_array_equal(ic.read_pgm(tmp_path / "b.pgm"), img)


def test_raw_roundtrip_bit_exact(tmp_path):
    img = np.random.default_rng(5).random((9, 4)).astype(np.float32).astype(np.float64)
    ic.write_raw(img, tmp_path / "x.raw", kind="sinogram")
    back, meta = ic.read_raw(tmp_path / "x.raw", with_meta=True)
    np.testing.assert_array_equal(back, img)
    assert meta["kind"] == "sinogram" and meta["width"] == 4 and meta["height"] == 9
    sidecar = json.loads((tmp_path / "x.raw.json").read_text())
    assert sidecar["height"] == 9


def test_truncated_files(tmp_path):
    img = np.random.default_rng(6).random((8, 8))
    ic.save_image(img, tmp_path / "t.pgm")
    data = (tmp_path / "t.pgm").read_bytes()
    (tmp_path / "t.pgm").write_bytes(data[:-5])
    with pytest.raises(FormatError):
        ic.load_image(tmp_path / "t.pgm")
    ic.write_raw(img, tmp_path / "t.raw")
    raw = (tmp_path / "t.raw").read_bytes()
    (tmp_path / "t.raw").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        ic.read_raw(tmp_path / "t.raw")


def test_bad_maxval(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P2\n2 1\n70000\n1 2\n")
    with pytest.raises(FormatError):
        ic.load_image(tmp_path / "m.pgm")
    (tmp_path / "h.pgm").write_bytes(b"P7\n2 1\n255\n1 2\n")
    with pytest.raises(FormatError):
        ic.load_image(tmp_path / "h.pgm")


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.random.default_rng(7).standard_normal((3, 4)), "b": np.arange(3.0)}
    ic.save_checkpoint(tmp_path / "ck", "demo", {"k": 3}, arrays)
    kind, meta, back = ic.load_checkpoint(tmp_path / "ck", kind="demo")
    assert kind == "demo" and meta["k"] == 3
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    with pytest.raises(FormatError):
        ic.load_checkpoint(tmp_path / "ck", kind="other")
