import json

import numpy as np
import pytest

from crend.volume import (
    CvolCorruptionError,
    CvolFormatError,
    LabelMask,
    Volume,
    load_labels,
    load_volume,
    make_patch_grid,
    pad_to,
    read_cvol,
    resample,
    resize_inplane,
    save_cvol,
    save_labels,
    save_volume,
    stitch,
)


def test_constant_volume_normalizes_to_zero(tmp_path):
    save_cvol(tmp_path / "c.cvol", np.full((3, 4, 5), 7.5, np.float32), (1, 1, 1))
    v = load_volume(tmp_path / "c.cvol")
    assert v.shape == (3, 4, 5)
    assert np.all(v.data == 0)


def test_header_dims_define_shape(tmp_path):
    save_cvol(tmp_path / "a.cvol", np.arange(64, dtype=np.float32).reshape(4, 4, 4), (0.2, 0.2, 0.2))
    v = load_volume(tmp_path / "a.cvol")
    assert v.shape == (4, 4, 4)
    assert v.spacing == (0.2, 0.2, 0.2)
    assert v.data.min() == 0 and v.data.max() == 1


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_is_bit_exact(tmp_path, seed):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(1, 9, size=3))
    data = rng.normal(size=dims).astype(np.float32) * 1000
    path = save_cvol(tmp_path / "r.cvol", data, (0.3, 0.4, 0.5))
    raw, spacing = read_cvol(path)
    assert raw.tobytes() == data.tobytes()
    assert spacing == (0.3, 0.4, 0.5)


def test_header_layout(tmp_path):
    path = save_cvol(tmp_path / "h.cvol", np.zeros((2, 3, 4), np.uint8), (1, 2, 3))
    raw = path.read_bytes()
    header = json.loads(raw[: raw.index(b"\n")])
    assert header == {"dims": [2, 3, 4], "spacing": [1.0, 2.0, 3.0], "dtype": "u8", "order": "C"}
    assert len(raw) == raw.index(b"\n") + 1 + 24


def test_malformed_header(tmp_path):
    (tmp_path / "bad.cvol").write_bytes(b"not json\n\x00\x00")
    with pytest.raises(CvolFormatError):
        read_cvol(tmp_path / "bad.cvol")
    (tmp_path / "nokey.cvol").write_bytes(b'{"dims": [1, 1, 1]}\n\x00')
    with pytest.raises(CvolFormatError):
        read_cvol(tmp_path / "nokey.cvol")


def test_truncated_payload(tmp_path):
    path = save_cvol(tmp_path / "t.cvol", np.ones((4, 4, 4), np.float32), (1, 1, 1))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CvolCorruptionError):
        read_cvol(path)


def test_label_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(5, 6, 7)).astype(np.uint8)
    m = LabelMask.from_label_map(labels, (0.2, 0.2, 0.2))
    assert np.all(m.follicle <= m.ovary)
    save_labels(tmp_path / "l.cvol", m)
    back = load_labels(tmp_path / "l.cvol")
    np.testing.assert_array_equal(back.to_label_map(), labels)


def test_volume_rejects_bad_input():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))


# resampling


def test_resample_identity():
    rng = np.random.default_rng(1)
    v = Volume(rng.random((5, 6, 7)).astype(np.float32), (0.2, 0.3, 0.4))
    out = resample(v, (0.2, 0.3, 0.4))
    np.testing.assert_array_equal(out.data, v.data)


def test_resample_ratio():
    v = Volume(np.random.default_rng(2).random((10, 10, 10)), (0.4, 0.4, 0.4))
    out = resample(v, (0.2, 0.2, 0.2))
    assert out.shape == (20, 20, 20)
    assert out.spacing == (0.2, 0.2, 0.2)


def test_resample_rejects_nonpositive():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        resample(v, (0.2, 0.0, 0.2))


@pytest.mark.parametrize("seed", range(10))
def test_nearest_resampling_keeps_label_values(seed):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 2, size=tuple(rng.integers(2, 9, size=3)))
    target = tuple(rng.uniform(0.3, 2.0, size=3))
    out = resample(Volume(mask.astype(np.float32)), target, mode="nearest")
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    lm = LabelMask.from_label_map(rng.integers(0, 3, size=(6, 6, 6)))
    out = resample(lm, target, mode="nearest")
    assert set(np.unique(out.to_label_map())) <= {0, 1, 2}


@pytest.mark.parametrize("seed", range(10))
def test_trilinear_resampling_keeps_range(seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(6, 7, 5)).astype(np.float32)
    out = resample(Volume(data), tuple(rng.uniform(0.4, 1.7, size=3)))
    assert out.data.min() >= data.min() - 1e-6
    assert out.data.max() <= data.max() + 1e-6


def test_resize_inplane_scales_third_axis():
    v = Volume(np.zeros((40, 40, 30)), (0.2, 0.2, 0.2))
    out = resize_inplane(v, (20, 20))
    assert out.shape == (20, 20, 15)
    assert out.spacing == pytest.approx((0.4, 0.4, 0.4))


# patch grid and stitching


def test_single_tile_grid():
    grid = make_patch_grid((32, 32, 16), (32, 32, 16), 0.5)
    assert grid.origins == [(0, 0, 0)]


def _enumerate_origins(shape, patch, stride):
    # independent enumeration: walk by stride, then clamp the overhang
    per_axis = []
    for n, p, t in zip(shape, patch, stride):
        starts, s = [], 0
        while True:
            starts.append(min(s, n - p))
            if s + p >= n:
                break
            s += t
        per_axis.append(sorted(set(starts)))
    return [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]


def test_full_scale_grid_has_nine_tiles():
    grid = make_patch_grid((384, 384, 128), (192, 192, 128), 0.5)
    assert grid.stride == (96, 96, 64)
    assert len(grid) == 9
    assert grid.origins == _enumerate_origins((384, 384, 128), (192, 192, 128), (96, 96, 64))


@pytest.mark.parametrize("seed", range(20))
def test_grid_covers_every_voxel(seed):
    rng = np.random.default_rng(seed)
    patch = tuple(rng.integers(1, 8, size=3))
    shape = tuple(p + rng.integers(0, 12) for p in patch)
    overlap = rng.uniform(0, 0.95)
    grid = make_patch_grid(shape, patch, overlap)
    assert grid.origins == _enumerate_origins(shape, patch, grid.stride)
    covered = np.zeros(shape, bool)
    for o in grid.origins:
        covered[grid.slices(o)] = True
    assert covered.all()


def test_grid_rejects_bad_overlap():
    with pytest.raises(ValueError):
        make_patch_grid((8, 8, 8), (4, 4, 4), 1.0)
    with pytest.raises(ValueError):
        make_patch_grid((8, 8, 8), (4, 4, 4), -0.1)


def test_stitch_single_patch_identity():
    p = np.random.default_rng(0).random((2, 4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(stitch([((0, 0, 0), p)], (4, 4, 4)), p)


def test_stitch_averages_overlap():
    a = np.full((1, 4, 2, 2), 0.2)
    b = np.full((1, 4, 2, 2), 0.6)
    out = stitch([((0, 0, 0), a), ((2, 0, 0), b)], (6, 2, 2))
    np.testing.assert_allclose(out[0, :2], 0.2, atol=1e-7)
    np.testing.assert_allclose(out[0, 2:4], 0.4, atol=1e-7)
    np.testing.assert_allclose(out[0, 4:], 0.6, atol=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_stitch_matches_direct_accumulation(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(6, 12, size=3))
    grid = make_patch_grid(shape, (5, 5, 5), 0.5)
    patches = [(o, rng.random((2, 5, 5, 5))) for o in grid.origins]
    total = np.zeros((2,) + shape)
    count = np.zeros(shape)
    for o, p in patches:
        for i in range(5):
            for j in range(5):
                for k in range(5):
                    total[:, o[0] + i, o[1] + j, o[2] + k] += p[:, i, j, k]
                    count[o[0] + i, o[1] + j, o[2] + k] += 1
    np.testing.assert_allclose(stitch(patches, shape), total / count, atol=1e-6)


def test_stitch_of_exact_crops_is_identity():
    rng = np.random.default_rng(3)
    full = rng.random((2, 11, 9, 7)).astype(np.float32)
    grid = make_patch_grid(full.shape[1:], (4, 4, 4), 0.5)
    out = stitch([(o, full[(slice(None),) + grid.slices(o)]) for o in grid.origins], full.shape[1:])
    np.testing.assert_allclose(out, full, atol=1e-7)


def test_stitch_detects_gaps():
    with pytest.raises(RuntimeError):
        stitch([((0, 0, 0), np.zeros((1, 2, 2, 2)))], (3, 2, 2))


def test_pad_and_crop_back():
    data = np.random.default_rng(4).random((5, 32, 9))
    padded, crop = pad_to(data, (16, 16, 16))
    assert padded.shape == (16, 32, 16)
    np.testing.assert_array_equal(padded[crop], data)
