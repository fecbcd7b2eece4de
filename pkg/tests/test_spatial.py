from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyforge import spatial as spa
from polyforge.errors import DataError, ParameterError, ShapeError
from polyforge.spatial import BBox


def _flood_fill_boxes(mask2d, threshold=0.0, min_area_frac=0.001):
    """Independent oracle: BFS 8-connected components -> tight boxes."""
    fg = mask2d > threshold
    h, w = fg.shape
    seen = np.zeros_like(fg, dtype=bool)
    boxes = []
    for sy in range(h):
        for sx in range(w):
            if not fg[sy, sx] or seen[sy, sx]:
                continue
            q = deque([(sy, sx)])
            seen[sy, sx] = True
            ys, xs = [], []
            count = 0
            while q:
                y, x = q.popleft()
                ys.append(y)
                xs.append(x)
                count += 1
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
            if count >= min_area_frac * h * w:
                boxes.append(BBox(min(xs), min(ys), max(xs) - min(xs) + 1,
                                  max(ys) - min(ys) + 1))
    return boxes


def test_bbox_invariants():
    with pytest.raises(ParameterError):
        BBox(-1, 0, 2, 2)
    with pytest.raises(ParameterError):
        BBox(0, 0, 0, 2)
    with pytest.raises(DataError):
        BBox(6, 6, 4, 4).check_bounds(8, 8)


def test_boxes_to_mask_cases():
    full = spa.boxes_to_mask([BBox(0, 0, 8, 8)], 8, 8)
    assert np.all(full == 1.0)
    empty = spa.boxes_to_mask([], 8, 8)
    assert np.all(empty == -1.0)
    m = spa.boxes_to_mask([BBox(2, 2, 4, 4)], 8, 8)
    assert int((m > 0).sum()) == 16
    with pytest.raises(DataError):
        spa.boxes_to_mask([BBox(5, 5, 4, 4)], 8, 8)


def test_downscale_mask_any_coverage():
    m = np.full((1, 8, 8), -1.0, dtype=np.float32)
    m[0, 3, 5] = 1.0  # single positive pixel
    out = spa.downscale_mask(m, 4)
    assert out.shape == (1, 2, 2)
    assert int((out > 0).sum()) == 1 and out[0, 0, 1] == 1.0
    assert np.all(spa.downscale_mask(np.full((1, 8, 8), -1.0), 2) == -1.0)
    with pytest.raises(ShapeError):
        spa.downscale_mask(np.zeros((1, 9, 8)), 2)


def test_downscale_matches_block_max_oracle(rng):
    m = np.where(rng.random((1, 16, 24)) > 0.8, 1.0, -1.0).astype(np.float32)
    out = spa.downscale_mask(m, 4)
    for by in range(4):
        for bx in range(6):
            assert out[0, by, bx] == m[0, by * 4 : by * 4 + 4, bx * 4 : bx * 4 + 4].max()


def test_downscale_never_loses_a_positive(rng):
    for _ in range(20):
        m = np.where(rng.random((1, 12, 12)) > 0.99, 1.0, -1.0).astype(np.float32)
        if (m > 0).any():
            assert (spa.downscale_mask(m, 3) > 0).any()


def test_extract_boxes_round_trip():
    for b in (BBox(2, 3, 5, 4), BBox(0, 0, 1, 1), BBox(10, 10, 6, 2)):
        mask = spa.boxes_to_mask([b], 16, 16)
        assert spa.extract_boxes(mask, min_area_frac=0.0) == [b]
    assert spa.extract_boxes(spa.boxes_to_mask([], 8, 8)) == []


def test_extract_boxes_two_components_vs_flood_fill():
    mask = spa.boxes_to_mask([BBox(1, 1, 3, 3), BBox(8, 8, 3, 3)], 16, 16)
    got = spa.extract_boxes(mask, min_area_frac=0.0)
    assert len(got) == 2
    assert sorted(got, key=lambda b: (b.y, b.x)) == sorted(
        _flood_fill_boxes(mask[0], min_area_frac=0.0), key=lambda b: (b.y, b.x)
    )


def test_extract_boxes_random_masks_vs_flood_fill(rng):
    for _ in range(10):
        m = np.where(rng.random((20, 20)) > 0.7, 1.0, -1.0)
        got = sorted(spa.extract_boxes(m, min_area_frac=0.0), key=lambda b: (b.y, b.x))
        want = sorted(_flood_fill_boxes(m, min_area_frac=0.0), key=lambda b: (b.y, b.x))
        assert got == want


def test_extract_boxes_min_area_filter():
    m = spa.boxes_to_mask([BBox(0, 0, 1, 1), BBox(4, 4, 8, 8)], 32, 32)
    got = spa.extract_boxes(m, min_area_frac=0.002)  # 1px < 2.048 < 64px
    assert got == [BBox(4, 4, 8, 8)]


def test_center_crop_resize_identity():
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, size=(1, 24, 24)).astype(np.float32)
    boxes = [BBox(3, 4, 5, 6)]
    out = spa.center_crop_resize(img, boxes, 24)
    assert np.allclose(out.image, img)
    assert out.boxes == boxes


def test_center_crop_resize_offset_math():
    img = np.zeros((1, 480, 640), dtype=np.float32)
    out = spa.center_crop_resize(img, [BBox(80, 0, 100, 100)], 480)
    assert out.image.shape == (1, 480, 480)
    assert out.boxes == [BBox(0, 0, 100, 100)]
    # box fully inside the cropped-away margin is dropped
    out2 = spa.center_crop_resize(img, [BBox(0, 0, 60, 60)], 480)
    assert out2.boxes == []


def test_center_crop_resize_area_scaling():
    img = np.zeros((1, 64, 64), dtype=np.float32)
    out = spa.center_crop_resize(img, [BBox(8, 8, 16, 24)], 32)
    (b,) = out.boxes
    assert abs(b.w - 8) <= 1 and abs(b.h - 12) <= 1


def test_dihedral_identity_and_involutions(toy_samples):
    s = toy_samples[0]
    ident = spa.dihedral_augment(s, 0)
    assert np.array_equal(ident.image, s.image) and ident.boxes == s.boxes
    hflip = spa.dihedral_augment(spa.dihedral_augment(s, 4), 4)
    assert np.array_equal(hflip.image, s.image) and hflip.boxes == s.boxes


def test_dihedral_rejects_non_square():
    s = spa.make_sample(np.zeros((1, 8, 12), dtype=np.float32), [])
    with pytest.raises(ShapeError):
        spa.dihedral_augment(s, 1)
    with pytest.raises(ParameterError):
        spa.dihedral_augment(spa.make_sample(np.zeros((1, 8, 8), np.float32), []), 9)


@pytest.mark.parametrize("op", range(8))
def test_dihedral_boxes_commute_with_mask(op):
    """Commutation oracle: extracting boxes from the augmented mask equals
    augmenting the boxes."""
    boxes = [BBox(1, 2, 4, 3), BBox(9, 8, 3, 5)]
    s = spa.make_sample(np.zeros((1, 16, 16), dtype=np.float32), boxes)
    aug = spa.dihedral_augment(s, op)
    got = sorted(spa.extract_boxes(aug.mask, min_area_frac=0.0), key=lambda b: (b.y, b.x))
    want = sorted(aug.boxes, key=lambda b: (b.y, b.x))
    assert got == want
    assert np.array_equal(aug.mask, spa.boxes_to_mask(aug.boxes, 16, 16))


@settings(max_examples=30, deadline=None)
@given(a=st.integers(0, 7), b=st.integers(0, 7))
def test_dihedral_group_closure(a, b):
    rng = np.random.default_rng(5)
    img = rng.uniform(-1, 1, size=(1, 8, 8)).astype(np.float32)
    s = spa.make_sample(img, [BBox(1, 1, 3, 2)])
    composed = spa.dihedral_augment(spa.dihedral_augment(s, a), b)
    matches = [
        op for op in range(8)
        if np.array_equal(spa.dihedral_augment(s, op).image, composed.image)
    ]
    assert len(matches) == 1  # composing two ops lands exactly on a third


def test_codec_identity_round_trip(rng):
    img = rng.uniform(-1, 1, size=(3, 16, 16)).astype(np.float32)
    codec = spa.LatentCodec()
    assert spa.codec_decode(codec, spa.codec_encode(codec, img)) is img


def test_codec_pool_constant_round_trip():
    codec = spa.LatentCodec("pool", 2)
    img = np.full((1, 8, 8), 0.25, dtype=np.float32)
    lat = spa.codec_encode(codec, img)
    assert lat.shape == (1, 4, 4) and np.all(lat == 0.25)
    back = spa.codec_decode(codec, lat)
    assert back.shape == (1, 8, 8)
    assert np.array_equal(back, img)


def test_codec_pool_block_mean_oracle():
    codec = spa.LatentCodec("pool", 2)
    img = np.zeros((1, 4, 4), dtype=np.float32)
    img[0, ::2, ::2] = 1.0  # checkerboard block pattern
    lat = spa.codec_encode(codec, img)
    for by in range(2):
        for bx in range(2):
            assert lat[0, by, bx] == img[0, by * 2 : by * 2 + 2, bx * 2 : bx * 2 + 2].mean()
    with pytest.raises(ShapeError):
        spa.codec_encode(codec, np.zeros((1, 5, 4)))


def test_codec_parse():
    assert spa.LatentCodec.parse("identity").kind == "identity"
    assert spa.LatentCodec.parse("pool:4").factor == 4
    with pytest.raises(ParameterError):
        spa.LatentCodec.parse("vae")


def test_png_round_trip(tmp_path, rng):
    img = spa.unit_to_image(rng.uniform(-1, 1, size=(1, 16, 16)))
    img_unit = spa.image_to_unit(img)
    spa.save_image(tmp_path / "x.png", img_unit)
    back = spa.load_image(tmp_path / "x.png")
    assert np.array_equal(back, img_unit)  # 8-bit grid values are exact


def test_manifest_round_trip(tmp_path):
    entries = [
        spa.ManifestEntry("a.png", 16, 16, [BBox(1, 2, 3, 4)]),
        spa.ManifestEntry("b.png", 16, 16, []),
    ]
    spa.save_manifest(tmp_path / "m.json", entries)
    back = spa.load_manifest(tmp_path / "m.json")
    assert [e.image_path for e in back] == ["a.png", "b.png"]
    assert back[0].boxes == [BBox(1, 2, 3, 4)]
    with pytest.raises(DataError):
        spa.load_manifest(tmp_path / "missing.json")
