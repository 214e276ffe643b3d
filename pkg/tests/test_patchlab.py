import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gansharing.patchlab import (HEALTHY, NON_HEALTHY, AugmentParams, BoundingBox, BudgetExhausted, Geometry,
                                 PatchError, area_resize, augment_and_crop, background_fraction, count_by_label,
                                 extract_dataset, lesion_box, otsu_threshold, read_patches, sample_healthy_boxes,
                                 tight_box, write_patches)
from gansharing.phantom import Annotation, GrayImage, Lesion


def _image(pixels):
    return GrayImage("img", np.asarray(pixels, dtype=np.uint16), "P", 2, "L")


def _healthy_ann():
    return Annotation("img", "P", 2, "L", [])


def _square(x0, y0, w, h):
    return np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], dtype=float)


def test_geometry_defaults():
    assert (Geometry(0.5).margin, Geometry(0.5).input_side) == (30, 64)
    assert (Geometry(1.0).margin, Geometry(1.0).input_side) == (60, 128)


def test_lesion_box_centred_with_margin():
    box = lesion_box(1000, 1000, _square(495, 495, 10, 10), 60)
    assert (box.w, box.h) == (130, 130)
    assert (box.x + box.w / 2, box.y + box.h / 2) == (500, 500)


def test_lesion_box_side_uses_longer_edge():
    box = lesion_box(1000, 1000, _square(300, 300, 20, 40), 60)
    assert box.w == box.h == 160


@pytest.mark.parametrize("corner", [(0, 0), (990, 0), (0, 990), (990, 990)])
def test_lesion_box_translated_at_corners(corner):
    box = lesion_box(1000, 1000, _square(*corner, 10, 10), 60)
    assert box.w == 130 and box.inside(1000, 1000)
    assert box.x in (0, 870) and box.y in (0, 870)


def test_lesion_box_larger_than_image():
    with pytest.raises(PatchError):
        lesion_box(100, 100, _square(40, 40, 10, 10), 60)


@settings(max_examples=200, deadline=None)
@given(w=st.integers(60, 400), h=st.integers(60, 400), fx=st.floats(0, 1), fy=st.floats(0, 1),
       lw=st.integers(1, 30), lh=st.integers(1, 30), margin=st.integers(0, 14))
def test_lesion_box_property(w, h, fx, fy, lw, lh, margin):
    x0, y0 = fx * (w - lw - 1), fy * (h - lh - 1)
    contour = _square(x0, y0, lw, lh)
    tb = tight_box(contour)
    box = lesion_box(w, h, contour, margin)
    assert box.w == box.h == max(tb.w, tb.h) + 2 * margin
    assert box.inside(w, h)
    # minimal translation: the tight box stays covered
    assert box.x <= tb.x and box.y <= tb.y
    assert box.x + box.w >= tb.x + tb.w and box.y + box.h >= tb.y + tb.h


def test_all_foreground_accepts_any_box():
    img = _image(np.full((80, 100), 40000))
    boxes = sample_healthy_boxes(img, _healthy_ann(), 20, np.random.default_rng(0), Geometry(0.25))
    assert len(boxes) == 20 and all(b.inside(100, 80) for b in boxes)


def test_all_background_exhausts_budget():
    img = _image(np.zeros((80, 100)))
    with pytest.raises(BudgetExhausted) as err:
        sample_healthy_boxes(img, _healthy_ann(), 3, np.random.default_rng(0), Geometry(0.25))
    assert err.value.boxes == []


def test_half_split_image_keeps_foreground_majority():
    px = np.zeros((60, 200))
    px[:, :100] = 50000
    px[:, 100:] = 300
    img = _image(px)
    boxes = sample_healthy_boxes(img, _healthy_ann(), 30, np.random.default_rng(1), side=60)
    for b in boxes:
        fg = max(0, min(b.x + b.w, 100) - b.x) / b.w
        assert fg >= 0.6


def test_healthy_boxes_need_a_healthy_image():
    ann = Annotation("img", "P", 2, "L", [Lesion("mass", False, _square(10, 10, 5, 5))])
    with pytest.raises(PatchError):
        sample_healthy_boxes(_image(np.ones((60, 60))), ann, 1, np.random.default_rng(0))


def test_otsu_separates_two_levels():
    px = np.r_[np.full(500, 100.0), np.full(500, 30000.0)]
    thr = otsu_threshold(px)
    assert 100 < thr <= 30000


def test_resize_identity_and_constant():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    assert np.array_equal(area_resize(a, 16), a)
    np.testing.assert_allclose(area_resize(np.full((32, 32), 0.37), 16), 0.37, rtol=0, atol=1e-15)


def test_checkerboard_resize_is_uniform_half():
    s = 16
    board = (np.indices((2 * s, 2 * s)).sum(axis=0) % 2).astype(np.float64)
    out = area_resize(board, s)
    # direct summation oracle: each output pixel is the mean of its 2x2 input block
    oracle = board.reshape(s, 2, s, 2).mean(axis=(1, 3))
    assert np.array_equal(out, oracle)
    assert np.array_equal(out, np.full((s, s), 0.5))


def test_resize_preserves_mass_for_non_integer_ratio():
    a = np.random.default_rng(2).random((45, 45))
    assert abs(area_resize(a, 16).mean() - a.mean()) < 1e-12


def test_no_op_augmentation_returns_raw_crop():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 65535, (50, 60)).astype(np.uint16)
    box = BoundingBox(10, 5, 16, 16)
    out, aug = augment_and_crop(_image(px), box, rng, AugmentParams(out_side=16, sigma_zoom=0, sigma_shift=0))
    assert aug == box
    np.testing.assert_allclose(out, px[5:21, 10:26] / 65535.0, rtol=0, atol=1e-7)


def test_augmentation_clamps_and_is_class_blind():
    px = np.random.default_rng(3).integers(0, 65535, (90, 120)).astype(np.uint16)
    params = AugmentParams(out_side=24, sigma_zoom=0.3, sigma_shift=0.3)
    for seed in range(200):
        box = BoundingBox(int(seed % 90), int(seed % 60), 30, 30)
        a, ab = augment_and_crop(_image(px), box, np.random.default_rng(seed), params)
        b, bb = augment_and_crop(_image(px), box, np.random.default_rng(seed), params)
        assert ab == bb and a.tobytes() == b.tobytes()
        assert ab.inside(120, 90) and 0.8 * 30 - 1 <= ab.w <= 1.25 * 30 + 1
        assert a.shape == (24, 24) and a.min() >= 0 and a.max() <= 1


def _recount(corpus, scope):
    n_les = sum(1 for _, ann in corpus for les in ann.lesions if scope == "all_lesions" or les.kind == "mass")
    return n_les


def test_extraction_scopes_and_recount(small_corpus):
    geo = Geometry(0.25)
    all_ = extract_dataset(small_corpus, "all_lesions", 0, geo, healthy_per_image=2)
    mass = extract_dataset(small_corpus, "masses_only", 0, geo, healthy_per_image=2)
    assert count_by_label(all_)[NON_HEALTHY] == _recount(small_corpus, "all_lesions")
    assert count_by_label(mass)[NON_HEALTHY] == _recount(small_corpus, "masses_only")
    assert all(r.lesion_kinds == ("mass",) for r in mass if r.label == NON_HEALTHY)
    healthy_images = {ann.image_id for _, ann in small_corpus if not ann.lesions}
    for r in all_:
        assert (r.label == NON_HEALTHY) == bool(r.lesion_kinds)
        assert r.pixels.shape == (geo.input_side, geo.input_side) and r.pixels.dtype == np.float32
        assert 0 <= r.pixels.min() and r.pixels.max() <= 1
        if r.label == HEALTHY:
            assert r.image_id in healthy_images


def test_every_extracted_box_is_valid(small_corpus):
    geo = Geometry(0.25)
    images = {img.image_id: img for img, _ in small_corpus}
    for r in extract_dataset(small_corpus, "all_lesions", 7, geo, healthy_per_image=4):
        img = images[r.image_id]
        assert r.origin_box.inside(img.width, img.height)
        assert r.crop_box.inside(img.width, img.height)
        if r.label == HEALTHY:
            assert background_fraction(img.pixels, r.origin_box, otsu_threshold(img.pixels)) <= 0.40


def test_extraction_is_deterministic(small_corpus):
    a = extract_dataset(small_corpus, "all_lesions", 5, Geometry(0.25))
    b = extract_dataset(small_corpus, "all_lesions", 5, Geometry(0.25))
    assert [r.pixels.tobytes() for r in a] == [r.pixels.tobytes() for r in b]


def test_extraction_errors(small_corpus):
    with pytest.raises(PatchError):
        extract_dataset([], "all_lesions", 0)
    healthy_only = [(img, ann) for img, ann in small_corpus if not ann.lesions]
    with pytest.raises(PatchError, match="non_healthy=0"):
        extract_dataset(healthy_only, "all_lesions", 0, Geometry(0.25))
    with pytest.raises(ValueError):
        extract_dataset(small_corpus, "calcs", 0)


def test_patch_directory_round_trip(tmp_path, small_corpus):
    recs = extract_dataset(small_corpus, "masses_only", 0, Geometry(0.25), healthy_per_image=1)
    write_patches(recs, tmp_path)
    back = read_patches(tmp_path)
    assert [r.meta() for r in back] == [r.meta() for r in recs]
    for a, b in zip(recs, back):
        # 8-bit storage
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 255 + 1e-6
