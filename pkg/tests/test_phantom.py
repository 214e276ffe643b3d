from collections import Counter

import numpy as np
import pytest

from gansharing.phantom import (MAX_INTENSITY, CentreProfile, ProfileError, equivalent_diameter, foreground_mean,
                                generate_corpus, is_simple_polygon, points_in_polygon, polygon_area, read_corpus,
                                render_lesion, write_corpus)

from conftest import small_profile


def _same(c1, c2):
    assert len(c1) == len(c2)
    for (i1, a1), (i2, a2) in zip(c1, c2):
        assert i1.image_id == i2.image_id and i1.pixels.tobytes() == i2.pixels.tobytes()
        assert a1.to_json() == a2.to_json()


def test_zero_patients_is_rejected():
    with pytest.raises(ProfileError):
        generate_corpus(CentreProfile("A", patient_count=0), seed=0)


def test_lesion_too_large_for_image_is_rejected():
    with pytest.raises(ProfileError, match="too large"):
        generate_corpus(CentreProfile("A", width=128, height=96, lesion_size_mean_px=40), seed=0)


@pytest.mark.parametrize("field,value", [("intensity_offset", 0.4), ("contrast_gain", 3.0),
                                         ("lesion_kinds", ("cyst",))])
def test_out_of_range_knobs_are_rejected(field, value):
    with pytest.raises(ProfileError):
        CentreProfile("A", **{field: value}).validate()


def test_generation_is_deterministic(small_corpus):
    _same(small_corpus, generate_corpus(small_profile(), seed=3))
    other = generate_corpus(small_profile(), seed=4)
    assert any(a.pixels.tobytes() != b.pixels.tobytes() for (a, _), (b, _) in zip(small_corpus, other))


def test_images_per_patient_and_healthy_share():
    corpus = generate_corpus(small_profile(patients=60, healthy_fraction=0.5), seed=1)
    per_patient = Counter(img.patient_id for img, _ in corpus)
    assert set(per_patient.values()) <= {1, 2, 3, 4}
    healthy = np.mean([not ann.lesions for _, ann in corpus])
    assert 0.35 < healthy < 0.65


def test_annotations_lie_inside_the_breast(small_corpus):
    for image, ann in small_corpus:
        assert image.pixels.dtype == np.uint16
        assert 1 <= ann.density <= 4 and ann.side in ("L", "R")
        for les in ann.lesions:
            c = les.contour
            assert (c[:, 0] >= 0).all() and (c[:, 0] <= image.width - 1).all()
            assert (c[:, 1] >= 0).all() and (c[:, 1] <= image.height - 1).all()
            assert is_simple_polygon(c)
            vx, vy = np.round(c[:, 0]).astype(int), np.round(c[:, 1]).astype(int)
            # tissue never falls below 12% of full scale; the background stays under 2%
            assert (image.pixels[vy, vx] > 0.1 * MAX_INTENSITY).all()


def test_background_is_near_zero(small_corpus):
    for image, _ in small_corpus:
        px = image.pixels.astype(np.float64) / MAX_INTENSITY
        corner = px[:4, -4:] if image.side == "L" else px[:4, :4]
        assert corner.max() < 0.02


def test_mean_mass_diameter_tracks_profile():
    profile = CentreProfile("A", width=320, height=256, lesion_size_mean_px=40, lesion_size_std_px=8,
                            lesion_kinds=("mass",), healthy_fraction=0.0, patient_count=70)
    diam = [equivalent_diameter(les.contour) for _, ann in generate_corpus(profile, seed=0) for les in ann.lesions]
    assert len(diam) >= 200
    assert 34 <= np.mean(diam) <= 46


def test_density_distribution_is_reproducible():
    def hist(seed):
        return Counter(img.density_class for img, _ in generate_corpus(small_profile(patients=40), seed))
    assert hist(5) == hist(5)


def test_intensity_offset_shifts_foreground_mean():
    a = generate_corpus(small_profile("A", patients=6, intensity_offset=0.0), seed=2)
    b = generate_corpus(small_profile("B", patients=6, intensity_offset=0.2), seed=2)
    assert foreground_mean(b) - foreground_mean(a) >= 0.1


def test_corpus_round_trips_through_pgm_and_json(tmp_path, small_corpus):
    write_corpus(small_corpus, tmp_path, small_profile())
    back = read_corpus(tmp_path)
    for (i1, a1), (i2, a2) in zip(small_corpus, back):
        assert i1.pixels.tobytes() == i2.pixels.tobytes()
        assert a1.to_json() == a2.to_json()
    assert (tmp_path / "images" / f"{small_corpus[0][0].image_id}.pgm").read_bytes().startswith(b"P5")


def test_unknown_lesion_kind():
    with pytest.raises(ValueError):
        render_lesion("cyst", 20, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(25))
def test_calcification_specks(seed):
    stamp, contour = render_lesion("calcification_cluster", 30, np.random.default_rng(seed))
    specks = np.unique(stamp[stamp > 0])  # one intensity per speck
    assert 5 <= len(specks) <= 20
    ys, xs = np.nonzero(stamp)
    assert points_in_polygon(xs.astype(float), ys.astype(float), contour).all()


@pytest.mark.parametrize("seed", range(25))
def test_mass_profile_and_contour(seed):
    stamp, contour = render_lesion("mass", 24, np.random.default_rng(seed))
    half = stamp.shape[0] // 2
    assert stamp[half, half] == stamp.max()
    yy, xx = np.mgrid[:stamp.shape[0], :stamp.shape[1]]
    rho = np.hypot(xx - half, yy - half).round().astype(int)
    radial = np.array([stamp[rho == r].mean() for r in range(rho.max() + 1)])
    assert (np.diff(radial) <= 1e-12).all()
    assert polygon_area(contour) >= np.count_nonzero(stamp >= 0.5 * stamp.max())


@pytest.mark.parametrize("kind", ["mass", "calcification_cluster", "architectural_distortion"])
def test_contour_holds_the_stamped_energy(kind):
    for seed in range(10):
        stamp, contour = render_lesion(kind, 26, np.random.default_rng(seed))
        yy, xx = np.mgrid[:stamp.shape[0], :stamp.shape[1]]
        inside = points_in_polygon(xx.ravel().astype(float), yy.ravel().astype(float), contour)
        assert stamp.ravel()[inside].sum() >= 0.95 * stamp.sum()
