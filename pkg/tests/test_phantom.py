import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trnet.phantom import (ConfigError, PhantomConfig, PlaqueSpec, generate_dataset,
                           generate_phantom, narrowing_profile, narrowing_to_label, random_configs)


def test_no_plaques_all_negative():
    img = generate_phantom(PhantomConfig(centerline_length=80))
    assert not img.labels.any()
    assert np.all(img.narrowing == 0)


def test_rectangular_plaque_labels_exact_span():
    cfg = PhantomConfig(centerline_length=100,
                        plaques=[PlaqueSpec(40, 20, 0.7, "non_calcified", "rectangular")])
    img = generate_phantom(cfg)
    # independent oracle straight from the plaque list
    expected = np.array([40 <= z < 60 and 0.7 > 0.5 for z in range(100)])
    np.testing.assert_array_equal(img.labels.astype(bool), expected)
    assert np.flatnonzero(img.labels).tolist() == list(range(40, 60))


def test_half_narrowing_is_not_significant():
    cfg = PhantomConfig(centerline_length=100, plaques=[PlaqueSpec(40, 20, 0.5)])
    img = generate_phantom(cfg)
    assert not img.labels.any()
    assert np.isclose(img.narrowing[40:60], 0.5).all()


@pytest.mark.parametrize("value,label", [(0.51, 1), (0.50, 0), (0.0, 0), (1.0, 1)])
def test_narrowing_to_label(value, label):
    assert narrowing_to_label(value) == label


@pytest.mark.parametrize("value", [-0.01, 1.01, float("nan")])
def test_narrowing_to_label_domain(value):
    with pytest.raises(ValueError):
        narrowing_to_label(value)


def test_overlapping_plaques_rejected():
    cfg = PhantomConfig(plaques=[PlaqueSpec(10, 20, 0.6), PlaqueSpec(25, 10, 0.7)])
    with pytest.raises(ConfigError, match=r"plaques\[0\] and plaques\[1\] overlap"):
        generate_phantom(cfg)


@pytest.mark.parametrize("kw", [dict(cross_section_size=30), dict(cross_section_size=9, lumen_radius=4),
                                dict(centerline_length=0), dict(noise_std=-1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        PhantomConfig(**kw).validate()


def test_plaque_out_of_range():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomConfig(centerline_length=50, plaques=[PlaqueSpec(40, 20, 0.6)]))


def test_smooth_profile_is_raised_cosine():
    cfg = PhantomConfig(centerline_length=60, plaques=[PlaqueSpec(10, 20, 0.8, profile="smooth")])
    n = narrowing_profile(cfg)
    z = np.arange(10, 30)
    expected = 0.8 * 0.5 * (1 - np.cos(2 * np.pi * (z - 10 + 0.5) / 20))
    np.testing.assert_allclose(n[10:30], expected)
    assert n[:10].sum() == 0 and n[30:].sum() == 0
    assert n.max() <= 0.8
    # a smooth plaque produces both sub- and supra-threshold voxels
    assert (n[10:30] > 0.5).any() and ((n[10:30] > 0) & (n[10:30] <= 0.5)).any()


def test_clean_tube_cross_sections_identical():
    img = generate_phantom(PhantomConfig(centerline_length=20, noise_std=0.0))
    assert np.all(img.intensities == img.intensities[0])
    c = img.axis
    assert img.intensities[0, c, c] == 350.0
    assert img.intensities[0, 0, 0] == -50.0


def _plaque_voxels(cfg, z):
    clean = generate_phantom(PhantomConfig(**{**cfg.to_dict(), "plaques": [], "noise_std": 0.0}))
    img = generate_phantom(PhantomConfig(**{**cfg.to_dict(), "noise_std": 0.0}))
    return img.intensities[z][img.intensities[z] != clean.intensities[z]]


def test_plaque_intensity_by_kind():
    for kind in ("calcified", "non_calcified"):
        cfg = PhantomConfig(centerline_length=60, plaques=[PlaqueSpec(20, 20, 0.7, kind)])
        vals = _plaque_voxels(cfg, 30)
        assert len(vals) > 0
        if kind == "calcified":
            assert vals.mean() > cfg.lumen_intensity
        else:
            assert abs(vals.mean() - cfg.wall_intensity) <= 0.1 * abs(cfg.wall_intensity)


def test_lumen_area_shrinks_with_narrowing():
    areas = []
    for n in (0.0, 0.3, 0.6, 0.9):
        cfg = PhantomConfig(centerline_length=10, plaques=[PlaqueSpec(0, 10, n)] if n else [])
        img = generate_phantom(cfg)
        areas.append(int((img.intensities[5] == cfg.lumen_intensity).sum()))
    assert areas == sorted(areas, reverse=True)
    assert areas[0] > areas[-1] > 0


def test_determinism_and_noise():
    cfg = PhantomConfig(noise_std=25.0, seed=3, plaques=[PlaqueSpec(30, 10, 0.8, "calcified")])
    a, b = generate_phantom(cfg), generate_phantom(cfg)
    np.testing.assert_array_equal(a.intensities, b.intensities)
    c = generate_phantom(PhantomConfig(**{**cfg.to_dict(), "seed": 4}))
    assert not np.array_equal(a.intensities, c.intensities)


def test_generate_dataset_counts_and_duplicate_warning():
    assert generate_dataset([]) == []
    cfgs = [PhantomConfig(centerline_length=10, seed=i) for i in range(76)]
    assert len(generate_dataset(cfgs)) == 76
    with pytest.warns(UserWarning, match="duplicate"):
        imgs = generate_dataset([PhantomConfig(centerline_length=10, seed=1, noise_std=5.0)] * 2)
    np.testing.assert_array_equal(imgs[0].intensities, imgs[1].intensities)


def test_random_configs_are_valid():
    for cfg in random_configs(40, seed=5, profile=None):
        cfg.validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_labels_follow_narrowing(seed):
    cfg = random_configs(1, seed=seed, length_range=(30, 60), plaque_length_range=(3, 15))[0]
    img = generate_phantom(cfg)
    np.testing.assert_array_equal(img.labels.astype(bool), img.narrowing > 0.5)
    assert len(img.labels) == len(img.narrowing) == cfg.centerline_length
