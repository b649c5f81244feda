import numpy as np
import pytest

from tractreg.errors import ValidationError
from tractreg.metrics import abd, chamfer_loss
from tractreg.streamlines import resample_streamline
from tractreg.synth import (FAMILIES, BundleSpec, centerline, gen_bundle, gen_phantom, make_pair,
                            phantom_specs)


@pytest.fixture(scope="module")
def phantom():
    return gen_phantom(6, seed=0, n_streamlines=60)


def test_zero_sigma_gives_identical_copies():
    t = gen_bundle(BundleSpec("helix", n_streamlines=3, sigma=0.0))
    arr = t.as_array()
    np.testing.assert_array_equal(arr[0], arr[1])
    np.testing.assert_array_equal(arr[0], arr[2])
    np.testing.assert_allclose(arr[0], resample_streamline(centerline(BundleSpec("helix")), 15),
                               atol=1e-12)


def test_arc_geometric_bound():
    sigma = 2.0
    t = gen_bundle(BundleSpec("arc", radius=30.0, sigma=sigma, n_streamlines=300, seed=4))
    r = np.linalg.norm(t.coords, axis=1)
    assert r.max() <= 30.0 + 3 * sigma + 1e-9
    assert np.abs(t.coords[:, 2]).max() <= 3 * sigma + 1e-9


@pytest.mark.parametrize("family", FAMILIES)
def test_seed_determinism(family):
    spec = BundleSpec(family, n_streamlines=20, seed=11)
    assert gen_bundle(spec).equals(gen_bundle(spec))
    assert not gen_bundle(spec).equals(gen_bundle(BundleSpec(family, n_streamlines=20, seed=12)))


@pytest.mark.parametrize("bad", [dict(family="spiral"), dict(radius=0.0), dict(sigma=-1.0),
                                 dict(n_streamlines=0)])
def test_invalid_spec(bad):
    with pytest.raises(ValidationError):
        gen_bundle(BundleSpec(**bad))


def test_single_bundle_phantom_equals_bundle():
    t = gen_phantom(1, seed=3, n_streamlines=30)
    spec = phantom_specs(1, seed=3, n_streamlines=30)[0]
    assert spec.label == 0
    b = gen_bundle(spec)
    assert t.equals(b)
    np.testing.assert_array_equal(t.labels, 0)


def test_phantom_separation_and_labels():
    specs = phantom_specs(5, seed=2, n_streamlines=50)
    t = gen_phantom(5, seed=2, n_streamlines=50)
    cents = [t.coords[np.repeat(t.labels, 15) == b].mean(axis=0) for b in range(5)]
    # centroids of bent bundles sit near, not on, the placement centers
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(np.subtract(specs[i].center, specs[j].center)) >= 40.0
    assert len(cents) == 5
    assert sorted(np.unique(t.labels)) == list(range(5))
    assert np.bincount(t.labels).tolist() == [50] * 5


def test_default_phantom_scale():
    t = gen_phantom(seed=0)
    assert len(t) == 2400 and t.n_points == 15
    assert 100.0 <= np.ptp(t.coords, axis=0).max() <= 200.0


def test_zero_displacement_pair(phantom):
    moving, fixed, truth = make_pair(phantom, 0.0, seed=1)
    assert moving.equals(fixed)
    assert not np.any(truth.displacement)


@pytest.mark.parametrize("kind", ["tps", "sine"])
def test_displacement_bound(phantom, kind):
    for seed in range(5):
        moving, fixed, truth = make_pair(phantom, 5.0, seed=seed, kind=kind)
        d = np.linalg.norm(moving.coords - fixed.coords, axis=1)
        assert d.max() <= 5.0
        assert d.max() > 0.5  # the budget is spent on the padded probe box, not only here
        np.testing.assert_array_equal(moving.labels, fixed.labels)


def test_truth_recovers_fixed(phantom):
    moving, fixed, truth = make_pair(phantom, 5.0, seed=7)
    back = truth.recover(moving)
    assert abd(back, fixed) <= 1e-6
    assert chamfer_loss(back.as_array(), fixed.as_array()) <= 1e-6


def test_make_pair_deterministic(phantom):
    a = make_pair(phantom, 5.0, seed=3)[0]
    b = make_pair(phantom, 5.0, seed=3)[0]
    assert a.equals(b)


def test_make_pair_bad_args(phantom):
    with pytest.raises(ValidationError):
        make_pair(phantom, -1.0)
    with pytest.raises(ValidationError):
        make_pair(phantom, 1.0, kind="swirl")
