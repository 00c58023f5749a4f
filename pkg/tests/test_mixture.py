from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import gaussian_table
from fixdens import kde, mixture
from fixdens.data import DatasetBundle, DensityGrid, FixationTable, ImageRecord, ValidationError
from fixdens.mixture import ComponentSet, MixtureParams, SaliencyComponent


def _centered_dataset(n_images=4, size=(200, 100), sigma=0.1, per_image=40, seed=0):
    rng = np.random.default_rng(seed)
    images, tables = [], {}
    for k in range(n_images):
        image_id = f"c{k}"
        images.append(ImageRecord(image_id, *size))
        tables[image_id] = gaussian_table(
            rng, image_id, 4, per_image // 4, (size[0] / 2, size[1] / 2), sigma * np.array(size), size
        )
    return DatasetBundle(tuple(images), tables)


def test_parse_components():
    np.testing.assert_array_equal(mixture.parse_components("kde,cb,uniform"), [True, True, True, False])
    np.testing.assert_array_equal(mixture.parse_components("saliency, kde"), [True, False, False, True])
    with pytest.raises(ValidationError, match="unknown"):
        mixture.parse_components("kde,foo")
    with pytest.raises(ValidationError):
        mixture.parse_components("")


def test_equal_logits_give_equal_weights():
    np.testing.assert_allclose(MixtureParams(np.zeros(4)).weights, [0.25] * 4, rtol=1e-15)


def test_disabled_component_has_zero_weight():
    p = MixtureParams(np.array([0.0, 1.0, 2.0, 3.0]), [True, False, True, False])
    assert p.weights[1] == 0.0 and p.weights[3] == 0.0
    np.testing.assert_allclose(p.weights[[0, 2]], [1 / (1 + math.e**2), math.e**2 / (1 + math.e**2)])


def test_first_active_logit_is_pinned():
    p = MixtureParams(np.array([5.0, 1.0, 2.0, 3.0]), [False, True, True, False])
    assert p.logits[1] == 0.0
    assert p.pinned_index == 1


def test_one_hot_kde_equals_kde():
    rng = np.random.default_rng(0)
    image = ImageRecord("a", 80, 60)
    train = rng.uniform(0, [80, 60], (10, 2))
    q = rng.uniform(0, [80, 60], (7, 2))
    lds = mixture.component_logdensities(image, train, kde.FixedKernelParams(6.0), ComponentSet(), q)
    out = mixture.mixture_logdensity(MixtureParams(np.zeros(4), [True, False, False, False]), lds)
    np.testing.assert_allclose(out, kde.fixed_kde_logdensity(train, q, 6.0, (80, 60)), rtol=1e-12)


def test_equal_component_densities_ignore_weights():
    lds = np.full((4, 5), -7.25)
    for logits in ([0, 3, -2, 0], [0, -10, 10, 0]):
        out = mixture.mixture_logdensity(MixtureParams(np.array(logits, float), [True, False, True, False]), lds)
        np.testing.assert_allclose(out, -7.25, rtol=1e-15)


def test_mixture_matches_direct_sum():
    rng = np.random.default_rng(4)
    lds = rng.normal(-9, 1, (4, 6))
    p = MixtureParams(rng.normal(size=4), [True, True, True, True])
    want = np.log((p.weights[:, None] * np.exp(lds)).sum(axis=0))
    np.testing.assert_allclose(mixture.mixture_logdensity(p, lds), want, rtol=1e-13)


def test_missing_active_component_rejected():
    lds = np.full((4, 2), -5.0)
    lds[1] = np.nan
    with pytest.raises(ValidationError, match="cb"):
        mixture.mixture_logdensity(MixtureParams(np.zeros(4), [True, True, False, False]), lds)


def test_uniform_log_density():
    image = ImageRecord("u", 100, 100)
    lds = mixture.fixed_component_logdensities(image, ComponentSet(), [[3, 4], [50, 50]])
    np.testing.assert_allclose(lds[1], math.log(1e-4))
    np.testing.assert_allclose(lds[1] / math.log(2), -13.28771, atol=1e-5)


def test_uniform_saliency_equals_uniform():
    sal = SaliencyComponent(DensityGrid(np.full((10, 20), 1 / 200)))
    q = np.random.default_rng(0).uniform(0, [20, 10], (9, 2))
    np.testing.assert_allclose(sal.logdensity(q), math.log(1 / 200), rtol=1e-14)


def test_saliency_exact_at_pixel_centers():
    v = np.random.default_rng(2).uniform(0.1, 1, (6, 7))
    grid = DensityGrid.normalized(v)
    sal = SaliencyComponent(grid)
    rows, cols = np.mgrid[0:6, 0:7]
    q = np.column_stack([cols.ravel() + 0.5, rows.ravel() + 0.5])
    np.testing.assert_allclose(np.exp(sal.logdensity(q)), grid.values.ravel(), rtol=1e-14)


def test_saliency_interpolates_and_floors():
    v = np.zeros((2, 2))
    v[0, 0] = 1.0
    sal = SaliencyComponent(DensityGrid(v))
    # midway between centers of (0,0) and (0,1)
    np.testing.assert_allclose(np.exp(sal.logdensity([[1.0, 0.5]])), 0.5, rtol=1e-14)
    np.testing.assert_allclose(np.exp(sal.logdensity([[1.5, 1.5]])), 1e-6 / 4, rtol=1e-12)


def test_saliency_size_mismatch():
    sal = SaliencyComponent(DensityGrid(np.full((3, 3), 1 / 9)))
    with pytest.raises(ValidationError, match="saliency grid"):
        mixture.check_components(ImageRecord("x", 4, 3), [True, False, False, True], ComponentSet(saliency=sal))


def test_center_bias_argmax_at_center():
    size = (80, 60)
    images = [ImageRecord(f"i{k}", *size) for k in range(3)]
    tables = {
        "i0": FixationTable.from_rows("i0", [("s1", 10, 10)]),
        "i1": FixationTable.from_rows("i1", [("s1", 40, 30), ("s2", 40, 30)]),
        "i2": FixationTable.from_rows("i2", [("s1", 40, 30), ("s3", 40, 30)]),
    }
    cb = mixture.fit_center_bias(DatasetBundle(tuple(images), tables), "i0")
    np.testing.assert_allclose(cb.points, 0.5)
    r = cb.raster(size)
    row, col = np.unravel_index(np.argmax(r), r.shape)
    assert (col + 0.5) / size[0] == pytest.approx(0.5, abs=1 / size[0])
    assert (row + 0.5) / size[1] == pytest.approx(0.5, abs=1 / size[1])


def test_holdout_fixations_do_not_matter():
    ds = _centered_dataset()
    a = mixture.fit_center_bias(ds, "c0")
    moved = dict(ds.fixations)
    t = moved["c0"]
    moved["c0"] = FixationTable(t.image_id, t.subjects, (t.xy * 0.5) + 1)
    b = mixture.fit_center_bias(DatasetBundle(ds.images, moved), "c0")
    assert a.bandwidth == b.bandwidth
    np.testing.assert_array_equal(a.points, b.points)


def _oracle_ll(points, labels, n_groups, b):
    # every fixation scored against the KDE of all other images' fixations
    out = []
    for i in range(len(points)):
        others = points[labels != labels[i]]
        out.append(kde.fixed_kde_logdensity(others, points[i:i + 1], b, (1.0, 1.0))[0])
    return float(np.mean(out))


def test_leave_one_image_out_ll_matches_loop():
    ds = _centered_dataset(n_images=3, per_image=12)
    pts, labels = mixture.normalized_points(ds, ds.image_ids)
    for b in (0.02, 0.1, 0.4):
        np.testing.assert_allclose(mixture.leave_one_image_out_ll(pts, labels, 3, b), _oracle_ll(pts, labels, 3, b), rtol=1e-12)


def test_center_bias_bandwidth_near_grid_oracle():
    ds = _centered_dataset(n_images=5, per_image=40, sigma=0.1, seed=3)
    cb = mixture.fit_center_bias(ds, "c0")
    others = [i for i in ds.image_ids if i != "c0"]
    pts, labels = mixture.normalized_points(ds, others)
    grid = np.exp(np.linspace(math.log(1e-3), 0.0, 50))
    vals = [mixture.leave_one_image_out_ll(pts, labels, len(others), b) for b in grid]
    best = grid[int(np.argmax(vals))]
    assert best / 2 <= cb.bandwidth <= best * 2


def test_center_bias_density_consistent_with_raster():
    ds = _centered_dataset(n_images=3, per_image=8)
    cb = mixture.fit_shared_center_bias(ds)
    assert not cb.crossvalidated
    size = (50, 30)
    r = cb.raster(size)
    xs, ys = kde.pixel_centers(size)
    q = np.array([[x, y] for y in ys for x in xs])
    np.testing.assert_allclose(np.exp(cb.logdensity(q, size)).reshape(30, 50), r, rtol=1e-12)
    assert abs(cb.rasterize(size).values.sum() - 1) < 1e-12


def test_center_bias_needs_other_images():
    ds = _centered_dataset(n_images=1)
    with pytest.raises(ValidationError):
        mixture.fit_center_bias(ds, "c0")


def test_mixture_raster_normalized():
    ds = _centered_dataset(n_images=3, per_image=8)
    image = ds.image("c1")
    cb = mixture.fit_center_bias(ds, "c1")
    sal = SaliencyComponent(DensityGrid.normalized(np.random.default_rng(0).uniform(size=(100, 200))))
    g = mixture.mixture_raster(
        image,
        ds.fixations["c1"].xy,
        kde.AdaptiveKernelParams(8.0, 0.2),
        MixtureParams(np.array([0.0, -1.0, 0.5, -0.3])),
        ComponentSet(cb, sal),
    )
    assert abs(g.values.sum() - 1) < 1e-12
    g.check()


def test_out_of_bounds_query_rejected():
    image = ImageRecord("a", 10, 10)
    with pytest.raises(ValidationError, match="outside"):
        mixture.component_logdensities(image, [[1, 1]], kde.FixedKernelParams(1.0), ComponentSet(), [[10, 5]])
