from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import gaussian_table
from fixdens import kde, mixture, optimize
from fixdens.crossval import evaluate_image, make_fold_plan
from fixdens.data import DatasetBundle, DensityGrid, FixationTable, ImageRecord, ValidationError
from fixdens.mixture import ComponentSet, SaliencyComponent
from fixdens.optimize import ImageObjective, OptimConfig

ALL = np.ones(4, dtype=bool)
KDE_ONLY = np.array([True, False, False, False])


def _image_with_components(seed=0):
    rng = np.random.default_rng(seed)
    size = (160, 120)
    image = ImageRecord("img", *size)
    table = gaussian_table(rng, "img", 5, 6, (70, 60), 18.0, size)
    cb = mixture.CenterBiasModel(rng.normal(0.5, 0.15, (60, 2)).clip(0.01, 0.99), 0.12)
    sal = SaliencyComponent(DensityGrid.normalized(rng.uniform(0.2, 1.0, (120, 160))))
    return image, table, ComponentSet(cb, sal)


def fd_gradient(obj, theta, free, step=1e-5):
    g = np.zeros_like(theta)
    for k in np.flatnonzero(free):
        e = np.zeros_like(theta)
        e[k] = step
        g[k] = (obj.value(theta + e) - obj.value(theta - e)) / (2 * step)
    return g


@pytest.mark.parametrize("kernel", ["fixed", "adaptive"])
@pytest.mark.parametrize("scheme", ["loso", "lofo", "pooled"])
def test_objective_matches_reference_evaluation(kernel, scheme):
    image, table, comp = _image_with_components()
    plan = make_fold_plan(table, scheme)
    obj = ImageObjective(image, table, plan, comp, kernel, ALL)
    theta = np.array([math.log(9.0)] + ([math.log(0.25)] if kernel == "adaptive" else []) + [-0.5, -1.0, 0.3])
    kp, mp = optimize.unpack(theta, kernel, ALL)
    ref = evaluate_image(image, table, kp, mp, comp, plan)
    assert obj.value(theta) == pytest.approx(ref.mean_ll, rel=1e-12)


@pytest.mark.parametrize("kernel", ["fixed", "adaptive"])
def test_gradient_matches_finite_differences(kernel):
    image, table, comp = _image_with_components(1)
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), comp, kernel, ALL)
    rng = np.random.default_rng(4)
    for _ in range(5):
        theta = np.concatenate(
            [[rng.uniform(math.log(3), math.log(40))], [rng.uniform(-2.5, 0)] if kernel == "adaptive" else [], rng.uniform(-2, 2, 3)]
        )
        _, g = obj.value_and_grad(theta)
        fd = fd_gradient(obj, theta, obj.free_mask())
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_disabled_logit_gradient_zero():
    image, table, comp = _image_with_components()
    active = np.array([True, True, True, False])
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), comp, "adaptive", active)
    _, g = obj.value_and_grad(np.array([2.0, -1.0, 0.1, 0.2, 0.7]))
    assert g[-1] == 0.0
    assert not obj.free_mask()[-1]


def test_uniform_corner_bandwidth_gradient_vanishes():
    image, table, comp = _image_with_components()
    only_uniform = np.array([False, False, True, False])
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), comp, "fixed", only_uniform)
    _, g = obj.value_and_grad(np.array([2.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(g, 0.0)
    # KDE active but with negligible weight
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), comp, "fixed", np.array([True, False, True, False]))
    _, g = obj.value_and_grad(np.array([2.0, 0.0, 30.0, 0.0]))
    assert abs(g[0]) < 1e-10


def test_fixed_bandwidth_recovery_single_seed():
    rng = np.random.default_rng(0)
    image = ImageRecord("blob", 500, 500)
    table = gaussian_table(rng, "blob", 16, 10, (250, 250), 20.0, (500, 500))
    res = optimize.optimize_image(image, table, OptimConfig(restarts=3), "loso", None, "fixed", KDE_ONLY)
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), ComponentSet(), "fixed", KDE_ONLY)
    grid = np.linspace(math.log(1.0), math.log(100.0), 200)
    best = math.exp(grid[int(np.argmax([obj.value(np.array([g, 0, 0, 0])) for g in grid]))])
    assert abs(res.kernel_params.h / best - 1) < 0.1


def test_adaptive_beats_fixed_on_two_scales():
    rng = np.random.default_rng(3)
    size = (300, 300)
    image = ImageRecord("ms", *size)
    rows = []
    for s in range(10):
        for _ in range(5):
            rows.append((f"s{s}", *np.clip(rng.normal((80, 90), 3), 0, 299)))
        for _ in range(5):
            rows.append((f"s{s}", *np.clip(rng.normal((200, 180), 50), 0, 299)))
    table = FixationTable.from_rows("ms", rows)
    active = np.array([True, False, True, False])
    cfg = OptimConfig(restarts=4)
    fixed = optimize.optimize_image(image, table, cfg, "loso", None, "fixed", active)
    adaptive = optimize.optimize_image(image, table, cfg, "loso", None, "adaptive", active)
    assert adaptive.objective >= fixed.objective


def test_deterministic_result():
    image, table, comp = _image_with_components()
    cfg = OptimConfig(restarts=3, seed=5)
    a = optimize.optimize_image(image, table, cfg, "loso", comp, "adaptive", ALL)
    b = optimize.optimize_image(image, table, cfg, "loso", comp, "adaptive", ALL)
    assert json.dumps(a.to_dict("img"), sort_keys=True) == json.dumps(b.to_dict("img"), sort_keys=True)
    np.testing.assert_array_equal(a.theta, b.theta)


def test_minimum_bandwidth_constraint_holds():
    rng = np.random.default_rng(2)
    size = (200, 200)
    image = ImageRecord("tight", *size)
    rows = [(f"s{s}", *rng.normal((100, 100), 1.0)) for s in range(6) for _ in range(5)]
    table = FixationTable.from_rows("tight", rows)
    cfg = OptimConfig(restarts=3, h_min=2.0)
    res = optimize.optimize_image(image, table, cfg, "loso", None, "adaptive", np.array([True, False, True, False]))
    h = optimize.effective_bandwidths(image, table, make_fold_plan(table, "loso"), res.kernel_params)
    assert min(x.min() for x in h) >= 2.0 * (1 - 1e-6)
    fixed = optimize.optimize_image(image, table, cfg, "loso", None, "fixed", KDE_ONLY)
    assert fixed.kernel_params.h >= 2.0


def test_min_log_bandwidth_gradient():
    image, table, comp = _image_with_components()
    obj = ImageObjective(image, table, make_fold_plan(table, "loso"), comp, "adaptive", ALL)
    theta = np.array([math.log(12.0), math.log(0.2), 0, 0, 0])
    m, g = obj.min_log_bandwidth(theta)
    h = optimize.effective_bandwidths(image, table, make_fold_plan(table, "loso"), optimize.unpack(theta, "adaptive", ALL)[0])
    assert m == pytest.approx(math.log(min(x.min() for x in h)), rel=1e-12)
    eps = 1e-6
    for k in (0, 1):
        e = np.zeros(5)
        e[k] = eps
        fd = (obj.min_log_bandwidth(theta + e)[0] - obj.min_log_bandwidth(theta - e)[0]) / (2 * eps)
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def _copies(table, n, size):
    images = tuple(ImageRecord(f"c{k}", *size) for k in range(n))
    return DatasetBundle(images, {f"c{k}": FixationTable(f"c{k}", table.subjects, table.xy) for k in range(n)})


def test_identical_copies_global_equals_per_image():
    rng = np.random.default_rng(8)
    size = (150, 150)
    table = gaussian_table(rng, "x", 6, 5, (75, 75), 15.0, size)
    ds = _copies(table, 3, size)
    cfg = OptimConfig(restarts=3)
    g = optimize.optimize_global(ds, cfg, "loso", None, "fixed", KDE_ONLY)
    p = optimize.optimize_image(ds.image("c0"), ds.fixations["c0"], cfg, "loso", None, "fixed", KDE_ONLY)
    assert g.kernel_params.h == pytest.approx(p.kernel_params.h, rel=1e-4)
    assert g.objective == pytest.approx(p.objective, abs=1e-9)


def test_scales_split_per_image_and_global_in_between():
    rng = np.random.default_rng(1)
    size = (300, 300)
    images = (ImageRecord("a", *size), ImageRecord("b", *size))
    tables = {
        "a": gaussian_table(rng, "a", 8, 6, (150, 150), 3.0, size),
        "b": gaussian_table(rng, "b", 8, 6, (150, 150), 60.0, size),
    }
    ds = DatasetBundle(images, tables)
    cfg = OptimConfig(restarts=3)
    ha = optimize.optimize_image(ds.image("a"), tables["a"], cfg, "loso", None, "fixed", KDE_ONLY).kernel_params.h
    hb = optimize.optimize_image(ds.image("b"), tables["b"], cfg, "loso", None, "fixed", KDE_ONLY).kernel_params.h
    hg = optimize.optimize_global(ds, cfg, "loso", None, "fixed", KDE_ONLY).kernel_params.h
    assert hb > 2 * ha
    assert ha < hg < hb


def test_per_image_not_worse_than_global(small_dataset):
    cfg = OptimConfig(restarts=3)
    active = np.array([True, False, True, False])
    g = optimize.optimize_global(small_dataset, cfg, "loso", None, "adaptive", active)
    per = [
        optimize.optimize_image(
            small_dataset.image(i), small_dataset.fixations[i], cfg, "loso", None, "adaptive", active, initial_points=[g.theta]
        ).objective
        for i in small_dataset.crossvalidatable_ids
    ]
    assert np.mean(per) >= g.objective - 1e-9


def test_pack_unpack_round_trip():
    kp = kde.AdaptiveKernelParams(7.0, 0.3)
    mp = mixture.MixtureParams(np.array([0.0, 0.4, -1.2, 2.0]), ALL)
    kp2, mp2 = optimize.unpack(optimize.pack(kp, mp), "adaptive", ALL)
    assert kp2.h0 == pytest.approx(7.0) and kp2.alpha == pytest.approx(0.3)
    np.testing.assert_allclose(mp2.logits, mp.logits)


def test_config_validation():
    with pytest.raises(ValidationError):
        OptimConfig(restarts=0)
    with pytest.raises(ValidationError):
        OptimConfig(h_min=-1)
    with pytest.raises(ValidationError):
        OptimConfig(method="nelder-mead")
    image, table, _ = _image_with_components()
    with pytest.raises(ValidationError, match="L-BFGS-B"):
        optimize.optimize_image(image, table, OptimConfig(restarts=1, method="L-BFGS-B"), "loso", None, "adaptive", KDE_ONLY)


def test_trust_constr_option_runs():
    image, table, _ = _image_with_components()
    res = optimize.optimize_image(
        image, table, OptimConfig(restarts=1, method="trust-constr", max_iter=100), "loso", None, "adaptive", KDE_ONLY
    )
    slsqp = optimize.optimize_image(image, table, OptimConfig(restarts=1), "loso", None, "adaptive", KDE_ONLY)
    assert res.objective == pytest.approx(slsqp.objective, abs=1e-3)
