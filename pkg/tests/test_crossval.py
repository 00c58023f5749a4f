from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import brute_kde, gaussian_table
from fixdens import crossval, kde
from fixdens.crossval import evaluate_image, make_fold_plan
from fixdens.data import DatasetBundle, FixationTable, ImageRecord, ValidationError
from fixdens.mixture import ComponentSet, MixtureParams
from fixdens.synth import SyntheticSpec, synthesize

KDE_ONLY = MixtureParams(np.zeros(4), [True, False, False, False])
UNIFORM_ONLY = MixtureParams(np.zeros(4), [False, False, True, False])


def _table(subjects, rng=None):
    rng = rng or np.random.default_rng(0)
    rows = [(s, *rng.uniform(0, 50, 2)) for s in subjects]
    return FixationTable.from_rows("t", rows)


def test_loso_folds():
    plan = make_fold_plan(_table(["b", "a", "c", "a"]), "loso")
    assert len(plan.folds) == 3
    subjects = np.array(["b", "a", "c", "a"])
    for (train, test), s in zip(plan.folds, ["a", "b", "c"]):
        assert set(subjects[test]) == {s}
        assert s not in set(subjects[train])
        assert len(train) + len(test) == 4


def test_lofo_folds():
    plan = make_fold_plan(_table(list("abcdefg")), "lofo")
    assert len(plan.folds) == 7
    for i, (train, test) in enumerate(plan.folds):
        np.testing.assert_array_equal(test, [i])
        assert i not in train and len(train) == 6


def test_pooled_single_fold():
    plan = make_fold_plan(_table(list("ab")), "pooled")
    assert len(plan.folds) == 1
    np.testing.assert_array_equal(plan.folds[0][0], plan.folds[0][1])
    assert not plan.crossvalidated


def test_loso_needs_two_subjects():
    with pytest.raises(ValidationError, match="2 subjects"):
        make_fold_plan(_table(["a", "a"]), "loso")
    with pytest.raises(ValidationError, match="unknown"):
        make_fold_plan(_table(["a", "b"]), "kfold")


def test_uniform_only_mean_ll():
    image = ImageRecord("t", 50, 50)
    table = FixationTable("t", np.array(["a", "b", "c"]), np.random.default_rng(1).uniform(0, 50, (3, 2)))
    ev = evaluate_image(image, table, None, UNIFORM_ONLY, ComponentSet(), make_fold_plan(table, "loso"))
    np.testing.assert_allclose(ev.log_densities, -math.log(2500), rtol=1e-15)
    assert ev.mean_ll == pytest.approx(-math.log(2500), rel=1e-15)
    assert crossval.information_gain_bits(ev.mean_ll, image) == pytest.approx(0.0, abs=1e-12)


def test_two_identical_subjects_cross_evaluation():
    rng = np.random.default_rng(5)
    pts = rng.uniform(20, 80, (4, 2))
    image = ImageRecord("t", 100, 100)
    table = FixationTable("t", np.array(["a"] * 4 + ["b"] * 4), np.vstack([pts, pts]))
    h = 40.0
    ev = evaluate_image(image, table, kde.FixedKernelParams(h), KDE_ONLY, ComponentSet(), make_fold_plan(table, "loso"))
    direct = np.log(brute_kde(pts.tolist(), [h] * 4, pts.tolist(), (100, 100)))
    np.testing.assert_allclose(ev.log_densities, np.concatenate([direct, direct]), rtol=1e-12)


def test_evaluate_matches_per_fold_loop_adaptive():
    rng = np.random.default_rng(9)
    image = ImageRecord("t", 120, 80)
    table = gaussian_table(rng, "t", 3, 4, (60, 40), 20, (120, 80))
    params = kde.AdaptiveKernelParams(10.0, 0.3)
    ev = evaluate_image(image, table, params, KDE_ONLY, ComponentSet(), make_fold_plan(table, "loso"))
    want = []
    for i in range(len(table)):
        train = table.xy[table.subjects != table.subjects[i]]
        pilot = brute_kde(train.tolist(), [10.0] * len(train), train.tolist(), image.size)
        h = [0.3 / math.sqrt(p) for p in pilot]
        want.append(math.log(brute_kde(train.tolist(), h, [table.xy[i].tolist()], image.size)[0]))
    np.testing.assert_allclose(ev.log_densities, want, rtol=1e-12)


def test_pooled_exceeds_loso():
    rng = np.random.default_rng(0)
    image = ImageRecord("g", 500, 500)
    table = gaussian_table(rng, "g", 16, 10, (250, 250), 20.0, (500, 500))
    kp = kde.FixedKernelParams(10.0)
    loso = evaluate_image(image, table, kp, KDE_ONLY, ComponentSet(), make_fold_plan(table, "loso"))
    pooled = evaluate_image(image, table, kp, KDE_ONLY, ComponentSet(), make_fold_plan(table, "pooled"))
    assert pooled.mean_ll > loso.mean_ll


def test_ground_truth_ig_near_kl():
    # exact truth as the model: IG estimates KL(truth || uniform)
    spec = SyntheticSpec(200, 200, 20, 50, ({"x": 100, "y": 100, "sigma": 15, "weight": 1.0},), 0.0, 0)
    table = synthesize(spec).bundle.fixations["img000"]
    ll = spec.logdensity(table.xy)
    ig = crossval.information_gain_bits(ll.mean(), ImageRecord("i", 200, 200))
    r = spec.raster().values
    kl_bits = float((r * np.log2(r * r.size)).sum())
    se = np.std(ll / math.log(2)) / math.sqrt(len(ll))
    assert abs(ig - kl_bits) < 4 * se


def test_ig_scale_invariance():
    rng = np.random.default_rng(2)
    table = gaussian_table(rng, "a", 4, 6, (60, 50), 15.0, (120, 100))
    big = FixationTable("a", table.subjects, table.xy * 2)
    igs = []
    for t, image, h in ((table, ImageRecord("a", 120, 100), 7.0), (big, ImageRecord("a", 240, 200), 14.0)):
        ev = evaluate_image(image, t, kde.FixedKernelParams(h), KDE_ONLY, ComponentSet(), make_fold_plan(t, "loso"))
        igs.append(crossval.information_gain_bits(ev.mean_ll, image))
    assert abs(igs[0] - igs[1]) < 1e-6


def test_ioc_summary_and_jsonl(tmp_path, small_dataset):
    params = {i: (kde.FixedKernelParams(8.0), KDE_ONLY) for i in small_dataset.image_ids}
    results, summary = crossval.ioc_summary(small_dataset, params, "loso")
    assert summary["n_images"] == 3 and summary["crossvalidated"]
    assert summary["ig_bits"] == pytest.approx(np.mean([r.ig_bits for r in results]))
    n = np.array([r.n_fixations for r in results])
    assert summary["ig_bits_fixation_weighted"] == pytest.approx((np.array([r.ig_bits for r in results]) * n).sum() / n.sum())
    crossval.write_results_jsonl(results, tmp_path / "r.jsonl")
    assert crossval.read_results_jsonl(tmp_path / "r.jsonl") == results


def test_pooled_summary_warns(small_dataset, caplog):
    params = {i: (kde.FixedKernelParams(8.0), KDE_ONLY) for i in small_dataset.image_ids}
    _, summary = crossval.ioc_summary(small_dataset, params, "pooled")
    assert summary["crossvalidated"] is False
    assert "not crossvalidated" in caplog.text


def test_kernel_dict_round_trip():
    for p in (kde.FixedKernelParams(3.5), kde.AdaptiveKernelParams(12.0, 0.25), None):
        assert crossval.kernel_from_dict(crossval.kernel_to_dict(p)) == p


def test_single_subject_images_skipped():
    images = (ImageRecord("a", 50, 50), ImageRecord("b", 50, 50))
    tables = {"a": _table(["x", "y"]), "b": _table(["x", "x"])}
    ds = DatasetBundle(images, {k: FixationTable(k, t.subjects, t.xy) for k, t in tables.items()})
    results, _ = crossval.ioc_summary(ds, {"a": (kde.FixedKernelParams(5.0), KDE_ONLY)}, "loso")
    assert [r.image_id for r in results] == ["a"]
