import csv
import math

import numpy as np
import pytest

from deshadow import colorio, evaluation as ev
from deshadow.errors import ShapeError
from oracles import confusion_counts, region_rmse_scalar


def test_identical_images_score_zero(rng):
    img = rng.random((8, 8, 3))
    mask = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    m = ev.rmse_lab(img, img, mask)
    assert m.shadow == 0.0 and m.nonshadow == 0.0 and m.all == 0.0
    assert m.shadow_count + m.nonshadow_count == 64


def test_all_ones_mask_collapses_regions(rng):
    a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    m = ev.rmse_lab(a, b, np.ones((6, 6), dtype=np.uint8))
    assert m.nonshadow is None
    assert m.shadow == m.all
    assert m.nonshadow_count == 0


def test_metric_symmetry(rng):
    a, b = rng.random((5, 7, 3)), rng.random((5, 7, 3))
    mask = (rng.random((5, 7)) > 0.4).astype(np.uint8)
    m1 = ev.rmse_lab(a, b, mask)
    m2 = ev.rmse_lab(b, a, mask)
    assert m1.shadow == m2.shadow and m1.nonshadow == m2.nonshadow and m1.all == m2.all


def test_lightness_shift_gives_unit_rmse():
    gt = np.full((8, 8, 3), 0.5)
    lab = colorio.srgb_to_lab(gt)
    lab[..., 0] += 1.0
    pred = colorio.lab_to_srgb(lab)
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[:4] = 1
    m = ev.rmse_lab(pred, gt, mask)
    # per-pixel score averages the squared error over 3 channels: only L
    # differs by 1, so the RMSE is 1/sqrt(3)
    expected = 1.0 / math.sqrt(3.0)
    assert m.all == pytest.approx(expected, abs=1e-6)
    assert m.shadow == pytest.approx(expected, abs=1e-6)


def test_matches_scalar_oracle_and_weighted_mean_identity(rng):
    pred, gt = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    mask = (rng.random((6, 6)) > 0.6).astype(np.uint8)
    m = ev.rmse_lab(pred, gt, mask)
    s_ref, n_ref, a_ref = region_rmse_scalar(pred, gt, mask)
    # the oracle derives its RGB->XYZ matrix from first principles, the
    # package pins literals: agreement bottoms out around 1e-9 in Lab
    assert m.shadow == pytest.approx(s_ref, abs=1e-7)
    assert m.nonshadow == pytest.approx(n_ref, abs=1e-7)
    assert m.all == pytest.approx(a_ref, abs=1e-7)
    # exact identity: all-region MSE is the count-weighted mean of region MSEs
    lhs = m.all**2 * (m.shadow_count + m.nonshadow_count)
    rhs = m.shadow_count * m.shadow**2 + m.nonshadow_count * m.nonshadow**2
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_mae_mode_matches_direct_computation(rng):
    pred, gt = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    mask = np.zeros((5, 5), dtype=np.uint8)
    mask[2:] = 1
    m = ev.rmse_lab(pred, gt, mask, mode="mae")
    diff = np.abs(colorio.srgb_to_lab(gt) - colorio.srgb_to_lab(pred)).mean(axis=2)
    assert m.shadow == pytest.approx(diff[2:].mean(), rel=1e-12)
    assert m.nonshadow == pytest.approx(diff[:2].mean(), rel=1e-12)
    assert m.mode == "mae"


def test_rmse_lab_shape_checks(rng):
    a = rng.random((4, 4, 3))
    with pytest.raises(ShapeError):
        ev.rmse_lab(a, rng.random((5, 4, 3)), np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ShapeError):
        ev.rmse_lab(a, a, np.zeros((5, 4), dtype=np.uint8))
    with pytest.raises(ShapeError):
        ev.rmse_lab(a, a, np.zeros((4, 4), dtype=np.uint8), mode="nope")


def test_derive_eval_mask_basics():
    img = np.full((10, 10, 3), 0.6)
    assert ev.derive_eval_mask(img, img).sum() == 0
    assert ev.derive_eval_mask(img, img, tau_l=float("inf")).sum() == 0


def test_derive_eval_mask_half_darkened():
    free = np.full((12, 12, 3), 0.7)
    shadow = free.copy()
    shadow[:, 6:] *= 0.5  # large L drop on the right half
    mask = ev.derive_eval_mask(shadow, free, tau_l=5.0)
    # interior is exact, boundary column may deviate by one pixel
    assert mask[:, 8:].all()
    assert not mask[:, :5].any()


def test_mask_score_cases(rng):
    a = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    acc, ber = ev.mask_score(a, a)
    assert (acc, ber) == (1.0, 0.0)
    acc, ber = ev.mask_score(1 - a, a)
    assert (acc, ber) == (0.0, 1.0)
    b = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    acc, ber = ev.mask_score(b, a)
    cc = confusion_counts(b, a)
    acc_ref = (cc["tp"] + cc["tn"]) / 64
    ber_ref = 0.5 * (cc["fn"] / (cc["tp"] + cc["fn"]) + cc["fp"] / (cc["fp"] + cc["tn"]))
    assert acc == pytest.approx(acc_ref, abs=1e-12)
    assert ber == pytest.approx(ber_ref, abs=1e-12)


def test_evaluate_dataset_base_identity(records8):
    result = ev.evaluate_dataset(lambda s: s, records8[:2], mask_source="provided", image_size=32)
    assert len(result.rows) == 2
    from deshadow.datasets import load_sample

    for row in result.rows:
        rec = next(r for r in records8 if r.stem == row.name)
        shadow, free, mask = load_sample(rec, 32)
        direct = ev.rmse_lab(shadow, free, mask)
        assert row.metrics.all == pytest.approx(direct.all, abs=1e-12)
        assert row.metrics.shadow == pytest.approx(direct.shadow, abs=1e-12)


def test_evaluate_dataset_single_image_mean_row(records8):
    result = ev.evaluate_dataset(lambda s: s, records8[:1], mask_source="derived", image_size=32)
    assert result.mean.all == result.rows[0].metrics.all
    assert result.mean.shadow == result.rows[0].metrics.shadow


def test_evaluate_dataset_mean_matches_external_recomputation(records8):
    result = ev.evaluate_dataset(lambda s: s, records8, mask_source="provided", image_size=32)
    ext = np.mean([r.metrics.all for r in result.rows])
    assert result.mean.all == pytest.approx(ext, abs=1e-9)
    ext_s = np.mean([r.metrics.shadow for r in result.rows if r.metrics.shadow is not None])
    assert result.mean.shadow == pytest.approx(ext_s, abs=1e-9)


def test_mask_source_does_not_affect_all_column(records8):
    provided = ev.evaluate_dataset(lambda s: s, records8, mask_source="provided", image_size=32)
    derived = ev.evaluate_dataset(lambda s: s, records8, mask_source="derived", image_size=32)
    for a, b in zip(provided.rows, derived.rows):
        assert a.metrics.all == pytest.approx(b.metrics.all, abs=1e-12)


def test_csv_output_layout(tmp_path, records8):
    result = ev.evaluate_dataset(lambda s: s, records8[:3], mask_source="derived", image_size=32)
    path = tmp_path / "metrics.csv"
    ev.write_csv(result, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(ev.CSV_HEADER)
    assert rows[0] == ["image", "S", "N", "A", "S_count", "N_count", "mode"]
    assert len(rows) == 1 + 3 + 1
    assert rows[-1][0] == "mean"
    assert rows[1][6] == "rmse"
    summary = ev.format_summary(result, "identity")
    assert "S" in summary and "identity" in summary
