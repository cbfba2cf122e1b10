import numpy as np
import pytest

from edgeattnet.metrics import (EvalReport, ImageEval, InstanceMask, MaskSet,
                                NoEvaluablePairsError, ScaleSet,
                                connected_components, downsample,
                                evaluate_dataset, evaluate_image,
                                extract_instances, iou_multiscale,
                                iou_pairwise, scale_ratio)

from brute import (brute_downsample, brute_iou, brute_multiscale,
                   brute_scale_ratio, random_mask_pair)


def inst(bits):
    return InstanceMask(np.asarray(bits, dtype=bool))


def rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


# ---------------------------------------------------------------------------
# connected components


def test_components_two_disjoint_squares():
    m = np.zeros((8, 8), bool)
    m[0:2, 0:2] = True
    m[5:7, 5:7] = True
    comps = connected_components(m, min_area=1)
    assert len(comps) == 2
    assert sorted(c.area for c in comps) == [4, 4]


def test_components_empty_mask():
    assert connected_components(np.zeros((4, 4), bool)) == []


def test_components_diagonal_touch_merges():
    m = np.zeros((4, 4), bool)
    m[0, 0] = m[1, 1] = m[1, 0] = True  # L with a diagonal link
    m[2, 2] = True                      # diagonal from (1,1)
    comps = connected_components(m, min_area=1)
    assert len(comps) == 1


def test_components_min_area_filter():
    m = np.zeros((16, 16), bool)
    m[0:4, 0:4] = True   # 16 px
    m[10, 10] = True     # 1 px, dropped at default min_area=10
    comps = connected_components(m)
    assert len(comps) == 1
    assert comps[0].area == 16


def test_instance_mask_rejects_empty():
    with pytest.raises(ValueError, match="no set pixels"):
        inst(np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# pairwise IoU


def test_iou_identical_masks():
    a = inst(rect(4, 4, 0, 2, 0, 4))
    assert iou_pairwise(a, a) == 1.0


def test_iou_disjoint_masks():
    a = inst(rect(4, 4, 0, 1, 0, 4))
    b = inst(rect(4, 4, 3, 4, 0, 4))
    assert iou_pairwise(a, b) == 0.0


def test_iou_worked_example_one_third():
    gt = inst(rect(4, 4, 0, 2, 0, 4))   # rows 0-1
    pt = inst(rect(4, 4, 1, 3, 0, 4))   # rows 1-2
    assert iou_pairwise(gt, pt) == pytest.approx(1.0 / 3.0)


def test_iou_symmetric_and_shape_checked(rng):
    for _ in range(20):
        g, p = random_mask_pair(rng, size=8, p=0.3)
        a, b = inst(g), inst(p)
        assert iou_pairwise(a, b) == iou_pairwise(b, a)
    with pytest.raises(ValueError, match="shapes"):
        iou_pairwise(inst(np.ones((2, 2))), inst(np.ones((3, 3))))


def test_iou_is_one_iff_identical(rng):
    for _ in range(50):
        g, p = random_mask_pair(rng, size=8, p=0.3)
        score = iou_pairwise(inst(g), inst(p))
        if np.array_equal(g, p):
            assert score == 1.0
        else:
            assert score < 1.0


# ---------------------------------------------------------------------------
# downsample / scale ratio


def test_downsample_identity_at_delta_one(rng):
    bits = rng.random((7, 5)) < 0.4
    assert np.array_equal(downsample(bits, 1.0), bits)


def test_downsample_single_pixel_quarter_scale():
    bits = np.zeros((8, 8), bool)
    bits[5, 2] = True
    grid = downsample(bits, 0.25)
    assert grid.shape == (2, 2)
    assert grid.sum() == 1
    assert grid[1, 0]


def test_downsample_checkerboard_half_scale():
    bits = np.indices((4, 4)).sum(axis=0) % 2 == 0
    grid = downsample(bits, 0.5)
    assert grid.shape == (2, 2)
    assert grid.all()


def test_downsample_rejects_bad_delta():
    with pytest.raises(ValueError):
        downsample(np.ones((2, 2), bool), 0.0)
    with pytest.raises(ValueError):
        downsample(np.ones((2, 2), bool), 1.5)


def test_scale_ratio_self_is_one(rng):
    g, _ = random_mask_pair(rng, size=8)
    for d in (1.0, 0.5, 0.25):
        assert scale_ratio(g, g, d) == 1.0


def test_scale_ratio_adjacent_pixels_merge_at_half_scale():
    gt = np.zeros((4, 4), bool)
    pt = np.zeros((4, 4), bool)
    gt[1, 0] = True
    pt[1, 1] = True
    assert scale_ratio(gt, pt, 1.0) == 0.0
    assert scale_ratio(gt, pt, 0.5) == 1.0  # same 2x2 cell despite no overlap


def test_multiscale_combines_scales():
    gt = np.zeros((4, 4), bool)
    pt = np.zeros((4, 4), bool)
    gt[1, 0] = True
    pt[1, 1] = True
    score = iou_multiscale(inst(gt), inst(pt), ScaleSet((1.0, 0.5)))
    assert score == pytest.approx(0.5)


def test_multiscale_identical_and_far_disjoint():
    a = inst(rect(16, 16, 0, 3, 0, 3))
    b = inst(rect(16, 16, 13, 16, 13, 16))
    ss = ScaleSet((1.0, 0.5, 0.25))
    assert iou_multiscale(a, a, ss) == 1.0
    assert iou_multiscale(a, b, ss) == 0.0


def test_scale_ratio_monotone_for_nested_masks(rng):
    # with pt a superset of gt, coarser grids can only merge covered cells
    for _ in range(30):
        gt = rng.random((8, 8)) < 0.25
        if not gt.any():
            continue
        extra = rng.random((8, 8)) < 0.2
        pt = gt | extra
        prev = -1.0
        for d in (1.0, 0.5, 0.25, 0.125):
            r = brute_scale_ratio(gt, pt, d)
            assert r >= prev - 1e-12
            prev = r
        assert brute_scale_ratio(gt, pt, 1.0) == 1.0


def test_scale_set_validation():
    with pytest.raises(ValueError):
        ScaleSet(())
    with pytest.raises(ValueError):
        ScaleSet((0.5, 0.25))        # missing native scale
    with pytest.raises(ValueError):
        ScaleSet((1.0, 0.0))
    ss = ScaleSet((0.25, 1.0, 0.5))
    assert ss.deltas == (1.0, 0.5, 0.25)


# ---------------------------------------------------------------------------
# oracle agreement (also exercised at scale by the acceptance suite)


def test_metrics_agree_with_brute_force_oracle(rng):
    deltas = (1.0, 0.5, 0.25, 0.125)
    for _ in range(40):
        g, p = random_mask_pair(rng, size=16, p=0.2)
        assert iou_pairwise(inst(g), inst(p)) == brute_iou(g, p)
        for d in deltas:
            assert np.array_equal(downsample(g, d), brute_downsample(g, d))
            assert scale_ratio(g, p, d) == brute_scale_ratio(g, p, d)
        assert iou_multiscale(inst(g), inst(p), ScaleSet(deltas)) == \
            pytest.approx(brute_multiscale(g, p, deltas), abs=1e-15)


# ---------------------------------------------------------------------------
# per-image / dataset aggregation


def test_evaluate_image_identical_single_pair():
    gt = MaskSet("img0", [inst(rect(8, 8, 2, 5, 2, 5))])
    pt = MaskSet("img0", [inst(rect(8, 8, 2, 5, 2, 5))])
    rec = evaluate_image(gt, pt)
    assert rec.pair_count == 1
    assert rec.mean_pairwise == 1.0
    assert rec.mean_multiscale == 1.0


def test_evaluate_image_fragmented_prediction_scores_both_pairs():
    gt = MaskSet("img0", [inst(rect(8, 8, 3, 5, 0, 8))])
    pt = MaskSet("img0", [inst(rect(8, 8, 3, 5, 0, 3)),
                          inst(rect(8, 8, 3, 5, 5, 8))])
    rec = evaluate_image(gt, pt)
    assert rec.pair_count == 2
    # each fragment alone is penalized against the whole ground truth
    assert rec.mean_pairwise < 0.5


def test_evaluate_image_no_intersections_excluded():
    gt = MaskSet("img0", [inst(rect(8, 8, 0, 2, 0, 2))])
    pt = MaskSet("img0", [inst(rect(8, 8, 6, 8, 6, 8))])
    rec = evaluate_image(gt, pt)
    assert rec.pair_count == 0
    report = evaluate_dataset([rec, ImageEval("img1", 0.4, 0.6, 2)])
    assert report.n_evaluated == 1
    assert report.miou_pairwise == 0.4


def test_evaluate_dataset_single_image_and_mean():
    r1 = ImageEval("a", 0.4, 0.5, 3)
    r2 = ImageEval("b", 0.6, 0.7, 1)
    report = evaluate_dataset([r1, r2])
    assert report.miou_pairwise == pytest.approx(0.5)
    assert report.miou_multiscale == pytest.approx(0.6)
    single = evaluate_dataset([r1])
    assert single.miou_pairwise == 0.4


def test_evaluate_dataset_errors_without_pairs():
    with pytest.raises(NoEvaluablePairsError):
        evaluate_dataset([ImageEval("a", 0.0, 0.0, 0)])


def test_report_json_roundtrip():
    gt = MaskSet("img0", [inst(rect(8, 8, 2, 5, 2, 5))])
    pt = MaskSet("img0", [inst(rect(8, 8, 2, 6, 2, 6))])
    report = evaluate_dataset([evaluate_image(gt, pt)])
    again = EvalReport.from_dict(__import__("json").loads(report.to_json()))
    assert again == report


def test_extract_instances_thresholds_probability():
    prob = np.zeros((8, 8))
    prob[1:5, 1:5] = 0.9
    prob[6, 6] = 0.8  # single pixel below min_area
    ms = extract_instances("x", prob, threshold=0.5, min_area=10)
    assert len(ms.instances) == 1
    assert ms.instances[0].area == 16
