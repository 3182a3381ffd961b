"""Head tests: parameter counts, anchor/matcher arithmetic, loss values
against closed forms and finite differences, decode/NMS traces, AP."""

import numpy as np
import pytest

from pyrcore import head as H
from pyrcore import tensor as T
from pyrcore.head import AnchorConfig, DetectionSet, HeadSpec, LevelTargets
from pyrcore.tensor import Tensor


def rng_(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# head module
# ---------------------------------------------------------------------------

def test_head_param_count_c1_k80():
    spec = HeadSpec(C=1, num_classes=80)
    head = H.Head(spec, rng_(1))
    enumerated = sum(int(np.prod(p.data.shape)) for p in head.parameters())
    # itemized: two subnets x (GN 512 + 3x3 conv 590,080) + 1x1 finals
    items = 2 * (2 * 256 + 256 * 256 * 9 + 256) + (256 * 720 + 720) + (256 * 36 + 36)
    assert enumerated == H.head_param_count(spec) == items == 1375476


def test_head_param_count_final_kernel3():
    spec = HeadSpec(C=4, num_classes=80, final_kernel=3)
    assert H.head_param_count(spec) == (2 * 4 * 590592
                                        + 256 * 720 * 9 + 720 + 256 * 36 * 9 + 36)


def test_head_output_shapes_and_sharing():
    spec = HeadSpec(C=1, num_classes=3, feature_size=16)
    head = H.Head(spec, rng_(2))
    rng = rng_(3)
    pyr = {3: Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32)),
           4: Tensor(rng.standard_normal((2, 16, 4, 4)).astype(np.float32))}
    out = head(pyr)
    assert out[3][0].shape == (2, 9 * 3, 8, 8)
    assert out[3][1].shape == (2, 36, 8, 8)
    assert out[4][0].shape == (2, 27, 4, 4)
    # the head is shared: applying it to a single level gives the same maps
    solo = head({3: pyr[3]})
    assert np.array_equal(solo[3][0].data, out[3][0].data)
    assert np.array_equal(solo[3][1].data, out[3][1].data)


def test_head_zeroed_finals_score_is_sigmoid_bias():
    spec = HeadSpec(C=1, num_classes=2, feature_size=16)
    head = H.Head(spec, rng_(4))
    head.cls_final.weight.data[:] = 0
    b = -1.3
    head.cls_final.bias.data[:] = b
    x = Tensor(rng_(5).standard_normal((1, 16, 4, 4)).astype(np.float32))
    logits = head({3: x})[3][0].data
    assert np.allclose(1 / (1 + np.exp(-logits)), 1 / (1 + np.exp(-b)), atol=1e-6)


def test_head_prior_bias_init():
    head = H.Head(HeadSpec(C=0, num_classes=2, feature_size=16), rng_(6))
    want = -np.log((1 - 0.01) / 0.01)
    assert np.allclose(head.cls_final.bias.data, want)


def test_head_grad_check():
    rng = rng_(7)
    spec = HeadSpec(C=1, num_classes=2, feature_size=8)
    head = H.Head(spec, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)), dtype=np.float64)

    def f():
        cls_t, box_t = head({3: x})[3]
        return T.add(cls_t.sum(), box_t.sum())

    leaves = [x] + [p.tensor for p in head.parameters()]
    err = T.grad_check(f, leaves, max_checks=10, rng=rng_(8))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# anchors and matching
# ---------------------------------------------------------------------------

def test_anchor_layout():
    cfg = AnchorConfig()
    assert cfg.anchors_per_loc == 9
    a = cfg.level_anchors(3, 4, 4)
    assert a.shape == (4 * 4 * 9, 4)
    # first cell anchor at level 3: base 32, scale 1, ratio 0.5 around (4, 4)
    w = 32 / np.sqrt(0.5)
    h = 32 * np.sqrt(0.5)
    assert np.allclose(a[0], [4 - w / 2, 4 - h / 2, 4 + w / 2, 4 + h / 2])
    areas = (a[:9, 2] - a[:9, 0]) * (a[:9, 3] - a[:9, 1])
    assert np.allclose(areas[:3], 32 * 32)  # scale 1 anchors share the base area


def test_match_identical_anchor_positive():
    anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60]], dtype=np.float64)
    labels, matched = H.match_anchors(anchors, np.array([[0.0, 0, 10, 10]]), np.array([2]))
    assert labels[0] == 2 and matched[0] == 0
    assert labels[1] == H.LABEL_NEGATIVE


def test_match_band_is_ignore():
    # second anchor has IoU exactly 0.45 (contained box, union = gt area)
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 4.5]], dtype=np.float64)
    gt = np.array([[0.0, 0, 10, 10]])
    labels, _ = H.match_anchors(anchors, gt, np.array([1]))
    assert labels[0] == 1              # claims the force match
    assert labels[1] == H.LABEL_IGNORE


def test_match_force_claims_best_anchor():
    # no anchor reaches 0.5, the best one is still matched
    anchors = np.array([[0, 0, 10, 3.0], [0, 0, 10, 4.0]], dtype=np.float64)
    labels, matched = H.match_anchors(anchors, np.array([[0.0, 0, 10, 10]]), np.array([0]))
    assert labels[1] == 0 and matched[1] == 0
    assert labels[0] == H.LABEL_NEGATIVE


def test_match_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        H.match_anchors(np.zeros((1, 4)), np.array([[5.0, 5, 5, 9]]), np.array([0]))


def test_match_empty_gt_all_negative():
    labels, matched = H.match_anchors(np.array([[0.0, 0, 4, 4]]), np.zeros((0, 4)), np.zeros(0, dtype=int))
    assert labels[0] == H.LABEL_NEGATIVE and matched[0] == -1


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_focal_closed_form_at_half():
    # p = 0.5 on the true class -> alpha * 0.5^gamma * ln 2
    loss, _ = H.focal_terms(np.array([0.0]), np.array([1.0]))
    assert np.allclose(loss, 0.25 * 0.25 * np.log(2))


def test_focal_gradient_finite_difference():
    rng = rng_(9)
    x = rng.standard_normal(64)
    y = (rng.uniform(size=64) > 0.5).astype(np.float64)
    _, grad = H.focal_terms(x, y)
    eps = 1e-6
    lp, _ = H.focal_terms(x + eps, y)
    lm, _ = H.focal_terms(x - eps, y)
    fd = (lp - lm) / (2 * eps)
    assert np.allclose(grad, fd, atol=1e-8)


def test_smooth_l1_values_and_gradient():
    d = np.array([0.05, -0.05, 0.5, -2.0])
    loss, grad = H.smooth_l1_terms(d, beta=0.1)
    assert np.allclose(loss, [0.0125, 0.0125, 0.45, 1.95])
    assert np.allclose(grad, [0.5, -0.5, 1.0, -1.0])


def _mini_outputs_and_targets(rng, n=1, h=2, w=2, K=2, A=2, n_pos=2):
    """One level with controllable positive count."""
    cls_t = Tensor(rng.standard_normal((n, A * K, h, w)), dtype=np.float64, requires_grad=True)
    box_t = Tensor(rng.standard_normal((n, A * 4, h, w)) * 0.3, dtype=np.float64, requires_grad=True)
    N = h * w * A
    labels = np.full((n, N), H.LABEL_NEGATIVE, dtype=np.int64)
    labels[:, 0] = H.LABEL_IGNORE
    for i in range(n_pos):
        labels[:, 1 + i] = i % K
    tgts = rng.standard_normal((n, N, 4)) * 0.3
    return {3: (cls_t, box_t)}, {3: LevelTargets(labels, tgts)}


def test_detection_loss_gradient_finite_difference():
    rng = rng_(10)
    outputs, targets = _mini_outputs_and_targets(rng)
    cls_t, box_t = outputs[3]

    def f():
        loss, _ = H.detection_loss(outputs, targets, num_classes=2)
        return loss

    err = T.grad_check(f, [cls_t, box_t], max_checks=40, rng=rng_(11))
    assert err < 1e-6


def test_detection_loss_perfect_predictions_vanish():
    rng = rng_(12)
    outputs, targets = _mini_outputs_and_targets(rng, n_pos=2)
    cls_t, box_t = outputs[3]
    labels = targets[3].labels
    # +-20 logit surrogate for certainty, exact deltas for positives
    flat = np.full((1, 8, 2), -20.0)
    for j in range(8):
        if labels[0, j] >= 0:
            flat[0, j, labels[0, j]] = 20.0
    cls_t.data[:] = flat.reshape(1, 2, 2, 4).transpose(0, 3, 1, 2)
    box_t.data[:] = targets[3].box_targets.reshape(1, 2, 2, 8).transpose(0, 3, 1, 2)
    loss, bd = H.detection_loss(outputs, targets, num_classes=2)
    assert float(loss.data) < 1e-6
    assert bd.box[3] == 0.0


def test_detection_loss_zero_positives_level():
    rng = rng_(13)
    outputs, targets = _mini_outputs_and_targets(rng, n_pos=0)
    loss, bd = H.detection_loss(outputs, targets, num_classes=2)
    assert bd.positives[3] == 0
    assert bd.box[3] == 0.0
    assert bd.cls[3] > 0.0      # divisor 1, pure-negative focal loss
    assert np.isclose(float(loss.data), bd.total)


def test_loss_normalization_batch_invariance():
    rng = rng_(14)
    out1, tgt1 = _mini_outputs_and_targets(rng, n=1, n_pos=2)
    _, bd1 = H.detection_loss(out1, tgt1, num_classes=2)
    # duplicate the image: sums and positive counts both double
    cls2 = Tensor(np.concatenate([out1[3][0].data] * 2), dtype=np.float64)
    box2 = Tensor(np.concatenate([out1[3][1].data] * 2), dtype=np.float64)
    tgt2 = {3: LevelTargets(np.concatenate([tgt1[3].labels] * 2),
                            np.concatenate([tgt1[3].box_targets] * 2))}
    _, bd2 = H.detection_loss({3: (cls2, box2)}, tgt2, num_classes=2)
    assert np.isclose(bd1.cls[3], bd2.cls[3])
    assert np.isclose(bd1.box[3], bd2.box[3])


# ---------------------------------------------------------------------------
# decode / NMS / AP
# ---------------------------------------------------------------------------

def test_encode_decode_round_trip():
    rng = rng_(15)
    anchors = np.stack([rng.uniform(0, 50, 20), rng.uniform(0, 50, 20),
                        rng.uniform(60, 100, 20), rng.uniform(60, 100, 20)], axis=1)
    boxes = np.stack([rng.uniform(0, 40, 20), rng.uniform(0, 40, 20),
                      rng.uniform(50, 100, 20), rng.uniform(50, 100, 20)], axis=1)
    back = H.decode_boxes(anchors, H.encode_boxes(anchors, boxes))
    assert np.allclose(back, boxes, rtol=1e-5, atol=1e-7)


def test_decode_zero_deltas_returns_anchors():
    anchors = np.array([[2.0, 3, 10, 12], [0, 0, 5, 5]])
    assert np.allclose(H.decode_boxes(anchors, np.zeros((2, 4))), anchors)


def test_nms_identical_boxes_one_survives():
    boxes = np.array([[0.0, 0, 10, 10], [0, 0, 10, 10]])
    keep = H.greedy_nms(boxes, np.array([0.9, 0.8]), 0.5)
    assert list(keep) == [0]


def test_nms_three_box_trace():
    boxes = np.array([[0.0, 0, 10, 10], [1, 0, 11, 10], [20, 0, 30, 10]])
    scores = np.array([0.9, 0.8, 0.7])
    # IoU(b0, b1) = 90/110 > 0.5 suppresses b1; b2 is disjoint
    keep = H.greedy_nms(boxes, scores, 0.5)
    assert sorted(keep.tolist()) == [0, 2]


def _dets(boxes, scores, classes):
    return DetectionSet(np.asarray(boxes, dtype=np.float64), np.asarray(scores, dtype=np.float64),
                        np.asarray(classes, dtype=np.int64))


def test_ap_perfect_predictions():
    gts = {0: (np.array([[0.0, 0, 10, 10], [20, 20, 40, 40]]), np.array([0, 1]))}
    preds = {0: _dets([[0, 0, 10, 10], [20, 20, 40, 40]], [1.0, 1.0], [0, 1])}
    res = H.evaluate_ap(preds, gts)
    assert res["AP"] == pytest.approx(1.0)
    assert res["AP50"] == pytest.approx(1.0)


def test_ap_no_predictions():
    gts = {0: (np.array([[0.0, 0, 10, 10]]), np.array([0]))}
    preds = {0: _dets(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int))}
    assert H.evaluate_ap(preds, gts)["AP"] == 0.0


def test_ap50_one_correct_one_spurious():
    # 2 gts, correct prediction ranked first then a far-off spurious one:
    # precision steps (1, 0.5) at recall 0.5 -> 101-point AP50 = 51/101
    gts = {0: (np.array([[0.0, 0, 10, 10], [50, 50, 60, 60]]), np.array([0, 0]))}
    preds = {0: _dets([[0, 0, 10, 10], [100, 100, 110, 110]], [0.9, 0.8], [0, 0])}
    res = H.evaluate_ap(preds, gts)
    assert res["AP50"] == pytest.approx(51 / 101)


def test_build_targets_and_level_split():
    cfg = AnchorConfig()
    shapes = {3: (4, 4), 4: (2, 2)}
    gt = [np.array([[4.0, 4, 40, 40]])]
    classes = [np.array([1])]
    tgts = H.build_targets(cfg, shapes, gt, classes)
    assert set(tgts) == {3, 4}
    assert tgts[3].labels.shape == (1, 4 * 4 * 9)
    assert tgts[4].labels.shape == (1, 2 * 2 * 9)
    total_pos = sum(int((t.labels >= 0).sum()) for t in tgts.values())
    assert total_pos >= 1  # force match guarantees coverage


def test_export_detections_csv(tmp_path):
    path = tmp_path / "det.csv"
    H.export_detections_csv(path, {1: _dets([[0, 0, 4, 4]], [0.75], [2])})
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "image_id,class,score,x1,y1,x2,y2"
    assert lines[1].startswith("1,2,0.750000,")
