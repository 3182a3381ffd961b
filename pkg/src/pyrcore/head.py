"""One-stage detection head, anchor machinery, losses and evaluation.

The head applies shared classification and box-regression subnets to all
pyramid levels: C hidden conv nodes (3x3, group-normalized) followed by
a plain 1x1 prediction conv. ``final_kernel`` widens the prediction conv
back to the unmodified reference layout (kernel 3) where a baseline
requires it.

Losses follow the usual one-stage recipe: sigmoid focal loss over
non-ignored anchors and smooth-L1 over positives, except that each
pyramid level's terms are normalized by that level's own positive count
rather than by the whole-pyramid count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks as bl
from . import tensor as T
from .blocks import Module
from .tensor import Tensor

# matcher / loss / inference constants follow the reference defaults
IOU_POSITIVE = 0.5
IOU_NEGATIVE = 0.4
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
SMOOTH_L1_BETA = 0.1
PRIOR_PROB = 0.01
SCALE_CLAMP = float(np.log(1000.0 / 16.0))
SCORE_THRESH = 0.05
TOPK_CANDIDATES = 1000
NMS_IOU = 0.5
MAX_DETECTIONS = 100

LABEL_IGNORE = -2
LABEL_NEGATIVE = -1


@dataclass(frozen=True)
class HeadSpec:
    """Configuration of the shared detection head."""

    C: int = 1
    num_classes: int = 80
    final_kernel: int = 1
    feature_size: int = bl.FEATURE_SIZE
    norm_groups: int = bl.NORM_GROUPS
    anchors_per_loc: int = 9

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("hidden layer count C must be >= 0")
        if self.num_classes < 1:
            raise ValueError("need at least one class")

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        known = {"C", "num_classes", "final_kernel", "feature_size", "norm_groups"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown head config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class AnchorConfig:
    """Per-level anchor layout: base size 2^(l+2), three octave scales,
    three aspect ratios; A = 9 anchors per location."""

    scales: tuple[float, ...] = (2 ** 0, 2 ** (1 / 3), 2 ** (2 / 3))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def anchors_per_loc(self) -> int:
        return len(self.scales) * len(self.ratios)

    def base_size(self, level: int) -> float:
        return float(2 ** (level + 2))

    def cell_anchors(self, level: int) -> np.ndarray:
        """(A, 4) anchor offsets around the origin, scale-major order."""
        out = []
        size = self.base_size(level)
        for s in self.scales:
            for r in self.ratios:
                # ratio is h/w at constant area
                w = size * s / np.sqrt(r)
                h = size * s * np.sqrt(r)
                out.append([-w / 2, -h / 2, w / 2, h / 2])
        return np.asarray(out, dtype=np.float64)

    def level_anchors(self, level: int, fh: int, fw: int) -> np.ndarray:
        """(fh*fw*A, 4) anchors in image pixels, location-major order."""
        stride = 2 ** level
        cell = self.cell_anchors(level)
        xs = (np.arange(fw) + 0.5) * stride
        ys = (np.arange(fh) + 0.5) * stride
        cx, cy = np.meshgrid(xs, ys)                    # (fh, fw)
        centers = np.stack([cx, cy, cx, cy], axis=-1)   # (fh, fw, 4)
        anchors = centers[:, :, None, :] + cell[None, None, :, :]
        return anchors.reshape(-1, 4)


@dataclass
class DetectionSet:
    """Decoded detections for one image; scores sorted descending."""

    boxes: np.ndarray      # (m, 4) x1,y1,x2,y2 in image pixels
    scores: np.ndarray     # (m,)
    classes: np.ndarray    # (m,) int

    def __post_init__(self):
        if len(self.boxes):
            if np.any(self.boxes[:, 2] < self.boxes[:, 0]) or np.any(self.boxes[:, 3] < self.boxes[:, 1]):
                raise ValueError("degenerate detection box")
            if np.any(np.diff(self.scores) > 0):
                raise ValueError("scores must be sorted descending")

    def __len__(self):
        return len(self.scores)


@dataclass
class LossBreakdown:
    cls: dict[int, float] = field(default_factory=dict)
    box: dict[int, float] = field(default_factory=dict)
    positives: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(self.cls.values()) + sum(self.box.values())


class Head(Module):
    """Shared classification + box subnets applied to every pyramid level."""

    def __init__(self, spec: HeadSpec, rng, name="head", dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.name = name
        f, g = spec.feature_size, spec.norm_groups
        A, K = spec.anchors_per_loc, spec.num_classes
        self.cls_tower = [self._child(bl.ConvNode(f"{name}.cls.h{i}", f, f, 3, rng,
                                                  norm_groups=g, dtype=dtype))
                          for i in range(spec.C)]
        self.box_tower = [self._child(bl.ConvNode(f"{name}.box.h{i}", f, f, 3, rng,
                                                  norm_groups=g, dtype=dtype))
                          for i in range(spec.C)]
        self.cls_final = self._child(bl.PlainConv(f"{name}.cls.final", f, A * K,
                                                  spec.final_kernel, rng, dtype=dtype))
        self.box_final = self._child(bl.PlainConv(f"{name}.box.final", f, 4 * A,
                                                  spec.final_kernel, rng, dtype=dtype))
        # prior-probability bias so initial scores sit near PRIOR_PROB
        self.cls_final.bias.data[:] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)

    def forward(self, pyr: dict[int, Tensor]) -> dict[int, tuple[Tensor, Tensor]]:
        out = {}
        for l in sorted(pyr):
            x = pyr[l]
            if x.shape[1] != self.spec.feature_size:
                raise T.ShapeError(f"head expects {self.spec.feature_size} channels at level {l}")
            c = x
            for node in self.cls_tower:
                c = node(c)
            b = x
            for node in self.box_tower:
                b = node(b)
            out[l] = (self.cls_final(c), self.box_final(b))
        return out

    __call__ = forward


def head_param_count(spec: HeadSpec) -> int:
    """Closed form matching instance enumeration exactly."""
    f = spec.feature_size
    A, K = spec.anchors_per_loc, spec.num_classes
    hidden = 2 * spec.C * bl.conv_node_param_count(f, f, 3)
    k2 = spec.final_kernel ** 2
    finals = (f * A * K * k2 + A * K) + (f * 4 * A * k2 + 4 * A)
    return hidden + finals


# ---------------------------------------------------------------------------
# boxes, anchors, matching
# ---------------------------------------------------------------------------

def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n,4) and (m,4) xyxy boxes."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                  gt_classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors positive(class)/negative/ignore.

    IoU >= 0.5 binds an anchor to its best gt; < 0.4 is negative; the band
    in between is ignored. Every gt additionally claims its single
    highest-IoU anchor so no object goes unmatched.

    Returns (labels, matched_idx): labels hold the class id for positives,
    LABEL_NEGATIVE or LABEL_IGNORE otherwise.
    """
    n = len(anchors)
    if len(gt_boxes) == 0:
        return np.full(n, LABEL_NEGATIVE, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    if np.any(areas <= 0):
        raise ValueError("degenerate (zero-area) ground-truth box")
    iou = box_iou(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]

    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    labels[best_iou < IOU_NEGATIVE] = LABEL_NEGATIVE
    pos = best_iou >= IOU_POSITIVE
    labels[pos] = gt_classes[best_gt[pos]]

    # force-match: each gt claims its top anchor
    top_anchor = iou.argmax(axis=0)
    labels[top_anchor] = gt_classes
    best_gt[top_anchor] = np.arange(len(gt_boxes))
    matched = np.where(labels >= 0, best_gt, -1)
    return labels, matched


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Box -> (dx, dy, dw, dh) deltas relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah,
                     np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_boxes`` with the usual log-size clamp."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], SCALE_CLAMP))
    h = ah * np.exp(np.minimum(deltas[:, 3], SCALE_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def focal_terms(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element sigmoid focal loss and its gradient wrt logits.

    ``y`` is the 0/1 target array broadcastable against ``logits``.
    """
    p = _sigmoid(logits)
    logp = -_softplus(-logits)
    log1mp = -_softplus(logits)
    g, a = FOCAL_GAMMA, FOCAL_ALPHA
    loss_pos = -a * (1 - p) ** g * logp
    loss_neg = -(1 - a) * p ** g * log1mp
    grad_pos = a * (1 - p) ** g * (g * p * logp - (1 - p))
    grad_neg = (1 - a) * p ** g * (p - g * (1 - p) * log1mp)
    loss = np.where(y > 0, loss_pos, loss_neg)
    grad = np.where(y > 0, grad_pos, grad_neg)
    return loss, grad


def smooth_l1_terms(diff: np.ndarray, beta: float = SMOOTH_L1_BETA):
    """Per-element smooth-L1 loss and gradient wrt ``diff``."""
    ad = np.abs(diff)
    loss = np.where(ad < beta, 0.5 * ad * ad / beta, ad - 0.5 * beta)
    grad = np.where(ad < beta, diff / beta, np.sign(diff))
    return loss, grad


@dataclass
class LevelTargets:
    """Matched anchor labels for one level across a batch."""

    labels: np.ndarray        # (n, N_l) int
    box_targets: np.ndarray   # (n, N_l, 4), valid where labels >= 0


def build_targets(anchor_cfg: AnchorConfig, level_shapes: dict[int, tuple[int, int]],
                  gt_boxes, gt_classes) -> dict[int, LevelTargets]:
    """Match the full anchor set once, then split per level.

    ``gt_boxes``/``gt_classes`` are per-image lists. Matching runs over the
    concatenated anchors of all levels so the per-gt force match is global.
    """
    levels = sorted(level_shapes)
    per_level = [anchor_cfg.level_anchors(l, *level_shapes[l]) for l in levels]
    counts = [len(a) for a in per_level]
    all_anchors = np.concatenate(per_level, axis=0)
    n = len(gt_boxes)

    labels = np.zeros((n, len(all_anchors)), dtype=np.int64)
    targets = np.zeros((n, len(all_anchors), 4), dtype=np.float64)
    for i in range(n):
        lab, matched = match_anchors(all_anchors, np.asarray(gt_boxes[i], dtype=np.float64),
                                     np.asarray(gt_classes[i], dtype=np.int64))
        labels[i] = lab
        pos = lab >= 0
        if pos.any():
            targets[i, pos] = encode_boxes(all_anchors[pos],
                                           np.asarray(gt_boxes[i], dtype=np.float64)[matched[pos]])

    out = {}
    start = 0
    for l, cnt in zip(levels, counts):
        out[l] = LevelTargets(labels[:, start:start + cnt], targets[:, start:start + cnt])
        start += cnt
    return out


def _flatten_cls(t: Tensor, A: int, K: int) -> np.ndarray:
    n, _, h, w = t.shape
    return t.data.transpose(0, 2, 3, 1).reshape(n, h * w * A, K)


def _unflatten(grad_flat: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return grad_flat.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def detection_loss(outputs: dict[int, tuple[Tensor, Tensor]],
                   targets: dict[int, LevelTargets],
                   num_classes: int) -> tuple[Tensor, LossBreakdown]:
    """Focal + smooth-L1 loss, normalized per feature map.

    Each level's classification and box sums are divided by that level's
    max(1, positive count). Returns the scalar loss tensor (wired into the
    autograd tape) and a float breakdown.
    """
    breakdown = LossBreakdown()
    parents = []
    grads = []
    total = 0.0
    dtype = None
    for l in sorted(outputs):
        cls_t, box_t = outputs[l]
        dtype = cls_t.data.dtype
        n, ck, h, w = cls_t.shape
        A = ck // num_classes
        tgt = targets[l]
        logits = _flatten_cls(cls_t, A, num_classes)           # (n, N, K)
        deltas = _flatten_cls(box_t, A, 4)                     # (n, N, 4)
        labels = tgt.labels

        pos_mask = labels >= 0
        valid = labels != LABEL_IGNORE
        n_pos = int(pos_mask.sum())
        norm = max(1, n_pos)

        onehot = np.zeros_like(logits)
        idx = np.nonzero(pos_mask)
        onehot[idx[0], idx[1], labels[pos_mask]] = 1.0
        loss_el, grad_el = focal_terms(logits, onehot)
        vmask = valid[:, :, None].astype(logits.dtype)
        cls_loss = float((loss_el * vmask).sum()) / norm
        cls_grad = grad_el * vmask / norm

        if n_pos:
            diff = deltas[pos_mask] - tgt.box_targets[pos_mask]
            bloss_el, bgrad_el = smooth_l1_terms(diff)
            box_loss = float(bloss_el.sum()) / norm
            box_grad = np.zeros_like(deltas)
            box_grad[pos_mask] = bgrad_el / norm
        else:
            box_loss = 0.0
            box_grad = np.zeros_like(deltas)

        breakdown.cls[l] = cls_loss
        breakdown.box[l] = box_loss
        breakdown.positives[l] = n_pos
        total += cls_loss + box_loss
        parents.extend([cls_t, box_t])
        grads.append((cls_t, _unflatten(cls_grad, cls_t.shape).astype(dtype)))
        grads.append((box_t, _unflatten(box_grad, box_t.shape).astype(dtype)))

    def backward(g):
        scale = float(g)
        for t, grad in grads:
            if t.requires_grad:
                t.accumulate_grad(grad * scale)

    loss = T._result(np.asarray(total, dtype=dtype), tuple(parents), backward, "detection_loss")
    return loss, breakdown


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def greedy_nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by greedy per-score suppression."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        rest = order[1:]
        ious = box_iou(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ious <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def decode_and_nms(outputs: dict[int, tuple[Tensor, Tensor]],
                   anchor_cfg: AnchorConfig, image_hw: tuple[int, int],
                   num_classes: int, score_thresh: float = SCORE_THRESH,
                   iou_thresh: float = NMS_IOU, topk: int = TOPK_CANDIDATES,
                   max_detections: int = MAX_DETECTIONS) -> list[DetectionSet]:
    """Per-image detections: threshold, top-k per level, decode, clip,
    class-wise greedy NMS, keep the best ``max_detections``."""
    levels = sorted(outputs)
    n = outputs[levels[0]][0].shape[0]
    ih, iw = image_hw
    results = []
    for i in range(n):
        boxes_all, scores_all, classes_all = [], [], []
        for l in levels:
            cls_t, box_t = outputs[l]
            _, ck, h, w = cls_t.shape
            A = ck // num_classes
            anchors = anchor_cfg.level_anchors(l, h, w)
            scores = _sigmoid(_flatten_cls(cls_t, A, num_classes)[i]).reshape(-1)
            deltas = _flatten_cls(box_t, A, 4)[i]
            keep = np.nonzero(scores > score_thresh)[0]
            if len(keep) > topk:
                keep = keep[np.argsort(-scores[keep], kind="stable")[:topk]]
            if not len(keep):
                continue
            aidx, cidx = keep // num_classes, keep % num_classes
            decoded = decode_boxes(anchors[aidx], deltas[aidx])
            decoded[:, 0::2] = np.clip(decoded[:, 0::2], 0, iw)
            decoded[:, 1::2] = np.clip(decoded[:, 1::2], 0, ih)
            boxes_all.append(decoded)
            scores_all.append(scores[keep])
            classes_all.append(cidx)
        if not boxes_all:
            results.append(DetectionSet(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)))
            continue
        boxes = np.concatenate(boxes_all)
        scores = np.concatenate(scores_all)
        classes = np.concatenate(classes_all)
        keep_idx = []
        for k in np.unique(classes):
            cls_idx = np.nonzero(classes == k)[0]
            kept = greedy_nms(boxes[cls_idx], scores[cls_idx], iou_thresh)
            keep_idx.extend(cls_idx[kept])
        keep_idx = np.asarray(keep_idx, dtype=np.int64)
        order = np.argsort(-scores[keep_idx], kind="stable")[:max_detections]
        sel = keep_idx[order]
        results.append(DetectionSet(boxes[sel], scores[sel], classes[sel]))
    return results


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))
RECALL_GRID = np.linspace(0, 1, 101)


def _ap_at_threshold(preds_by_image, gts_by_image, klass, thresh) -> float | None:
    """101-point interpolated AP for one class at one IoU threshold.

    Returns None when the class has no ground truth.
    """
    entries = []   # (score, image_id, box)
    for img_id, det in preds_by_image.items():
        mask = det.classes == klass
        for b, s in zip(det.boxes[mask], det.scores[mask]):
            entries.append((float(s), img_id, b))
    n_gt = 0
    gt_boxes = {}
    for img_id, (boxes, classes) in gts_by_image.items():
        mask = np.asarray(classes) == klass
        gt_boxes[img_id] = np.asarray(boxes, dtype=np.float64)[mask]
        n_gt += int(mask.sum())
    if n_gt == 0:
        return None
    entries.sort(key=lambda e: -e[0])
    matched = {img_id: np.zeros(len(b), dtype=bool) for img_id, b in gt_boxes.items()}
    tp = np.zeros(len(entries))
    fp = np.zeros(len(entries))
    for i, (score, img_id, box) in enumerate(entries):
        gts = gt_boxes.get(img_id, np.zeros((0, 4)))
        if len(gts) == 0:
            fp[i] = 1
            continue
        ious = box_iou(box[None, :], gts)[0]
        ious[matched[img_id]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= thresh:
            tp[i] = 1
            matched[img_id][j] = True
        else:
            fp[i] = 1
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    ap = 0.0
    for r in RECALL_GRID:
        above = precision[recall >= r]
        ap += float(above.max()) if len(above) else 0.0
    return ap / len(RECALL_GRID)


def evaluate_ap(preds_by_image: dict, gts_by_image: dict) -> dict[str, float]:
    """COCO-style AP averaged over IoU 0.5:0.95, plus AP50/AP75 splits.

    ``preds_by_image`` maps image id -> DetectionSet; ``gts_by_image`` maps
    image id -> (boxes, classes).
    """
    classes = sorted({int(k) for _, (bx, cl) in gts_by_image.items() for k in np.asarray(cl).reshape(-1)})
    per_thresh = {}
    for t in IOU_THRESHOLDS:
        vals = [v for k in classes
                if (v := _ap_at_threshold(preds_by_image, gts_by_image, k, t)) is not None]
        per_thresh[t] = float(np.mean(vals)) if vals else 0.0
    ap = float(np.mean(list(per_thresh.values()))) if per_thresh else 0.0
    return {"AP": ap, "AP50": per_thresh.get(0.5, 0.0), "AP75": per_thresh.get(0.75, 0.0)}


def export_detections_csv(path, detections_by_image: dict) -> None:
    """CSV export: image_id, class, score, x1, y1, x2, y2."""
    with open(path, "w") as fh:
        fh.write("image_id,class,score,x1,y1,x2,y2\n")
        for img_id in sorted(detections_by_image):
            det = detections_by_image[img_id]
            for b, s, k in zip(det.boxes, det.scores, det.classes):
                fh.write(f"{img_id},{int(k)},{s:.6f},{b[0]:.3f},{b[1]:.3f},{b[2]:.3f},{b[3]:.3f}\n")
