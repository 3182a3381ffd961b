"""Desk-scale training: synthetic shapes data, AdamW and the loop.

The dataset is a stand-in for a real detection corpus: 1-6 filled
rectangles, ellipses or triangles per image, distinguishable by
silhouette, with tight ground-truth boxes. Training follows the
two-group recipe: one learning rate for the backbone, one for the rest,
decoupled weight decay, and step drops at fixed epochs (75% and ~92% of
the run by default, mirroring the 27/33-of-36 pattern).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import head as H
from . import model as M
from . import tensor as T
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite."""


CLASS_NAMES = ("rectangle", "ellipse", "triangle")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    lr_backbone: float = 1e-5
    lr_rest: float = 1e-4
    weight_decay: float = 1e-4
    drop_factor: float = 0.1
    drop_epochs: tuple[int, ...] = ()      # defaults to 75% / ~92% of epochs
    seed: int = 0
    n_images: int = 8
    image_size: int = 64
    freeze_backbone: bool = False

    def __post_init__(self):
        drops = self.drop_epochs or self._default_drops()
        object.__setattr__(self, "drop_epochs", tuple(drops))
        if any(d >= self.epochs for d in self.drop_epochs):
            raise ValueError("drop epochs must be < epochs")
        if list(self.drop_epochs) != sorted(set(self.drop_epochs)):
            raise ValueError("drop epochs must be strictly increasing")
        if self.image_size % 32:
            raise ValueError("image size must be divisible by 32")

    def _default_drops(self):
        d1 = int(round(self.epochs * 27 / 36))
        d2 = int(round(self.epochs * 33 / 36))
        drops = sorted({d for d in (d1, d2) if 0 < d < self.epochs})
        return tuple(drops)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        if "drop_epochs" in kw:
            kw["drop_epochs"] = tuple(kw["drop_epochs"])
        return cls(**kw)


def lr_at(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """(backbone lr, rest lr) in effect during ``epoch`` (0-based)."""
    drops = sum(1 for d in config.drop_epochs if epoch >= d)
    factor = config.drop_factor ** drops
    return config.lr_backbone * factor, config.lr_rest * factor


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Frozen parameters keep receiving gradients but are never updated.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            arr = p.data
            arr -= (self.lr * update).astype(arr.dtype, copy=False)
            if self.weight_decay:
                arr -= (self.lr * self.weight_decay) * arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adamw_step(params, lr: float, weight_decay: float, state: AdamW | None = None) -> AdamW:
    """One optimizer step over ``params``; returns the carried state."""
    if state is None:
        state = AdamW(params, lr, weight_decay)
    state.lr = lr
    state.weight_decay = weight_decay
    state.step()
    return state


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    image: np.ndarray              # (3, s, s) float32 in [0, 1]
    boxes: np.ndarray              # (m, 4) xyxy
    classes: np.ndarray            # (m,) int in {0, 1, 2}


def _raster_shape(kind: int, cy: float, cx: float, hh: float, hw: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    yy = yy + 0.5
    xx = xx + 0.5
    if kind == 0:    # rectangle
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == 1:    # ellipse
        return ((yy - cy) / hh) ** 2 + ((xx - cx) / hw) ** 2 <= 1.0
    # triangle: apex on top, horizontal base
    in_band = (yy >= cy - hh) & (yy <= cy + hh)
    frac = np.clip((yy - (cy - hh)) / (2 * hh), 0, 1)
    return in_band & (np.abs(xx - cx) <= frac * hw)


def gen_dataset(seed: int, n_images: int, size: int) -> list[SyntheticScene]:
    """Deterministic scenes: 1-6 shapes per image, boxes at least 4x4 px."""
    if size % 32:
        raise ValueError("image size must be divisible by 32")
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_images):
        img = rng.uniform(0.0, 0.15, size=(3, size, size)).astype(np.float32)
        n_shapes = int(rng.integers(1, 7))
        boxes, classes = [], []
        for _ in range(n_shapes):
            kind = int(rng.integers(0, 3))
            hh = rng.uniform(2.0, size / 5)
            hw = rng.uniform(2.0, size / 5)
            cy = rng.uniform(hh + 1, size - hh - 1)
            cx = rng.uniform(hw + 1, size - hw - 1)
            mask = _raster_shape(kind, cy, cx, hh, hw, size)
            if not mask.any():
                continue
            color = rng.uniform(0.4, 1.0, size=3).astype(np.float32)
            img[:, mask] = color[:, None]
            boxes.append([cx - hw, cy - hh, cx + hw, cy + hh])
            classes.append(kind)
        scenes.append(SyntheticScene(np.clip(img, 0, 1),
                                     np.asarray(boxes, dtype=np.float64),
                                     np.asarray(classes, dtype=np.int64)))
    return scenes


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_history: list[float] = field(default_factory=list)
    log_rows: list[tuple] = field(default_factory=list)   # (step, level, cls, box, total)
    final_loss: float = float("nan")
    initial_loss: float = float("nan")


def _make_batch(scenes, idxs, dtype):
    images = np.stack([scenes[i].image for i in idxs]).astype(dtype)
    boxes = [scenes[i].boxes for i in idxs]
    classes = [scenes[i].classes for i in idxs]
    return Tensor(images), boxes, classes


def forward_loss(model: M.Model, images: Tensor, gt_boxes, gt_classes):
    """Full pipeline to the scalar loss; shared by training and checks."""
    _, outputs = model(images)
    shapes = {l: outputs[l][0].shape[2:] for l in outputs}
    targets = H.build_targets(model.anchors, shapes, gt_boxes, gt_classes)
    return H.detection_loss(outputs, targets, model.spec.head.num_classes)


def train_loop(model: M.Model, scenes, config: TrainConfig,
               max_steps: int | None = None, log=None) -> TrainResult:
    """Epoch loop with per-group learning rates; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    backbone_names = {p.name for p in model.backbone_parameters()}
    bb_params = [p for p in model.parameters() if p.name in backbone_names]
    rest_params = [p for p in model.parameters() if p.name not in backbone_names]
    opt_bb = AdamW(bb_params, config.lr_backbone, config.weight_decay)
    opt_rest = AdamW(rest_params, config.lr_rest, config.weight_decay)

    result = TrainResult()
    step = 0
    n = len(scenes)
    for epoch in range(config.epochs):
        lr_bb, lr_rest = lr_at(config, epoch)
        opt_bb.lr, opt_rest.lr = lr_bb, lr_rest
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idxs = order[start:start + config.batch_size]
            images, boxes, classes = _make_batch(scenes, idxs, model.dtype)
            model.zero_grad()
            loss, bd = forward_loss(model, images, boxes, classes)
            total = float(loss.data)
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss {total} at step {step} (epoch {epoch}); "
                    f"breakdown cls={bd.cls} box={bd.box}")
            loss.backward()
            opt_bb.step()
            opt_rest.step()

            if np.isnan(result.initial_loss):
                result.initial_loss = total
            result.loss_history.append(total)
            for l in sorted(bd.cls):
                result.log_rows.append((step, l, bd.cls[l], bd.box[l], total))
            if log is not None and step % 25 == 0:
                log(f"step {step:5d} epoch {epoch:3d} loss {total:.4f} "
                    f"(lr {lr_rest:.2e})")
            step += 1
            if max_steps is not None and step >= max_steps:
                result.final_loss = total
                return result
    result.final_loss = result.loss_history[-1] if result.loss_history else float("nan")
    return result


def evaluate_on_scenes(model: M.Model, scenes, score_thresh=H.SCORE_THRESH):
    """Decode detections for each scene and compute AP metrics."""
    preds, gts = {}, {}
    with T.no_grad():
        for i, scene in enumerate(scenes):
            images = Tensor(scene.image[None].astype(model.dtype))
            _, outputs = model(images)
            size = scene.image.shape[1:]
            dets = H.decode_and_nms(outputs, model.anchors, size,
                                    model.spec.head.num_classes,
                                    score_thresh=score_thresh)
            preds[i] = dets[0]
            gts[i] = (scene.boxes, scene.classes)
    return H.evaluate_ap(preds, gts), preds, gts


def write_loss_log(path, rows) -> None:
    """CSV: step, level, cls, box, total."""
    with open(path, "w") as fh:
        fh.write("step,level,cls,box,total\n")
        for step, level, cls_v, box_v, total in rows:
            fh.write(f"{step},{level},{cls_v:.6f},{box_v:.6f},{total:.6f}\n")


def run_training(model_spec: M.ModelSpec, config: TrainConfig, out_dir,
                 max_steps: int | None = None, log=None,
                 dtype=np.float32) -> tuple[TrainResult, dict]:
    """Build, train, evaluate and checkpoint; the CLI's train path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = M.Model(model_spec, seed=config.seed, dtype=dtype,
                    freeze_backbone=config.freeze_backbone)
    scenes = gen_dataset(config.seed, config.n_images, config.image_size)
    result = train_loop(model, scenes, config, max_steps=max_steps, log=log)
    metrics, preds, _ = evaluate_on_scenes(model, scenes)
    write_loss_log(out_dir / "loss_log.csv", result.log_rows)
    M.save_checkpoint(out_dir / "checkpoint", model_spec, model)
    H.export_detections_csv(out_dir / "detections.csv", preds)
    summary = {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
               "steps": len(result.loss_history), **metrics}
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result, summary
