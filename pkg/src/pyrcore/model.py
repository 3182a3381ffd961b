"""Whole-model assembly and its on-disk formats.

A ModelSpec names a backbone, a core and a head; the JSON description
file is the single source the CLI and tests build from:

    {"backbone": "tiny", "core": {"kind": "tpn", "L": 3, "B": 2}, "head": {"C": 1}}

Checkpoints are a directory holding the description (model.json), every
parameter tensor concatenated in the flat binary format (weights.tpn)
and a manifest of (name, offset, shape).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backbone as BB
from . import blocks as bl
from . import cores as C
from . import head as H
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelSpec:
    backbone: str
    core: C.CoreSpec
    head: H.HeadSpec

    def __post_init__(self):
        BB.get_backbone_spec(self.backbone)  # validates the name
        if self.core.levels != C.DEFAULT_LEVELS:
            raise ValueError("models are built over levels 3..7")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"backbone", "core", "head"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        if "backbone" not in d or "core" not in d:
            raise ValueError("model description needs 'backbone' and 'core'")
        return cls(backbone=d["backbone"],
                   core=C.CoreSpec.from_dict(d["core"]),
                   head=H.HeadSpec.from_dict(d.get("head", {})))

    @classmethod
    def from_json_file(cls, path) -> "ModelSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        core = {"kind": self.core.kind, "L": self.core.L, "B": self.core.B,
                "levels": list(self.core.levels), "feature_size": self.core.feature_size,
                "hidden_size": self.core.hidden_size, "norm_groups": self.core.norm_groups}
        head = {"C": self.head.C, "num_classes": self.head.num_classes,
                "final_kernel": self.head.final_kernel, "feature_size": self.head.feature_size,
                "norm_groups": self.head.norm_groups}
        return {"backbone": self.backbone, "core": core, "head": head}


class Model:
    """Instantiated backbone + stem + core + head (tiny backbone only)."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32,
                 freeze_backbone: bool = False):
        bspec = BB.get_backbone_spec(spec.backbone)
        if not bspec.instantiable:
            raise ValueError(f"backbone {spec.backbone!r} is a counting shape only; "
                             "build with the 'tiny' backbone")
        if spec.core.feature_size != spec.head.feature_size:
            raise ValueError("core and head feature sizes must agree")
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.backbone = BB.TinyBackbone(rng, dtype=dtype)
        self.stem = bl.PyramidStem("stem", rng, bspec.out_channels,
                                   spec.core.feature_size, dtype=dtype)
        self.core = C.build_core(spec.core, rng, dtype=dtype)
        self.head = H.Head(spec.head, rng, dtype=dtype)
        self.anchors = H.AnchorConfig()
        if freeze_backbone:
            for p in self.backbone.parameters():
                p.frozen = True
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in model")

    def parameters(self):
        out = list(self.backbone.parameters())
        out += self.stem.parameters()
        out += [p for p in self.core.parameters()]
        out += self.head.parameters()
        return out

    def backbone_parameters(self):
        return self.backbone.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, images: Tensor, sequential: bool | None = None):
        """images -> (final pyramid, per-level (cls_logits, box_deltas))."""
        c3, c4, c5 = self.backbone(images)
        pyr = self.stem(c3, c4, c5)
        pyr = C.run_core(self.core, pyr, sequential=sequential)
        return pyr, self.head(pyr)

    __call__ = forward


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, spec: ModelSpec, model: Model) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    with open(ckpt_dir / "model.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = []
    offset = 0
    with open(ckpt_dir / "weights.tpn", "wb") as fh:
        for p in model.parameters():
            buf = T.tensor_to_bytes(p.data)
            manifest.append({"name": p.name, "offset": offset, "shape": list(p.data.shape)})
            fh.write(buf)
            offset += len(buf)
    with open(ckpt_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(ckpt_dir, seed: int = 0) -> tuple[ModelSpec, Model]:
    ckpt_dir = Path(ckpt_dir)
    spec = ModelSpec.from_json_file(ckpt_dir / "model.json")
    model = Model(spec, seed=seed)
    with open(ckpt_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    blob = (ckpt_dir / "weights.tpn").read_bytes()
    by_name = {p.name: p for p in model.parameters()}
    if set(by_name) != {m["name"] for m in manifest}:
        raise ValueError("checkpoint manifest does not match the model's parameters")
    for m in manifest:
        arr, _ = T.tensor_from_bytes(blob, m["offset"])
        if list(arr.shape) != m["shape"]:
            raise ValueError(f"shape mismatch for {m['name']}")
        p = by_name[m["name"]]
        p.tensor.data = arr.astype(p.data.dtype)
    return spec, model
