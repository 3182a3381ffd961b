"""Backbone providers.

Two roles: exact architectural shape specs of ResNet-50/101 used purely
for parameter accounting (no weights are ever instantiated for them),
and a small trainable convolutional backbone emitting C3/C4/C5 at
strides 8/16/32 for desk-scale training.

Parameter enumeration counts convolution weights plus one affine pair
(scale, shift) per normalization layer; biases only where a conv
actually carries one. Frozen parameters are included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as bl
from . import tensor as T
from .blocks import Module
from .tensor import Tensor

BACKBONE_KINDS = ("resnet50-shape", "resnet101-shape", "tiny")

TINY_STAGE_CHANNELS = (64, 128, 256)
TINY_BLOCKS_PER_STAGE = 2
_TINY_ENTRY = ((3, 16), (16, 32))


@dataclass(frozen=True)
class BackboneSpec:
    """Shape-level description sufficient for exact parameter accounting."""

    kind: str
    stage_depths: tuple[int, ...]
    out_channels: tuple[int, int, int]      # channels of C3, C4, C5
    instantiable: bool
    # freeze set follows the reference recipe: stem, stage 1 and every norm
    frozen_parts: tuple[str, ...] = ("stem", "stage1", "norm")


_SPECS = {
    "resnet50-shape": BackboneSpec("resnet50-shape", (3, 4, 6, 3), (512, 1024, 2048), False),
    "resnet101-shape": BackboneSpec("resnet101-shape", (3, 4, 23, 3), (512, 1024, 2048), False),
    "tiny": BackboneSpec("tiny", (TINY_BLOCKS_PER_STAGE,) * 3, TINY_STAGE_CHANNELS, True),
}


def get_backbone_spec(kind: str) -> BackboneSpec:
    if kind not in _SPECS:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {BACKBONE_KINDS}")
    return _SPECS[kind]


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def _resnet_rows(depths: tuple[int, ...]) -> list[tuple[str, int]]:
    """Per-layer counts for a bottleneck ResNet trunk (no classifier).

    Convs carry no bias; each conv is followed by a norm with 2*out
    affine parameters. The first block of each stage has a projection
    shortcut.
    """
    rows = [("conv1", 3 * 64 * 7 * 7), ("bn1", 2 * 64)]
    in_c = 64
    for s, depth in enumerate(depths, start=1):
        mid = 64 * 2 ** (s - 1)
        out = 4 * mid
        for b in range(depth):
            cin = in_c if b == 0 else out
            count = (cin * mid + 2 * mid            # 1x1 reduce + norm
                     + mid * mid * 9 + 2 * mid      # 3x3 + norm
                     + mid * out + 2 * out)         # 1x1 expand + norm
            if b == 0:
                count += cin * out + 2 * out        # projection shortcut + norm
            rows.append((f"stage{s}.block{b}", count))
        in_c = out
    return rows


def _tiny_rows() -> list[tuple[str, int]]:
    rows = []
    for i, (cin, cout) in enumerate(_TINY_ENTRY):
        rows.append((f"entry{i}", cin * cout * 9 + cout))
    prev = _TINY_ENTRY[-1][1]
    for s, c in enumerate(TINY_STAGE_CHANNELS, start=1):
        count = bl.conv_node_param_count(prev, c, 3)
        count += TINY_BLOCKS_PER_STAGE * bl.bottleneck_param_count(c, c // 4)
        rows.append((f"stage{s}", count))
        prev = c
    return rows


def backbone_param_rows(spec: BackboneSpec) -> list[tuple[str, int]]:
    if spec.kind == "tiny":
        return _tiny_rows()
    return _resnet_rows(spec.stage_depths)


def count_backbone_params(spec: BackboneSpec) -> int:
    """Exact parameter total, frozen parameters included."""
    return sum(c for _, c in backbone_param_rows(spec))


# ---------------------------------------------------------------------------
# trainable tiny backbone
# ---------------------------------------------------------------------------

class TinyBackbone(Module):
    """Three stages of two bottleneck blocks over a two-conv entry.

    Emits (C3, C4, C5) with channels (64, 128, 256) at strides 8/16/32.
    Uses the same pre-normalized conv node as the cores.
    """

    def __init__(self, rng, name="backbone", dtype=np.float32):
        super().__init__()
        self.name = name
        self.entry0 = self._child(bl.PlainConv(f"{name}.entry0", *_TINY_ENTRY[0], 3, rng,
                                               stride=2, dtype=dtype))
        self.entry1 = self._child(bl.PlainConv(f"{name}.entry1", *_TINY_ENTRY[1], 3, rng,
                                               stride=2, dtype=dtype))
        self.stages = []
        prev = _TINY_ENTRY[-1][1]
        for s, c in enumerate(TINY_STAGE_CHANNELS, start=1):
            down = self._child(bl.ConvNode(f"{name}.stage{s}.down", prev, c, 3, rng,
                                           stride=2, dtype=dtype))
            blks = [self._child(bl.BottleneckBlock(f"{name}.stage{s}.b{i}", rng, c, c // 4,
                                                   dtype=dtype))
                    for i in range(TINY_BLOCKS_PER_STAGE)]
            self.stages.append((down, blks))
            prev = c

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise T.ShapeError(f"image size {h}x{w} not divisible by 32")
        x = T.relu(self.entry0(image))
        x = T.relu(self.entry1(x))
        maps = []
        for down, blks in self.stages:
            x = down(x)
            for blk in blks:
                x = blk(x)
            maps.append(x)
        return tuple(maps)

    __call__ = forward
