"""Atomic building blocks for pyramid cores.

A convolution node is group-norm -> ReLU -> conv (pre-normalized). The
bottleneck block squeezes the 256-wide feature maps down to a 64-wide
hidden branch and adds the result back; the top-down and bottom-up ops
are residual updates of one pyramid level from its neighbor. The stem
builds the initial P3..P7 pyramid from backbone maps C3..C5.

All residual branches end in a convolution whose weights can be zeroed,
which makes every block the exact identity map; that property anchors
the identity test suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

FEATURE_SIZE = 256
HIDDEN_SIZE = 64
NORM_GROUPS = 8


class Module:
    """Tiny composition base: children and parameters registered explicitly."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._children: list["Module"] = []

    def _register(self, param: Parameter) -> Parameter:
        self._params.append(param)
        return param

    def _child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ConvNode(Module):
    """group_norm -> ReLU -> conv2d, the pink convolution node.

    Padding is k//2 so stride-1 nodes preserve spatial size and stride-2
    nodes halve it (ceil division).
    """

    def __init__(self, name, in_c, out_c, kernel, rng, stride=1,
                 norm_groups=NORM_GROUPS, dtype=np.float32):
        super().__init__()
        self.name = name
        self.in_c, self.out_c = in_c, out_c
        self.kernel, self.stride = kernel, stride
        self.norm_groups = norm_groups
        self.gamma = self._register(Parameter(Tensor(np.ones(in_c, dtype=dtype)), f"{name}.gn.gamma"))
        self.beta = self._register(Parameter(Tensor(np.zeros(in_c, dtype=dtype)), f"{name}.gn.beta"))
        w = T.kaiming_uniform(rng, (out_c, in_c, kernel, kernel), in_c * kernel * kernel, dtype)
        self.weight = self._register(Parameter(Tensor(w), f"{name}.conv.weight"))
        self.bias = self._register(Parameter(Tensor(np.zeros(out_c, dtype=dtype)), f"{name}.conv.bias"))

    def forward(self, x: Tensor) -> Tensor:
        h = T.group_norm(x, self.norm_groups, self.gamma.tensor, self.beta.tensor)
        h = T.relu(h)
        return T.conv2d(h, self.weight.tensor, self.bias.tensor,
                        stride=self.stride, padding=self.kernel // 2)

    __call__ = forward

    def zero_conv(self) -> None:
        self.weight.data[:] = 0
        self.bias.data[:] = 0


class PlainConv(Module):
    """Bare convolution with bias, no norm or activation (stem laterals)."""

    def __init__(self, name, in_c, out_c, kernel, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.name = name
        self.kernel, self.stride = kernel, stride
        w = T.kaiming_uniform(rng, (out_c, in_c, kernel, kernel), in_c * kernel * kernel, dtype)
        self.weight = self._register(Parameter(Tensor(w), f"{name}.weight"))
        self.bias = self._register(Parameter(Tensor(np.zeros(out_c, dtype=dtype)), f"{name}.bias"))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor,
                        stride=self.stride, padding=self.kernel // 2)

    __call__ = forward


class BottleneckBlock(Module):
    """Self-processing residual block: 1x1 reduce, 3x3, 1x1 expand."""

    def __init__(self, name, rng, feature_size=FEATURE_SIZE, hidden_size=HIDDEN_SIZE,
                 norm_groups=NORM_GROUPS, dtype=np.float32):
        super().__init__()
        self.name = name
        self.feature_size = feature_size
        self.reduce = self._child(ConvNode(f"{name}.reduce", feature_size, hidden_size, 1, rng,
                                           norm_groups=norm_groups, dtype=dtype))
        self.mid = self._child(ConvNode(f"{name}.mid", hidden_size, hidden_size, 3, rng,
                                        norm_groups=norm_groups, dtype=dtype))
        self.expand = self._child(ConvNode(f"{name}.expand", hidden_size, feature_size, 1, rng,
                                           norm_groups=norm_groups, dtype=dtype))

    def forward(self, p: Tensor) -> Tensor:
        if p.shape[1] != self.feature_size:
            raise T.ShapeError(f"{self.name}: expected {self.feature_size} channels, got {p.shape[1]}")
        return T.add(p, self.expand(self.mid(self.reduce(p))))

    __call__ = forward

    def zero_residual(self) -> None:
        self.expand.zero_conv()


class TopDownOp(Module):
    """Residual update of P_l from the lower-resolution P_{l+1}:
    1x1 projection, bilinear upsample to P_l's grid, add."""

    def __init__(self, name, rng, feature_size=FEATURE_SIZE, norm_groups=NORM_GROUPS,
                 dtype=np.float32):
        super().__init__()
        self.name = name
        self.feature_size = feature_size
        self.proj = self._child(ConvNode(f"{name}.proj", feature_size, feature_size, 1, rng,
                                         norm_groups=norm_groups, dtype=dtype))

    def forward(self, p_l: Tensor, p_lp1: Tensor) -> Tensor:
        if p_l.shape[1] != self.feature_size or p_lp1.shape[1] != self.feature_size:
            raise T.ShapeError(f"{self.name}: both inputs must have {self.feature_size} channels")
        residual = T.bilinear_resize(self.proj(p_lp1), p_l.shape[2], p_l.shape[3])
        return T.add(p_l, residual)

    __call__ = forward

    def zero_residual(self) -> None:
        self.proj.zero_conv()


class BottomUpOp(Module):
    """Residual update of P_l from the higher-resolution P_{l-1}; the 3x3
    node runs at stride 2, so no interpolation is needed."""

    def __init__(self, name, rng, feature_size=FEATURE_SIZE, hidden_size=HIDDEN_SIZE,
                 norm_groups=NORM_GROUPS, dtype=np.float32):
        super().__init__()
        self.name = name
        self.feature_size = feature_size
        self.reduce = self._child(ConvNode(f"{name}.reduce", feature_size, hidden_size, 1, rng,
                                           norm_groups=norm_groups, dtype=dtype))
        self.mid = self._child(ConvNode(f"{name}.mid", hidden_size, hidden_size, 3, rng, stride=2,
                                        norm_groups=norm_groups, dtype=dtype))
        self.expand = self._child(ConvNode(f"{name}.expand", hidden_size, feature_size, 1, rng,
                                           norm_groups=norm_groups, dtype=dtype))

    def forward(self, p_l: Tensor, p_lm1: Tensor) -> Tensor:
        residual = self.expand(self.mid(self.reduce(p_lm1)))
        if residual.shape[2:] != p_l.shape[2:]:
            raise T.ShapeError(
                f"{self.name}: stride-2 branch maps {p_lm1.shape[2:]} to {residual.shape[2:]}, "
                f"but the target is {p_l.shape[2:]}")
        return T.add(p_l, residual)

    __call__ = forward

    def zero_residual(self) -> None:
        self.expand.zero_conv()


class PyramidStem(Module):
    """Initial pyramid from backbone maps: 1x1 lateral projections give
    P3..P5, and two stride-2 convs on C5 (ReLU in between) give P6 and P7.
    P6 is the pre-ReLU output of the first extra conv."""

    def __init__(self, name, rng, in_channels, feature_size=FEATURE_SIZE, dtype=np.float32):
        super().__init__()
        self.name = name
        self.feature_size = feature_size
        self.in_channels = tuple(in_channels)
        c3, c4, c5 = self.in_channels
        self.lat3 = self._child(PlainConv(f"{name}.lat3", c3, feature_size, 1, rng, dtype=dtype))
        self.lat4 = self._child(PlainConv(f"{name}.lat4", c4, feature_size, 1, rng, dtype=dtype))
        self.lat5 = self._child(PlainConv(f"{name}.lat5", c5, feature_size, 1, rng, dtype=dtype))
        self.p6 = self._child(PlainConv(f"{name}.p6", c5, feature_size, 3, rng, stride=2, dtype=dtype))
        self.p7 = self._child(PlainConv(f"{name}.p7", feature_size, feature_size, 3, rng, stride=2, dtype=dtype))

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor) -> dict[int, Tensor]:
        for t, want in zip((c3, c4, c5), self.in_channels):
            if t.shape[1] != want:
                raise T.ShapeError(f"{self.name}: expected {want} channels, got {t.shape[1]}")
        p6 = self.p6(c5)
        return {
            3: self.lat3(c3),
            4: self.lat4(c4),
            5: self.lat5(c5),
            6: p6,
            7: self.p7(T.relu(p6)),
        }

    __call__ = forward


def conv_node_param_count(in_c: int, out_c: int, kernel: int) -> int:
    """Closed form: 2*in_c GN affine + out_c*in_c*k^2 weights + out_c bias."""
    return 2 * in_c + out_c * in_c * kernel * kernel + out_c


def bottleneck_param_count(feature_size=FEATURE_SIZE, hidden_size=HIDDEN_SIZE) -> int:
    return (conv_node_param_count(feature_size, hidden_size, 1)
            + conv_node_param_count(hidden_size, hidden_size, 3)
            + conv_node_param_count(hidden_size, feature_size, 1))


def top_down_param_count(feature_size=FEATURE_SIZE) -> int:
    return conv_node_param_count(feature_size, feature_size, 1)


def bottom_up_param_count(feature_size=FEATURE_SIZE, hidden_size=HIDDEN_SIZE) -> int:
    return bottleneck_param_count(feature_size, hidden_size)


def stem_param_count(in_channels, feature_size=FEATURE_SIZE) -> int:
    c3, c4, c5 = in_channels
    laterals = sum((c * feature_size + feature_size) for c in (c3, c4, c5))
    p6 = c5 * feature_size * 9 + feature_size
    p7 = feature_size * feature_size * 9 + feature_size
    return laterals + p6 + p7
