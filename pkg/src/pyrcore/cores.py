"""Core architectures: builders and a scheduler.

A core maps a feature pyramid to an updated feature pyramid of identical
shapes. Builders compile a CoreSpec into a CoreGraph: an ordered list of
stages, each holding steps that are either mutually independent
(self-processing, one chain per level) or a communication sweep. Sweeps
run sequentially by default, so a top-down step targeting level l reads
the already-updated level l+1; forcing parallel execution makes every
step of a stage read the stage-input snapshot instead.

Architectures:
  tpn    - per layer: sequential top-down sweep, B bottlenecks per level,
           sequential bottom-up sweep, B bottlenecks per level; L layers.
  fpn    - one top-down sweep.
  panet  - per layer: top-down sweep then bottom-up sweep.
  bifpn  - EfficientDet-style two-pathway layer with fast-normalized
           weighted fusion; group norm + ReLU conv nodes, bilinear
           resampling in both directions, dense 1x1 post-fusion convs.
  bfpn   - B bottlenecks per level, then one top-down sweep.
  hfpn   - one top-down sweep, then B bottlenecks per level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks as bl
from . import tensor as T
from .blocks import Module
from .tensor import Parameter, Tensor

CORE_KINDS = ("tpn", "fpn", "panet", "bifpn", "bfpn", "hfpn")
DEFAULT_LEVELS = (3, 7)
FUSION_EPS = 1e-4


@dataclass(frozen=True)
class CoreSpec:
    """Declarative description of a core architecture."""

    kind: str
    L: int = 1
    B: int = 1
    levels: tuple[int, int] = DEFAULT_LEVELS
    feature_size: int = bl.FEATURE_SIZE
    hidden_size: int = bl.HIDDEN_SIZE
    norm_groups: int = bl.NORM_GROUPS

    def __post_init__(self):
        if self.kind not in CORE_KINDS:
            raise ValueError(f"unknown core kind {self.kind!r}; expected one of {CORE_KINDS}")
        if self.L < 1:
            raise ValueError("core layer count L must be >= 1")
        if self.B < 1:
            raise ValueError("bottleneck count B must be >= 1")
        lo, hi = self.levels
        if hi - lo + 1 < 2:
            raise ValueError("level range must span at least 2 levels")

    @property
    def level_list(self) -> list[int]:
        lo, hi = self.levels
        return list(range(lo, hi + 1))

    @classmethod
    def from_dict(cls, d: dict) -> "CoreSpec":
        known = {"kind", "L", "B", "levels", "feature_size", "hidden_size", "norm_groups"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown core config keys: {sorted(extra)}")
        kw = dict(d)
        if "levels" in kw:
            kw["levels"] = tuple(kw["levels"])
        return cls(**kw)


@dataclass
class Step:
    """One schedule entry: update ``level`` from ``sources`` through a
    chain of blocks (one block for communication ops, B for a chain)."""

    kind: str                      # "td" | "bu" | "sp" | "fuse"
    level: int
    sources: tuple[int, ...]
    block_ids: tuple[str, ...]


@dataclass
class Stage:
    kind: str                      # "top_down" | "bottom_up" | "self" | "bifpn_td" | "bifpn_out"
    sequential: bool
    steps: list[Step] = field(default_factory=list)


class WeightedFusion(Module):
    """Fast-normalized weighted sum: w_i' = relu(w_i) / (sum relu(w_j) + eps).

    Inputs must share one shape; the fusion weights are learned scalars
    initialized to 1.
    """

    def __init__(self, name, n_inputs, rng, eps=FUSION_EPS, dtype=np.float32):
        super().__init__()
        self.name = name
        self.n_inputs = n_inputs
        self.eps = eps
        self.w = self._register(Parameter(Tensor(np.ones(n_inputs, dtype=dtype)), f"{name}.w"))

    def forward(self, xs: list[Tensor]) -> Tensor:
        if len(xs) != self.n_inputs:
            raise T.ShapeError(f"{self.name}: expected {self.n_inputs} inputs, got {len(xs)}")
        for x in xs[1:]:
            if x.shape != xs[0].shape:
                raise T.ShapeError(f"{self.name}: input shapes differ")
        w = self.w.tensor
        r = np.maximum(w.data, 0)
        s = r.sum() + w.data.dtype.type(self.eps)
        coef = r / s
        out_data = coef[0] * xs[0].data
        for i in range(1, len(xs)):
            out_data = out_data + coef[i] * xs[i].data

        def backward(g):
            for i, x in enumerate(xs):
                if x.requires_grad:
                    x.accumulate_grad(coef[i] * g)
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                active = w.data > 0
                for i in range(len(xs)):
                    # d out / d r_i = (x_i - out) / s
                    gw[i] = float((g * (xs[i].data - out_data)).sum()) / s
                w.accumulate_grad(np.where(active, gw, 0.0))

        return T._result(out_data, tuple(xs) + (w,), backward, "weighted_fusion")

    __call__ = forward


class FusionConvNode(Module):
    """BiFPN node: resize sources to the target grid, fuse, then a conv node."""

    def __init__(self, name, n_inputs, rng, feature_size, norm_groups, kernel=1,
                 dtype=np.float32):
        super().__init__()
        self.name = name
        self.fuse = self._child(WeightedFusion(f"{name}.fuse", n_inputs, rng, dtype=dtype))
        self.conv = self._child(bl.ConvNode(f"{name}.conv", feature_size, feature_size,
                                           kernel, rng, norm_groups=norm_groups, dtype=dtype))

    def forward(self, target_hw, xs: list[Tensor]) -> Tensor:
        resized = [T.bilinear_resize(x, *target_hw) for x in xs]
        return self.conv(self.fuse(resized))

    __call__ = forward


class CoreGraph:
    """Compiled core: blocks plus an ordered stage schedule."""

    def __init__(self, spec: CoreSpec, stages: list[Stage], graph_blocks: dict[str, Module]):
        self.spec = spec
        self.stages = stages
        self.blocks = graph_blocks

    @property
    def kind(self) -> str:
        return self.spec.kind

    def parameters(self) -> list[Parameter]:
        out = []
        for bid in self.blocks:
            out.extend(self.blocks[bid].parameters())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_residual_convs(self) -> None:
        """Zero the final conv of every residual branch, making the whole
        core the identity map (not applicable to bifpn)."""
        if self.spec.kind == "bifpn":
            raise ValueError("bifpn has no residual structure to zero")
        for blk in self.blocks.values():
            blk.zero_residual()

    def block_applications(self) -> int:
        return sum(len(step.block_ids) for stage in self.stages for step in stage.steps)

    def describe(self) -> list[tuple[str, str, int, tuple[int, ...], str, str]]:
        """Flat listing: (stage kind, op kind, level, sources, block id,
        parameter shapes) with one row per block application."""
        rows = []
        for stage in self.stages:
            for step in stage.steps:
                for bid in step.block_ids:
                    shapes = ",".join(
                        "x".join(str(d) for d in p.data.shape)
                        for p in self.blocks[bid].parameters())
                    rows.append((stage.kind, step.kind, step.level, step.sources, bid, shapes))
        return rows


def _check_pyramid(spec: CoreSpec, pyr: dict[int, Tensor]) -> None:
    for l in spec.level_list:
        if l not in pyr:
            raise T.ShapeError(f"pyramid missing level {l}")
        if pyr[l].shape[1] != spec.feature_size:
            raise T.ShapeError(
                f"level {l} has {pyr[l].shape[1]} channels, core expects {spec.feature_size}")


def run_core(graph: CoreGraph, pyr: dict[int, Tensor],
             sequential: bool | None = None,
             n_stages: int | None = None) -> dict[int, Tensor]:
    """Execute the schedule. ``sequential=None`` keeps each stage's own
    mode; True/False overrides every communication stage (parallel probe).
    ``n_stages`` truncates execution to the first n stages (probing).

    Negative keys hold a bifpn layer's intermediate top-down maps; they are
    stripped from the returned pyramid.
    """
    _check_pyramid(graph.spec, pyr)
    if sequential is False and graph.spec.kind == "bifpn":
        raise ValueError("bifpn fusion steps consume within-stage intermediates; "
                         "parallel execution is undefined for it")
    cur: dict[int, Tensor] = dict(pyr)
    stages = graph.stages if n_stages is None else graph.stages[:n_stages]
    for stage in stages:
        seq = stage.sequential if sequential is None else sequential
        src = cur if seq else dict(cur)
        for step in stage.steps:
            blocks = [graph.blocks[bid] for bid in step.block_ids]
            if step.kind == "sp":
                x = src[step.level]
                for blk in blocks:
                    x = blk(x)
                cur[step.level] = x
            elif step.kind in ("td", "bu"):
                cur[step.level] = blocks[0](src[step.level], src[step.sources[0]])
            elif step.kind == "fuse":
                target_hw = src[abs(step.level)].shape[2:]
                xs = [src[s] for s in step.sources]
                cur[step.level] = blocks[0](target_hw, xs)
            else:
                raise ValueError(f"unknown step kind {step.kind}")
    return {l: cur[l] for l in graph.spec.level_list}


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _td_stage(spec, rng, graph_blocks, prefix, dtype) -> Stage:
    """Sequential top-down sweep: update P6 from P7, ... down to P3."""
    stage = Stage("top_down", sequential=True)
    levels = spec.level_list
    for l in reversed(levels[:-1]):
        bid = f"{prefix}.td{l}"
        graph_blocks[bid] = bl.TopDownOp(bid, rng, spec.feature_size,
                                         norm_groups=spec.norm_groups, dtype=dtype)
        stage.steps.append(Step("td", l, (l + 1,), (bid,)))
    return stage


def _bu_stage(spec, rng, graph_blocks, prefix, dtype) -> Stage:
    """Sequential bottom-up sweep: update P4 from P3, ... up to P7."""
    stage = Stage("bottom_up", sequential=True)
    levels = spec.level_list
    for l in levels[1:]:
        bid = f"{prefix}.bu{l}"
        graph_blocks[bid] = bl.BottomUpOp(bid, rng, spec.feature_size, spec.hidden_size,
                                          norm_groups=spec.norm_groups, dtype=dtype)
        stage.steps.append(Step("bu", l, (l - 1,), (bid,)))
    return stage


def _sp_stage(spec, rng, graph_blocks, prefix, dtype) -> Stage:
    """Parallel self-processing: a chain of B bottlenecks per level."""
    stage = Stage("self", sequential=False)
    for l in spec.level_list:
        bids = []
        for b in range(spec.B):
            bid = f"{prefix}.sp{l}.b{b}"
            graph_blocks[bid] = bl.BottleneckBlock(bid, rng, spec.feature_size,
                                                   spec.hidden_size,
                                                   norm_groups=spec.norm_groups, dtype=dtype)
            bids.append(bid)
        stage.steps.append(Step("sp", l, (l,), tuple(bids)))
    return stage


def _build_tpn(spec, rng, dtype):
    graph_blocks: dict[str, Module] = {}
    stages = []
    for layer in range(spec.L):
        prefix = f"layer{layer}"
        stages.append(_td_stage(spec, rng, graph_blocks, prefix, dtype))
        stages.append(_sp_stage(spec, rng, graph_blocks, f"{prefix}.spA", dtype))
        stages.append(_bu_stage(spec, rng, graph_blocks, prefix, dtype))
        stages.append(_sp_stage(spec, rng, graph_blocks, f"{prefix}.spB", dtype))
    return CoreGraph(spec, stages, graph_blocks)


def _build_fpn(spec, rng, dtype):
    graph_blocks: dict[str, Module] = {}
    stages = [_td_stage(spec, rng, graph_blocks, "layer0", dtype)]
    return CoreGraph(spec, stages, graph_blocks)


def _build_panet(spec, rng, dtype):
    graph_blocks: dict[str, Module] = {}
    stages = []
    for layer in range(spec.L):
        prefix = f"layer{layer}"
        stages.append(_td_stage(spec, rng, graph_blocks, prefix, dtype))
        stages.append(_bu_stage(spec, rng, graph_blocks, prefix, dtype))
    return CoreGraph(spec, stages, graph_blocks)


def _build_bfpn(spec, rng, dtype):
    graph_blocks: dict[str, Module] = {}
    stages = [_sp_stage(spec, rng, graph_blocks, "stack", dtype),
              _td_stage(spec, rng, graph_blocks, "layer0", dtype)]
    return CoreGraph(spec, stages, graph_blocks)


def _build_hfpn(spec, rng, dtype):
    graph_blocks: dict[str, Module] = {}
    stages = [_td_stage(spec, rng, graph_blocks, "layer0", dtype),
              _sp_stage(spec, rng, graph_blocks, "stack", dtype)]
    return CoreGraph(spec, stages, graph_blocks)


def _build_bifpn(spec, rng, dtype):
    """One variant of the EfficientDet layer topology.

    Top-down pathway produces intermediate maps for the interior levels
    and the output for the lowest level; the bottom-up pathway fuses the
    layer input, the intermediate map and the downsampled lower output.
    Negative source ids address intermediate maps (stored at -level).
    """
    graph_blocks: dict[str, Module] = {}
    stages = []
    levels = spec.level_list
    lo, hi = levels[0], levels[-1]
    for layer in range(spec.L):
        prefix = f"layer{layer}"
        td = Stage("bifpn_td", sequential=True)
        for l in range(hi - 1, lo - 1, -1):
            bid = f"{prefix}.td{l}"
            graph_blocks[bid] = FusionConvNode(bid, 2, rng, spec.feature_size,
                                               spec.norm_groups, dtype=dtype)
            above = l + 1 if l == hi - 1 else -(l + 1)
            target = l if l == lo else -l
            td.steps.append(Step("fuse", target, (l, above), (bid,)))
        stages.append(td)
        out = Stage("bifpn_out", sequential=True)
        for l in range(lo + 1, hi + 1):
            bid = f"{prefix}.out{l}"
            n_in = 2 if l == hi else 3
            graph_blocks[bid] = FusionConvNode(bid, n_in, rng, spec.feature_size,
                                               spec.norm_groups, dtype=dtype)
            sources = (l, l - 1) if l == hi else (l, -l, l - 1)
            out.steps.append(Step("fuse", l, sources, (bid,)))
        stages.append(out)
    return CoreGraph(spec, stages, graph_blocks)


_BUILDERS = {
    "tpn": _build_tpn,
    "fpn": _build_fpn,
    "panet": _build_panet,
    "bifpn": _build_bifpn,
    "bfpn": _build_bfpn,
    "hfpn": _build_hfpn,
}


def build_core(spec: CoreSpec, rng: np.random.Generator, dtype=np.float32) -> CoreGraph:
    return _BUILDERS[spec.kind](spec, rng, dtype)


def build_tpn(L, B_, levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE,
              hidden_size=bl.HIDDEN_SIZE, rng=None, dtype=np.float32, norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("tpn", L=L, B=B_, levels=levels, feature_size=feature_size,
                    hidden_size=hidden_size, norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


def build_fpn(levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE, rng=None,
              dtype=np.float32, norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("fpn", levels=levels, feature_size=feature_size, norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


def build_panet(L, levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE,
                hidden_size=bl.HIDDEN_SIZE, rng=None, dtype=np.float32,
                norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("panet", L=L, levels=levels, feature_size=feature_size,
                    hidden_size=hidden_size, norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


def build_bifpn(L, levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE, rng=None,
                dtype=np.float32, norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("bifpn", L=L, levels=levels, feature_size=feature_size,
                    norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


def build_bfpn(B_, levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE,
               hidden_size=bl.HIDDEN_SIZE, rng=None, dtype=np.float32,
               norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("bfpn", B=B_, levels=levels, feature_size=feature_size,
                    hidden_size=hidden_size, norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


def build_hfpn(B_, levels=DEFAULT_LEVELS, feature_size=bl.FEATURE_SIZE,
               hidden_size=bl.HIDDEN_SIZE, rng=None, dtype=np.float32,
               norm_groups=bl.NORM_GROUPS):
    spec = CoreSpec("hfpn", B=B_, levels=levels, feature_size=feature_size,
                    hidden_size=hidden_size, norm_groups=norm_groups)
    return build_core(spec, rng or np.random.default_rng(0), dtype)


# ---------------------------------------------------------------------------
# closed-form parameter counts
# ---------------------------------------------------------------------------

def core_param_count(spec: CoreSpec) -> int:
    """Analytic parameter total for a core; enumeration must match exactly."""
    n_levels = len(spec.level_list)
    n_pairs = n_levels - 1
    td = bl.top_down_param_count(spec.feature_size)
    bu = bl.bottom_up_param_count(spec.feature_size, spec.hidden_size)
    bn = bl.bottleneck_param_count(spec.feature_size, spec.hidden_size)
    if spec.kind == "tpn":
        return spec.L * (n_pairs * td + n_pairs * bu + 2 * n_levels * spec.B * bn)
    if spec.kind == "fpn":
        return n_pairs * td
    if spec.kind == "panet":
        return spec.L * (n_pairs * td + n_pairs * bu)
    if spec.kind in ("bfpn", "hfpn"):
        return n_levels * spec.B * bn + n_pairs * td
    if spec.kind == "bifpn":
        node = bl.conv_node_param_count(spec.feature_size, spec.feature_size, 1)
        # fusion weights: 2 per td node, 3 per interior out node, 2 at the top
        weights = 2 * n_pairs + 3 * (n_pairs - 1) + 2
        return spec.L * (2 * n_pairs * node + weights)
    raise ValueError(spec.kind)
