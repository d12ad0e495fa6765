"""Staged residual-network descriptors, compression actions, analytic cost and
materialization into trainable PyTorch classifiers."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_WIDTH = 8
WIDTH_MULTIPLE = 4
INPUT_CHANNELS = 3

_WRN_PATTERN = re.compile(r"^WRN-(\d+)-(\d+)$")


@dataclass(frozen=True)
class StageDescriptor:
    depth: int
    width: int
    downsample: bool = False
    robust_block: bool = False

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError(f"stage depth must be a positive integer, got {self.depth!r}")
        if int(self.width) != self.width or self.width < MIN_WIDTH:
            raise ValueError(f"stage width must be an integer >= {MIN_WIDTH}, got {self.width!r}")
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "downsample", bool(self.downsample))
        object.__setattr__(self, "robust_block", bool(self.robust_block))

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "downsample": self.downsample,
            "robust_block": self.robust_block,
        }


@dataclass(frozen=True)
class NetworkDescriptor:
    """Immutable description of a stem -> stages -> pooling -> linear head network."""

    stages: tuple[StageDescriptor, ...]
    stem_width: int = 16
    num_classes: int = 10
    input_resolution: int = 32

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a network needs at least one stage")
        if stages[0].downsample:
            raise ValueError("the first stage cannot downsample")
        if self.stem_width < 1 or self.num_classes < 1 or self.input_resolution < 1:
            raise ValueError("stem_width, num_classes and input_resolution must be positive")
        object.__setattr__(self, "stages", stages)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "stem_width": self.stem_width,
            "num_classes": self.num_classes,
            "input_resolution": self.input_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkDescriptor":
        return cls(
            stages=tuple(StageDescriptor(**s) for s in d["stages"]),
            stem_width=int(d.get("stem_width", 16)),
            num_classes=int(d["num_classes"]),
            input_resolution=int(d["input_resolution"]),
        )

    def to_json(self) -> str:
        # key order is fixed by to_dict; no floats, so the text is bit-stable
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkDescriptor":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_head(self, num_classes: int | None = None, input_resolution: int | None = None):
        return replace(
            self,
            num_classes=self.num_classes if num_classes is None else num_classes,
            input_resolution=self.input_resolution if input_resolution is None else input_resolution,
        )


@dataclass(frozen=True)
class StageAction:
    width_keep: float
    depth_keep: float
    downsample: bool
    robust_block: bool

    def __post_init__(self):
        for name in ("width_keep", "depth_keep"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0) or math.isnan(v):
                raise ValueError(f"{name} must lie in (0, 1], got {v!r}")

    def to_dict(self) -> dict:
        return {
            "width_keep": float(self.width_keep),
            "depth_keep": float(self.depth_keep),
            "downsample": bool(self.downsample),
            "robust_block": bool(self.robust_block),
        }


@dataclass(frozen=True)
class CompressionAction:
    per_stage: tuple[StageAction, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_stage", tuple(self.per_stage))

    @classmethod
    def identity(cls, desc: NetworkDescriptor) -> "CompressionAction":
        return cls(tuple(StageAction(1.0, 1.0, s.downsample, s.robust_block) for s in desc.stages))

    @classmethod
    def uniform(cls, desc: NetworkDescriptor, width_keep: float, depth_keep: float):
        return cls(
            tuple(StageAction(width_keep, depth_keep, s.downsample, s.robust_block) for s in desc.stages)
        )

    def to_dict(self) -> dict:
        return {"per_stage": [a.to_dict() for a in self.per_stage]}


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    per_stage_flops: tuple[int, ...]
    per_stage_params: tuple[int, ...] = ()
    stem_flops: int = 0
    head_flops: int = 0

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def round_width(x: float) -> int:
    return max(MIN_WIDTH, WIDTH_MULTIPLE * _round_half_up(x / WIDTH_MULTIPLE))


def teacher_from_name(name: str, num_classes: int = 10, input_resolution: int = 32) -> NetworkDescriptor:
    """Build a WRN-d-k teacher: three stages of (d-4)/6 blocks, widths (16k, 32k, 64k)."""
    m = _WRN_PATTERN.match(name.strip()) if isinstance(name, str) else None
    if m is None:
        raise ValueError(f"unknown teacher {name!r}: expected the pattern WRN-<depth>-<widen>")
    d, k = int(m.group(1)), int(m.group(2))
    if d < 10 or (d - 4) % 6 != 0 or k < 1:
        raise ValueError(f"malformed teacher {name!r}: depth-4 must be a positive multiple of 6")
    n = (d - 4) // 6
    widths = (16 * k, 32 * k, 64 * k)
    stages = tuple(
        StageDescriptor(depth=n, width=w, downsample=i > 0, robust_block=False)
        for i, w in enumerate(widths)
    )
    return NetworkDescriptor(stages, stem_width=16, num_classes=num_classes, input_resolution=input_resolution)


def analog_teacher(name: str, width_divisor: int, num_classes: int = 10, input_resolution: int = 8):
    """Desk-scale stand-in for a registered teacher: same depths, widths divided."""
    t = teacher_from_name(name, num_classes, input_resolution)
    stages = tuple(replace(s, width=round_width(s.width / width_divisor)) for s in t.stages)
    return replace(t, stages=stages)


def apply_action(teacher: NetworkDescriptor, action: CompressionAction) -> NetworkDescriptor:
    if len(action.per_stage) != teacher.n_stages:
        raise ValueError(
            f"action has {len(action.per_stage)} stages, teacher has {teacher.n_stages}"
        )
    stages = []
    for i, (s, a) in enumerate(zip(teacher.stages, action.per_stage)):
        if not (0.0 < a.width_keep <= 1.0 and 0.0 < a.depth_keep <= 1.0):
            raise ValueError(f"stage {i}: keep fractions must lie in (0, 1]")
        stages.append(
            StageDescriptor(
                depth=max(1, _round_half_up(a.depth_keep * s.depth)),
                width=round_width(a.width_keep * s.width),
                downsample=bool(a.downsample) and i > 0,
                robust_block=bool(a.robust_block),
            )
        )
    return replace(teacher, stages=tuple(stages))


def _downsampled(h: int) -> int:
    # 3x3/pad 1 and 1x1/pad 0 convolutions with stride 2 both give ceil(h/2)
    return (h + 1) // 2


def cost_model(desc: NetworkDescriptor, resolution: int | None = None) -> CostReport:
    """Parameters and multiply-accumulates of one forward pass.

    Batch-norm affine terms and the head bias count as parameters but not as MACs.
    """
    h = desc.input_resolution if resolution is None else resolution
    if h < 8:
        raise ValueError(f"resolution must be >= 8, got {h}")
    c = desc.stem_width
    stem_params = INPUT_CHANNELS * c * 9
    stem_flops = h * h * INPUT_CHANNELS * c * 9
    stage_flops, stage_params = [], []
    for s in desc.stages:
        p = f = 0
        for b in range(s.depth):
            stride = 2 if (b == 0 and s.downsample) else 1
            h_out = _downsampled(h) if stride == 2 else h
            p += 2 * c  # pre-activation norm on the block input
            p += 9 * c * s.width
            f += h_out * h_out * 9 * c * s.width
            p += 2 * s.width
            p += 9 * s.width * s.width
            f += h_out * h_out * 9 * s.width * s.width
            if c != s.width or stride != 1:
                p += c * s.width
                f += h_out * h_out * c * s.width
            c, h = s.width, h_out
        stage_params.append(p)
        stage_flops.append(f)
    head_params = 2 * c + c * desc.num_classes + desc.num_classes
    head_flops = c * desc.num_classes
    return CostReport(
        params=stem_params + sum(stage_params) + head_params,
        flops=stem_flops + sum(stage_flops) + head_flops,
        per_stage_flops=tuple(stage_flops),
        per_stage_params=tuple(stage_params),
        stem_flops=stem_flops,
        head_flops=head_flops,
    )


class PreActBlock(nn.Module):
    """BN-act-conv-BN-act-conv with an identity or 1x1 projection shortcut."""

    def __init__(self, in_planes, planes, stride=1, activation: Callable[[], nn.Module] = nn.ReLU):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.act1 = activation()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.act2 = activation()
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = self.act1(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(self.act2(self.bn2(out)))
        return out + shortcut


BLOCK_REGISTRY: dict[str, Callable[..., nn.Module]] = {
    "preact": PreActBlock,
    "preact-silu": lambda i, o, stride=1: PreActBlock(i, o, stride, activation=nn.SiLU),
}
DEFAULT_ROBUST_BLOCK = "preact-silu"


def register_block(name: str, factory: Callable[..., nn.Module]) -> None:
    """factory(in_planes, planes, stride) -> nn.Module; must keep the pre-activation layout
    if parameter counts are to match the cost model."""
    BLOCK_REGISTRY[name] = factory


class StagedResNet(nn.Module):
    def __init__(self, desc: NetworkDescriptor, robust_block: str = DEFAULT_ROBUST_BLOCK):
        super().__init__()
        self.descriptor = desc
        self.conv1 = nn.Conv2d(INPUT_CHANNELS, desc.stem_width, 3, stride=1, padding=1, bias=False)
        layers = []
        c = desc.stem_width
        for s in desc.stages:
            block = BLOCK_REGISTRY[robust_block if s.robust_block else "preact"]
            blocks = []
            for b in range(s.depth):
                stride = 2 if (b == 0 and s.downsample) else 1
                blocks.append(block(c, s.width, stride=stride))
                c = s.width
            layers.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*layers)
        self.bn = nn.BatchNorm2d(c)
        self.fc = nn.Linear(c, desc.num_classes)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.zeros_(m.bias)

    def forward(self, x):
        out = self.stages(self.conv1(x))
        out = F.relu(self.bn(out))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.fc(out)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def materialize(desc: NetworkDescriptor, seed: int = 0, robust_block: str = DEFAULT_ROBUST_BLOCK) -> StagedResNet:
    h = desc.input_resolution
    for i, s in enumerate(desc.stages):
        if s.downsample:
            if h <= 1:
                raise ValueError(f"stage {i} downsamples a 1x1 feature map")
            h = _downsampled(h)
    if robust_block not in BLOCK_REGISTRY:
        raise KeyError(f"unknown block variant {robust_block!r}; registered: {sorted(BLOCK_REGISTRY)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return StagedResNet(desc, robust_block)


def parse_descriptor(spec: str, **head) -> NetworkDescriptor:
    """A teacher name (WRN-d-k), a narrowed analog (WRN-d-k/<divisor>) or a descriptor JSON path."""
    if _WRN_PATTERN.match(spec):
        return teacher_from_name(spec, **head)
    name, _, div = spec.partition("/")
    if _WRN_PATTERN.match(name) and div.isdigit():
        return analog_teacher(name, int(div), **head)
    with open(spec) as fh:
        return NetworkDescriptor.from_json(fh.read())


def stage_remaining(student: CostReport, teacher: CostReport) -> list[float]:
    return [s / t for s, t in zip(student.per_stage_flops, teacher.per_stage_flops)]

