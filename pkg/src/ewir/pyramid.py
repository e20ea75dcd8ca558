"""SE-PyramidNet for 32x32 inputs and its device/server split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import nn
import torch.nn.functional as F

from .layers import GlobalAvgPool, init_weights

INITIAL_CHANNELS = 16
BASE_WIDTH = 18


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PyramidConfig:
    num_units: int = 54  # R, total bottleneck units over 3 groups
    widening: float = 120.0  # omega
    num_classes: int = 100
    input_size: int = 32
    se: bool = True

    def validate(self) -> None:
        problems = []
        if self.num_units < 3 or self.num_units % 3:
            problems.append(f"num_units must be a positive multiple of 3, got {self.num_units}")
        if not self.widening > 0:
            problems.append(f"widening must be > 0, got {self.widening}")
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size % 4:
            problems.append(f"input_size must be divisible by 4, got {self.input_size}")
        if problems:
            raise ConfigError("; ".join(problems))

    def stride_of(self, k: int) -> int:
        g = self.num_units // 3
        return 2 if k in (g + 1, 2 * g + 1) else 1

    def spatial_after(self, k: int) -> int:
        """Feature-map side length after unit ``k`` (0 = after the stem)."""
        size = self.input_size
        for j in range(1, k + 1):
            size = math.ceil(size / self.stride_of(j))
        return size


def fmd(k: int, num_units: int, widening: float) -> int:
    """Width of the 3x3 convolution in unit ``k``: floor(18 + widening*(k-1)/R)."""
    if not 1 <= k <= num_units:
        raise ValueError(f"unit index {k} outside [1, {num_units}]")
    w = Fraction(widening) if isinstance(widening, int) else Fraction(str(widening))
    return math.floor(BASE_WIDTH + w * (k - 1) / num_units)


def se_width(width: int) -> int:
    return max(1, width // 4)


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.pool = GlobalAvgPool()
        self.fc1 = nn.Linear(channels, reduced)
        self.relu = nn.ReLU()
        self.fc2 = nn.Linear(reduced, channels)
        self.gate = nn.Sigmoid()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.gate(self.fc2(self.relu(self.fc1(self.pool(x)))))
        return x * s[:, :, None, None]


class PyramidUnit(nn.Module):
    """Pyramidal bottleneck residual unit, optionally with an SE gate.

    BN -> 1x1 -> BN -> ReLU -> 3x3 -> BN -> ReLU -> 1x1 -> BN [-> SE], added to
    an identity shortcut that is average-pooled when strided and zero-padded
    up to the wider output.
    """

    def __init__(self, in_ch: int, width: int, stride: int = 1, se: bool = True):
        super().__init__()
        out_ch = 4 * width
        self.in_ch, self.width, self.out_ch, self.stride = in_ch, width, out_ch, stride
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn4 = nn.BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, se_width(width)) if se else None
        self.shortcut_pool = nn.AvgPool2d(2, 2, ceil_mode=True) if stride == 2 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(self.bn1(x))
        out = self.conv2(self.relu1(self.bn2(out)))
        out = self.conv3(self.relu2(self.bn3(out)))
        out = self.bn4(out)
        if self.se is not None:
            out = self.se(out)
        shortcut = x if self.shortcut_pool is None else self.shortcut_pool(x)
        if self.out_ch > self.in_ch:
            shortcut = F.pad(shortcut, (0, 0, 0, 0, 0, self.out_ch - self.in_ch))
        return out + shortcut


@dataclass(frozen=True)
class SplitPlan:
    split_index: int
    split_channels: int
    split_spatial: tuple[int, int]


class PyramidNet(nn.Module):
    """A contiguous slice of the SE-PyramidNet.

    ``role`` is ``full`` (stem + all units + head), ``front`` (stem + units
    1..s) or ``rest`` (units s+1..R + head). Slices produced by
    :func:`split_model` share modules with the graph they came from.
    """

    def __init__(self, config: PyramidConfig, stem: nn.Module | None, units: nn.ModuleList,
                 head: nn.Module | None, role: str = "full", first_unit: int = 1):
        super().__init__()
        self.config = config
        self.role = role
        self.first_unit = first_unit
        self.stem = stem
        self.units = units
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.stem is not None:
            x = self.stem(x)
        for unit in self.units:
            x = unit(x)
        if self.head is not None:
            x = self.head(x)
        return x


def build_model(config: PyramidConfig, seed: int | None = None) -> PyramidNet:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        stem = nn.Sequential(
            nn.Conv2d(3, INITIAL_CHANNELS, 3, padding=1, bias=False),
            nn.BatchNorm2d(INITIAL_CHANNELS),
        )
        units, in_ch = [], INITIAL_CHANNELS
        for k in range(1, config.num_units + 1):
            width = fmd(k, config.num_units, config.widening)
            units.append(PyramidUnit(in_ch, width, config.stride_of(k), se=config.se))
            in_ch = 4 * width
        head = nn.Sequential(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(),
            GlobalAvgPool(),
            nn.Linear(in_ch, config.num_classes),
        )
        model = PyramidNet(config, stem, nn.ModuleList(units), head)
        init_weights(model)
    return model


def split_plan(config: PyramidConfig, s: int) -> SplitPlan:
    if not 1 <= s <= config.num_units:
        raise ValueError(f"split index {s} outside [1, {config.num_units}]")
    side = config.spatial_after(s)
    return SplitPlan(s, 4 * fmd(s, config.num_units, config.widening), (side, side))


def split_model(model: PyramidNet, s: int) -> tuple[PyramidNet, PyramidNet, SplitPlan]:
    if model.role != "full":
        raise ValueError(f"can only split a full graph, got role {model.role!r}")
    plan = split_plan(model.config, s)
    front = PyramidNet(model.config, model.stem, model.units[:s], None, "front", 1)
    rest = PyramidNet(model.config, None, model.units[s:], model.head, "rest", s + 1)
    return front, rest, plan
