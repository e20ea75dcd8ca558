"""Compression encoder/decoder at the split point and the real<->complex mapping.

Encoder: Conv2x2/2 -> AvgPool2x2/2 -> GDN, emitting 2B reals per sample.
The reals are flattened channel-major then row-major; the first B become the
real parts and the last B the imaginary parts of the B channel symbols.
Decoder: TransConv2x2/2 -> IGDN -> nearest x2 -> Conv3x3 -> BN -> PReLU,
restoring the split-point feature shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gdn import GDN
from .layers import init_weights
from .pyramid import SplitPlan


class CodecConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    split_channels: int
    split_spatial: tuple[int, int]
    symbols: int  # B
    power: float = 1.0
    mid_factor: int = 4

    @classmethod
    def from_plan(cls, plan: SplitPlan, symbols: int, power: float = 1.0) -> "CodecConfig":
        return cls(plan.split_channels, plan.split_spatial, symbols, power)

    @property
    def area(self) -> int:
        return self.split_spatial[0] * self.split_spatial[1]

    @property
    def enc_channels(self) -> int:
        return 32 * self.symbols // self.area

    @property
    def mid_channels(self) -> int:
        return self.mid_factor * self.enc_channels

    @property
    def code_shape(self) -> tuple[int, int, int]:
        h, w = self.split_spatial
        return (self.enc_channels, h // 4, w // 4)

    def problems(self) -> list[str]:
        h, w = self.split_spatial
        out = []
        if h % 4 or w % 4:
            out.append(f"split spatial {h}x{w} must be divisible by 4")
        if self.symbols < 1 or (32 * self.symbols) % self.area or self.enc_channels < 1:
            allowed = admissible_symbols(self.split_spatial)
            out.append(f"B={self.symbols} needs 32*B divisible by {self.area} with 32*B >= {self.area}; "
                       f"admissible B: multiples of {allowed}")
        if not self.power > 0:
            out.append(f"power budget must be > 0, got {self.power}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise CodecConfigError("; ".join(problems))


def admissible_symbols(split_spatial: tuple[int, int]) -> int:
    """Smallest admissible B for a split shape; every admissible B is a multiple of it."""
    area = split_spatial[0] * split_spatial[1]
    step = area // np.gcd(area, 32)
    return int(step)


class CompressionEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.enc_channels
        self.conv = nn.Conv2d(cfg.split_channels, c, 2, stride=2, bias=True)
        self.pool = nn.AvgPool2d(2, 2)
        self.gdn = GDN(c)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Feature map (N, S, H, W) -> flat code (N, 2B)."""
        return self.gdn(self.pool(self.conv(x))).flatten(1)


class CompressionDecoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c, m = cfg.enc_channels, cfg.mid_channels
        self.deconv = nn.ConvTranspose2d(c, m, 2, stride=2, bias=True)
        self.igdn = GDN(m, inverse=True)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(m, cfg.split_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cfg.split_channels)
        self.act = nn.PReLU(cfg.split_channels, init=0.25)
        init_weights(self)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        """Flat code (N, 2B) -> feature map (N, S, H, W)."""
        x = code.reshape(code.shape[0], *self.cfg.code_shape)
        x = self.upsample(self.igdn(self.deconv(x)))
        return self.act(self.bn(self.conv(x)))


def build_encoder(cfg: CodecConfig, seed: int | None = None) -> CompressionEncoder:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return CompressionEncoder(cfg)


def build_decoder(cfg: CodecConfig, seed: int | None = None) -> CompressionDecoder:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return CompressionDecoder(cfg)


# --- symbol mapping ----------------------------------------------------------

@dataclass
class ComplexSymbolBlock:
    symbols: np.ndarray  # complex, shape (B,)
    power_budget: float = 1.0

    @property
    def num_symbols(self) -> int:
        return int(self.symbols.shape[-1])

    def mean_power(self) -> float:
        return float(np.mean(np.abs(self.symbols) ** 2))


def pack_complex(v: np.ndarray) -> np.ndarray:
    """2B reals -> B complex (first half real, second half imaginary). No scaling."""
    v = np.asarray(v)
    if v.shape[-1] % 2:
        raise ValueError(f"need an even number of reals, got {v.shape[-1]}")
    b = v.shape[-1] // 2
    dtype = np.complex64 if v.dtype == np.float32 else np.complex128
    z = np.empty(v.shape[:-1] + (b,), dtype=dtype)
    z.real = v[..., :b]
    z.imag = v[..., b:]
    return z


def complex_to_reals(block: ComplexSymbolBlock | np.ndarray) -> np.ndarray:
    z = block.symbols if isinstance(block, ComplexSymbolBlock) else np.asarray(block)
    return np.concatenate([z.real, z.imag], axis=-1)


def reals_to_complex_normalized(v: np.ndarray, power: float = 1.0) -> ComplexSymbolBlock:
    """Pack 2B reals into B symbols scaled to mean power exactly ``power``."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"expected a flat vector, got shape {v.shape}")
    norm = np.linalg.norm(v.astype(np.float64))
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("cannot normalize a zero or non-finite code vector")
    b = v.shape[0] // 2
    scaled = (v.astype(np.float64) * (np.sqrt(b * power) / norm)).astype(v.dtype if v.dtype.kind == "f" else np.float64)
    return ComplexSymbolBlock(pack_complex(scaled), power)


def normalize_power(code: torch.Tensor, power: float = 1.0) -> torch.Tensor:
    """Batched, differentiable: (N, 2B) reals -> (N, B) complex with mean power ``power``."""
    b = code.shape[1] // 2
    norm = torch.linalg.vector_norm(code, dim=1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot normalize a zero code vector")
    scaled = code * (torch.sqrt(torch.tensor(b * power, dtype=code.dtype)) / norm)
    return torch.complex(scaled[:, :b], scaled[:, b:])


def unpack_reals(z: torch.Tensor) -> torch.Tensor:
    return torch.cat([z.real, z.imag], dim=1)
