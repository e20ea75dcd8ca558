"""Block-fading channel: zhat = h*z + n, with perfect-CSI equalization.

One coefficient ``h`` is shared by all B symbols of a transmitted block.
Rayleigh fading draws h ~ CN(0, gain_var); AWGN fixes h = 1. Noise is
n ~ CN(0, noise_var * I) with noise_var = P * gain_var * 10**(-snr_db/10).

Every realization comes from its own seeded stream, keyed by a tuple such as
(stage, epoch, batch, sample), so draws do not depend on batching or order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .codec import ComplexSymbolBlock

SINGULAR_GAIN = 1e-12


class SingularChannelError(ValueError):
    """|h| too small to equalize; the block is dropped."""


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "rayleigh"
    snr_db: float = 15.0
    power: float = 1.0
    gain_var: float = 1.0
    seed: int = 0
    granularity: str = "sample"  # fresh h per sample, or one per batch

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("rayleigh", "awgn"):
            out.append(f"channel kind must be rayleigh or awgn, got {self.kind!r}")
        if not self.power > 0:
            out.append(f"power must be > 0, got {self.power}")
        if not self.gain_var > 0:
            out.append(f"gain variance must be > 0, got {self.gain_var}")
        if self.granularity not in ("sample", "batch"):
            out.append(f"granularity must be sample or batch, got {self.granularity!r}")
        if math.isnan(self.snr_db):
            out.append("snr_db is NaN")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def noise_var(self) -> float:
        return noise_variance_from_snr(self.snr_db, self.power, self.gain_var)


@dataclass
class ChannelRealization:
    h: complex
    noise_var: float
    noise: np.ndarray  # complex128, shape (B,)


def noise_variance_from_snr(snr_db: float, power: float = 1.0, gain_var: float = 1.0) -> float:
    if not (power > 0 and gain_var > 0):
        raise ValueError("power and gain variance must be positive")
    if snr_db == math.inf:
        return 0.0
    return power * gain_var * 10.0 ** (-snr_db / 10.0)


def stream_rng(seed: int, key: int | Sequence[int]) -> np.random.Generator:
    key = (key,) if isinstance(key, (int, np.integer)) else tuple(key)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def sample_realization(cfg: ChannelConfig, stream_index: int | Sequence[int],
                       num_symbols: int) -> ChannelRealization:
    rng = stream_rng(cfg.seed, stream_index)
    # h is always drawn first so noise draws coincide across channel kinds
    hr, hi = rng.standard_normal(2)
    h = complex(hr, hi) * math.sqrt(cfg.gain_var / 2) if cfg.kind == "rayleigh" else 1 + 0j
    var = cfg.noise_var
    n = rng.standard_normal((2, num_symbols)) * math.sqrt(var / 2)
    return ChannelRealization(h, var, n[0] + 1j * n[1])


def fade(z, h, n):
    """zhat = h*z + n for numpy arrays or torch tensors."""
    return h * z + n


def equalize_symbols(zhat, h):
    """z~ = conj(h)/|h|^2 * zhat for numpy arrays or torch tensors."""
    mag2 = h.real * h.real + h.imag * h.imag
    if isinstance(h, torch.Tensor):
        if bool((mag2 < SINGULAR_GAIN ** 2).any()):
            raise SingularChannelError(f"|h| below {SINGULAR_GAIN}")
        return h.conj() / mag2 * zhat
    if np.any(mag2 < SINGULAR_GAIN ** 2):
        raise SingularChannelError(f"|h| below {SINGULAR_GAIN}")
    return np.conj(h) / mag2 * zhat


def apply_channel(block: ComplexSymbolBlock, realization: ChannelRealization) -> ComplexSymbolBlock:
    if realization.noise.shape[-1] != block.num_symbols:
        raise ValueError(f"noise has {realization.noise.shape[-1]} symbols, block has {block.num_symbols}")
    return ComplexSymbolBlock(fade(block.symbols, realization.h, realization.noise), block.power_budget)


def equalize(block: ComplexSymbolBlock, h: complex) -> ComplexSymbolBlock:
    return ComplexSymbolBlock(equalize_symbols(block.symbols, np.complex128(h)), block.power_budget)


class FadingChannel(nn.Module):
    """Differentiable batch channel + equalizer on (N, B) complex tensors.

    ``keys`` gives one stream key per sample. With ``granularity='batch'`` the
    first key seeds a single h shared by the batch.
    """

    def __init__(self, cfg: ChannelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg

    def draw(self, keys: Sequence[Sequence[int]], num_symbols: int) -> tuple[np.ndarray, np.ndarray]:
        hs = np.empty(len(keys), dtype=np.complex128)
        ns = np.empty((len(keys), num_symbols), dtype=np.complex128)
        shared = None
        if self.cfg.granularity == "batch":
            shared = sample_realization(self.cfg, keys[0], 0).h
        for i, key in enumerate(keys):
            r = sample_realization(self.cfg, key, num_symbols)
            hs[i] = r.h if shared is None else shared
            ns[i] = r.noise
        return hs, ns

    def forward(self, z: torch.Tensor, keys: Sequence[Sequence[int]]) -> torch.Tensor:
        if len(keys) != z.shape[0]:
            raise ValueError(f"{len(keys)} stream keys for a batch of {z.shape[0]}")
        hs, ns = self.draw(keys, z.shape[1])
        h = torch.from_numpy(hs).to(z.dtype).unsqueeze(1)
        n = torch.from_numpy(ns).to(z.dtype)
        return equalize_symbols(fade(z, h, n), h)
