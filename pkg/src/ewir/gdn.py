"""Generalized divisive normalization and its inverse-form counterpart.

Per spatial location, with channels indexed by ``i`` and ``j``::

    gdn:   y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)
    igdn:  y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j**2)

The normalization never couples spatial positions. ``igdn`` uses its own input
in the pool, so it is the usual one-step approximate inverse, not an exact one.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

BETA_MIN = 1e-6
# Off-diagonal gamma starts at this value instead of 0 so the squared
# reparameterization does not pin it at a zero-gradient point.
_GAMMA_FLOOR = 2.0 ** -36


def _pool(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ValueError(
            f"GDN parameters sized for {beta.shape[0]} channels, input has {c} (shape {tuple(x.shape)})")
    return torch.sqrt(F.conv2d(x * x, gamma.view(c, c, 1, 1), beta))


def gdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    return x / _pool(x, beta, gamma)


def igdn(x: torch.Tensor, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    return x * _pool(x, beta, gamma)


class GDN(nn.Module):
    """GDN layer (or IGDN with ``inverse=True``) with trainable beta and gamma.

    Stored parameters are square roots: ``beta = raw_beta**2 + BETA_MIN`` and
    ``gamma = raw_gamma**2``, which keeps both nonnegative without projection.
    Initialized to beta = 1, gamma = 0.1 * I.
    """

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = BETA_MIN):
        super().__init__()
        self.channels = channels
        self.inverse = inverse
        self.beta_min = beta_min
        self.raw_beta = nn.Parameter(torch.full((channels,), (1.0 - beta_min) ** 0.5))
        self.raw_gamma = nn.Parameter(torch.sqrt(0.1 * torch.eye(channels) + _GAMMA_FLOOR))

    @classmethod
    def from_values(cls, beta, gamma, inverse: bool = False) -> "GDN":
        beta = torch.as_tensor(beta, dtype=torch.float32)
        gamma = torch.as_tensor(gamma, dtype=torch.float32)
        layer = cls(beta.shape[0], inverse=inverse)
        with torch.no_grad():
            layer.raw_beta.copy_(torch.sqrt(torch.clamp(beta - layer.beta_min, min=0.0)))
            layer.raw_gamma.copy_(torch.sqrt(gamma))
        return layer

    @property
    def beta(self) -> torch.Tensor:
        return self.raw_beta ** 2 + self.beta_min

    @property
    def gamma(self) -> torch.Tensor:
        return self.raw_gamma ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        fn = igdn if self.inverse else gdn
        return fn(x, self.beta, self.gamma)

    def extra_repr(self) -> str:
        return f"{self.channels}, inverse={self.inverse}"
