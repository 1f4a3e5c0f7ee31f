"""Bidirectional Hyena operator: gated recursion of implicit long convolutions.

Each recurrence owns a filter generated from the offset ``tau`` by a small
network, so the parameter count does not depend on sequence length.  Filters
have two-sided support (``tau`` in ``-(L-1)..L-1``) and are applied with
zero-padded linear convolution, which removes the causal constraint without
wrap-around leakage between the ends of the feature sequence.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError
from .tensor_core import conv_noncausal


class ImplicitFilter(nn.Module):
    """Generates per-channel two-sided kernels ``h[tau]`` for any length.

    sinusoidal features of |tau| and sign(tau) -> Linear -> sin -> Linear,
    windowed by ``exp(-r |tau|)`` with a learned per-channel rate ``r >= 0``.
    """

    def __init__(self, d_model: int, n_freqs: int = 8, hidden: int = 32,
                 min_rate: float = 0.01, max_rate: float = 0.5):
        super().__init__()
        self.d_model = d_model
        # geometric frequencies from 1 down to 1e-3 rad per feature offset
        self.freqs = nn.Parameter(torch.logspace(0.0, -3.0, n_freqs))
        self.fc1 = nn.Linear(2 * n_freqs + 1, hidden)
        self.fc2 = nn.Linear(hidden, d_model)
        nn.init.normal_(self.fc2.weight, std=0.02)
        nn.init.zeros_(self.fc2.bias)
        rates = torch.logspace(math.log10(min_rate), math.log10(max_rate), d_model)
        # softplus^-1 so that softplus(decay_param) starts at `rates`
        self.decay_param = nn.Parameter(torch.log(torch.expm1(rates)))

    @property
    def rate(self) -> torch.Tensor:
        return F.softplus(self.decay_param)

    def offsets(self, seq_len: int) -> torch.Tensor:
        return torch.arange(-(seq_len - 1), seq_len, dtype=self.freqs.dtype)

    def forward(self, seq_len: int) -> torch.Tensor:
        """Kernel of shape ``(d_model, 2*seq_len - 1)``; column j is offset ``j - (seq_len-1)``."""
        if seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        tau = self.offsets(seq_len)
        mag = tau.abs()[:, None]
        feats = torch.cat([torch.sin(mag * self.freqs), torch.cos(mag * self.freqs),
                           torch.sign(tau)[:, None]], dim=1)
        h = self.fc2(torch.sin(self.fc1(feats)))
        window = torch.exp(-mag * self.rate)
        return (h * window).transpose(0, 1)


def implicit_filter(gen: ImplicitFilter, seq_len: int) -> torch.Tensor:
    return gen(seq_len)


class HyenaOperator(nn.Module):
    """Order-N Hyena mixing over a ``(batch, seq, d_model)`` input."""

    def __init__(self, d_model: int, order: int = 3, n_freqs: int = 8,
                 filter_hidden: int = 32, bias: bool = True):
        super().__init__()
        if order < 1:
            raise ConfigError("Hyena order must be >= 1")
        self.d_model = d_model
        self.order = order
        self.in_proj = nn.Linear(d_model, (order + 1) * d_model, bias=bias)
        self.out_proj = nn.Linear(d_model, d_model, bias=bias)
        self.filters = nn.ModuleList(
            ImplicitFilter(d_model, n_freqs=n_freqs, hidden=filter_hidden) for _ in range(order)
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.dim() != 3 or u.shape[-1] != self.d_model:
            raise ConfigError(f"expected (batch, seq, {self.d_model}) input, got {tuple(u.shape)}")
        seq_len = u.shape[1]
        if seq_len < 1:
            raise ConfigError("empty sequence")
        parts = self.in_proj(u).transpose(1, 2).split(self.d_model, dim=1)
        z = parts[0]
        for gate, gen in zip(parts[1:], self.filters):
            z = gate * conv_noncausal(z, gen(seq_len))
        return self.out_proj(z.transpose(1, 2))


def hyena_forward(u: torch.Tensor, layer: HyenaOperator) -> torch.Tensor:
    """Apply ``layer`` to a single ``(seq, d_model)`` sequence or a batch."""
    if u.dim() == 2:
        return layer(u[None])[0]
    return layer(u)
