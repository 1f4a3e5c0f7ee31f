"""Input sequence construction for continuous profiles.

Feature ``i`` with value ``C_i`` becomes ``W_i * C_i + b_i + M_i``: a
per-feature linear adaptor plus an additive feature-context vector that
stands in for positional encoding.  The encoder input is then
``[CLS, SRC_k, feature_1 .. feature_L]``.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError
from .tensor_core import check_finite

INIT_STD = 0.02
N_PREFIX = 2  # CLS, SRC


def embed_profile(values: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                  context: torch.Tensor) -> torch.Tensor:
    """``(..., L)`` values -> ``(..., L, d_model)`` feature embeddings."""
    if values.shape[-1] != weight.shape[0]:
        raise ConfigError(f"profile has {values.shape[-1]} features, schema expects {weight.shape[0]}")
    check_finite(values, "profile values")
    return values[..., None] * weight + bias + context


def assemble_input(feature_seq: torch.Tensor, source_idx: torch.Tensor, codebook: torch.Tensor,
                   cls: torch.Tensor, mask_token: torch.Tensor,
                   mask: torch.Tensor | None = None) -> torch.Tensor:
    """Prepend CLS and source tokens to a ``(B, L, d)`` feature sequence.

    ``mask`` is an optional ``(B, L)`` boolean array; masked positions are
    replaced by the bare mask token.  ``source_idx`` holds 0-based codebook rows.
    """
    B, L, d = feature_seq.shape
    source_idx = torch.as_tensor(source_idx, dtype=torch.long).reshape(-1)
    if source_idx.numel() != B:
        raise ConfigError("one source index per profile required")
    if bool((source_idx < 0).any()) or bool((source_idx >= codebook.shape[0]).any()):
        raise ConfigError(f"source index outside codebook of size {codebook.shape[0]}")
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        feature_seq = torch.where(mask[..., None], mask_token.expand(B, L, d), feature_seq)
    src = codebook[source_idx][:, None, :]
    head = cls.expand(B, 1, d)
    return torch.cat([head, src, feature_seq], dim=1)


class ProfileEmbedding(nn.Module):
    """Learned tables for the adaptor, feature context, source codebook and special tokens."""

    def __init__(self, n_features: int, n_sources: int, d_model: int):
        super().__init__()
        self.n_features = n_features
        self.n_sources = n_sources
        self.d_model = d_model
        self.adaptor_weight = nn.Parameter(torch.randn(n_features, d_model) * INIT_STD)
        self.adaptor_bias = nn.Parameter(torch.zeros(n_features, d_model))
        self.context = nn.Parameter(torch.randn(n_features, d_model) * INIT_STD)
        self.codebook = nn.Parameter(torch.randn(n_sources, d_model) * INIT_STD)
        self.cls = nn.Parameter(torch.randn(d_model) * INIT_STD)
        self.mask_token = nn.Parameter(torch.randn(d_model) * INIT_STD)

    def forward(self, values: torch.Tensor, source_idx, mask=None) -> torch.Tensor:
        feats = embed_profile(values, self.adaptor_weight, self.adaptor_bias, self.context)
        return assemble_input(feats, source_idx, self.codebook, self.cls, self.mask_token, mask)
