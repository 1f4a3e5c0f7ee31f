"""The CellPainTR network and its checkpoint format.

Layout: embedding -> ``n_blocks`` pre-norm residual blocks (Hyena mixing, then
a position-wise MLP) -> CLS readout and a linear reconstruction head on the
feature positions.

Checkpoints are ``.npz`` archives (no pickle): one float64 array per named
parameter under ``param/<name>`` plus a UTF-8 JSON ``meta`` record holding
the model config, the feature schema and the source registry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from . import __version__
from .embedding import N_PREFIX, ProfileEmbedding
from .errors import ConfigError
from .hyena import HyenaOperator
from .schema import FeatureSchema
from .tensor_core import DTYPE, check_finite

CHECKPOINT_FORMAT = "morphotr-ckpt-1"


@dataclass
class ModelConfig:
    d_model: int = 256
    n_blocks: int = 4
    order: int = 3
    n_freqs: int = 8
    filter_hidden: int = 32
    mlp_ratio: int = 4
    seed: int = 0


class EncoderOutput(NamedTuple):
    cls: torch.Tensor
    states: torch.Tensor


class HyenaBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.mixer = HyenaOperator(d, order=cfg.order, n_freqs=cfg.n_freqs, filter_hidden=cfg.filter_hidden)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.mixer(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CellPainTR(nn.Module):
    def __init__(self, schema: FeatureSchema, sources: Sequence[str], cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        if len(sources) == 0:
            raise ConfigError("at least one source is required")
        if len(set(sources)) != len(sources):
            raise ConfigError("duplicate source names")
        self.cfg = cfg
        self.schema = schema
        self.sources = tuple(str(s) for s in sources)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.embedding = ProfileEmbedding(len(schema), len(self.sources), cfg.d_model)
            self.blocks = nn.ModuleList(HyenaBlock(cfg) for _ in range(cfg.n_blocks))
            self.recon_head = nn.Linear(cfg.d_model, 1)

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def source_index(self, names) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.sources)}
        missing = sorted({str(n) for n in names} - set(lookup))
        if missing:
            raise ConfigError(f"unknown source id(s) {missing}; known: {list(self.sources)}")
        return np.array([lookup[str(n)] for n in names], dtype=np.int64)

    def encode(self, values, source_idx, mask=None) -> EncoderOutput:
        """Forward pass; accepts one profile ``(L,)`` or a batch ``(B, L)``."""
        values = torch.as_tensor(values, dtype=DTYPE)
        single = values.dim() == 1
        if single:
            values = values[None]
            mask = None if mask is None else torch.as_tensor(mask)[None]
        x = self.embedding(values, source_idx, mask)
        for block in self.blocks:
            x = block(x)
        check_finite(x, "encoder states")
        if single:
            x = x[0]
            return EncoderOutput(x[0], x)
        return EncoderOutput(x[:, 0], x)

    def predict_features(self, states: torch.Tensor) -> torch.Tensor:
        """Reconstruction head on every feature position: ``(..., L+2, d)`` -> ``(..., L)``."""
        return self.recon_head(states[..., N_PREFIX:, :]).squeeze(-1)

    def reconstruct(self, states: torch.Tensor, mask) -> torch.Tensor:
        """Predicted values at masked feature positions (row-major order over the mask)."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not bool(mask.any()):
            raise ConfigError("reconstruct needs a non-empty mask")
        if mask.shape[-1] != len(self.schema):
            raise ConfigError("mask index out of range for schema")
        return self.predict_features(states)[mask]

    @torch.no_grad()
    def embed(self, values: np.ndarray, source_idx: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """CLS embeddings for many profiles, evaluated in eval mode."""
        out = []
        for start in range(0, len(values), batch_size):
            sl = slice(start, start + batch_size)
            out.append(self.encode(values[sl], source_idx[sl]).cls.numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.d_model))


def save_checkpoint(model: CellPainTR, path, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": asdict(model.cfg),
        "schema": model.schema.to_dict(),
        "sources": list(model.sources),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[CellPainTR, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    model = CellPainTR(FeatureSchema.from_dict(meta["schema"]), meta["sources"], ModelConfig(**meta["config"]))
    model.load_state_dict(state)
    return model, meta
