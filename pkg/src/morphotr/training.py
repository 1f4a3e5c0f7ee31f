"""Curriculum training: channel-wise masked reconstruction and supervised contrast.

Stage 1 optimizes the masked-reconstruction loss alone; stage 2 adds the
supervised contrastive loss on single-source batches; stage 3 uses the
contrastive loss alone on batches that mix sources.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .dataio import Dataset
from .encoder import CellPainTR, ModelConfig, save_checkpoint
from .errors import ConfigError, NumericError
from .tensor_core import DTYPE

log = logging.getLogger(__name__)

POLICIES = ("any", "single-source", "mixed-source")


@dataclass
class StageConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    policy: str = "any"
    p_min: float = 0.05
    p_max: float = 0.4
    temperature: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: Optional[int] = None
    include_controls: bool = False

    @property
    def uses_reconstruction(self) -> bool:
        return self.stage in (1, 2)

    @property
    def uses_contrastive(self) -> bool:
        return self.stage in (2, 3)

    def validate(self) -> "StageConfig":
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown batching policy {self.policy!r}; choose from {POLICIES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.uses_contrastive and self.batch_size < 2:
            raise ConfigError("contrastive stages need batch_size >= 2")
        if self.lr < 0 or self.epochs < 0:
            raise ConfigError("lr and epochs must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ConfigError("masking range must satisfy 0 <= p_min <= p_max <= 1")
        return self


def stage_defaults(stage: int, **overrides) -> StageConfig:
    """Per-stage defaults: lr 1e-4/1e-5/1e-5, batch 16/32/64, tau 0.1, mask range [0.05, 0.4]."""
    base = {
        1: StageConfig(stage=1, lr=1e-4, batch_size=16, epochs=20, policy="any"),
        2: StageConfig(stage=2, lr=1e-5, batch_size=32, epochs=10, policy="single-source"),
        3: StageConfig(stage=3, lr=1e-5, batch_size=64, epochs=10, policy="mixed-source"),
    }
    if stage not in base:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    return replace(base[stage], **overrides).validate()


# --------------------------------------------------------------------------- masking


@dataclass
class MaskPlan:
    mask: np.ndarray  # bool, same shape as the profile values
    groups: np.ndarray  # group id per feature
    p: float

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    def masked_by_group(self, row: int = 0) -> dict[int, np.ndarray]:
        m = self.mask if self.mask.ndim == 1 else self.mask[row]
        return {int(g): np.flatnonzero(m & (self.groups == g)) for g in np.unique(self.groups)
                if (m & (self.groups == g)).any()}


def plan_cwmm_mask(values, groups, p_range=(0.05, 0.4), rng=None, p: float | None = None) -> MaskPlan:
    """Mask each non-zero feature independently with one probability for the whole batch."""
    groups = np.asarray(groups)
    if groups.size == 0:
        raise ConfigError("empty feature schema")
    values = np.asarray(values)
    if values.shape[-1] != groups.size:
        raise ConfigError("values and groups differ in length")
    rng = rng if rng is not None else np.random.default_rng()
    if p is None:
        p = float(rng.uniform(p_range[0], p_range[1]))
    mask = (values != 0) & (rng.random(values.shape) < p)
    return MaskPlan(mask, groups, p)


def _group_onehot(groups: np.ndarray) -> torch.Tensor:
    _, inv = np.unique(groups, return_inverse=True)
    onehot = np.zeros((groups.size, inv.max() + 1))
    onehot[np.arange(groups.size), inv] = 1.0
    return torch.as_tensor(onehot, dtype=DTYPE)


def loss_cwmm(F_true, F_pred, plan: MaskPlan) -> torch.Tensor:
    """Mean over groups with masked features of the per-group masked MSE.

    Batched input is averaged over profiles that have at least one masked feature.
    """
    if plan.is_empty:
        raise ConfigError("masked reconstruction loss is undefined for an empty mask plan")
    F_true = torch.as_tensor(F_true, dtype=DTYPE)
    F_pred = torch.as_tensor(F_pred, dtype=DTYPE)
    m = torch.as_tensor(np.atleast_2d(plan.mask), dtype=DTYPE)
    sq = (F_true.reshape(m.shape) - F_pred.reshape(m.shape)) ** 2 * m
    onehot = _group_onehot(plan.groups)
    sse = sq @ onehot
    counts = m @ onehot
    active = counts > 0
    per_group = torch.where(active, sse / counts.clamp(min=1.0), torch.zeros_like(sse))
    n_active = active.sum(dim=1)
    has_any = n_active > 0
    per_profile = per_group.sum(dim=1)[has_any] / n_active[has_any]
    return per_profile.mean()


def loss_supcon(embeddings, labels, temperature: float = 0.1) -> torch.Tensor:
    """Supervised contrastive loss on L2-normalized embeddings, summed over anchors.

    Anchors without any positive in the batch are skipped.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    z = torch.as_tensor(embeddings, dtype=DTYPE)
    n = z.shape[0]
    if n < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2")
    labels = np.asarray(labels)
    h = z / z.norm(dim=1, keepdim=True)
    logits = h @ h.T / temperature
    eye = torch.eye(n, dtype=torch.bool)
    denom = torch.logsumexp(logits.masked_fill(eye, -math.inf), dim=1, keepdim=True)
    log_prob = logits - denom
    pos = torch.as_tensor(labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not bool(valid.any()):
        return (z * 0.0).sum()
    pos_sum = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    return -(pos_sum[valid] / n_pos[valid]).sum()


# --------------------------------------------------------------------------- batching


def _chunks(idx: np.ndarray, size: int) -> list[np.ndarray]:
    return [idx[i:i + size] for i in range(0, len(idx), size)]


def _positive_units(idx: np.ndarray, labels: np.ndarray, rng, max_size: int) -> list[np.ndarray]:
    """Split each label's members into shuffled pairs; a triple absorbs an odd member if it fits."""
    units = []
    for lab in np.unique(labels[idx]):
        members = rng.permutation(idx[labels[idx] == lab])
        if len(members) < 2:
            continue
        n_units = len(members) // 2
        for k in range(n_units):
            stop = len(members) if k == n_units - 1 and max_size >= 3 else 2 * k + 2
            units.append(members[2 * k:stop])
    return units


def _pack(units: list[np.ndarray], batch_size: int, rng) -> list[np.ndarray]:
    batches, cur = [], []
    for u in (units[i] for i in rng.permutation(len(units))):
        if cur and sum(len(c) for c in cur) + len(u) > batch_size:
            batches.append(np.concatenate(cur))
            cur = []
        cur.append(u)
    if cur:
        batches.append(np.concatenate(cur))
    return batches


def make_batches(ds: Dataset, policy: str, batch_size: int, rng, indices=None,
                 pair_positives: bool = False) -> list[np.ndarray]:
    """One epoch of index batches under a batching policy.

    ``single-source`` batches never mix sources.  With ``pair_positives`` every
    batch is built from same-compound pairs so each anchor has a positive.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown batching policy {policy!r}")
    if batch_size < 1 or (pair_positives and batch_size < 2):
        raise ConfigError("batch_size too small for this policy")
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ConfigError("cannot batch an empty dataset")
    labels = ds.compound

    def build(pool):
        if pair_positives:
            return _pack(_positive_units(pool, labels, rng, batch_size), batch_size, rng)
        return _chunks(rng.permutation(pool), batch_size)

    if policy == "single-source":
        sources = ds.source
        batches = []
        for s in sorted(set(sources[idx])):
            batches.extend(build(idx[sources[idx] == s]))
        order = rng.permutation(len(batches))
        return [batches[i] for i in order]
    return build(idx)


# --------------------------------------------------------------------------- training loops


@dataclass
class StageResult:
    model: CellPainTR
    trace: list = field(default_factory=list)


def _eligible(ds: Dataset, cfg: StageConfig) -> np.ndarray:
    if not cfg.uses_contrastive or cfg.include_controls:
        return np.arange(len(ds))
    return np.flatnonzero(~ds.is_control)


def run_stage(model: CellPainTR, ds: Dataset, cfg: StageConfig, source_override: str | None = None) -> StageResult:
    cfg.validate()
    if len(ds) == 0:
        raise ConfigError("empty training dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    src = model.source_index([source_override] * len(ds) if source_override else ds.source)
    groups = np.asarray(model.schema.groups)
    labels = ds.compound
    eligible = _eligible(ds, cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)
    model.train()
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch in make_batches(ds, cfg.policy, cfg.batch_size, rng, eligible,
                                  pair_positives=cfg.uses_contrastive):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            values = ds.X[batch]
            plan = None
            if cfg.uses_reconstruction:
                plan = plan_cwmm_mask(values, groups, (cfg.p_min, cfg.p_max), rng)
                if plan.is_empty:
                    plan = None
            out = model.encode(values, src[batch], None if plan is None else plan.mask)
            total = torch.zeros((), dtype=DTYPE)
            rec = con = float("nan")
            if plan is not None:
                l_rec = loss_cwmm(values, model.predict_features(out.states), plan)
                total = total + l_rec
                rec = l_rec.item()
            if cfg.uses_contrastive:
                l_con = loss_supcon(out.cls, labels[batch], cfg.temperature)
                total = total + l_con
                con = l_con.item()
            if not math.isfinite(total.item()):
                raise NumericError(f"non-finite loss at stage {cfg.stage}, epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
                opt.step()
            trace.append({"step": step, "epoch": epoch, "p_mask": plan.p if plan else float("nan"),
                          "cwmm": rec, "supcon": con, "total": total.item()})
            step += 1
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    model.eval()
    if trace:
        log.info("stage %d: %d steps, loss %.4f -> %.4f", cfg.stage, len(trace),
                 trace[0]["total"], trace[-1]["total"])
    return StageResult(model, trace)


def write_trace(trace: Sequence[dict], path) -> None:
    fields = ["step", "epoch", "p_mask", "cwmm", "supcon", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in trace:
            w.writerow({k: (f"{row[k]:.17g}" if isinstance(row[k], float) else row[k]) for k in fields})


@dataclass
class CurriculumResult:
    model: CellPainTR
    checkpoints: list  # paths, or in-memory models when no output directory is given
    traces: list


def run_curriculum(ds: Dataset, configs: Sequence[StageConfig], model_cfg: ModelConfig | None = None,
                   out_dir=None, seed: int | None = None) -> CurriculumResult:
    """Train stages in order, checkpointing after each one."""
    if len(configs) != 3:
        raise ConfigError("the curriculum has exactly three stages")
    for k, c in enumerate(configs, 1):
        c.validate()
        if c.stage != k:
            raise ConfigError(f"config #{k} is for stage {c.stage}")
    model_cfg = copy.deepcopy(model_cfg or ModelConfig())
    if seed is not None:
        model_cfg.seed = seed
        configs = [replace(c, seed=seed + c.stage) for c in configs]
    model = CellPainTR(ds.schema, sorted(set(ds.source)), model_cfg)
    checkpoints, traces = [], []
    for c in configs:
        res = run_stage(model, ds, c)
        traces.append(res.trace)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"stage{c.stage}.npz"
            save_checkpoint(model, path, extra={"stage": c.stage, "stage_config": asdict(c)})
            write_trace(res.trace, out / f"stage{c.stage}_loss.csv")
            checkpoints.append(path)
        else:
            checkpoints.append(copy.deepcopy(model))
    return CurriculumResult(model, checkpoints, traces)
