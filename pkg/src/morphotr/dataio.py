"""Profile datasets: synthetic generation, CSV I/O, preprocessing and feature alignment."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError
from .schema import CHANNELS, COMPARTMENTS, FeatureSchema, canonical_name

log = logging.getLogger(__name__)

META_COLUMNS = (
    "Metadata_Source",
    "Metadata_Plate",
    "Metadata_Well",
    "Metadata_InChIKey",
    "Metadata_MoA",
    "Metadata_Control",
)
CONTROL_KEY = "DMSO"
CONTROL_MOA = "control"
MAD_SCALE = 1.4826
MAD_FLOOR = 1e-6


@dataclass
class Dataset:
    """Feature matrix ``X`` (profiles x features) with per-profile metadata."""

    X: np.ndarray
    meta: pd.DataFrame
    schema: FeatureSchema

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.schema):
            raise ConfigError(f"feature matrix shape {self.X.shape} does not match schema of {len(self.schema)}")
        if len(self.meta) != self.X.shape[0]:
            raise ConfigError("metadata rows and profiles differ in count")
        self.meta = self.meta.reset_index(drop=True)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def source(self) -> np.ndarray:
        return self.meta["source"].to_numpy()

    @property
    def plate(self) -> np.ndarray:
        return self.meta["plate"].to_numpy()

    @property
    def compound(self) -> np.ndarray:
        return self.meta["compound"].to_numpy()

    @property
    def moa(self) -> np.ndarray:
        return self.meta["moa"].to_numpy()

    @property
    def is_control(self) -> np.ndarray:
        return self.meta["control"].to_numpy().astype(bool)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.meta.iloc[idx].reset_index(drop=True), self.schema)

    def with_values(self, X: np.ndarray, schema: FeatureSchema | None = None) -> "Dataset":
        return Dataset(X, self.meta.copy(), schema or self.schema)


def make_meta(source, plate, well, compound, moa, control) -> pd.DataFrame:
    return pd.DataFrame({
        "source": np.asarray(source, dtype=object).astype(str),
        "plate": np.asarray(plate, dtype=object).astype(str),
        "well": np.asarray(well, dtype=object).astype(str),
        "compound": np.asarray(compound, dtype=object).astype(str),
        "moa": np.asarray(moa, dtype=object).astype(str),
        "control": np.asarray(control, dtype=bool),
    })


# --------------------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    n_sources: int = 3
    plates_per_source: int = 4
    wells_per_plate: int = 160
    controls_per_plate: int = 16
    n_compounds: int = 48
    n_moas: int = 8
    n_features: int = 200
    n_groups: int = 15
    bio_effect: float = 1.0
    compound_spread: float = 0.35
    baseline_scale: float = 1.0
    batch_shift: float = 1.0
    batch_scale: float = 0.3
    plate_shift: float = 0.2
    noise: float = 0.5
    # explicit per-source shift/scale applied uniformly across features
    source_gamma: Optional[list] = None
    source_delta: Optional[list] = None
    # seed for biology; batch_seed (if set) decouples the batch effects
    seed: int = 0
    batch_seed: Optional[int] = None
    source_prefix: str = "source_"

    def validate(self) -> None:
        counts = ("n_sources", "plates_per_source", "wells_per_plate", "n_compounds",
                  "n_moas", "n_features", "n_groups")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("bio_effect", "compound_spread", "baseline_scale", "batch_shift",
                     "batch_scale", "plate_shift", "noise"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.controls_per_plate <= self.wells_per_plate:
            raise ConfigError("controls_per_plate must lie in [0, wells_per_plate]")
        if self.n_groups > len(COMPARTMENTS) * len(CHANNELS):
            raise ConfigError(f"at most {len(COMPARTMENTS) * len(CHANNELS)} channel-compartment groups")
        if self.n_groups > self.n_features:
            raise ConfigError("n_groups cannot exceed n_features")
        for name in ("source_gamma", "source_delta"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_sources:
                raise ConfigError(f"{name} needs one value per source")
        if self.source_delta is not None and min(self.source_delta) <= 0:
            raise ConfigError("source_delta values must be positive")


@dataclass
class GroundTruth:
    """Planted effects: per-plate ``gamma``/``delta`` vectors and per-compound effects."""

    plates: list
    plate_gamma: np.ndarray
    plate_delta: np.ndarray
    baseline: np.ndarray
    compounds: list
    compound_effect: np.ndarray
    compound_moa: list
    config: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        payload = {
            "plates": self.plates,
            "plate_gamma": self.plate_gamma.tolist(),
            "plate_delta": self.plate_delta.tolist(),
            "baseline": self.baseline.tolist(),
            "compounds": self.compounds,
            "compound_effect": self.compound_effect.tolist(),
            "compound_moa": self.compound_moa,
            "config": self.config,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def from_json(cls, path) -> "GroundTruth":
        d = json.loads(Path(path).read_text())
        return cls(d["plates"], np.array(d["plate_gamma"]), np.array(d["plate_delta"]),
                   np.array(d["baseline"]), d["compounds"], np.array(d["compound_effect"]),
                   d["compound_moa"], d.get("config", {}))


def synthetic_schema(n_features: int, n_groups: int) -> FeatureSchema:
    combos = [(comp, ch) for comp in COMPARTMENTS for ch in CHANNELS][:n_groups]
    names = []
    for i in range(n_features):
        comp, ch = combos[i % n_groups]
        names.append(f"{comp}_{ch}_Feature{i:04d}")
    return FeatureSchema(tuple(names), tuple(i % n_groups for i in range(n_features)))


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Profiles ``(baseline + compound effect) * delta_plate + gamma_plate + noise``.

    Compound effects are MoA prototypes plus a compound-specific deviation;
    negative controls get a zero effect.  A plate's batch effect is its
    source's effect plus a small plate-level shift.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    brng = rng if cfg.batch_seed is None else np.random.default_rng(cfg.batch_seed)
    L = cfg.n_features
    schema = synthetic_schema(L, cfg.n_groups)

    baseline = rng.normal(0.0, cfg.baseline_scale, L)
    moa_proto = rng.normal(0.0, 1.0, (cfg.n_moas, L))
    compound_moa_idx = np.arange(cfg.n_compounds) % cfg.n_moas
    dev = rng.normal(0.0, 1.0, (cfg.n_compounds, L))
    effect = cfg.bio_effect * (moa_proto[compound_moa_idx] + cfg.compound_spread * dev)
    compounds = [f"CPD-{i:04d}" for i in range(cfg.n_compounds)]
    compound_moa = [f"moa_{j}" for j in compound_moa_idx]

    src_gamma = brng.normal(0.0, cfg.batch_shift, (cfg.n_sources, L))
    src_delta = np.exp(brng.normal(0.0, cfg.batch_scale, (cfg.n_sources, L)))
    if cfg.source_gamma is not None:
        src_gamma = np.repeat(np.asarray(cfg.source_gamma, float)[:, None], L, axis=1)
    if cfg.source_delta is not None:
        src_delta = np.repeat(np.asarray(cfg.source_delta, float)[:, None], L, axis=1)

    n_treated = cfg.wells_per_plate - cfg.controls_per_plate
    X_parts, meta_cols = [], {k: [] for k in ("source", "plate", "well", "compound", "moa", "control")}
    plates, plate_gamma, plate_delta = [], [], []
    for s in range(cfg.n_sources):
        source = f"{cfg.source_prefix}{s + 1}"
        for p in range(cfg.plates_per_source):
            plate = f"{source}_P{p + 1:02d}"
            gamma = src_gamma[s] + brng.normal(0.0, cfg.plate_shift, L)
            delta = src_delta[s]
            plates.append(plate)
            plate_gamma.append(gamma)
            plate_delta.append(delta)
            cpd_idx = rng.permutation(np.resize(rng.permutation(cfg.n_compounds), n_treated))
            is_ctrl = np.zeros(cfg.wells_per_plate, bool)
            is_ctrl[rng.choice(cfg.wells_per_plate, cfg.controls_per_plate, replace=False)] = True
            bio = np.zeros((cfg.wells_per_plate, L))
            bio[~is_ctrl] = effect[cpd_idx]
            values = (baseline + bio) * delta + gamma + rng.normal(0.0, cfg.noise, (cfg.wells_per_plate, L))
            X_parts.append(values)
            it = iter(cpd_idx)
            for w in range(cfg.wells_per_plate):
                meta_cols["source"].append(source)
                meta_cols["plate"].append(plate)
                meta_cols["well"].append(f"W{w + 1:04d}")
                if is_ctrl[w]:
                    meta_cols["compound"].append(CONTROL_KEY)
                    meta_cols["moa"].append(CONTROL_MOA)
                else:
                    c = next(it)
                    meta_cols["compound"].append(compounds[c])
                    meta_cols["moa"].append(compound_moa[c])
                meta_cols["control"].append(bool(is_ctrl[w]))

    ds = Dataset(np.vstack(X_parts), make_meta(**meta_cols), schema)
    truth = GroundTruth(plates, np.array(plate_gamma), np.array(plate_delta), baseline,
                        compounds, effect, compound_moa, asdict(cfg))
    return ds, truth


# --------------------------------------------------------------------------- CSV


def save_csv(ds: Dataset, path) -> None:
    meta = pd.DataFrame({
        "Metadata_Source": ds.meta["source"],
        "Metadata_Plate": ds.meta["plate"],
        "Metadata_Well": ds.meta["well"],
        "Metadata_InChIKey": ds.meta["compound"],
        "Metadata_MoA": ds.meta["moa"],
        "Metadata_Control": ds.meta["control"].astype(int),
    })
    feats = pd.DataFrame(ds.X, columns=list(ds.schema.names))
    pd.concat([meta, feats], axis=1).to_csv(path, index=False, float_format="%.17g")


def _check_ragged(path) -> None:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        width = len(next(reader, []))
        for lineno, row in enumerate(reader, 2):
            if row and len(row) != width:
                raise ConfigError(f"{path}:{lineno}: ragged row ({len(row)} fields, header has {width})")


def load_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    """Read a dataset CSV; feature groups come from ``schema`` or the name prefixes."""
    _check_ragged(path)
    try:
        header = pd.read_csv(path, nrows=0).columns.tolist()
    except pd.errors.EmptyDataError:
        raise ConfigError(f"{path}: empty file") from None
    for col in META_COLUMNS:
        if col not in header:
            raise ConfigError(f"{path}: missing required metadata column {col}")
    feature_cols = [c for c in header if not c.startswith("Metadata_")]
    if not feature_cols:
        raise ConfigError(f"{path}: no feature columns")
    dtypes = {c: str for c in header if c.startswith("Metadata_")}
    dtypes.update({c: np.float64 for c in feature_cols})
    try:
        df = pd.read_csv(path, dtype=dtypes, keep_default_na=False, na_values={c: ["", "NaN", "nan"] for c in feature_cols},
                         float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as exc:
        raise ConfigError(f"{path}: malformed CSV ({exc})") from None
    if schema is None:
        schema = FeatureSchema.from_names(feature_cols)
    elif list(schema.names) != feature_cols:
        raise ConfigError(f"{path}: feature columns do not match the supplied schema")
    control = df["Metadata_Control"].str.strip().str.lower().isin(["1", "true", "yes"])
    meta = make_meta(df["Metadata_Source"], df["Metadata_Plate"], df["Metadata_Well"],
                     df["Metadata_InChIKey"], df["Metadata_MoA"], control)
    return Dataset(df[feature_cols].to_numpy(dtype=np.float64), meta, schema)


# --------------------------------------------------------------------------- preprocessing


def preprocess(ds: Dataset, clip: tuple[float, float] = (0.01, 0.99)) -> Dataset:
    """Zero-impute, MAD-normalize per plate against negative controls, clip to global quantiles."""
    X = np.nan_to_num(ds.X, nan=0.0, posinf=0.0, neginf=0.0)
    ctrl = ds.is_control
    plates = ds.plate
    out = np.empty_like(X)
    for plate in pd.unique(plates):
        rows = plates == plate
        ref = X[rows & ctrl]
        if ref.shape[0] < 2:
            raise ConfigError(f"plate {plate} has {ref.shape[0]} negative-control wells; need >= 2")
        med = np.median(ref, axis=0)
        scale = MAD_SCALE * np.median(np.abs(ref - med), axis=0)
        flat = scale < MAD_FLOOR
        if flat.any():
            log.warning("plate %s: %d feature(s) with zero control MAD; divisor floored at %g",
                        plate, int(flat.sum()), MAD_FLOOR)
            scale = np.where(flat, MAD_FLOOR, scale)
        out[rows] = (X[rows] - med) / scale
    lo, hi = np.quantile(out, clip, axis=0)
    return ds.with_values(np.clip(out, lo, hi))


# --------------------------------------------------------------------------- OOD alignment


@dataclass
class AlignmentReport:
    n_reference: int
    n_input: int
    matched: int
    matched_names: list
    dropped: list

    @property
    def overlap_fraction(self) -> float:
        return self.matched / self.n_reference


def align_features(ds: Dataset, reference: FeatureSchema) -> tuple[Dataset, AlignmentReport]:
    """Map ``ds`` onto ``reference`` by canonical name; unmatched reference slots are zero."""
    ref_pos = {canonical_name(n): i for i, n in enumerate(reference.names)}
    if len(ref_pos) != len(reference):
        raise ConfigError("reference schema has names that collide after canonicalization")
    X = np.zeros((len(ds), len(reference)))
    matched, dropped = [], []
    seen: set[int] = set()
    for j, name in enumerate(ds.schema.names):
        i = ref_pos.get(canonical_name(name))
        if i is None or i in seen:
            dropped.append(name)
            continue
        seen.add(i)
        X[:, i] = ds.X[:, j]
        matched.append(reference.names[i])
    if not matched:
        raise ConfigError("no features overlap with the reference schema")
    report = AlignmentReport(len(reference), len(ds.schema), len(matched), matched, dropped)
    return ds.with_values(X, reference), report


def subsample_features(ds: Dataset, keep: Sequence[int]) -> Dataset:
    keep = list(keep)
    schema = FeatureSchema(tuple(ds.schema.names[i] for i in keep), tuple(ds.schema.groups[i] for i in keep))
    return Dataset(ds.X[:, keep], ds.meta.copy(), schema)
