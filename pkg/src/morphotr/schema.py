"""Feature schema: ordered feature names with channel-compartment group ids."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

COMPARTMENTS = ("Cells", "Cytoplasm", "Nuclei")
CHANNELS = ("DNA", "RNA", "ER", "AGP", "Mito")


def canonical_name(name: str) -> str:
    """Lowercase and collapse separators so ``Cells-AreaShape.Area`` matches ``cells_areashape_area``."""
    return re.sub(r"[\s_\-.:/]+", "_", name.strip().lower()).strip("_")


def group_key(name: str) -> str:
    """Channel-compartment key from the ``Compartment_Channel_Measurement`` naming convention."""
    parts = canonical_name(name).split("_")
    return "_".join(parts[:2]) if len(parts) >= 2 else parts[0]


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    groups: tuple[int, ...]

    def __post_init__(self):
        if len(self.names) == 0:
            raise ConfigError("feature schema is empty")
        if len(self.names) != len(self.groups):
            raise ConfigError("every feature needs exactly one group id")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate feature names in schema")
        if min(self.groups) < 0:
            raise ConfigError("group ids must be non-negative")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def n_groups(self) -> int:
        return len(set(self.groups))

    @property
    def group_array(self) -> np.ndarray:
        return np.asarray(self.groups, dtype=np.int64)

    @classmethod
    def from_names(cls, names) -> "FeatureSchema":
        """Group ids assigned in order of first appearance of each name prefix."""
        ids: dict[str, int] = {}
        groups = [ids.setdefault(group_key(n), len(ids)) for n in names]
        return cls(tuple(names), tuple(groups))

    def to_file(self, path) -> None:
        lines = [f"{n}\t{g}" for n, g in zip(self.names, self.groups)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "FeatureSchema":
        names, groups = [], []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t") if "\t" in line else line.split()
            if len(fields) != 2:
                raise ConfigError(f"{path}:{lineno}: expected '<name> <group id>'")
            names.append(fields[0])
            groups.append(int(fields[1]))
        return cls(tuple(names), tuple(groups))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "groups": list(self.groups)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(d["names"]), tuple(int(g) for g in d["groups"]))
