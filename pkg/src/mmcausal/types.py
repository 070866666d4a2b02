"""Shared domain types: factors, samples, datasets, pipeline configuration."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field

import numpy as np

TERNARY = (-1, 0, 1)

# Modality tags used by the synthetic generator and the default scenario.
VERBAL = "verbal"
VISUAL = "visual"
# Payload/embedding channel names for each modality tag.
CHANNEL_OF = {VERBAL: "text", VISUAL: "image"}


def normalize_name(name: str) -> str:
    """Casefold and collapse internal whitespace, for factor-name matching."""
    return re.sub(r"\s+", " ", name.strip()).casefold()


@dataclass(frozen=True)
class FactorSpec:
    """A candidate causal factor with ternary annotation criteria."""

    name: str
    description: str
    criterion_pos: str
    criterion_neu: str
    criterion_neg: str

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("factor name must be non-empty")
        for crit in (self.criterion_pos, self.criterion_neu, self.criterion_neg):
            if not crit.strip():
                raise ValueError(f"factor {self.name!r}: empty criterion")

    def criterion_for(self, value: int) -> str:
        return {1: self.criterion_pos, 0: self.criterion_neu, -1: self.criterion_neg}[int(value)]


@dataclass(frozen=True)
class FactorSet:
    """An ordered collection of factors plus the name of the target variable."""

    factors: tuple[FactorSpec, ...]
    target_name: str

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        seen = set()
        for f in self.factors:
            key = normalize_name(f.name)
            if key in seen:
                raise ValueError(f"duplicate factor name {f.name!r}")
            seen.add(key)
        if normalize_name(self.target_name) in seen:
            raise ValueError("target name collides with a factor name")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    def __len__(self) -> int:
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def index_of(self, name: str) -> int:
        """Index of a factor by case/whitespace-insensitive name. KeyError if absent."""
        key = normalize_name(name)
        for i, f in enumerate(self.factors):
            if normalize_name(f.name) == key:
                return i
        raise KeyError(name)

    def get(self, name: str) -> FactorSpec:
        return self.factors[self.index_of(name)]


@dataclass(frozen=True)
class Provenance:
    """Where a sample came from: generated, or counterfactual of a parent."""

    kind: str  # "observational" | "counterfactual"
    parent_id: str | None = None
    intervened_factor: str | None = None

    def __post_init__(self):
        if self.kind == "observational":
            if self.parent_id is not None or self.intervened_factor is not None:
                raise ValueError("observational samples carry no parent/factor")
        elif self.kind == "counterfactual":
            if not self.parent_id or not self.intervened_factor:
                raise ValueError("counterfactual provenance needs parent_id and intervened_factor")
        else:
            raise ValueError(f"unknown provenance kind {self.kind!r}")

    @classmethod
    def observational(cls) -> "Provenance":
        return cls("observational")

    @classmethod
    def counterfactual(cls, parent_id: str, intervened_factor: str) -> "Provenance":
        return cls("counterfactual", parent_id, intervened_factor)


@dataclass
class Sample:
    """One multimodal record: raw payload and embedding per channel, plus target."""

    id: str
    payloads: dict[str, str]
    embeddings: dict[str, np.ndarray]
    target: float
    provenance: Provenance = field(default_factory=Provenance.observational)

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be non-empty")
        if set(self.payloads) != set(self.embeddings):
            raise ValueError(f"sample {self.id}: payload/embedding channels differ")
        self.embeddings = {m: np.asarray(v, dtype=float) for m, v in self.embeddings.items()}

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(sorted(self.payloads))


class StructuredDataset:
    """Ternary factor annotations plus targets, keyed by sample id.

    Rows are kept in insertion order so matrix exports are deterministic.
    """

    def __init__(self, factor_set: FactorSet):
        self.factor_set = factor_set
        self.rows: dict[str, np.ndarray] = {}
        self.targets: dict[str, float] = {}

    def add_row(self, sample_id: str, values, target: float) -> None:
        vec = np.asarray(values, dtype=int)
        if vec.shape != (len(self.factor_set),):
            raise ValueError(f"row {sample_id}: expected {len(self.factor_set)} values, got {vec.shape}")
        if not np.isin(vec, TERNARY).all():
            raise ValueError(f"row {sample_id}: values must lie in {{-1, 0, 1}}")
        if sample_id in self.rows:
            raise ValueError(f"duplicate row id {sample_id!r}")
        self.rows[sample_id] = vec
        self.targets[sample_id] = float(target)

    @property
    def ids(self) -> list[str]:
        return list(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self.rows

    def value(self, sample_id: str, factor_name: str) -> int:
        return int(self.rows[sample_id][self.factor_set.index_of(factor_name)])

    def matrix(self) -> tuple[list[str], np.ndarray]:
        """All rows stacked in insertion order; second element is (n, k) int array."""
        ids = self.ids
        if not ids:
            return ids, np.zeros((0, len(self.factor_set)), dtype=int)
        return ids, np.stack([self.rows[i] for i in ids])

    def copy(self) -> "StructuredDataset":
        out = StructuredDataset(self.factor_set)
        for sid, vec in self.rows.items():
            out.add_row(sid, vec.copy(), self.targets[sid])
        return out


_BACKENDS_ORACLE = ("scripted", "http")
_BACKENDS_CD = ("fci", "pc")


@dataclass
class PipelineConfig:
    """Knobs for the discovery loop. Defaults follow the reference configuration."""

    k_pairs: int = 5
    iterations: int = 3
    tau_sem: float = 0.7
    tau_causal: float = 0.4
    epsilon: float = 1e-6
    alpha: float = 0.05
    seed: int = 0
    oracle_backend: str = "scripted"
    cd_backend: str = "fci"
    embedding_dim: int = 8
    max_cond: int = 3
    batch_size: int = 20
    complete_rules: bool = False  # Zhang's R8-R10 tail rules
    model: str = "default"
    max_retries: int = 3

    def __post_init__(self):
        if self.k_pairs < 1 or self.iterations < 1:
            raise ValueError("k_pairs and iterations must be >= 1")
        if not (0.0 <= self.tau_sem <= 1.0 and 0.0 <= self.tau_causal <= 1.0):
            raise ValueError("gate thresholds must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.oracle_backend not in _BACKENDS_ORACLE:
            raise ValueError(f"oracle_backend must be one of {_BACKENDS_ORACLE}")
        if self.cd_backend not in _BACKENDS_CD:
            raise ValueError(f"cd_backend must be one of {_BACKENDS_CD}")
        if self.embedding_dim < 1 or self.max_cond < 0 or self.batch_size < 1:
            raise ValueError("embedding_dim/batch_size must be >= 1 and max_cond >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def merged(self, overrides: dict) -> "PipelineConfig":
        """New config with non-None override values applied on top."""
        data = self.to_dict()
        for key, val in overrides.items():
            if val is not None:
                data[key] = val
        return PipelineConfig.from_dict(data)
