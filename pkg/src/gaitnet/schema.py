"""Condition-space schema: parameter names, groups and valid ranges."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .gait import check_range, denormalize_condition, normalize_condition

SCHEMA_FORMAT = "gaitnet-conditions"
SCHEMA_VERSION = 1
GROUP_ORDER = ("skeleton", "muscle", "gait")


def canonical_hash(obj) -> str:
    """sha256 over the sorted, whitespace-free JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class ConditionSchema:
    """Ordered parameter table; vectors are laid out skeleton, muscle, gait."""

    names: tuple[str, ...]
    groups: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    reference: np.ndarray

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.groups) == n == len(self.lo) == len(self.hi) == len(self.reference)):
            raise FormatError("schema columns have different lengths")
        if len(set(self.names)) != n:
            raise FormatError("duplicate parameter names in schema")
        order = [GROUP_ORDER.index(g) for g in self.groups]
        if order != sorted(order):
            raise FormatError("parameters must be ordered skeleton, muscle, gait")
        if np.any(self.lo >= self.hi):
            bad = self.names[int(np.argmax(self.lo >= self.hi))]
            raise FormatError(f"parameter {bad} has min >= max")
        if np.any((self.reference < self.lo) | (self.reference > self.hi)):
            raise FormatError("reference condition lies outside the valid ranges")

    def __eq__(self, other):
        return isinstance(other, ConditionSchema) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.hash)

    # --- layout helpers -------------------------------------------------
    def index(self, group: str) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.groups) if g == group], dtype=int)

    @property
    def skeleton_idx(self):
        return self.index("skeleton")

    @property
    def muscle_idx(self):
        return self.index("muscle")

    @property
    def gait_idx(self):
        return self.index("gait")

    @property
    def anatomy_idx(self):
        return np.concatenate([self.skeleton_idx, self.muscle_idx])

    @property
    def n_params(self) -> int:
        return len(self.names)

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def names_in(self, group: str) -> list[str]:
        return [self.names[i] for i in self.index(group)]

    def join(self, anatomy, gait) -> np.ndarray:
        """Concatenate ``(..., n_anatomy)`` and ``(..., n_gait)`` into full vectors."""
        return np.concatenate([np.asarray(anatomy, float), np.asarray(gait, float)], axis=-1)

    def split(self, full):
        full = np.asarray(full, float)
        k = len(self.anatomy_idx)
        return full[..., :k], full[..., k:]

    # --- scaling ----------------------------------------------------------
    def normalize(self, full, idx=None):
        lo, hi = (self.lo, self.hi) if idx is None else (self.lo[idx], self.hi[idx])
        return normalize_condition(full, lo, hi)

    def denormalize(self, u, idx=None):
        lo, hi = (self.lo, self.hi) if idx is None else (self.lo[idx], self.hi[idx])
        return denormalize_condition(u, lo, hi)

    def check(self, full, idx=None) -> None:
        idx = np.arange(self.n_params) if idx is None else np.asarray(idx)
        check_range(full, self.lo[idx], self.hi[idx], [self.names[i] for i in idx])

    # --- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": SCHEMA_FORMAT,
            "version": SCHEMA_VERSION,
            "parameters": [
                {"name": n, "group": g, "min": float(a), "max": float(b), "reference": float(r)}
                for n, g, a, b, r in zip(self.names, self.groups, self.lo, self.hi, self.reference)
            ],
        }

    @classmethod
    def from_parameters(cls, params: list[dict]) -> "ConditionSchema":
        try:
            return cls(
                tuple(p["name"] for p in params),
                tuple(p["group"] for p in params),
                np.array([p["min"] for p in params], float),
                np.array([p["max"] for p in params], float),
                np.array([p["reference"] for p in params], float),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed parameter entry: {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionSchema":
        if d.get("format") != SCHEMA_FORMAT:
            raise FormatError(f"not a condition schema (format={d.get('format')!r})")
        if d.get("version") != SCHEMA_VERSION:
            raise VersionError(
                f"condition schema version {d.get('version')} unsupported (expected {SCHEMA_VERSION})"
            )
        return cls.from_parameters(d["parameters"])

    @property
    def hash(self) -> str:
        return canonical_hash(self.to_dict())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ConditionSchema":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"condition schema is not valid JSON: {exc}") from None

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "ConditionSchema":
        return cls.from_json(Path(path).read_text())
