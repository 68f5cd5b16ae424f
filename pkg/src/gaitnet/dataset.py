"""Condition sampling, oracle-backed tuple generation and the binary dataset format.

Dataset file layout (little-endian)::

    b"BGND" | u32 version | 32-byte oracle hash | u32 oracle version
    | u16 len + strategy tag | i64 seed | u32 len + condition-schema JSON
    | u64 count | u32 n_cond | u32 gait_dim
    | count * (n_cond + gait_dim) float32, row-major, condition block first
    | u32 crc32 of everything above
"""

from __future__ import annotations

import csv
import struct
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SchemaMismatchError, ShapeError, VersionError
from .oracle import Oracle
from .schema import ConditionSchema

DATA_MAGIC = b"BGND"
DATA_VERSION = 1
CHUNK = 1024  # fixed so results never depend on the worker count


@dataclass(eq=False)
class Dataset:
    schema: ConditionSchema
    oracle_hash: str
    oracle_version: int
    conditions: np.ndarray  # (n, n_params) float32: anatomy then gait
    gaits: np.ndarray  # (n, gait_dim) float32
    strategy: str = "custom"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.conditions.shape[0] != self.gaits.shape[0]:
            raise ShapeError("condition and gait blocks have different tuple counts")
        if self.conditions.shape[1] != self.schema.n_params:
            raise ShapeError(
                f"conditions have {self.conditions.shape[1]} columns, schema has {self.schema.n_params}"
            )

    def __len__(self) -> int:
        return len(self.conditions)

    @property
    def anatomy(self) -> np.ndarray:
        return self.conditions[:, self.schema.anatomy_idx]

    @property
    def gait_cond(self) -> np.ndarray:
        return self.conditions[:, self.schema.gait_idx]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.schema,
            self.oracle_hash,
            self.oracle_version,
            self.conditions[idx],
            self.gaits[idx],
            self.strategy,
            self.seed,
            dict(self.meta),
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if other.oracle_hash != self.oracle_hash:
            raise SchemaMismatchError("cannot concatenate datasets from different oracle schemas")
        return Dataset(
            self.schema,
            self.oracle_hash,
            self.oracle_version,
            np.concatenate([self.conditions, other.conditions]),
            np.concatenate([self.gaits, other.gaits]),
            self.strategy,
            self.seed,
            dict(self.meta),
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and self.oracle_hash == other.oracle_hash
            and self.oracle_version == other.oracle_version
            and self.strategy == other.strategy
            and self.seed == other.seed
            and np.array_equal(self.conditions, other.conditions)
            and np.array_equal(self.gaits, other.gaits)
        )


# ---------------------------------------------------------------------------
# sampling


def sample_uniform(n: int, schema: ConditionSchema, seed: int) -> np.ndarray:
    """``(n, n_params)`` conditions, each parameter i.i.d. uniform on its range."""
    rng = np.random.default_rng(seed)
    return rng.uniform(schema.lo, schema.hi, size=(n, schema.n_params))


def sample_grid(n: int, schema: ConditionSchema, seed: int, gait_corners: bool = False) -> np.ndarray:
    """Corner samples: every anatomy parameter at its min or max with probability 1/2.

    Corners are drawn i.i.d. with replacement. Gait parameters stay
    continuous uniform unless ``gait_corners`` is set.
    """
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, 2, size=(n, schema.n_params)).astype(bool)
    out = np.where(pick, schema.hi, schema.lo)
    cont = rng.uniform(schema.lo, schema.hi, size=(n, schema.n_params))
    if not gait_corners:
        gi = schema.gait_idx
        out[:, gi] = cont[:, gi]
    return out


def sample(strategy: str, n: int, schema: ConditionSchema, seed: int) -> np.ndarray:
    if strategy == "uniform":
        return sample_uniform(n, schema, seed)
    if strategy == "grid":
        return sample_grid(n, schema, seed)
    raise ValueError(f"unknown sampling strategy {strategy!r} (expected 'uniform' or 'grid')")


# ---------------------------------------------------------------------------
# generation


def _simulate_chunk(args):
    oracle, chunk = args
    return oracle.simulate_batch(chunk).astype(np.float32)


def generate(
    conditions,
    oracle: Oracle,
    strategy: str = "custom",
    seed: int = 0,
    workers: int = 1,
) -> Dataset:
    """Simulate one tuple per condition row, preserving input order.

    Conditions are rounded to float32 first so the stored values are
    exactly the ones that were simulated.
    """
    cond = np.asarray(conditions, dtype=np.float64).reshape(-1, oracle.schema.n_params)
    cond32 = cond.astype(np.float32)
    chunks = [cond32[i : i + CHUNK].astype(np.float64) for i in range(0, len(cond32), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, [(oracle, c) for c in chunks]))
    else:
        parts = [_simulate_chunk((oracle, c)) for c in chunks]
    gaits = np.concatenate(parts) if parts else np.zeros((0, oracle.layout.gait_dim), np.float32)
    return Dataset(oracle.schema, oracle.hash, oracle.version, cond32, gaits, strategy, int(seed))


def pathology_dataset(oracle: Oracle, gait=None) -> Dataset:
    """The named pathology analogs at reference (or given) gait conditions."""
    names = list(oracle.pathologies)
    g = oracle.reference_gait() if gait is None else np.asarray(gait, float)
    cond = np.stack([oracle.schema.join(oracle.pathologies[n], g) for n in names])
    ds = generate(cond, oracle, strategy="pathology")
    ds.meta["case_names"] = names
    return ds


def split_holdout(ds: Dataset, n_holdout: int, seed: int, forced: Dataset | None = None):
    """Disjoint ``(train, holdout)`` split.

    ``forced`` tuples (e.g. pathology analogs) are appended to the holdout
    and count towards ``n_holdout``; the rest is drawn from ``ds``.
    """
    n_forced = 0 if forced is None else len(forced)
    n_draw = n_holdout - n_forced
    if n_draw < 0 or n_draw > len(ds):
        raise ValueError(f"cannot hold out {n_holdout} tuples ({n_forced} forced) from {len(ds)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    hold_idx = np.sort(perm[:n_draw])
    train_idx = np.sort(perm[n_draw:])
    holdout = ds.subset(hold_idx)
    holdout.meta["indices"] = hold_idx.tolist()
    if forced is not None:
        holdout = holdout.concat(forced)
        holdout.meta["indices"] = hold_idx.tolist()
        holdout.meta["case_names"] = [f"random_{i}" for i in hold_idx] + list(
            forced.meta.get("case_names", [f"forced_{k}" for k in range(n_forced)])
        )
    else:
        holdout.meta["case_names"] = [f"random_{i}" for i in hold_idx]
    return ds.subset(train_idx), holdout


# ---------------------------------------------------------------------------
# persistence


def to_bytes(ds: Dataset) -> bytes:
    tag = ds.strategy.encode()
    sj = ds.schema.to_json().encode()
    header = (
        DATA_MAGIC
        + struct.pack("<I", DATA_VERSION)
        + bytes.fromhex(ds.oracle_hash)
        + struct.pack("<I", ds.oracle_version)
        + struct.pack("<H", len(tag))
        + tag
        + struct.pack("<q", ds.seed)
        + struct.pack("<I", len(sj))
        + sj
        + struct.pack("<QII", len(ds), ds.conditions.shape[1], ds.gaits.shape[1])
    )
    rows = np.concatenate([ds.conditions, ds.gaits], axis=1).astype("<f4")
    body = header + rows.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes, expected_hash: str | None = None) -> Dataset:
    def need(pos, n, what):
        if len(data) < pos + n:
            raise FormatError(f"truncated dataset file at byte {pos}: missing {what}")

    need(0, 8, "magic/version")
    if data[:4] != DATA_MAGIC:
        raise FormatError("not a dataset file (missing BGND magic at byte 0)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != DATA_VERSION:
        raise VersionError(f"dataset version {version} unsupported (this build reads version {DATA_VERSION})")
    pos = 8
    need(pos, 38, "schema hash")
    oracle_hash = data[pos : pos + 32].hex()
    (oracle_version, tag_len) = struct.unpack_from("<IH", data, pos + 32)
    pos += 38
    need(pos, tag_len + 12, "strategy tag")
    strategy = data[pos : pos + tag_len].decode()
    pos += tag_len
    (seed, sj_len) = struct.unpack_from("<qI", data, pos)
    pos += 12
    need(pos, sj_len + 16, "condition schema")
    schema = ConditionSchema.from_json(data[pos : pos + sj_len].decode())
    pos += sj_len
    count, n_cond, gait_dim = struct.unpack_from("<QII", data, pos)
    pos += 16
    payload = count * (n_cond + gait_dim) * 4
    if len(data) != pos + payload + 4:
        raise FormatError(
            f"truncated dataset file: header promises {count} tuples ({pos + payload + 4} bytes), "
            f"file has {len(data)} bytes"
        )
    (crc,) = struct.unpack_from("<I", data, pos + payload)
    if crc != zlib.crc32(data[: pos + payload]):
        raise FormatError("dataset checksum mismatch (corrupt payload)")
    if expected_hash is not None and expected_hash != oracle_hash:
        raise SchemaMismatchError(
            f"dataset was generated under oracle schema {oracle_hash[:12]}..., expected {expected_hash[:12]}..."
        )
    rows = np.frombuffer(data, dtype="<f4", count=count * (n_cond + gait_dim), offset=pos)
    rows = rows.reshape(count, n_cond + gait_dim).astype(np.float32)
    return Dataset(
        schema, oracle_hash, oracle_version, rows[:, :n_cond].copy(), rows[:, n_cond:].copy(), strategy, seed
    )


def write(ds: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def read(path, expected_hash: str | None = None) -> Dataset:
    return from_bytes(Path(path).read_bytes(), expected_hash)


def write_csv(ds: Dataset, path, include_gait: bool = False) -> None:
    """Human-readable export; gait columns are optional because they are wide."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = list(ds.schema.names)
        if include_gait:
            head += [f"g{k}" for k in range(ds.gaits.shape[1])]
        w.writerow(head)
        for i in range(len(ds)):
            row = [repr(float(x)) for x in ds.conditions[i]]
            if include_gait:
                row += [repr(float(x)) for x in ds.gaits[i]]
            w.writerow(row)


def warn_if_empty(ds: Dataset) -> None:
    if len(ds) == 0:
        warnings.warn("dataset is empty", stacklevel=2)
