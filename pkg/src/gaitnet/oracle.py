"""Synthetic anatomy-to-gait simulator used as the data source and ground truth.

Every joint axis follows a harmonic base trajectory over one gait cycle
(scaled by stride/cadence), shifted by skeleton offsets, plus response
terms. A response row pools muscle deficits ``1 - c`` through one row of
the influence matrix into a drive ``d``, saturates it smoothly
(``s * tanh(d / s)``) and multiplies a fixed phase shape made of periodic
bumps. Muscle parameters whose influence columns coincide are pooled
before mixing so moving along a certified redundancy direction leaves the
drives, and therefore the whole gait pattern, unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError, VersionError
from .gait import N_FRAMES, PHASES, GaitPattern, PoseLayout, euler_to_matrix, rot_encode
from .schema import ConditionSchema, canonical_hash

ORACLE_FORMAT = "gaitnet-oracle"
ORACLE_VERSION = 1
AXES = ("x", "y", "z")
ROOT_CHANNELS = ("h", "vx", "vy")


def _harmonics(spec, phases) -> np.ndarray:
    out = np.zeros_like(phases)
    for order, amp, phase_deg in spec:
        out += amp * np.cos(order * phases - np.radians(phase_deg))
    return out


def _bumps(spec, phases) -> np.ndarray:
    out = np.zeros_like(phases)
    for center_pct, kappa, amp in spec:
        center = 2.0 * np.pi * center_pct / 100.0
        out += amp * np.exp(kappa * (np.cos(phases - center) - 1.0))
    return out


@dataclass
class Redundancy:
    name: str
    direction: np.ndarray  # over the anatomy vector


class Oracle:
    """Pure, deterministic gait simulator configured by an oracle schema file."""

    def __init__(self, spec: dict):
        if spec.get("format") != ORACLE_FORMAT:
            raise FormatError(f"not an oracle schema (format={spec.get('format')!r})")
        if spec.get("version") != ORACLE_VERSION:
            raise VersionError(
                f"oracle schema version {spec.get('version')} unsupported (expected {ORACLE_VERSION})"
            )
        self.spec = spec
        self.schema = ConditionSchema.from_parameters(spec["parameters"])
        self.joints = list(spec["joints"])
        self.layout = PoseLayout(len(self.joints))
        self.hash = canonical_hash(spec)
        self.version = spec["version"]
        self._build()

    # ------------------------------------------------------------------
    @classmethod
    def from_file(cls, path) -> "Oracle":
        try:
            return cls(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"oracle schema is not valid JSON: {exc}") from None

    @classmethod
    def desk(cls) -> "Oracle":
        text = resources.files("gaitnet.data").joinpath("desk_oracle.json").read_text()
        return cls(json.loads(text))

    def channel_index(self, channel: str) -> int:
        joint, axis = channel.split(".")
        if joint == "root":
            return 3 * len(self.joints) + ROOT_CHANNELS.index(axis)
        return 3 * self.joints.index(joint) + AXES.index(axis)

    def _build(self):
        s = self.schema
        spec = self.spec
        n_rot = 3 * len(self.joints)
        n_ch = n_rot + len(ROOT_CHANNELS)
        self.n_channels = n_ch
        self.muscle_names = s.names_in("muscle")
        self.skeleton_names = s.names_in("skeleton")
        self.gait_names = s.names_in("gait")
        n_anat = len(s.anatomy_idx)
        self.n_anatomy = n_anat
        ph = PHASES

        self._base_mean = np.zeros(n_ch)
        self._base_osc = np.zeros((N_FRAMES, n_ch))
        self._stride_gain = np.zeros(n_ch)
        self._cadence_gain = np.zeros(n_ch)
        for j in self.joints:
            for ax in AXES:
                ch = f"{j}.{ax}"
                if ch not in spec["base"]:
                    raise FormatError(f"oracle schema lacks base trajectory for {ch}")
                b = spec["base"][ch]
                k = self.channel_index(ch)
                self._base_mean[k] = b["mean"]
                self._base_osc[:, k] = _harmonics(b["harmonics"], ph)
                self._stride_gain[k] = b.get("stride_gain", 0.0)
                self._cadence_gain[k] = b.get("cadence_gain", 0.0)
        self._root_scale = []
        for name in ROOT_CHANNELS:
            r = spec["root"][name]
            k = self.channel_index(f"root.{name}")
            self._base_mean[k] = r["mean"]
            self._base_osc[:, k] = _harmonics(r["harmonics"], ph)
            legs = [s.position(p) for p in r.get("leg_params", [])]
            gaits = [s.position(p) for p in r.get("gait_params", [])]
            self._root_scale.append((k, legs, gaits))

        rows = spec["responses"]
        self.response_names = [r["name"] for r in rows]
        A = np.zeros((len(rows), len(self.muscle_names)))
        self._row_channel = np.zeros(len(rows), dtype=int)
        self._row_sat = np.full(len(rows), np.inf)
        shapes = np.zeros((len(rows), N_FRAMES, n_ch))
        for i, r in enumerate(rows):
            k = self.channel_index(r["channel"])
            self._row_channel[i] = k
            if r.get("saturation") is not None:
                self._row_sat[i] = r["saturation"]
            shapes[i, :, k] = _bumps(r["bumps"], ph)
            for name, coef in r["influence"].items():
                A[i, self.muscle_names.index(name)] = coef
        self.influence = A
        self._row_shapes = shapes
        self._shape_matrix = shapes.reshape(len(rows), -1)

        # pool muscle parameters whose influence columns are identical
        pools: list[list[int]] = []
        for m in range(A.shape[1]):
            if not A[:, m].any():
                continue
            for pool in pools:
                if np.array_equal(A[:, pool[0]], A[:, m]):
                    pool.append(m)
                    break
            else:
                pools.append([m])
        self._pools = pools
        self._pooled_A = np.stack([A[:, p[0]] for p in pools], axis=1)
        self.inert_params = [n for m, n in enumerate(self.muscle_names) if not A[:, m].any()]

        self._offsets = np.zeros((n_anat + len(self.gait_names), n_ch))
        for o in spec.get("skeleton_offsets", []):
            self._offsets[s.position(o["param"]), self.channel_index(o["channel"])] += o["gain"]
        self._asym = np.zeros((N_FRAMES, n_ch))
        for ch, amp in spec.get("cycle_asymmetry", {}).items():
            self._asym[:, self.channel_index(ch)] = amp * np.sin(0.5 * ph)

        self.redundancy = []
        for red in spec.get("redundancy", []):
            r = np.zeros(n_anat)
            for name, v in red["direction"].items():
                pos = s.position(name)
                if s.groups[pos] != "muscle":
                    raise FormatError(f"redundancy {red['name']} touches non-muscle parameter {name}")
                r[pos] = v
            rm = r[s.muscle_idx]
            if np.any(A @ rm != 0.0):
                raise FormatError(f"redundancy direction {red['name']} is not in the influence null space")
            touched = np.flatnonzero(rm)
            if not any(set(touched) <= set(p) for p in pools) and len(touched) > 1:
                raise FormatError(f"redundancy direction {red['name']} mixes non-pooled columns")
            self.redundancy.append(Redundancy(red["name"], r))
        self.pathologies = {}
        for name, values in spec.get("pathologies", {}).items():
            a = self.reference_anatomy()
            for p, v in values.items():
                a[s.position(p)] = v
            self.pathologies[name] = a
        self.lipschitz_bound = spec.get("lipschitz_bound")

    # ------------------------------------------------------------------
    def valid_ranges(self) -> ConditionSchema:
        return self.schema

    def reference_anatomy(self) -> np.ndarray:
        return self.schema.reference[self.schema.anatomy_idx].copy()

    def reference_gait(self) -> np.ndarray:
        return self.schema.reference[self.schema.gait_idx].copy()

    def muscle_positions(self, names) -> np.ndarray:
        """Positions of muscle parameter names within the muscle block."""
        return np.array([self.muscle_names.index(n) for n in names], dtype=int)

    # ------------------------------------------------------------------
    def drives(self, full: np.ndarray) -> np.ndarray:
        """``(n, n_rows)`` response drives before saturation."""
        s = self.schema
        deficit = s.reference[s.muscle_idx] - full[:, s.muscle_idx]
        pooled = np.empty((len(full), len(self._pools)))
        for g, pool in enumerate(self._pools):
            acc = deficit[:, pool[0]].copy()
            for m in pool[1:]:
                acc += deficit[:, m]
            pooled[:, g] = acc
        return pooled @ self._pooled_A.T

    def channels(self, full) -> np.ndarray:
        """``(n, N_FRAMES, n_channels)``: joint Euler angles in degrees, then h, vx, vy."""
        full = np.atleast_2d(np.asarray(full, float))
        s = self.schema
        if full.shape[1] != s.n_params:
            raise RangeError(f"expected {s.n_params} condition values, got {full.shape[1]}")
        s.check(full)
        stride = full[:, s.position("stride")] if "stride" in s.names else np.ones(len(full))
        cadence = full[:, s.position("cadence")] if "cadence" in s.names else np.ones(len(full))
        gain = 1.0 + np.outer(stride - 1.0, self._stride_gain) + np.outer(cadence - 1.0, self._cadence_gain)
        offsets = (full - s.reference) @ self._offsets
        out = self._base_mean + gain[:, None, :] * self._base_osc[None] + offsets[:, None, :] + self._asym[None]
        d = self.drives(full)
        sat = self._row_sat
        resp = np.where(np.isfinite(sat), sat * np.tanh(d / np.where(np.isfinite(sat), sat, 1.0)), d)
        for k, legs, gaits in self._root_scale:
            scale = np.ones(len(full))
            if legs:
                scale = full[:, legs].mean(axis=1)
            for g in gaits:
                scale = scale * full[:, g]
            out[:, :, k] = scale[:, None] * (self._base_mean[k] + self._base_osc[:, k])[None]
            out[:, :, k] += offsets[:, None, k] + self._asym[None, :, k]
        out += (resp @ self._shape_matrix).reshape(out.shape)
        return out

    def simulate_batch(self, full) -> np.ndarray:
        """Flat ``(n, gait_dim)`` gait patterns for full condition vectors."""
        ch = self.channels(full)
        n_rot = 3 * len(self.joints)
        ang = np.radians(ch[:, :, :n_rot]).reshape(len(ch), N_FRAMES, len(self.joints), 3)
        q = rot_encode(euler_to_matrix(ang[..., 0], ang[..., 1], ang[..., 2]))
        root = ch[:, :, n_rot:]
        frames = np.concatenate([root, q.reshape(len(ch), N_FRAMES, -1)], axis=-1)
        return frames.reshape(len(ch), -1)

    def simulate(self, anatomy, gait) -> GaitPattern:
        full = self.schema.join(np.asarray(anatomy, float), np.asarray(gait, float))
        return GaitPattern.from_flat(self.simulate_batch(full[None])[0], self.layout)

    def redundant_pair(self, anatomy, direction_index: int, magnitude: float) -> np.ndarray:
        """Move ``anatomy`` along a certified redundancy direction."""
        red = self.redundancy[direction_index]
        out = np.asarray(anatomy, float) + magnitude * red.direction
        idx = self.schema.anatomy_idx
        lo, hi = self.schema.lo[idx], self.schema.hi[idx]
        if np.any(out < lo) or np.any(out > hi):
            k = int(np.argmax((out < lo) | (out > hi)))
            raise RangeError(
                f"moving {magnitude} along {red.name} puts {self.schema.names[idx[k]]} at {out[k]:.6g}, "
                f"outside [{lo[k]}, {hi[k]}]"
            )
        return out
