"""Phase-conditioned forward network: (phase, anatomy, gait conditions) -> pose."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dataset import Dataset
from .errors import NonFiniteError, SchemaMismatchError, ShapeError
from .gait import N_FRAMES, PHASES, GaitPattern, PoseLayout, pose_loss_and_grad, rot_decode
from .schema import ConditionSchema

PHASE_DIM = 2
_NORM_FLOOR = 1e-3


@dataclass
class FgnConfig:
    hidden: list[int] = field(default_factory=lambda: [512, 512, 512])
    batch_size: int = 4096
    learning_rate: float = 1e-5
    lr_final: float | None = None  # geometric decay to this rate over the epochs
    epochs: int = 50
    w_h: float = 1.0
    w_v: float = 1.0
    seed: int = 0
    patience: int = 5
    min_rel_improvement: float = 1e-4
    frames_per_tuple: int = 1  # (tuple, frame) pairs drawn per tuple per epoch
    dtype: str = "float32"
    time_budget_s: float | None = None

    def __post_init__(self):
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be positive, got {self.hidden}")
        if self.batch_size < 1 or self.epochs < 0 or self.frames_per_tuple < 1:
            raise ValueError("batch_size, frames_per_tuple must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def phase_features(phi) -> np.ndarray:
    """``(cos(phi/2), sin(phi/2))``: one turn over the two-cycle window."""
    phi = np.asarray(phi, dtype=float)
    return np.stack([np.cos(0.5 * phi), np.sin(0.5 * phi)], axis=-1)


PHASE_TABLE = phase_features(PHASES)


def build_fgn(cfg: FgnConfig, schema: ConditionSchema, n_joints: int = 9) -> nn.Network:
    layout = PoseLayout(n_joints)
    sizes = [PHASE_DIM + schema.n_params, *cfg.hidden, layout.pose_dim]
    net = nn.mlp_new(sizes, "relu", "linear", seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    net.meta = {
        "kind": "fgn",
        "schema_hash": schema.hash,
        "schema": schema.to_dict(),
        "n_joints": n_joints,
        "config": asdict(cfg),
    }
    return net


def fgn_schema(fgn: nn.Network) -> ConditionSchema:
    return ConditionSchema.from_dict(fgn.meta["schema"])


def check_fgn(fgn: nn.Network, schema: ConditionSchema) -> None:
    if fgn.meta.get("kind") != "fgn":
        raise SchemaMismatchError("weights are not a forward network")
    if fgn.meta.get("schema_hash") != schema.hash:
        raise SchemaMismatchError(
            f"forward network was built for condition schema {str(fgn.meta.get('schema_hash'))[:12]}..., "
            f"data uses {schema.hash[:12]}..."
        )


def load_fgn(path, schema: ConditionSchema | None = None) -> nn.Network:
    net = nn.load_weights(path)
    if schema is not None:
        check_fgn(net, schema)
    elif net.meta.get("kind") != "fgn":
        raise SchemaMismatchError("weights are not a forward network")
    return net


def fgn_inputs(phase_feat: np.ndarray, cond_norm: np.ndarray) -> np.ndarray:
    """Rows ``[phase(2) | normalized condition]`` for paired phases and conditions."""
    return np.concatenate([phase_feat, cond_norm], axis=-1)


def _layout(fgn: nn.Network) -> PoseLayout:
    return PoseLayout(int(fgn.meta.get("n_joints", (fgn.n_out - 3) // 6)))


# ---------------------------------------------------------------------------
# training


def _canonical_order(cond: np.ndarray) -> np.ndarray:
    """Order tuples by content so training does not depend on storage order."""
    return np.lexsort(cond.T[::-1])


def _normalization(cond_norm: np.ndarray, gaits: np.ndarray, layout: PoseLayout, dtype):
    in_mean = np.concatenate([PHASE_TABLE.mean(axis=0), cond_norm.mean(axis=0)])
    in_std = np.concatenate([PHASE_TABLE.std(axis=0), cond_norm.std(axis=0)])
    n = len(gaits)
    s1 = np.zeros(layout.pose_dim)
    s2 = np.zeros(layout.pose_dim)
    for i in range(0, n, 2048):
        fr = layout.gait_to_frames(gaits[i : i + 2048]).astype(np.float64)
        s1 += fr.sum(axis=(0, 1))
        s2 += (fr * fr).sum(axis=(0, 1))
    cnt = n * N_FRAMES
    out_mean = s1 / cnt
    out_std = np.sqrt(np.maximum(s2 / cnt - out_mean**2, 0.0))
    in_std = np.maximum(in_std, _NORM_FLOOR)
    out_std = np.maximum(out_std, _NORM_FLOOR)
    return (in_mean.astype(dtype), in_std.astype(dtype)), (out_mean.astype(dtype), out_std.astype(dtype))


def fgn_batch_loss(fgn, x, target, layout, w_h=1.0, w_v=1.0, record=False):
    """Per-row pose loss of the network on inputs ``x`` against target poses."""
    h, v, q = layout.split(target)
    out = nn.forward(fgn, x, record=record)
    pred, rec = (out if record else (out, None))
    loss, grad = pose_loss_and_grad(pred, h, v, rot_decode(q), layout, w_h, w_v)
    return loss, grad, rec


def train_fgn(ds: Dataset, cfg: FgnConfig, log=None, history_csv=None):
    """Fit a forward network by minibatch Adam over (tuple, frame) pairs.

    Returns ``(network, history)`` where ``history`` lists the mean training
    loss of every completed epoch.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    schema = ds.schema
    layout = PoseLayout((ds.gaits.shape[1] // N_FRAMES - 3) // 6)
    if layout.gait_dim != ds.gaits.shape[1]:
        raise ShapeError(f"gait width {ds.gaits.shape[1]} is not a whole number of poses")
    dtype = np.dtype(cfg.dtype)
    fgn = build_fgn(cfg, schema, layout.n_joints)
    order = _canonical_order(ds.conditions)
    cond_norm = schema.normalize(ds.conditions[order].astype(np.float64)).astype(dtype)
    gaits = ds.gaits[order]
    fgn.input_norm, fgn.output_norm = _normalization(cond_norm, gaits, layout, dtype)
    frames = gaits.reshape(len(gaits), N_FRAMES, layout.pose_dim)
    phase_tab = PHASE_TABLE.astype(dtype)

    state = nn.AdamState.for_network(fgn, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    n_pairs = n * cfg.frames_per_tuple
    bs = min(cfg.batch_size, n_pairs)
    history: list[float] = []
    best = np.inf
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        state.learning_rate = lr_at(cfg.learning_rate, cfg.lr_final, epoch, cfg.epochs)
        tup = np.tile(np.arange(n), cfg.frames_per_tuple)[rng.permutation(n_pairs)]
        fr = rng.integers(0, N_FRAMES, size=n_pairs)
        total = 0.0
        for start in range(0, n_pairs, bs):
            ti = tup[start : start + bs]
            fi = fr[start : start + bs]
            x = fgn_inputs(phase_tab[fi], cond_norm[ti])
            target = frames[ti, fi]
            loss, grad, rec = fgn_batch_loss(fgn, x, target, layout, cfg.w_h, cfg.w_v, record=True)
            batch_loss = float(np.sum(loss, dtype=np.float64))
            if not np.isfinite(batch_loss):
                raise NonFiniteError(
                    f"forward training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"step {state.step_count + 1} (learning rate {cfg.learning_rate})"
                )
            total += batch_loss
            grads, _ = nn.backward(fgn, rec, grad / len(ti))
            nn.adam_step(state, fgn, grads)
        history.append(total / n_pairs)
        if log:
            log(f"fgn epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.6g}")
        if history[-1] < best * (1.0 - cfg.min_rel_improvement):
            best = history[-1]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        if cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s:
            break
    fgn.meta["history"] = history
    fgn.meta["adam_steps"] = state.step_count
    fgn.frozen = True
    if history_csv is not None:
        write_history(history, history_csv)
    return fgn, history


def lr_at(lr0: float, lr_final: float | None, epoch: int, epochs: int) -> float:
    if lr_final is None or epochs <= 1:
        return lr0
    return lr0 * (lr_final / lr0) ** (epoch / (epochs - 1))


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(history, 1):
            w.writerow([k, repr(float(v))])


# ---------------------------------------------------------------------------
# rollout


def rollout_batch(fgn: nn.Network, full_conditions) -> np.ndarray:
    """Flat ``(n, gait_dim)`` patterns for ``(n, n_params)`` physical conditions."""
    schema = fgn_schema(fgn)
    full = np.atleast_2d(np.asarray(full_conditions, dtype=np.float64))
    cond_norm = schema.normalize(full).astype(fgn.dtype)
    n = len(full)
    x = fgn_inputs(
        np.broadcast_to(PHASE_TABLE.astype(fgn.dtype), (n, N_FRAMES, PHASE_DIM)),
        np.broadcast_to(cond_norm[:, None, :], (n, N_FRAMES, cond_norm.shape[1])),
    ).reshape(n * N_FRAMES, -1)
    y = nn.forward(fgn, x).astype(np.float64)
    return y.reshape(n, -1)


def rollout(fgn: nn.Network, anatomy, gait) -> GaitPattern:
    schema = fgn_schema(fgn)
    full = schema.join(anatomy, gait)
    return GaitPattern.from_flat(rollout_batch(fgn, full[None])[0], _layout(fgn))


def pose_at(fgn: nn.Network, phi: float, anatomy, gait) -> np.ndarray:
    """Single-phase evaluation of the network."""
    schema = fgn_schema(fgn)
    cond_norm = schema.normalize(schema.join(anatomy, gait)).astype(fgn.dtype)
    x = fgn_inputs(phase_features(phi).astype(fgn.dtype), cond_norm)[None]
    return nn.forward(fgn, x)[0].astype(np.float64)
