"""Backward network: a conditional VAE over muscle conditions decoded through a frozen forward network.

The encoder maps ``[gait pattern | gait condition | skeleton condition]``
to a diagonal Gaussian over a latent code. A pre-decoder maps the latent
code to normalized muscle conditions for a subset (mask) of muscles; the
remaining muscles sit at their reference value. Training rolls the
predicted condition through the frozen forward network and penalizes
gait mismatch, KL to the standard normal prior and distance of the
predicted muscles from reference.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dataset import Dataset
from .errors import FormatError, NonFiniteError, SchemaMismatchError, ShapeError, VersionError
from .forward import PHASE_TABLE, check_fgn, fgn_inputs
from .gait import N_FRAMES, PoseLayout, d_gait, pose_loss_and_grad, rot_decode
from .schema import ConditionSchema

KNEE_ANKLE_GROUPS = ("knee_extensor", "knee_flexor", "plantarflexor", "dorsiflexor")
BUNDLE_FORMAT = "gaitnet-experts"
BUNDLE_VERSION = 1
_NORM_FLOOR = 1e-3


@dataclass
class BgnConfig:
    encoder_hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    decoder_hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    latent: int = 32
    w_g: float = 1.0
    w_kl: float = 1e-3
    w_m: float | list[float] = 1e-3
    batch_size: int = 2048
    learning_rate: float = 1e-5
    epochs: int = 10
    max_steps: int | None = None
    mask: list[str] | None = None  # muscle names; None means every muscle
    seed: int = 0
    dtype: str = "float32"
    time_budget_s: float | None = None

    def __post_init__(self):
        if self.latent < 1:
            raise ValueError("latent dimension must be >= 1")
        w_m = np.atleast_1d(np.asarray(self.w_m, float))
        if self.w_g < 0 or self.w_kl < 0 or np.any(w_m < 0):
            raise ValueError("loss weights must be non-negative")
        if self.mask is not None and len(self.mask) == 0:
            raise ValueError("muscle mask must not be empty")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def knee_ankle_mask(schema: ConditionSchema) -> list[str]:
    return [n for n in schema.names_in("muscle") if any(g in n for g in KNEE_ANKLE_GROUPS)]


def expert_presets(base: BgnConfig, schema: ConditionSchema) -> list[BgnConfig]:
    """Three experts: knee+ankle subset, then two full-mask weightings."""
    d = asdict(base)
    e0 = BgnConfig(**{**d, "mask": knee_ankle_mask(schema), "w_g": 1.0, "w_kl": 1e-3, "w_m": 1e-3})
    e1 = BgnConfig(**{**d, "mask": None, "w_g": 1.0, "w_kl": 1e-3, "w_m": 1e-3, "seed": base.seed + 1})
    e2 = BgnConfig(**{**d, "mask": None, "w_g": 1.0, "w_kl": 1e-2, "w_m": 1e-2, "seed": base.seed + 2})
    return [e0, e1, e2]


@dataclass
class Bgn:
    encoder: nn.Network
    pre_decoder: nn.Network
    schema: ConditionSchema
    config: BgnConfig
    mask: np.ndarray  # positions within the muscle block

    @property
    def latent(self) -> int:
        return self.pre_decoder.n_in

    @property
    def masked_idx(self) -> np.ndarray:
        """Positions of the masked muscles within the full condition vector."""
        return self.schema.muscle_idx[self.mask]

    def w_m(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.config.w_m, float), (len(self.mask),)).copy()


def build_bgn(cfg: BgnConfig, schema: ConditionSchema, gait_dim: int = PoseLayout(9).gait_dim) -> Bgn:
    muscles = schema.names_in("muscle")
    names = muscles if cfg.mask is None else list(cfg.mask)
    unknown = [n for n in names if n not in muscles]
    if unknown:
        raise SchemaMismatchError(f"mask names unknown muscle parameters: {unknown}")
    mask = np.array(sorted(muscles.index(n) for n in names), dtype=int)
    w_m = np.atleast_1d(np.asarray(cfg.w_m, float))
    if w_m.size not in (1, len(mask)):
        raise ShapeError(f"w_m has {w_m.size} entries for {len(mask)} masked muscles")
    dtype = np.dtype(cfg.dtype)
    n_in = gait_dim + len(schema.gait_idx) + len(schema.skeleton_idx)
    enc = nn.mlp_new([n_in, *cfg.encoder_hidden, 2 * cfg.latent], "leaky_relu", "linear", cfg.seed, dtype)
    dec = nn.mlp_new(
        [cfg.latent, *cfg.decoder_hidden, len(mask)], "leaky_relu", "sigmoid", cfg.seed + 7919, dtype
    )
    meta = {"schema_hash": schema.hash, "config": asdict(cfg)}
    enc.meta = {"kind": "bgn-encoder", **meta}
    dec.meta = {"kind": "bgn-pre-decoder", **meta, "mask": [muscles[i] for i in mask]}
    return Bgn(enc, dec, schema, cfg, mask)


# ---------------------------------------------------------------------------
# inference


def encoder_inputs(M, gait_cond, skeleton) -> np.ndarray:
    return np.concatenate(
        [np.atleast_2d(M), np.atleast_2d(gait_cond), np.atleast_2d(skeleton)], axis=-1
    )


def encode(bgn: Bgn, M, gait_cond, skeleton):
    """``(mu, log_sigma)``, each ``(n, latent)``; log sigma is clamped."""
    out = nn.forward(bgn.encoder, encoder_inputs(M, gait_cond, skeleton)).astype(np.float64)
    mu = out[:, : bgn.latent]
    log_sigma, _ = nn.clamp_log_sigma(out[:, bgn.latent :])
    return mu, log_sigma


def _unit_to_muscles(bgn: Bgn, s: np.ndarray) -> np.ndarray:
    sch = bgn.schema
    mi = sch.muscle_idx
    out = np.tile(sch.reference[mi], (len(s), 1))
    out[:, bgn.mask] = sch.denormalize(s, mi[bgn.mask])
    return out


def decode_muscle(bgn: Bgn, z) -> np.ndarray:
    """Physical muscle conditions ``(n, n_muscles)``; unmasked entries at reference."""
    s = nn.forward(bgn.pre_decoder, np.atleast_2d(z)).astype(np.float64)
    return _unit_to_muscles(bgn, s)


def posterior_mean(bgn: Bgn, M, gait_cond, skeleton) -> np.ndarray:
    mu, _ = encode(bgn, M, gait_cond, skeleton)
    return decode_muscle(bgn, mu)


def posterior_samples(bgn: Bgn, M, gait_cond, skeleton, n: int, seed: int):
    """``n`` reparameterized draws for one input: ``(z, muscles)``."""
    mu, log_sigma = encode(bgn, M, gait_cond, skeleton)
    if len(mu) != 1:
        raise ShapeError("posterior_samples takes a single input gait")
    noise = np.random.default_rng(seed).standard_normal((n, bgn.latent))
    z = nn.reparam_sample(mu[0], log_sigma[0], noise)
    muscles = decode_muscle(bgn, z) if n else np.zeros((0, len(bgn.schema.muscle_idx)))
    return z, muscles


def assemble(schema: ConditionSchema, skeleton, muscles, gait_cond) -> np.ndarray:
    full = np.empty((len(np.atleast_2d(muscles)), schema.n_params))
    full[:, schema.skeleton_idx] = skeleton
    full[:, schema.muscle_idx] = muscles
    full[:, schema.gait_idx] = gait_cond
    return full


# ---------------------------------------------------------------------------
# training


@dataclass
class _Batch:
    M: np.ndarray  # (B, gait_dim)
    gait: np.ndarray  # (B, n_gait) physical
    skeleton: np.ndarray  # (B, n_skel) physical
    frames_h: np.ndarray
    frames_v: np.ndarray
    frames_R: np.ndarray  # (B * 60, J, 3, 3)


def _make_batch(schema, layout, cond, gaits, idx) -> _Batch:
    M = gaits[idx]
    fr = layout.gait_to_frames(M).reshape(len(idx) * N_FRAMES, layout.pose_dim)
    h, v, q = layout.split(fr)
    c = cond[idx]
    return _Batch(M, c[:, schema.gait_idx], c[:, schema.skeleton_idx], h, v, rot_decode(q).astype(M.dtype))


def bgn_step(bgn: Bgn, fgn: nn.Network, batch: _Batch, noise: np.ndarray, grads: bool = True):
    """One evaluation of the training objective on a batch.

    Returns ``(terms, grads)`` where ``terms`` holds the batch means of
    ``recon`` (d_gait), ``kl`` and ``reg`` plus ``total``, and ``grads`` is
    ``(encoder_grads, decoder_grads)`` or ``None``.
    """
    cfg = bgn.config
    sch = bgn.schema
    layout = PoseLayout(int(fgn.meta.get("n_joints", 9)))
    B, L = len(batch.M), bgn.latent
    dt = bgn.encoder.dtype

    enc_out, enc_rec = nn.forward(bgn.encoder, encoder_inputs(batch.M, batch.gait, batch.skeleton), record=True)
    mu = enc_out[:, :L]
    log_sigma, ls_pass = nn.clamp_log_sigma(enc_out[:, L:])
    sigma = np.exp(log_sigma)
    z = mu + sigma * noise.astype(dt)
    s, dec_rec = nn.forward(bgn.pre_decoder, z, record=True)

    # normalized full condition: truth for skeleton/gait, prediction for masked muscles
    u = np.empty((B, sch.n_params), dtype=dt)
    u[:, sch.skeleton_idx] = sch.normalize(batch.skeleton, sch.skeleton_idx)
    u[:, sch.gait_idx] = sch.normalize(batch.gait, sch.gait_idx)
    u[:, sch.muscle_idx] = sch.normalize(sch.reference[sch.muscle_idx], sch.muscle_idx)
    midx = bgn.masked_idx
    u[:, midx] = s
    x = fgn_inputs(
        np.broadcast_to(PHASE_TABLE.astype(dt), (B, N_FRAMES, 2)),
        np.broadcast_to(u[:, None, :], (B, N_FRAMES, sch.n_params)),
    ).reshape(B * N_FRAMES, -1)
    pred, fgn_rec = nn.forward(fgn, x, record=True)
    pose_loss, pose_grad = pose_loss_and_grad(
        pred, batch.frames_h, batch.frames_v, batch.frames_R, layout, *_fgn_weights(fgn)
    )
    recon = pose_loss.reshape(B, N_FRAMES).mean(axis=1)

    span = sch.hi[midx] - sch.lo[midx]
    c_hat = sch.lo[midx] + s.astype(np.float64) * span
    w_m = bgn.w_m()
    reg = np.sum(w_m * (1.0 - c_hat) ** 2, axis=1)
    kl = nn.kl_diag_gaussian(mu.astype(np.float64), log_sigma.astype(np.float64))

    terms = {
        "recon": float(np.mean(recon, dtype=np.float64)),
        "kl": float(np.mean(kl)),
        "reg": float(np.mean(reg)),
    }
    terms["total"] = cfg.w_g * terms["recon"] + cfg.w_kl * terms["kl"] + terms["reg"]
    if not grads:
        return terms, None

    g_pred = (cfg.w_g / (B * N_FRAMES)) * pose_grad
    _, g_x = nn.backward(fgn, fgn_rec, g_pred.astype(dt), param_grads=False)
    g_u = g_x.reshape(B, N_FRAMES, -1)[:, :, 2:].sum(axis=1, dtype=np.float64)
    g_s = g_u[:, midx] + (2.0 / B) * w_m * (c_hat - 1.0) * span
    dec_grads, g_z = nn.backward(bgn.pre_decoder, dec_rec, g_s.astype(dt))
    kl_mu, kl_ls = nn.kl_diag_gaussian_grad(mu, log_sigma)
    g_mu = g_z + (cfg.w_kl / B) * kl_mu
    g_ls = (g_z * sigma * noise + (cfg.w_kl / B) * kl_ls) * ls_pass
    enc_grads, _ = nn.backward(bgn.encoder, enc_rec, np.concatenate([g_mu, g_ls], axis=1).astype(dt))
    return terms, (enc_grads, dec_grads)


def _fgn_weights(fgn):
    c = fgn.meta.get("config", {})
    return c.get("w_h", 1.0), c.get("w_v", 1.0)


def _encoder_norm(ds: Dataset, dtype):
    sch = ds.schema
    n = len(ds)
    s1 = np.zeros(ds.gaits.shape[1])
    s2 = np.zeros(ds.gaits.shape[1])
    for i in range(0, n, 4096):
        g = ds.gaits[i : i + 4096].astype(np.float64)
        s1 += g.sum(axis=0)
        s2 += (g * g).sum(axis=0)
    gm = s1 / n
    gs = np.sqrt(np.maximum(s2 / n - gm * gm, 0.0))
    cond = ds.conditions.astype(np.float64)
    side = np.concatenate([cond[:, sch.gait_idx], cond[:, sch.skeleton_idx]], axis=1)
    mean = np.concatenate([gm, side.mean(axis=0)])
    std = np.maximum(np.concatenate([gs, side.std(axis=0)]), _NORM_FLOOR)
    return mean.astype(dtype), std.astype(dtype)


def fgn_fingerprint(fgn: nn.Network) -> str:
    return hashlib.sha256(fgn.param_bytes()).hexdigest()


def train_bgn(ds: Dataset, fgn: nn.Network, cfg: BgnConfig, log=None, history_csv=None):
    """Train one backward network against a frozen forward network.

    Returns ``(bgn, history)``; ``history`` is a list of per-epoch dicts
    with the mean ``total``, ``recon``, ``kl`` and ``reg`` terms.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not fgn.frozen:
        raise SchemaMismatchError("the forward network must be frozen before backward training")
    check_fgn(fgn, ds.schema)
    layout = PoseLayout(int(fgn.meta.get("n_joints", 9)))
    if ds.gaits.shape[1] != layout.gait_dim:
        raise ShapeError(f"dataset gait width {ds.gaits.shape[1]} != forward network's {layout.gait_dim}")
    dtype = np.dtype(cfg.dtype)
    fgn_run = fgn if fgn.dtype == dtype else fgn.astype(dtype)
    fgn_run.frozen = True
    bgn = build_bgn(cfg, ds.schema, layout.gait_dim)
    bgn.encoder.input_norm = _encoder_norm(ds, dtype)
    fp = fgn_fingerprint(fgn)
    bgn.encoder.meta["fgn_fingerprint"] = fp

    order = np.lexsort(ds.conditions.T[::-1])
    cond = ds.conditions[order].astype(np.float64)
    gaits = ds.gaits[order].astype(dtype, copy=False)
    n = len(ds)
    bs = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    enc_state = nn.AdamState.for_network(bgn.encoder, cfg.learning_rate)
    dec_state = nn.AdamState.for_network(bgn.pre_decoder, cfg.learning_rate)
    history: list[dict] = []
    t0 = time.perf_counter()
    done = False
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        acc = {"total": 0.0, "recon": 0.0, "kl": 0.0, "reg": 0.0}
        seen = 0
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            batch = _make_batch(ds.schema, layout, cond, gaits, idx)
            noise = rng.standard_normal((len(idx), bgn.latent))
            terms, (eg, dg) = bgn_step(bgn, fgn_run, batch, noise)
            if not np.isfinite(terms["total"]):
                raise NonFiniteError(
                    f"backward training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"step {enc_state.step_count + 1} ({terms})"
                )
            nn.adam_step(enc_state, bgn.encoder, eg)
            nn.adam_step(dec_state, bgn.pre_decoder, dg)
            for k in acc:
                acc[k] += terms[k] * len(idx)
            seen += len(idx)
            if cfg.max_steps is not None and enc_state.step_count >= cfg.max_steps:
                done = True
                break
            if cfg.time_budget_s is not None and time.perf_counter() - t0 > cfg.time_budget_s:
                done = True
                break
        history.append({k: v / seen for k, v in acc.items()})
        if log:
            h = history[-1]
            log(
                f"bgn epoch {epoch + 1}/{cfg.epochs} total {h['total']:.6g} recon {h['recon']:.6g} "
                f"kl {h['kl']:.4g} reg {h['reg']:.4g}"
            )
        if done:
            break
    if fgn_fingerprint(fgn) != fp:
        raise RuntimeError("forward network parameters changed during backward training")
    bgn.encoder.meta["history"] = history
    bgn.encoder.meta["adam_steps"] = enc_state.step_count
    if history_csv is not None:
        write_history(history, history_csv)
    return bgn, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "recon", "kl", "reg"])
        for k, h in enumerate(history, 1):
            w.writerow([k] + [repr(float(h[c])) for c in ("total", "recon", "kl", "reg")])


# ---------------------------------------------------------------------------
# experts


def train_experts(ds: Dataset, fgn: nn.Network, cfgs: list[BgnConfig], log=None):
    experts, histories = [], []
    for k, cfg in enumerate(cfgs):
        sub_log = (lambda s, k=k: log(f"[expert {k}] {s}")) if log else None
        bgn, hist = train_bgn(ds, fgn, cfg, log=sub_log)
        experts.append(bgn)
        histories.append(hist)
    return experts, histories


def reconstruct(bgn: Bgn, fgn: nn.Network, M, gait_cond, skeleton):
    """Posterior-mean muscles and their forward-network rollout."""
    from .forward import rollout_batch

    muscles = posterior_mean(bgn, M, gait_cond, skeleton)
    full = assemble(bgn.schema, skeleton, muscles, gait_cond)
    return muscles, rollout_batch(fgn, full)


def select_expert(experts: list[Bgn], fgn: nn.Network, M, gait_cond, skeleton):
    """Per input, the expert whose posterior-mean reconstruction best matches ``M``.

    Returns ``(indices, muscles, distances)``; ties go to the lowest index.
    """
    M = np.atleast_2d(np.asarray(M, float))
    gait_cond, skeleton = np.atleast_2d(gait_cond), np.atleast_2d(skeleton)
    layout = PoseLayout(int(fgn.meta.get("n_joints", 9)))
    dists, muscles = [], []
    for bgn in experts:
        m, rec = reconstruct(bgn, fgn, M, gait_cond, skeleton)
        muscles.append(m)
        dists.append(d_gait(rec, M, layout))
    dists = np.stack(dists, axis=1)
    idx = np.argmin(dists, axis=1)
    chosen = np.stack([muscles[k][i] for i, k in enumerate(idx)])
    return idx, chosen, dists


# ---------------------------------------------------------------------------
# bundle files


def _zip_add(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def bundle_to_bytes(experts: list[Bgn], fgn: nn.Network) -> bytes:
    schema = experts[0].schema
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "schema_hash": schema.hash,
        "schema": schema.to_dict(),
        "fgn_fingerprint": fgn_fingerprint(fgn),
        "experts": [
            {"config": asdict(b.config), "mask": b.pre_decoder.meta["mask"]} for b in experts
        ],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_add(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        _zip_add(zf, "forward.bgnw", nn.weights_to_bytes(fgn))
        for k, b in enumerate(experts):
            _zip_add(zf, f"expert{k}/encoder.bgnw", nn.weights_to_bytes(b.encoder))
            _zip_add(zf, f"expert{k}/pre_decoder.bgnw", nn.weights_to_bytes(b.pre_decoder))
    return buf.getvalue()


def save_bundle(experts: list[Bgn], fgn: nn.Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(experts, fgn))


def load_bundle(path, expected_schema_hash: str | None = None):
    """``(experts, fgn)`` from a bundle file."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise FormatError(f"not an expert bundle: {exc}") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"expert bundle has no readable manifest: {exc}") from None
        if manifest.get("format") != BUNDLE_FORMAT:
            raise FormatError("not an expert bundle")
        if manifest.get("version") != BUNDLE_VERSION:
            raise VersionError(
                f"expert bundle version {manifest.get('version')} unsupported (expected {BUNDLE_VERSION})"
            )
        schema = ConditionSchema.from_dict(manifest["schema"])
        if expected_schema_hash is not None and schema.hash != expected_schema_hash:
            raise SchemaMismatchError("expert bundle was trained on a different condition schema")
        fgn = nn.weights_from_bytes(zf.read("forward.bgnw"))
        if fgn_fingerprint(fgn) != manifest["fgn_fingerprint"]:
            raise FormatError("forward network in bundle does not match its manifest fingerprint")
        experts = []
        muscles = schema.names_in("muscle")
        for k, entry in enumerate(manifest["experts"]):
            cfg = BgnConfig(**entry["config"])
            enc = nn.weights_from_bytes(zf.read(f"expert{k}/encoder.bgnw"))
            dec = nn.weights_from_bytes(zf.read(f"expert{k}/pre_decoder.bgnw"))
            mask = np.array([muscles.index(n) for n in entry["mask"]], dtype=int)
            experts.append(Bgn(enc, dec, schema, cfg, mask))
    return experts, fgn
