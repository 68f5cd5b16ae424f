"""Evaluation harness: joint-error tables, realizability, coverage, 2D embedding, sampling ablation.

CSV schemas
-----------
``*_cases.csv``      case, name, [expert,] then ``<joint>_mean`` and ``<joint>_var``
                     per joint (degrees, over the 60 frames of that case),
                     ``joint_avg`` and, for realizability, ``pass``.
``*_table.csv``      row, then ``<joint>_mean``/``<joint>_var`` aggregated over
                     cases and frames, and ``joint_avg``.
``coverage.csv``     case, name, covered, gt_nn_dist, threshold, expert.
``embedding_*.csv``  kind (sample | truth), pc1, pc2.

Aggregates are recomputable from the per-case file: the aggregate mean is
the mean of per-case means, and the aggregate variance is the mean of
per-case variances plus the variance of per-case means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .backward import Bgn, BgnConfig, assemble, posterior_samples, select_expert, train_bgn
from .dataset import Dataset, generate, pathology_dataset, sample, sample_grid
from .forward import FgnConfig, rollout_batch, train_fgn
from .gait import PoseLayout, joint_angle_frames_deg
from .oracle import Oracle

ANALOG_NOTE = (
    "Thresholds (8 deg, 10 deg, 80% coverage) are desk-scale analog targets on a synthetic oracle, "
    "not reproductions of published numbers."
)
PCA_NOTE = "2D embedding: principal-component projection of the sample cloud (used in place of UMAP)."


@dataclass
class ErrorTable:
    joints: list[str]
    case_mean: np.ndarray  # (n_cases, J) mean over frames, degrees
    case_var: np.ndarray  # (n_cases, J) variance over frames
    names: list[str] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.case_mean.mean(axis=0) if len(self.case_mean) else np.zeros(len(self.joints))

    @property
    def var(self) -> np.ndarray:
        if not len(self.case_mean):
            return np.zeros(len(self.joints))
        return self.case_var.mean(axis=0) + self.case_mean.var(axis=0)

    @property
    def joint_average(self) -> float:
        return float(self.mean.mean())

    @property
    def case_joint_average(self) -> np.ndarray:
        return self.case_mean.mean(axis=1)


def error_table(pred, truth, layout: PoseLayout, joints, names=None) -> ErrorTable:
    pred = np.atleast_2d(np.asarray(pred, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    frames = joint_angle_frames_deg(pred, truth, layout)  # (n, 60, J)
    names = list(names) if names is not None else [f"case_{i}" for i in range(len(pred))]
    return ErrorTable(list(joints), frames.mean(axis=1), frames.var(axis=1), names)


def _joint_cols(joints):
    return [c for j in joints for c in (f"{j}_mean", f"{j}_var")]


def write_cases_csv(table: ErrorTable, path, extra: dict | None = None) -> None:
    """Per-case rows; ``extra`` maps column name to a per-case sequence."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "name", *extra, *_joint_cols(table.joints), "joint_avg"])
        for i in range(len(table.case_mean)):
            vals = [x for j in range(len(table.joints)) for x in (table.case_mean[i, j], table.case_var[i, j])]
            w.writerow(
                [i, table.names[i], *[extra[k][i] for k in extra], *[repr(float(v)) for v in vals],
                 repr(float(table.case_mean[i].mean()))]
            )


def write_table_csv(rows: dict[str, ErrorTable], path) -> None:
    """Table-1 style: one row per configuration, (mean, var) per joint."""
    joints = next(iter(rows.values())).joints
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", *_joint_cols(joints), "joint_avg"])
        for name, t in rows.items():
            vals = [x for j in range(len(joints)) for x in (t.mean[j], t.var[j])]
            w.writerow([name, *[repr(float(v)) for v in vals], repr(t.joint_average)])


def format_table(rows: dict[str, ErrorTable]) -> str:
    joints = next(iter(rows.values())).joints
    width = max(len(r) for r in rows) + 2
    head = "".ljust(width) + "".join(j[:10].rjust(18) for j in joints) + "avg".rjust(10)
    lines = [head]
    for name, t in rows.items():
        cells = "".join(f"{m:8.3f} ({v:7.3f})".rjust(18) for m, v in zip(t.mean, t.var))
        lines.append(name.ljust(width) + cells + f"{t.joint_average:10.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# forward


def eval_forward(fgn, holdout: Dataset, joints, layout: PoseLayout | None = None) -> ErrorTable:
    """Joint-angle error of forward rollouts against the holdout gaits.

    ``fgn`` is a forward network or any callable mapping ``(n, n_params)``
    conditions to flat gait patterns.
    """
    cond = holdout.conditions.astype(np.float64)
    pred = rollout_batch(fgn, cond) if isinstance(fgn, nn.Network) else np.asarray(fgn(cond), float)
    layout = layout or PoseLayout(len(joints))
    names = holdout.meta.get("case_names")
    return error_table(pred, holdout.gaits.astype(np.float64), layout, joints, names)


# ---------------------------------------------------------------------------
# backward


@dataclass
class RealizabilityResult:
    table: ErrorTable
    experts: np.ndarray
    muscles: np.ndarray
    threshold: float

    @property
    def passed(self) -> np.ndarray:
        return self.table.case_joint_average <= self.threshold

    def write_csv(self, path) -> None:
        write_cases_csv(
            self.table,
            path,
            {"expert": [int(e) for e in self.experts], "pass": [bool(p) for p in self.passed]},
        )


def eval_backward_realizability(
    experts: list[Bgn], fgn: nn.Network, oracle: Oracle, holdout: Dataset, threshold: float = 10.0
) -> RealizabilityResult:
    """Select an expert per case, re-simulate its posterior-mean muscles, compare gaits."""
    s = oracle.schema
    cond = holdout.conditions.astype(np.float64)
    M = holdout.gaits.astype(np.float64)
    skel, gait = cond[:, s.skeleton_idx], cond[:, s.gait_idx]
    idx, muscles, _ = select_expert(experts, fgn, M, gait, skel)
    sim = oracle.simulate_batch(assemble(s, skel, muscles, gait))
    table = error_table(sim, M, oracle.layout, oracle.joints, holdout.meta.get("case_names"))
    return RealizabilityResult(table, idx, muscles, threshold)


def nn_distances(points: np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest other point."""
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))


def coverage_rule(samples_norm: np.ndarray, truth_norm: np.ndarray, q: float = 95.0):
    """``(covered, truth_nn, threshold)`` for a sample cloud in normalized units."""
    samples_norm = np.asarray(samples_norm, float)
    thr = float(np.percentile(nn_distances(samples_norm), q))
    gt = float(np.sqrt(np.min(np.sum((samples_norm - truth_norm) ** 2, axis=1))))
    return gt <= thr, gt, thr


@dataclass
class CoverageResult:
    covered: bool
    truth_nn: float
    threshold: float
    samples: np.ndarray  # physical muscle conditions


def eval_coverage(bgn: Bgn, M, gait_cond, skeleton, truth_muscles, n: int = 1000, seed: int = 0) -> CoverageResult:
    s = bgn.schema
    _, samples = posterior_samples(bgn, np.atleast_2d(M), np.atleast_2d(gait_cond), np.atleast_2d(skeleton), n, seed)
    norm = s.normalize(samples, s.muscle_idx)
    covered, gt, thr = coverage_rule(norm, s.normalize(truth_muscles, s.muscle_idx))
    return CoverageResult(bool(covered), gt, thr, samples)


def eval_coverage_holdout(experts, fgn, holdout: Dataset, n: int = 1000, seed: int = 0):
    """Coverage per holdout case using the selected expert."""
    s = holdout.schema
    cond = holdout.conditions.astype(np.float64)
    M = holdout.gaits.astype(np.float64)
    idx, _, _ = select_expert(experts, fgn, M, cond[:, s.gait_idx], cond[:, s.skeleton_idx])
    out = []
    for i in range(len(cond)):
        r = eval_coverage(
            experts[idx[i]], M[i], cond[i, s.gait_idx], cond[i, s.skeleton_idx], cond[i, s.muscle_idx], n, seed + i
        )
        out.append((int(idx[i]), r))
    return out


def write_coverage_csv(results, names, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "name", "covered", "gt_nn_dist", "threshold", "expert"])
        for i, (e, r) in enumerate(results):
            w.writerow([i, names[i], r.covered, repr(r.truth_nn), repr(r.threshold), e])


# ---------------------------------------------------------------------------
# redundancy and regularization probes


def inert_deviation(muscles, oracle: Oracle) -> float:
    pos = oracle.muscle_positions(oracle.inert_params)
    return float(np.mean(np.abs(np.asarray(muscles)[:, pos] - 1.0))) if len(pos) else 0.0


def trendelenburg_case(oracle: Oracle, weakness: float = 0.5):
    """Input gait and the two certified muscle solutions that produce it."""
    s = oracle.schema
    red = oracle.redundancy[0]
    a = oracle.reference_anatomy()
    moved = np.flatnonzero(red.direction)
    first = moved[red.direction[moved] > 0][0]
    a[first] = weakness
    b = oracle.redundant_pair(a, 0, 1.0 - weakness)
    mi = s.muscle_idx
    sol = [a[mi], b[mi]]
    g = oracle.reference_gait()
    M = oracle.simulate(a, g).flatten()
    return M, g, a[s.skeleton_idx], sol


def multimodality(experts, fgn, oracle: Oracle, n: int = 1000, seed: int = 0) -> dict:
    s = oracle.schema
    M, g, sk, sols = trendelenburg_case(oracle)
    idx, _, _ = select_expert(experts, fgn, M, g, sk)
    _, smp = posterior_samples(experts[int(idx[0])], M[None], g[None], sk[None], n, seed)
    X = s.normalize(smp, s.muscle_idx)
    dist = [float(np.min(np.linalg.norm(X - s.normalize(sol, s.muscle_idx), axis=1))) for sol in sols]
    emb = embed_2d(X, s.normalize(sols[0], s.muscle_idx))
    return {"dist": dist, "samples": smp, "expert": int(idx[0]), "embedding": emb}


# ---------------------------------------------------------------------------
# embedding


@dataclass
class Embedding:
    coords: np.ndarray  # (n_samples + 1, 2); last row is the ground truth
    explained: np.ndarray  # variance fraction of the two components


def embed_2d(samples_norm, truth_norm) -> Embedding:
    X = np.asarray(samples_norm, float)
    center = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - center, full_matrices=False)
    total = float(np.sum(sv**2))
    explained = (sv[:2] ** 2) / total if total > 0 else np.zeros(2)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], X.shape[1]))])
        explained = np.pad(explained, (0, 2 - len(explained)))
    pts = np.vstack([X, np.atleast_2d(truth_norm)]) - center
    return Embedding(pts @ comps.T, explained)


def write_embedding(emb: Embedding, csv_path, svg_path=None, title: str = "") -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "pc1", "pc2"])
        for k, (a, b) in enumerate(emb.coords):
            w.writerow(["truth" if k == len(emb.coords) - 1 else "sample", repr(float(a)), repr(float(b))])
    if svg_path is not None:
        Path(svg_path).write_text(scatter_svg(emb.coords[:-1], emb.coords[-1:], title))


def scatter_svg(points, highlight, title: str = "", size: int = 400) -> str:
    allp = np.vstack([points, highlight]) if len(points) else np.asarray(highlight)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 30

    def xy(p):
        u = (p - lo) / span
        return pad + u[0] * (size - 2 * pad), size - pad - u[1] * (size - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}">']
    out.append(f'<rect width="{size}" height="{size + 40}" fill="white"/>')
    for p in points:
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="#888"/>')
    for p in highlight:
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="5" fill="red"/>')
    out.append(f'<text x="10" y="{size + 15}" font-size="11">{title}</text>')
    out.append(f'<text x="10" y="{size + 32}" font-size="9">{PCA_NOTE}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# sampling ablation


def extreme_holdout(oracle: Oracle, n_corners: int = 51, seed: int = 10_007) -> Dataset:
    """Fresh corner conditions plus the named pathology analogs."""
    corners = generate(sample_grid(n_corners, oracle.schema, seed), oracle, "grid", seed)
    corners.meta["case_names"] = [f"corner_{i}" for i in range(n_corners)]
    path = pathology_dataset(oracle)
    out = corners.concat(path)
    out.strategy = "extreme"
    out.meta["case_names"] = corners.meta["case_names"] + path.meta["case_names"]
    return out


ABLATION_ROWS = (("Uniform", "Uniform"), ("Uniform", "Grid"), ("Grid", "Grid"))


def ablation_grid_vs_uniform(
    oracle: Oracle,
    seeds,
    n_train: int,
    fgn_cfg: FgnConfig,
    bgn_cfg: BgnConfig,
    holdout: Dataset | None = None,
    log=None,
):
    """Backward realizability error for each (forward, backward) sampling pair.

    Each seed draws one uniform and one grid dataset of equal size; the
    forward network is trained on the first strategy and the backward
    network on the second. Returns ``(rows, per_seed)`` where ``rows`` maps
    ``"Fwd-Bwd"`` to an :class:`ErrorTable` pooled over seeds and
    ``per_seed`` maps it to the list of joint-average errors.
    """
    holdout = holdout if holdout is not None else extreme_holdout(oracle)
    tables: dict[str, list[ErrorTable]] = {f"{a}-{b}": [] for a, b in ABLATION_ROWS}
    for seed in seeds:
        data = {
            "Uniform": generate(sample("uniform", n_train, oracle.schema, seed), oracle, "uniform", seed),
            "Grid": generate(sample("grid", n_train, oracle.schema, seed), oracle, "grid", seed),
        }
        fgns = {}
        for strat in ("Uniform", "Grid"):
            cfg = FgnConfig(**{**fgn_cfg.__dict__, "seed": fgn_cfg.seed + seed})
            fgns[strat], _ = train_fgn(data[strat], cfg)
        for f_strat, b_strat in ABLATION_ROWS:
            cfg = BgnConfig(**{**bgn_cfg.__dict__, "seed": bgn_cfg.seed + seed})
            bgn, _ = train_bgn(data[b_strat], fgns[f_strat], cfg)
            res = eval_backward_realizability([bgn], fgns[f_strat], oracle, holdout)
            tables[f"{f_strat}-{b_strat}"].append(res.table)
            if log:
                log(f"ablation seed {seed} {f_strat}-{b_strat}: {res.table.joint_average:.4f} deg")
    rows, per_seed = {}, {}
    for key, ts in tables.items():
        pooled = ErrorTable(
            ts[0].joints,
            np.concatenate([t.case_mean for t in ts]),
            np.concatenate([t.case_var for t in ts]),
            [n for t in ts for n in t.names],
        )
        rows[key] = pooled
        per_seed[key] = [t.joint_average for t in ts]
    return rows, per_seed


# ---------------------------------------------------------------------------
# summary


def write_summary(path, criteria: list[tuple[str, bool, str]], notes=(ANALOG_NOTE, PCA_NOTE)) -> None:
    lines = []
    for name, ok, detail in criteria:
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    lines.append("")
    lines.extend(notes)
    Path(path).write_text("\n".join(lines) + "\n")
