"""Command-line pipeline: generate, train-forward, train-backward, predict, evaluate.

Configuration is one INI file with the sections ``[schema]``, ``[sampling]``,
``[fgn]``, ``[bgn]`` and ``[eval]``. Every key is validated; unknown
sections or keys are errors. ``gaitnet <command> --help`` lists the keys
with their defaults, and ``data/desk.ini`` ships a complete example.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset as D
from . import evaluation as E
from . import nn
from .backward import (
    BgnConfig,
    assemble,
    expert_presets,
    fgn_fingerprint,
    load_bundle,
    posterior_samples,
    save_bundle,
    select_expert,
    train_experts,
)
from .backward import write_history as write_bgn_history
from .errors import ConfigError, FormatError, GaitNetError, NonFiniteError, RangeError, SchemaMismatchError
from .forward import FgnConfig, load_fgn, train_fgn
from .gait import joint_angle_error_deg
from .oracle import Oracle

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SchemaSection:
    oracle: str = "desk"  # "desk" or a path to an oracle JSON file


@dataclass
class SamplingSection:
    strategy: str = "grid"
    n: int = 50_000
    seed: int = 0
    n_holdout: int = 51
    holdout_seed: int = 1
    pathologies: bool = True  # put the named pathology cases in the holdout


@dataclass
class EvalSection:
    n_samples: int = 1000
    seed: int = 0
    threshold_deg: float = 10.0
    forward_threshold_deg: float = 8.0
    realizable_fraction: float = 45 / 51  # 45 of 51 holdout cases
    coverage_fraction: float = 0.8
    multimodal_radius: float = 0.15
    inert_tolerance: float = 0.1
    ablation: bool = False
    ablation_seeds: int = 3
    ablation_n: int = 5000
    ablation_corners: int = 51
    ablation_fgn_epochs: int = 20
    ablation_bgn_steps: int = 300


@dataclass
class BgnSection:
    experts: int = 3  # 1 trains only the base configuration


SECTIONS = {
    "schema": (SchemaSection,),
    "sampling": (SamplingSection,),
    "fgn": (FgnConfig,),
    "bgn": (BgnConfig, BgnSection),
    "eval": (EvalSection,),
}


@dataclass
class Config:
    schema: SchemaSection
    sampling: SamplingSection
    fgn: FgnConfig
    bgn: BgnConfig
    bgn_extra: BgnSection
    eval: EvalSection


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return json.loads(raw) if raw.startswith("[") else float(raw)
        if isinstance(default, str):
            return raw
        if raw.lower() in ("none", ""):
            return None
        return json.loads(raw)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from None


_OPTIONAL_TYPES = {
    ("fgn", "lr_final"): 0.0,
    ("fgn", "time_budget_s"): 0.0,
    ("bgn", "max_steps"): 0,
    ("bgn", "time_budget_s"): 0.0,
}


def _defaults(section: str):
    out = {}
    for cls in SECTIONS[section]:
        inst = cls()
        for f in fields(cls):
            out[f.name] = (cls, getattr(inst, f.name))
    return out


def load_config(path=None) -> Config:
    """Parse an INI file into validated sections; ``None`` gives all defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"config file {p}: {exc}") from None
    unknown_sections = [s for s in cp.sections() if s not in SECTIONS]
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {unknown_sections}; expected {sorted(SECTIONS)}")
    values: dict[str, dict] = {}
    for section in SECTIONS:
        defaults = _defaults(section)
        per_cls: dict = {cls: {} for cls in SECTIONS[section]}
        if cp.has_section(section):
            for key, raw in cp.items(section):
                if key not in defaults:
                    raise ConfigError(
                        f"unknown config key {key!r} in section [{section}]; valid keys: {sorted(defaults)}"
                    )
                cls, default = defaults[key]
                probe = _OPTIONAL_TYPES.get((section, key), default)
                if raw.strip().lower() == "none":
                    val = None
                else:
                    val = _parse_value(raw, probe, f"{section}.{key}")
                per_cls[cls][key] = val
        try:
            values[section] = {cls: cls(**kw) for cls, kw in per_cls.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config section [{section}]: {exc}") from None
    if values["sampling"][SamplingSection].strategy not in ("grid", "uniform"):
        raise ConfigError(
            f"config key 'sampling.strategy': unknown strategy {values['sampling'][SamplingSection].strategy!r}"
        )
    return Config(
        values["schema"][SchemaSection],
        values["sampling"][SamplingSection],
        values["fgn"][FgnConfig],
        values["bgn"][BgnConfig],
        values["bgn"][BgnSection],
        values["eval"][EvalSection],
    )


def defaults_help() -> str:
    lines = ["config keys and defaults:"]
    for section in SECTIONS:
        lines.append(f"  [{section}]")
        for key, (_, default) in _defaults(section).items():
            lines.append(f"    {key} = {default}")
    return "\n".join(lines)


def _oracle(cfg: Config) -> Oracle:
    return Oracle.desk() if cfg.schema.oracle == "desk" else Oracle.from_file(cfg.schema.oracle)


def _require(*paths) -> None:
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise FileNotFoundError("missing input file(s): " + ", ".join(missing))


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: Config, out, holdout_out=None, workers: int = 1) -> None:
    oracle = _oracle(cfg)
    s = cfg.sampling
    cond = D.sample(s.strategy, s.n, oracle.schema, s.seed)
    ds = D.generate(cond, oracle, s.strategy, s.seed, workers=workers)
    D.warn_if_empty(ds)
    if holdout_out is not None:
        forced = D.pathology_dataset(oracle) if s.pathologies else None
        ds, hold = D.split_holdout(ds, s.n_holdout, s.holdout_seed, forced=forced)
        D.write(hold, holdout_out)
        _say(f"holdout: {len(hold)} tuples -> {holdout_out}")
    D.write(ds, out)
    _say(f"generated {len(ds)} tuples, strategy {s.strategy}, seed {s.seed}, schema {oracle.schema.hash[:12]}")
    if s.strategy == "grid":
        _say("note: grid mode samples anatomy corners; stride and cadence stay continuous")


def cmd_train_forward(cfg: Config, data, out, history=None) -> None:
    _require(data)
    ds = D.read(data)
    t0 = time.perf_counter()
    net, hist = train_fgn(ds, cfg.fgn, log=_say, history_csv=history)
    nn.save_weights(net, out)
    _say(f"forward network: {len(hist)} epochs, final loss {hist[-1]!r}, {time.perf_counter() - t0:.1f}s -> {out}")


def expert_configs(cfg: Config, schema) -> list[BgnConfig]:
    if cfg.bgn_extra.experts == 1:
        return [cfg.bgn]
    if cfg.bgn_extra.experts != 3:
        raise ConfigError("bgn.experts must be 1 or 3")
    return expert_presets(cfg.bgn, schema)


def cmd_train_backward(cfg: Config, data, fgn_path, out, history=None) -> None:
    if not Path(fgn_path).exists():
        raise FileNotFoundError(f"missing forward network (decoder) weights: {fgn_path}")
    _require(data)
    ds = D.read(data)
    fgn = load_fgn(fgn_path, ds.schema)
    fgn.frozen = True
    t0 = time.perf_counter()
    experts, hists = train_experts(ds, fgn, expert_configs(cfg, ds.schema), log=_say)
    save_bundle(experts, fgn, out)
    for k, h in enumerate(hists):
        if history is not None:
            write_bgn_history(h, f"{history}.expert{k}.csv")
        _say(f"expert {k}: final loss {h[-1]['total']!r}")
    _say(f"backward bundle with {len(experts)} experts, {time.perf_counter() - t0:.1f}s -> {out}")


def cmd_predict(bundle, gait_file, n_samples: int, seed: int, out_dir, cfg: Config | None = None) -> None:
    _require(bundle, gait_file)
    experts, fgn = load_bundle(bundle)
    schema = experts[0].schema
    ds = D.read(gait_file)
    if ds.schema.hash != schema.hash:
        raise SchemaMismatchError("gait file uses a different condition schema than the bundle")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cond = ds.conditions.astype(np.float64)
    M = ds.gaits.astype(np.float64)
    gait, skel = cond[:, schema.gait_idx], cond[:, schema.skeleton_idx]
    idx, means, _ = select_expert(experts, fgn, M, gait, skel)
    oracle = _oracle(cfg or load_config())
    if oracle.schema.hash != schema.hash:
        raise SchemaMismatchError("oracle schema differs from the bundle's schema")
    sim = oracle.simulate_batch(assemble(schema, skel, means, gait)) if len(M) else np.zeros((0, M.shape[1]))
    err, _ = joint_angle_error_deg(sim, M, oracle.layout) if len(M) else (np.zeros((0, 1)), None)
    muscle_names = schema.names_in("muscle")
    with open(out / "posterior_mean.csv", "w") as fh:
        fh.write(",".join(["case", "expert", *muscle_names, "resim_error_deg"]) + "\n")
        for i in range(len(M)):
            vals = ",".join(repr(float(v)) for v in means[i])
            fh.write(f"{i},{int(idx[i])},{vals},{float(err[i].mean())!r}\n")
    for i in range(len(M)):
        _, smp = posterior_samples(experts[idx[i]], M[i : i + 1], gait[i : i + 1], skel[i : i + 1], n_samples, seed + i)
        np.savetxt(out / f"samples_case{i}.csv", smp, delimiter=",", header=",".join(muscle_names), comments="", fmt="%.9g")
    lines = [f"case {i}: expert {int(idx[i])}, oracle re-simulation error {float(err[i].mean()):.4f} deg" for i in range(len(M))]
    (out / "report.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    _say(f"predicted {len(M)} case(s), {n_samples} samples each -> {out}")


def cmd_evaluate(cfg: Config, fgn_path, bundle, holdout, out_dir, ablation: bool | None = None) -> list:
    _require(fgn_path, bundle, holdout)
    oracle = _oracle(cfg)
    hold = D.read(holdout, expected_hash=oracle.hash)
    fgn = load_fgn(fgn_path, oracle.schema)
    experts, bundled_fgn = load_bundle(bundle, oracle.schema.hash)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.eval
    names = hold.meta.get("case_names") or [f"case_{i}" for i in range(len(hold))]
    hold.meta["case_names"] = names
    results = []

    fwd = E.eval_forward(fgn, hold, oracle.joints, oracle.layout)
    E.write_cases_csv(fwd, out / "forward_cases.csv")
    E.write_table_csv({"forward": fwd}, out / "forward_table.csv")
    results.append(("2 forward joint error", fwd.joint_average <= ev.forward_threshold_deg,
                    f"{fwd.joint_average:.3f} deg (target <= {ev.forward_threshold_deg})"))

    real = E.eval_backward_realizability(experts, bundled_fgn, oracle, hold, ev.threshold_deg)
    real.write_csv(out / "realizability_cases.csv")
    E.write_table_csv({"realizability": real.table}, out / "realizability_table.csv")
    n_ok = int(real.passed.sum())
    need = int(np.ceil(ev.realizable_fraction * len(hold) - 1e-9))
    results.append(("3 backward realizability", n_ok >= need,
                    f"{n_ok}/{len(hold)} cases <= {ev.threshold_deg} deg (target >= {need})"))

    if ablation if ablation is not None else ev.ablation:
        rows, per_seed = run_ablation(cfg, oracle)
        E.write_table_csv(rows, out / "ablation_table.csv")
        (out / "ablation_table.txt").write_text(E.format_table(rows) + "\n")
        gg, uu = np.mean(per_seed["Grid-Grid"]), np.mean(per_seed["Uniform-Uniform"])
        results.append(("4 ablation direction", gg <= uu, f"Grid-Grid {gg:.4f} vs Uniform-Uniform {uu:.4f} deg"))
    else:
        results.append(("4 ablation direction", None, "not run (enable eval.ablation or --ablation)"))

    mm = E.multimodality(experts, bundled_fgn, oracle, ev.n_samples, ev.seed)
    E.write_embedding(mm["embedding"], out / "embedding_trendelenburg.csv", out / "embedding_trendelenburg.svg",
                      "posterior samples (grey) and ground truth (red), trendelenburg analog")
    ok = max(mm["dist"]) <= ev.multimodal_radius
    results.append(("5 multimodality", ok, f"nearest sample to each solution {np.round(mm['dist'], 4).tolist()} "
                    f"(target <= {ev.multimodal_radius})"))

    cov = E.eval_coverage_holdout(experts, bundled_fgn, hold, ev.n_samples, ev.seed)
    E.write_coverage_csv(cov, names, out / "coverage.csv")
    frac = float(np.mean([r.covered for _, r in cov])) if cov else 0.0
    results.append(("6 coverage", frac >= ev.coverage_fraction, f"{frac:.3f} of cases covered (target >= {ev.coverage_fraction})"))
    if cov:
        s = oracle.schema
        first = cov[0][1]
        emb = E.embed_2d(s.normalize(first.samples, s.muscle_idx),
                         s.normalize(hold.conditions[0, s.muscle_idx].astype(np.float64), s.muscle_idx))
        E.write_embedding(emb, out / "embedding_case0.csv", out / "embedding_case0.svg", f"posterior samples, {names[0]}")

    inert = E.inert_deviation(real.muscles, oracle)
    results.append(("7 inert muscles", inert <= ev.inert_tolerance, f"mean |c-1| = {inert:.4f} (target <= {ev.inert_tolerance})"))

    same = fgn_fingerprint(fgn) == fgn_fingerprint(bundled_fgn)
    results.append(("8 frozen forward network", same, "bundle decoder matches the trained forward weights" if same
                    else "bundle decoder differs from the given forward weights"))
    for name in ("1 gradient suite", "9 determinism", "10 serialization"):
        results.append((name, None, "checked by the test suite"))
    write_summary(out / "summary.txt", results)
    for line in (out / "summary.txt").read_text().splitlines():
        _say(line)
    return results


def write_summary(path, results) -> None:
    lines = []
    for name, ok, detail in results:
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        lines.append(f"[{tag}] {name}: {detail}")
    lines += ["", E.ANALOG_NOTE, E.PCA_NOTE]
    Path(path).write_text("\n".join(lines) + "\n")


def run_ablation(cfg: Config, oracle: Oracle):
    ev = cfg.eval
    fgn_cfg = FgnConfig(**{**asdict(cfg.fgn), "epochs": ev.ablation_fgn_epochs})
    bgn_cfg = BgnConfig(**{**asdict(cfg.bgn), "max_steps": ev.ablation_bgn_steps})
    hold = E.extreme_holdout(oracle, ev.ablation_corners)
    return E.ablation_grid_vs_uniform(oracle, range(ev.ablation_seeds), ev.ablation_n, fgn_cfg, bgn_cfg, hold, log=_say)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gaitnet",
        description="Forward and backward gait prediction on a synthetic gait oracle.",
        epilog=defaults_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--threads", type=int, default=1, help="worker processes and BLAS threads (default 1)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS and ordered reductions")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file (defaults apply to omitted keys)")
        sp.formatter_class = argparse.RawDescriptionHelpFormatter
        sp.epilog = defaults_help()

    g = sub.add_parser("generate", help="sample conditions and simulate a dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--holdout", help="also split off a holdout file")

    f = sub.add_parser("train-forward", help="train the forward network")
    common(f)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--history", help="loss history CSV")

    b = sub.add_parser("train-backward", help="train backward experts against a frozen forward network")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--fgn", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--history", help="prefix for per-expert loss history CSVs")

    pr = sub.add_parser("predict", help="posterior samples for the gaits in a dataset file")
    common(pr)
    pr.add_argument("--bundle", required=True)
    pr.add_argument("--gait", required=True, help="dataset file with the input gaits and their side conditions")
    pr.add_argument("--n-samples", type=int, default=1000)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out-dir", required=True)

    e = sub.add_parser("evaluate", help="error tables, realizability, coverage, embedding and summary")
    common(e)
    e.add_argument("--fgn", required=True)
    e.add_argument("--bundle", required=True)
    e.add_argument("--holdout", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--ablation", action="store_true", help="also run the sampling ablation")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else max(1, args.threads)
    try:
        cfg = load_config(args.config)
        with threadpool_limits(limits=threads):
            if args.command == "generate":
                cmd_generate(cfg, args.out, args.holdout, workers=threads)
            elif args.command == "train-forward":
                cmd_train_forward(cfg, args.data, args.out, args.history)
            elif args.command == "train-backward":
                cmd_train_backward(cfg, args.data, args.fgn, args.out, args.history)
            elif args.command == "predict":
                cmd_predict(args.bundle, args.gait, args.n_samples, args.seed, args.out_dir, cfg)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.fgn, args.bundle, args.holdout, args.out_dir, args.ablation or None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, SchemaMismatchError, RangeError, GaitNetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


def desk_config_path() -> Path:
    return Path(str(resources.files("gaitnet") / "data" / "desk.ini"))


if __name__ == "__main__":
    main()
