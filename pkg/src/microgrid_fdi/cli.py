"""Scenario configuration, validation, execution and persistence.

Configs are single YAML documents (schema below); traces and diagnosis
outputs are written as CSV files next to a JSON manifest that records the
seed, the config hash and every resolved default, so a run can be
reproduced bit-for-bit from its output directory.

Config schema (all sim/diagnosis fields optional with defaults):

    grid:
      dgs:   [{Rt, Lt, Ct, Vref, K: [k1, k2, k3]}, ...]
      lines: [{R, L, pos, neg}, ...]
      noise: {delta_std, zeta_std, eps_std, distribution}
    loads: [[[t0, P0], [t1, P1], ...], ...]        # one list per DG
    faults:
      actuator: [{dg, onset, profile: step|incipient, level|rate+final}]
      line:     [{line, onset, profile: step|incipient|short_circuit, ...}]
    sim:       {t_end, ts, h, seed, noise_scale, incipient_time_scale}
    diagnosis: {T, eta, alpha, d_N, a_roots: [...]}
    output:    {dir, plots}
    monte_carlo: {repetitions, dg}
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError
from .grid import (ActuatorFault, DgParams, FaultSchedule, GridSpec,
                   IncipientProfile, LineFault, LineParams, LoadSchedule,
                   NoiseSpec, ShortCircuitProfile, StepProfile)
from .pipeline import build_suite, run_scenario
from .synthesis import (DenominatorPoly, actuator_dae, export_design,
                        feasibility_report, line_dae)
from .grid import build_closed_loop

CONFIG_DIR = Path(__file__).parent / "configs"

SIM_DEFAULTS = {"t_end": 0.2, "ts": 1e-5, "h": 1e-6, "seed": 1,
                "noise_scale": 1.0, "incipient_time_scale": 1e10}
DIAG_DEFAULTS = {"T": 20, "eta": 1e6, "alpha": 3.0, "d_N": 2,
                 "a_roots": [-0.5, -0.1, -1.0]}


@dataclass
class ScenarioConfig:
    spec: GridSpec
    loads: LoadSchedule
    faults: FaultSchedule
    sim: dict
    diagnosis: dict
    output_dir: str = "out"
    plots: bool = False
    mc_repetitions: int = 1
    mc_dg: int = 0
    raw: dict = field(default_factory=dict)


def _require(cond, msg, fieldpath):
    if not cond:
        raise ConfigError(msg, field=fieldpath)


def load_config(path_or_dict) -> ScenarioConfig:
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
    else:
        with open(path_or_dict) as fh:
            doc = yaml.safe_load(fh)
    _require(isinstance(doc, dict), "config must be a mapping", "<root>")

    g = doc.get("grid", {})
    _require("dgs" in g and "lines" in g, "grid.dgs and grid.lines are required", "grid")
    dgs = []
    for i, d in enumerate(g["dgs"]):
        try:
            dgs.append(DgParams(Rt=float(d["Rt"]), Lt=float(d["Lt"]),
                                Ct=float(d["Ct"]), Vref=float(d["Vref"]),
                                K=tuple(float(k) for k in d["K"])))
        except KeyError as e:
            raise ConfigError(f"missing key {e}", field=f"grid.dgs[{i}]")
    lines = []
    for k, l in enumerate(g["lines"]):
        try:
            lines.append(LineParams(R=float(l["R"]), L=float(l["L"]),
                                    pos=int(l["pos"]), neg=int(l["neg"])))
        except KeyError as e:
            raise ConfigError(f"missing key {e}", field=f"grid.lines[{k}]")
    nz = g.get("noise", {})
    noise = NoiseSpec.iid(m=len(lines),
                          delta_std=float(nz.get("delta_std", 0.01)),
                          zeta_std=float(nz.get("zeta_std", 0.001)),
                          eps_std=float(nz.get("eps_std", 0.01)),
                          distribution=nz.get("distribution", "uniform"))
    spec = GridSpec(dgs=tuple(dgs), lines=tuple(lines), noise=noise)

    raw_loads = doc.get("loads")
    _require(raw_loads is not None and len(raw_loads) == spec.n,
             f"loads must list a schedule for each of the {spec.n} DGs", "loads")
    loads = LoadSchedule(steps=tuple(tuple((float(t), float(p)) for t, p in dg)
                                     for dg in raw_loads))

    f = doc.get("faults", {}) or {}
    af = []
    for q, item in enumerate(f.get("actuator", []) or []):
        prof = _parse_profile(item, f"faults.actuator[{q}]")
        af.append(ActuatorFault(dg=int(item["dg"]), onset=float(item["onset"]),
                                profile=prof))
    lf = []
    for q, item in enumerate(f.get("line", []) or []):
        prof = _parse_profile(item, f"faults.line[{q}]")
        lf.append(LineFault(line=int(item["line"]), onset=float(item["onset"]),
                            profile=prof))
    faults = FaultSchedule(actuator=tuple(af), line=tuple(lf))

    sim = dict(SIM_DEFAULTS)
    sim.update(doc.get("sim", {}) or {})
    diag = dict(DIAG_DEFAULTS)
    diag.update(doc.get("diagnosis", {}) or {})
    # PyYAML (1.1) reads unsigned exponents like 1.0e10 as strings; coerce
    for key in sim:
        sim[key] = int(sim[key]) if key == "seed" else float(sim[key])
    for key in diag:
        if key == "a_roots":
            diag[key] = [float(r) for r in diag[key]]
        elif key in ("T", "d_N"):
            diag[key] = int(diag[key])
        else:
            diag[key] = float(diag[key])
    out = doc.get("output", {}) or {}
    mc = doc.get("monte_carlo", {}) or {}
    return ScenarioConfig(spec=spec, loads=loads, faults=faults,
                          sim=sim, diagnosis=diag,
                          output_dir=str(out.get("dir", "out")),
                          plots=bool(out.get("plots", False)),
                          mc_repetitions=int(mc.get("repetitions", 1)),
                          mc_dg=int(mc.get("dg", 0)),
                          raw=doc)


def _parse_profile(item: dict, fieldpath: str):
    kind = item.get("profile")
    if kind == "step":
        _require("level" in item, "step profile needs 'level'", fieldpath)
        return StepProfile(level=float(item["level"]))
    if kind == "incipient":
        _require("rate" in item and "final" in item,
                 "incipient profile needs 'rate' and 'final'", fieldpath)
        return IncipientProfile(rate=float(item["rate"]), final=float(item["final"]))
    if kind == "short_circuit":
        for key in ("Rf", "R1", "R2", "L1", "L2"):
            _require(key in item, f"short_circuit profile needs '{key}'", fieldpath)
        return ShortCircuitProfile(Rf=float(item["Rf"]), R1=float(item["R1"]),
                                   R2=float(item["R2"]), L1=float(item["L1"]),
                                   L2=float(item["L2"]))
    raise ConfigError(f"unknown fault profile '{kind}'", field=fieldpath)


def validate(cfg: ScenarioConfig) -> list[str]:
    """Pre-simulation feasibility checks; returns a list of violations."""
    v = []
    T = int(cfg.diagnosis["T"])
    d_N = int(cfg.diagnosis["d_N"])
    alpha = float(cfg.diagnosis["alpha"])
    ts, h, t_end = (float(cfg.sim[k]) for k in ("ts", "h", "t_end"))
    if T % 2 != 0:
        v.append("T must be even for the T/2 status rule")
    if T <= d_N + 1:
        v.append(f"T must exceed the filter order d_N+1 = {d_N + 1}")
    if alpha <= 1:
        v.append("alpha > 1 required (Chebyshev)")
    if float(cfg.diagnosis["eta"]) < 0:
        v.append("eta must be nonnegative")
    roots = np.asarray(cfg.diagnosis["a_roots"], dtype=float)
    if len(roots) != d_N + 1:
        v.append(f"need {d_N + 1} denominator roots, got {len(roots)}")
    if np.any(roots >= 0):
        v.append("denominator roots must be strictly negative")
    if h > ts:
        v.append("h must not exceed ts")
    elif abs(round(ts / h) * h - ts) > 1e-12 * ts:
        v.append("h must divide ts")
    if abs(round(t_end / ts) * ts - t_end) > 1e-9 * max(ts, t_end):
        v.append("ts must divide t_end")
    dwell = cfg.loads.min_dwell()
    if dwell < T * ts:
        v.append(f"load dwell {dwell:g}s is shorter than the window T*ts = {T * ts:g}s")
    for fobj in cfg.faults.actuator:
        if not (0 <= fobj.dg < cfg.spec.n):
            v.append(f"actuator fault DG index {fobj.dg} out of range")
    for fobj in cfg.faults.line:
        if not (0 <= fobj.line < cfg.spec.m):
            v.append(f"line fault index {fobj.line} out of range")
    # solvability of the two filter design problems per DG
    for i, dg in enumerate(cfg.spec.dgs):
        A, B, D, E, _ = build_closed_loop(dg)
        for name, dae in (("actuator", actuator_dae(A, B, D, E)),
                          ("line", line_dae(A, B, D, E))):
            rep = feasibility_report(dae, d_N)
            if not rep["feasible"]:
                v.append(
                    f"DG{i + 1} {name} design infeasible: rank(Hbar)={rep['rank_hbar']}"
                    f" of {rep['rows']} rows, rank([Hbar t])={rep['rank_augmented']}")
    return v


def _config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_csv(path: Path, header: list[str], columns: list[np.ndarray]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([f"{x:.12g}" if isinstance(x, float) else x for x in row])


def _persist_run(outdir: Path, cfg: ScenarioConfig, trace, diag, seed: int):
    n, m = cfg.spec.n, cfg.spec.m
    t = trace.t
    header = ["t"]
    cols = [t]
    for i in range(n):
        for nm, arr in (("V", trace.x[:, i, 0]), ("It", trace.x[:, i, 1]),
                        ("v", trace.x[:, i, 2]), ("yV", trace.y[:, i, 0]),
                        ("yIt", trace.y[:, i, 1]), ("yv", trace.y[:, i, 2]),
                        ("u", trace.u[:, i]), ("P", trace.P[:, i]),
                        ("fa_true", trace.fa[:, i]), ("fI_true", diag.fI_true[:, i]),
                        ("fhat_a", trace.fhat_a[:, i]), ("rtilde", trace.rtilde[:, i])):
            header.append(f"dg{i + 1}_{nm}")
            cols.append(arr)
    for k in range(m):
        for nm, arr in (("Ipos", trace.I_pos[:, k]), ("Ineg", trace.I_neg[:, k]),
                        ("Ishadow", trace.I_shadow[:, k]), ("fL_eq", trace.fL_eq[:, k]),
                        ("Ihat", trace.Ihat[:, k])):
            header.append(f"line{k + 1}_{nm}")
            cols.append(arr)
    _write_csv(outdir / "trace.csv", header, cols)

    for i in range(n):
        d = diag.dgs[i]
        header = ["t", "sigma", "Tcal", "Phat", "fhat_I", "fbar_true", "bound"]
        cols = [t, d.sigma.astype(float), d.tcal.astype(float), d.phat, d.fhat,
                diag.fbar_true[:, i],
                d.bound if d.bound is not None else np.full(len(t), np.nan)]
        nY = d.ups_tilde.shape[1]
        for q in range(nY):
            header.append(f"ups_{q + 1}")
            cols.append(d.ups_tilde[:, q])
        for q in range(nY):
            header.append(f"eps_{q + 1}")
            cols.append(d.eps[:, q])
        _write_csv(outdir / f"diagnosis_dg{i + 1}.csv", header, cols)


def _plot_run(outdir: Path, cfg: ScenarioConfig, trace, diag):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib unavailable; skipping plots", file=sys.stderr)
        return
    n = cfg.spec.n
    t = trace.t * 1e3
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i in range(n):
        axes[0].plot(t, trace.x[:, i, 0], label=f"V{i + 1}")
        axes[1].plot(t, trace.x[:, i, 1], label=f"It{i + 1}")
    axes[0].set_ylabel("PCC voltage [V]")
    axes[1].set_ylabel("filter current [A]")
    axes[1].set_xlabel("t [ms]")
    for ax in axes:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(outdir / "fig_grid.png", dpi=130)
    plt.close(fig)

    for i in range(n):
        d = diag.dgs[i]
        fig, axes = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
        axes[0].plot(t, trace.P[:, i], label="P true")
        axes[0].plot(t, d.phat, label="P estimate", alpha=0.7)
        axes[0].set_ylabel("load [W]")
        axes[1].plot(t, trace.fa[:, i], label="f_a true")
        axes[1].plot(t, trace.fhat_a[:, i], label="f_a estimate", alpha=0.7)
        axes[1].set_ylabel("actuator fault")
        axes[2].step(t, d.sigma, where="post", label="status indicator")
        axes[2].set_ylabel("status")
        axes[2].set_yticks([0, 1, 2])
        axes[3].plot(t, diag.fbar_true[:, i], label="window-mean f_I")
        axes[3].plot(t, d.fhat, label="estimate", alpha=0.7)
        if d.bound is not None:
            axes[3].plot(t, d.bound, ":", label="error bound", alpha=0.7)
        axes[3].set_ylabel("faulty current [A]")
        axes[3].set_xlabel("t [ms]")
        for ax in axes:
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(outdir / f"fig_dg{i + 1}.png", dpi=130)
        plt.close(fig)


def run(cfg: ScenarioConfig, seed: int | None = None,
        monte_carlo: int | None = None, outdir: str | None = None,
        plots: bool | None = None, jobs: int = 4) -> Path:
    """Execute a scenario (optionally Monte-Carlo) and persist artifacts."""
    violations = validate(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    seed = int(cfg.sim["seed"] if seed is None else seed)
    reps = int(cfg.mc_repetitions if monte_carlo is None else monte_carlo)
    do_plots = cfg.plots if plots is None else plots
    out = Path(cfg.output_dir if outdir is None else outdir)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    suite = build_suite(cfg.spec, cfg.diagnosis["a_roots"],
                        ts=float(cfg.sim["ts"]), T=int(cfg.diagnosis["T"]),
                        d_N=int(cfg.diagnosis["d_N"]))

    def one(rep_seed: int):
        return run_scenario(
            suite, cfg.loads, cfg.faults,
            t_end=float(cfg.sim["t_end"]), h=float(cfg.sim["h"]), seed=rep_seed,
            noise_scale=float(cfg.sim["noise_scale"]),
            incipient_time_scale=float(cfg.sim["incipient_time_scale"]),
            alpha=float(cfg.diagnosis["alpha"]), eta=float(cfg.diagnosis["eta"]))

    trace, diag = one(seed)
    _persist_run(out, cfg, trace, diag, seed)

    mc_info = {}
    if reps > 1:
        i = cfg.mc_dg
        seeds = [seed + 1 + r for r in range(reps)]
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
            results = list(ex.map(one, seeds))
        ns = trace.nsamp
        errs = np.full((reps, ns), np.nan)
        bnds = np.full((reps, ns), np.nan)
        det = []
        for r, (tr, dg) in enumerate(results):
            d = dg.dgs[i]
            errs[r] = dg.fbar_true[:, i] - d.fhat
            if d.bound is not None:
                bnds[r] = d.bound
            det.append(d.k_detect)
        mean_err = np.full(ns, np.nan)
        mean_bound = np.full(ns, np.nan)
        ok_e = np.isfinite(errs).any(axis=0)
        ok_b = np.isfinite(bnds).any(axis=0)
        mean_err[ok_e] = np.abs(np.nanmean(errs[:, ok_e], axis=0))
        mean_bound[ok_b] = np.nanmean(bnds[:, ok_b], axis=0)
        _write_csv(out / "mc_bound.csv",
                   ["t", "abs_mean_error", "mean_bound", "n_active"],
                   [trace.t, mean_err, mean_bound,
                    np.sum(np.isfinite(errs), axis=0).astype(float)])
        mc_info = {"repetitions": reps, "dg": i + 1,
                   "detect_samples": det,
                   "seeds": seeds}

    manifest = {
        "artifact_version": __version__,
        "config_hash": _config_hash(cfg.raw),
        "config": cfg.raw,
        "seed": seed,
        "resolved_sim": {k: float(v) for k, v in cfg.sim.items()},
        "resolved_diagnosis": {k: (list(map(float, v)) if isinstance(v, (list, tuple))
                                   else float(v))
                               for k, v in cfg.diagnosis.items()},
        "noise_distribution": cfg.spec.noise.distribution,
        "monte_carlo": mc_info,
        "designs": {
            f"dg{i + 1}": {"gamma_actuator": suite.actuator_designs[i].gamma,
                           "gamma_line": suite.line_designs[i].gamma,
                           "n_upsilon": suite.kits[i].n_upsilon}
            for i in range(cfg.spec.n)},
        "detection_sample": {f"dg{i + 1}": int(diag.dgs[i].k_detect)
                             for i in range(cfg.spec.n)},
        "wall_time_s": time.time() - t0,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)

    if do_plots:
        _plot_run(out, cfg, trace, diag)
    return out


def synthesize_cmd(cfg: ScenarioConfig, outdir: str | None = None) -> Path:
    out = Path(cfg.output_dir if outdir is None else outdir)
    out.mkdir(parents=True, exist_ok=True)
    a = DenominatorPoly.from_roots(cfg.diagnosis["a_roots"])
    d_N = int(cfg.diagnosis["d_N"])
    from .pipeline import design_filters
    acts, lins = design_filters(cfg.spec, a, d_N)
    for i in range(cfg.spec.n):
        export_design(acts[i], out / f"design_actuator_dg{i + 1}.txt")
        export_design(lins[i], out / f"design_line_dg{i + 1}.txt")
    return out


def bundled_config_path(name: str) -> Path:
    p = CONFIG_DIR / f"{name}.yaml"
    if not p.exists():
        raise ConfigError(f"no bundled config named '{name}'")
    return p


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mgfdi",
                                 description="DC-microgrid fault diagnosis scenarios")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run a scenario config")
    p_run.add_argument("config")
    p_val = sub.add_parser("validate", help="check a config without simulating")
    p_val.add_argument("config")
    p_syn = sub.add_parser("synthesize", help="export the synthesized filter designs")
    p_syn.add_argument("config")
    p_rep = sub.add_parser("reproduce", help="run a bundled benchmark scenario")
    p_rep.add_argument("case", choices=["case1", "case2"])
    for p in (p_run, p_rep, p_syn):
        p.add_argument("--out", default=None)
    for p in (p_run, p_rep):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--monte-carlo", type=int, default=None)
        p.add_argument("--no-plots", action="store_true")
        p.add_argument("--jobs", type=int, default=4)

    args = ap.parse_args(argv)
    if args.cmd == "validate":
        cfg = load_config(args.config)
        violations = validate(cfg)
        if violations:
            for v in violations:
                print(f"VIOLATION: {v}")
            return 2
        print("config OK")
        return 0
    if args.cmd == "synthesize":
        cfg = load_config(args.config)
        out = synthesize_cmd(cfg, args.out)
        print(f"designs written to {out}")
        return 0
    path = args.config if args.cmd == "run" else bundled_config_path(args.case)
    cfg = load_config(path)
    out = run(cfg, seed=args.seed, monte_carlo=args.monte_carlo,
              outdir=args.out, plots=(False if args.no_plots else None),
              jobs=args.jobs)
    print(f"artifacts written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
