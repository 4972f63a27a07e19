"""Experiment orchestration and deterministic CSV output."""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .calculus import ito_residual, test_function
from .coefficients import audit_inherited_bounds, build_coefficients, time_average_defect
from .measure import EmpiricalMeasure
from .monotone import audit_monotonicity, gaussian_sampler, operator_from_dict
from .noise import JumpLaw, verify_isometry
from .solver import SolverConfig, initial_states, simulate, simulate_coupled
from .stability import (
    KPairingMonitor,
    audit_lyapunov_conditions,
    check_as_stability,
    check_ultimate_boundedness,
    fit_exponential_decay,
    snapshot_samples,
)

Z95 = 1.96

TRAJECTORY_COLUMNS = ("t", "mean_sq", "mean_sq_se", "sup_mean_sq", "k_variation_mean")
AVERAGING_COLUMNS = ("epsilon", "D_T", "D_T_se", "ci_lo", "ci_hi", "chebyshev_delta", "chebyshev_bound")
AVERAGING_SERIES_COLUMNS = ("t", "D", "D_se")
STABILITY_COLUMNS = ("criterion", "parameters", "value", "margin", "verdict")
ITO_COLUMNS = ("step", "R_T", "R_T_se", "z")
AUDIT_COLUMNS = ("audit", "statistic", "value", "threshold", "verdict")


@dataclass
class ExperimentReport:
    """Outcome of one experiment run.

    ``rows`` is the summary table written to ``summary.csv``; ``passed`` is
    ``False`` when any criterion of the experiment failed.
    """

    kind: str
    rows: list
    columns: tuple
    csv_paths: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    passed: bool = True
    notes: list = field(default_factory=list)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows):
    """Write ``rows`` (dicts or sequences) with a fixed header and ``repr`` floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row[c] for c in columns] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in vals])
    return path


def write_trajectory_csv(path, rec, extra=None):
    cols = rec.columns()
    if extra:
        cols.update(extra)
    names = list(cols)
    rows = zip(*[cols[n] for n in names])
    return write_csv(path, names, rows)


# --------------------------------------------------------------------------
# Building blocks from a parsed config


def build_system(cfg):
    """``(full coefficients, averaged coefficients, operator, initial spec)``."""
    s = cfg.system
    dim = int(s["dim"])
    j = s["jumps"]
    law = JumpLaw(float(j["rate"]), float(j["alpha"]), j["mark_law"], dim, float(j["scale"]))
    coeffs = s["coefficients"]
    full, avg = build_coefficients(coeffs["name"], coeffs.get("params", {}), dim, law)
    op = operator_from_dict(s["operator"], dim)
    return full, avg, op, s["initial"]


def solver_config(cfg, epsilon=None, step=None, retain=None, tail_window=0.0):
    s = cfg.solver
    return SolverConfig(
        n_particles=int(s["n_particles"]),
        step=float(step if step is not None else s["step"]),
        horizon=float(s["horizon"]),
        scheme=s["scheme"],
        epsilon=float(epsilon if epsilon is not None else s.get("epsilon", 1.0)),
        seed=int(s["seed"]),
        yosida_lambda=float(s["yosida_lambda"]),
        threads=int(s["threads"]),
        retain_snapshots=bool(cfg.output["retain_snapshots"] if retain is None else retain),
        compensator_marks=int(s["compensator_marks"]),
        tail_window=float(tail_window),
    )


def _provenance(cfg):
    return {"config_hash": cfg.digest(), "seed": int(cfg.solver["seed"]), "version": __version__}


def _finish(report, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    report.provenance = _provenance(cfg)
    path = write_csv(os.path.join(out_dir, "summary.csv"), report.columns, report.rows)
    report.csv_paths.insert(0, path)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({"kind": report.kind, "passed": report.passed, "provenance": report.provenance,
                   "csv": [os.path.basename(p) for p in report.csv_paths], "notes": report.notes},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


# --------------------------------------------------------------------------
# Runners


def run_simulate(cfg, out_dir):
    full, _, op, xi = build_system(cfg)
    rec = simulate(solver_config(cfg), full, op, xi)
    os.makedirs(out_dir, exist_ok=True)
    path = write_trajectory_csv(os.path.join(out_dir, "trajectory.csv"), rec)
    row = {"t": rec.times[-1], "mean_sq": rec.mean_sq[-1], "mean_sq_se": rec.mean_sq_se[-1],
           "sup_mean_sq": rec.sup_mean_sq[-1], "k_variation_mean": rec.k_variation_mean[-1]}
    report = ExperimentReport("simulate", [row], TRAJECTORY_COLUMNS, [path])
    return _finish(report, cfg, out_dir)


def averaging_rows(records, epsilons, delta):
    rows = []
    for eps, rec in zip(epsilons, records):
        d, se = rec.terminal
        rows.append({
            "epsilon": float(eps), "D_T": d, "D_T_se": se,
            "ci_lo": d - Z95 * se, "ci_hi": d + Z95 * se,
            "chebyshev_delta": float(delta), "chebyshev_bound": min(1.0, d / delta**2),
        })
    return rows


def averaging_verdicts(rows):
    """``(strictly decreasing, extreme CIs separated, ratio D(eps_min) / D(eps_max))``."""
    d = [r["D_T"] for r in rows]
    decreasing = all(b < a for a, b in zip(d[:-1], d[1:]))
    separated = rows[-1]["ci_hi"] < rows[0]["ci_lo"] if len(rows) > 1 else True
    ratio = d[-1] / d[0] if d[0] > 0 else (0.0 if d[-1] == 0 else math.inf)
    return decreasing, separated, ratio


def run_averaging_sweep(cfg, out_dir):
    full, avg, op, xi = build_system(cfg)
    epsilons = [float(e) for e in cfg.solver["epsilons"]]
    records = []
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for eps in epsilons:
        rec = simulate_coupled(solver_config(cfg, epsilon=eps, retain=False), full, avg, op, xi)
        records.append(rec)
        paths.append(write_csv(os.path.join(out_dir, f"averaging_eps_{eps!r}.csv"),
                               AVERAGING_SERIES_COLUMNS, zip(rec.times, rec.sup_dist, rec.sup_dist_se)))
    rows = averaging_rows(records, epsilons, cfg.experiment["delta"])
    decreasing, separated, ratio = averaging_verdicts(rows)
    report = ExperimentReport("averaging", rows, AVERAGING_COLUMNS, paths,
                              passed=decreasing and separated)
    report.notes.append(f"strictly_decreasing={decreasing} extreme_ci_separated={separated} "
                        f"ratio_min_to_max={ratio!r}")
    return _finish(report, cfg, out_dir)


def _params(**kw):
    return " ".join(f"{k}={v!r}" for k, v in kw.items())


def stability_rows(rec, exp, h_fn=None, c=None, xi_ms=None, k_pairing=None):
    """Verdict rows for the requested stability criteria on one trajectory."""
    rows = []
    xi_ms = float(rec.mean_sq[0] if xi_ms is None else xi_ms)
    crit = exp["criteria"]
    if "exp_ms" in crit:
        window = exp.get("fit_window")
        fit = fit_exponential_decay(rec.times, rec.mean_sq, tuple(window) if window else None, xi_ms)
        fit_ok = fit.alpha > 0 and fit.r2 >= exp["min_r2"]
        rows.append({"criterion": "exp_ms_fit",
                     "parameters": _params(window=fit.window, min_r2=exp["min_r2"]),
                     "value": fit.alpha, "margin": fit.r2 - exp["min_r2"], "verdict": fit_ok})
        env = check_ultimate_boundedness(rec.times, rec.mean_sq, exp["C"], exp["alpha"], 0.0,
                                         xi_ms, rec.mean_sq_se)
        rows.append({"criterion": "exp_ms_envelope",
                     "parameters": _params(C=exp["C"], alpha=exp["alpha"]),
                     "value": fit.C, "margin": env.worst_margin, "verdict": env.passed})
    if "ultimate" in crit:
        v = check_ultimate_boundedness(rec.times, rec.mean_sq, exp["M"], exp["lambda"], exp["W"],
                                       xi_ms, rec.mean_sq_se)
        rows.append({"criterion": "ultimate_bound",
                     "parameters": _params(M=exp["M"], lam=exp["lambda"], W=exp["W"]),
                     "value": float(np.max(rec.mean_sq)), "margin": v.worst_margin,
                     "verdict": v.passed})
    if "as" in crit:
        a = check_as_stability(rec.tail_sup, exp["delta"])
        rows.append({"criterion": "as_tail",
                     "parameters": _params(delta=a.delta, threshold=a.threshold),
                     "value": a.fraction, "margin": a.fraction - a.threshold, "verdict": a.passed})
    if h_fn is not None and c is not None and rec.snapshots is not None:
        audit = audit_lyapunov_conditions(h_fn, c, exp["alpha"], snapshot_samples(rec),
                                          exp["audit_bounds"], k_pairing=k_pairing,
                                          trajectory=rec if k_pairing is None else None)
        for ch in audit.checks:
            rows.append({"criterion": f"lyapunov_{ch.criterion}",
                         "parameters": _params(form=ch.form, alpha=exp["alpha"]),
                         "value": ch.worst_margin, "margin": ch.worst_margin, "verdict": ch.passed})
    return rows


def run_stability_battery(cfg, out_dir):
    exp = cfg.experiment
    os.makedirs(out_dir, exist_ok=True)
    if not exp["criteria"]:
        return _finish(ExperimentReport("stability", [], STABILITY_COLUMNS), cfg, out_dir)
    full, _, op, xi = build_system(cfg)
    tail = exp["tail_window"]
    horizon = float(cfg.solver["horizon"])
    tail = 0.25 * horizon if tail is None else float(tail)
    h_fn = test_function(exp["lyapunov"])
    scfg = solver_config(cfg, retain=True, tail_window=tail)
    # about twenty audit snapshots; the K-pairing is tracked on every step
    scfg = replace(scfg, snapshot_stride=max(1, scfg.n_steps // 20))
    monitor = KPairingMonitor(h_fn, scfg.epsilon)
    rec = simulate(scfg, full, op, xi, on_step=monitor)
    rows = stability_rows(rec, exp, h_fn, full, k_pairing=monitor.worst)
    path = write_trajectory_csv(os.path.join(out_dir, "trajectory.csv"), rec)
    report = ExperimentReport("stability", rows, STABILITY_COLUMNS, [path],
                              passed=all(r["verdict"] for r in rows))
    return _finish(report, cfg, out_dir)


def run_ito_check(cfg, out_dir):
    exp = cfg.experiment
    full, _, op, xi = build_system(cfg)
    steps = exp["steps"] or [float(cfg.solver["step"])]
    h_fn = test_function(exp["test_function"])
    rows = []
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for h in steps:
        rec = simulate(solver_config(cfg, step=h, retain=True), full, op, xi)
        res = ito_residual(rec, h_fn, full, jump_mc=exp["jump_mc"])
        r, se, z = res.terminal
        rows.append({"step": float(h), "R_T": r, "R_T_se": se, "z": z})
        paths.append(write_csv(os.path.join(out_dir, f"ito_h_{float(h)!r}.csv"), ("t", "R", "R_se"),
                               zip(res.times, res.residual, res.se)))
    passed = abs(rows[-1]["z"]) <= 4.0
    report = ExperimentReport("ito_check", rows, ITO_COLUMNS, paths)
    if len(rows) > 1:
        ratio = abs(rows[-2]["R_T"]) / abs(rows[-1]["R_T"]) if rows[-1]["R_T"] else math.inf
        passed = passed and ratio >= 1.5
        report.notes.append(f"halving_ratio={ratio!r}")
    report.passed = passed
    return _finish(report, cfg, out_dir)


def run_audits(cfg, out_dir):
    exp = cfg.experiment
    full, avg, op, xi = build_system(cfg)
    seed = int(cfg.solver["seed"])
    dim = full.dim
    rows = []
    mono = audit_monotonicity(op, gaussian_sampler(dim, 2.0), int(exp["monotonicity_pairs"]),
                              rng=seed)
    rows.append({"audit": "operator_monotonicity", "statistic": "min_inner",
                 "value": mono.min_inner, "threshold": -mono.tolerance, "verdict": mono.passed})
    inh = audit_inherited_bounds(avg, full, n=int(exp["inherited_pairs"]), seed=seed)
    rows.append({"audit": "inherited_lipschitz", "statistic": "fitted_constant",
                 "value": inh.lipschitz_constant, "threshold": inh.lipschitz_ceiling,
                 "verdict": not inh.lipschitz_flag})
    rows.append({"audit": "inherited_growth", "statistic": "fitted_constant",
                 "value": inh.growth_constant, "threshold": inh.growth_ceiling,
                 "verdict": not inh.growth_flag})
    # witness state: x = defect_state against a standard Gaussian ensemble
    x = np.full((1, dim), float(exp["defect_state"]))
    mu = EmpiricalMeasure(initial_states({"kind": "gaussian", "mean": 0.0, "std": 1.0}, 64, dim, seed))
    # each defect must not grow along the (ascending) T1 list; threshold is the previous value
    prev = {}
    for T1 in sorted(float(v) for v in exp["T1"]):
        d = time_average_defect(full, avg, x, mu, T1, int(exp["n_quad"]), seed=seed)
        for name in ("psi1", "psi2", "psi3"):
            stat = "psi3_per_mean_sq_mark" if name == "psi3" else name
            val = getattr(d, name)
            last = prev.get(name)
            ok = last is None or val <= last + 1e-9 * (1.0 + last)
            rows.append({"audit": f"averaging_defect_T1={T1!r}", "statistic": stat, "value": val,
                         "threshold": "" if last is None else last, "verdict": ok})
            prev[name] = val
    if full.has_jumps:
        iso = verify_isometry(full.law, lambda s, u: u, 1.0, int(exp["isometry_trials"]), seed=seed)
        rows.append({"audit": "jump_isometry", "statistic": "z", "value": iso.z,
                     "threshold": 3.0, "verdict": abs(iso.z) <= 3.0})
    report = ExperimentReport("audits", rows, AUDIT_COLUMNS,
                              passed=all(bool(r["verdict"]) for r in rows))
    return _finish(report, cfg, out_dir)


RUNNERS = {
    "simulate": run_simulate,
    "averaging": run_averaging_sweep,
    "stability": run_stability_battery,
    "ito_check": run_ito_check,
    "audits": run_audits,
}


def run_experiment(cfg, out_dir):
    return RUNNERS[cfg.kind](cfg, out_dir)
