"""Command-line front end.

Every command writes its artifacts (CSV tables, JSON summaries, rendered
figures) plus a manifest carrying the config hash, seed, and versions into
the output directory.  Exit codes: 0 success, 2 configuration/validation
error, 1 runtime or acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (CalibrationPlan, EventWindow, calibrate, initial_checks)
from .dsa import lyapunov_exponent, twin_rotor_series
from .experiments import (fig5_experiment, fig5_scenario, fig6_experiment,
                          fig7_experiment, run_machine_dse, stability_exponents)
from .filters import MachineDseModel
from .machine import MachineAssembly
from .measurements import (NoiseRecipe, bus_channels, machine_channels,
                           save_ledger, save_measurements, synthesize)
from .monitoring import anomaly_detect, coi_frequency, frequency_divider
from .network import CaseValidationError, load_case
from .observability import empirical_observability
from .reporting import (render_series, write_json, write_manifest, write_table)
from .simulator import (ScenarioError, equilibrium_setpoints, load_scenario,
                        simulate)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _apply_overrides(payload: dict, pairs: list[str]) -> dict:
    """Apply ``--set key=value`` overrides; unknown keys are an error."""
    out = json.loads(json.dumps(payload))
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise CliError(f"unknown config key {key!r} "
                               f"(known: {sorted(node)})")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise CliError(f"unknown config key {key!r} (known: {sorted(node)})")
        try:
            node[leaf] = json.loads(raw)
        except json.JSONDecodeError:
            node[leaf] = raw
    return out


def _outdir(args, default_name: str) -> Path:
    root = args.out or os.environ.get("DSEKIT_OUT", "out")
    path = Path(root)
    if args.out is None:
        path = path / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_scenario_config(args):
    sc_path = args.scenario
    try:
        base = load_scenario(sc_path).to_dict() if not args.set else None
        if args.set:
            from importlib import resources
            p = Path(sc_path)
            if p.exists():
                raw = json.loads(p.read_text())
            else:
                raw = json.loads(resources.files("dsekit")
                                 .joinpath(f"scenarios/{sc_path}.json").read_text())
            raw = _apply_overrides(raw, args.set)
            from .simulator import Scenario
            sc = Scenario.from_dict(raw)
            return sc, raw
        return load_scenario(sc_path), base
    except FileNotFoundError as exc:
        raise CliError(f"scenario not found: {exc}") from None
    except ScenarioError as exc:
        raise CliError(f"invalid scenario: {exc}") from None


def _recipe(args) -> NoiseRecipe:
    if getattr(args, "noise", None):
        with open(args.noise) as f:
            return NoiseRecipe.from_dict(json.load(f))
    return NoiseRecipe()


def _figures_enabled(args) -> bool:
    return not getattr(args, "no_figures", False)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    sc, config = _load_scenario_config(args)
    if args.seed is not None:
        sc.seed = args.seed
    out = _outdir(args, f"simulate_{Path(args.scenario).stem}")
    tr = simulate(sc)
    idx = np.arange(0, len(tr.t), tr.frame_stride)
    cols = {"t": tr.t[idx]}
    for g in range(tr.states.shape[1]):
        for name in ("delta", "omega"):
            cols[f"g{g + 1}.{name}"] = tr.column(g, name)[idx]
    for g, bus in enumerate(tr.machine_buses):
        v = tr.v_bus[idx, tr.bus_ids.index(bus)]
        cols[f"b{bus}.vmag"] = np.abs(v)
        cols[f"b{bus}.vang"] = np.angle(v)
    write_table(out / "trajectory.csv", cols)
    write_json(out / "summary.json", {
        "events": [e.to_dict() for e in tr.events],
        "stable": tr.is_stable(),
        "max_angle_spread_deg": float(np.rad2deg(tr.angle_spread()).max()),
        "diverged": tr.diverged,
        "diagnostic": tr.diagnostic,
    })
    write_manifest(out / "manifest.json", config or sc.to_dict(), seed=sc.seed)
    if _figures_enabled(args):
        speeds = {f"g{g + 1}": tr.states[idx, g, 1] for g in range(tr.states.shape[1])}
        render_series(out / "rotor_speeds.png", tr.t[idx], speeds,
                      "rotor speed (pu)", "simulated rotor speeds")
    print(f"wrote {out}/trajectory.csv ({len(idx)} frames); "
          f"stable={tr.is_stable()}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    sc, config = _load_scenario_config(args)
    seed = args.seed if args.seed is not None else sc.seed
    out = _outdir(args, f"estimate_{Path(args.scenario).stem}_{args.method}")
    recipe = _recipe(args)
    tr = simulate(sc)
    gens = [int(g) for g in args.gens.split(",")]
    ms, ledger, results = run_machine_dse(
        sc.case, tr, gens, recipe, sc.rate, seed, method=args.method,
        robust=(args.method == "rukf"))
    save_measurements(ms, out / "measurements.csv")
    save_ledger(ledger, out / "ledger.json")
    idx = np.arange(0, len(tr.t), tr.frame_stride)
    for g, res in results.items():
        cols = {"t": res.t}
        for j, name in enumerate(res.state_names):
            cols[f"xhat.{name}"] = res.means[:, j]
            cols[f"pdiag.{name}"] = res.cov_diag[:, j]
        cols["nis"] = res.nis
        cols["truth.omega"] = tr.column(g - 1, "omega")[idx]
        cols["truth.delta"] = tr.column(g - 1, "delta")[idx]
        write_table(out / f"estimate_g{g}.csv", cols)
        if _figures_enabled(args):
            j = res.state_names.index("omega")
            render_series(out / f"estimate_g{g}.png", res.t,
                          {"truth": cols["truth.omega"], args.method: res.means[:, j]},
                          "rotor speed (pu)", f"g{g} rotor-speed estimate")
    write_manifest(out / "manifest.json",
                   {"scenario": config or sc.to_dict(), "method": args.method,
                    "gens": gens}, seed=seed)
    print(f"wrote {out} for generators {gens}")
    return EXIT_OK


def cmd_observability(args) -> int:
    try:
        case = load_case(args.case)
    except (FileNotFoundError, CaseValidationError) as exc:
        raise CliError(f"case error: {exc}") from None
    out = _outdir(args, f"observability_{Path(args.case).stem}_g{args.gen}")
    x_eq, vref, pref, pf = equilibrium_setpoints(case)
    gi = args.gen - 1
    bus = case.machine_bus_indices[gi]
    u = np.array([abs(pf.v_bus[bus]), np.angle(pf.v_bus[bus])])
    sets = [tuple(s.split(",")) for s in args.sets.split(";")]
    reports = []
    for kinds in sets:
        model = MachineDseModel(case.machines[gi], vref[gi], pref[gi],
                                case.omega_s, meas_kinds=kinds, u_sigma=None)
        rep = empirical_observability(model, x_eq[gi, : model.nx], u, 1.0 / 60.0)
        reports.append(rep)
    write_json(out / "observability.json", {"reports": [r.to_dict() for r in reports]})
    write_manifest(out / "manifest.json",
                   {"case": args.case, "gen": args.gen, "sets": args.sets},
                   seed=None)
    if _figures_enabled(args):
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 3.5))
        labels = ["+".join(r.measurement_set) for r in reports]
        ax.bar(labels, [max(r.sigma_min, 1e-16) for r in reports])
        ax.set_yscale("log")
        ax.set_ylabel("smallest singular value")
        for lbl, r in zip(labels, reports):
            print(f"  {lbl}: sigma_min={r.sigma_min:.3e} grade={r.grade}")
        fig.tight_layout()
        fig.savefig(out / "observability.png", dpi=130)
        plt.close(fig)
    print(f"wrote {out}/observability.json")
    return EXIT_OK


def cmd_monitor(args) -> int:
    sc, config = _load_scenario_config(args)
    seed = args.seed if args.seed is not None else sc.seed
    out = _outdir(args, f"monitor_{Path(args.scenario).stem}")
    recipe = _recipe(args)
    tr = simulate(sc)
    case = sc.case
    gens = list(range(1, case.n_machine + 1))
    _, _, results = run_machine_dse(case, tr, gens, recipe, sc.rate, seed)
    idx = np.arange(0, len(tr.t), tr.frame_stride)
    t = tr.t[idx]
    omega_est = np.column_stack([results[g].means[:, results[g].state_names.index("omega")]
                                 for g in gens])
    omega_true = tr.states[idx, :, 1]
    h = np.array([p.h for p in case.machines])
    base = np.array([p.base_mva for p in case.machines])
    coi_est = np.array([coi_frequency(w, h, base) for w in omega_est])
    coi_true = np.array([coi_frequency(w, h, base) for w in omega_true])
    statuses = None
    opened = [e for e in tr.events if e.kind == "open"]
    if opened:
        statuses = [br.status for br in case.branches]
        for e in opened:
            statuses[case.branch_index(e.from_bus, e.to_bus)] = "open"
    bus_freq = np.array([frequency_divider(case, w, statuses) for w in omega_est])
    cols = {"t": t, "coi_true": coi_true, "coi_est": coi_est}
    for col, b in enumerate(case.buses):
        if b.id in set(args.buses and [int(x) for x in args.buses.split(",")] or
                       [case.machine_buses[0], 16, 28]):
            cols[f"b{b.id}.freq"] = bus_freq[:, col]
    write_table(out / "monitor.csv", cols)
    nis = results[gens[0]].nis
    rep = anomaly_detect(nis[np.isfinite(nis)], dim=2, alpha=args.alpha)
    write_json(out / "anomaly_log.json", {
        "alpha": rep.alpha, "threshold": rep.threshold,
        "flag_rate": float(np.mean(rep.flags)),
        "persistent_onsets": rep.onsets,
    })
    write_manifest(out / "manifest.json", config or sc.to_dict(), seed=seed)
    if _figures_enabled(args):
        render_series(out / "coi.png", t, {"COI truth": coi_true, "COI DSE": coi_est},
                      "frequency (pu)", "center-of-inertia frequency")
    print(f"wrote {out}/monitor.csv")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        with open(args.plan) as f:
            plan_raw = json.load(f)
    except FileNotFoundError:
        raise CliError(f"plan file not found: {args.plan}") from None
    plan_raw = _apply_overrides(plan_raw, args.set)
    required = {"gen", "candidates", "bounds"}
    missing = required - set(plan_raw)
    if missing:
        raise CliError(f"plan missing keys: {sorted(missing)}")
    out = _outdir(args, "calibrate")
    seed = args.seed if args.seed is not None else int(plan_raw.get("seed", 0))
    case = load_case(plan_raw.get("case", "ieee39"))
    gen = int(plan_raw["gen"])
    recipe = _recipe(args)

    def window(name, sc_name):
        sc = load_scenario(sc_name)
        tr = simulate(sc)
        gi = gen - 1
        bus = case.machine_buses[gi]
        chans = machine_channels([gen], ("P", "Q"), recipe) + \
            bus_channels([bus], ("Vmag", "Vang"), recipe)
        ms, _ = synthesize(tr, chans, recipe, rate=sc.rate, seed=seed + hash(name) % 1000)
        return EventWindow(name, ms.t,
                           ms.series(f"b{bus}.Vmag"), ms.series(f"b{bus}.Vang"),
                           ms.series(f"g{gen}.P"), ms.series(f"g{gen}.Q"),
                           recipe.declared_of("P"), recipe.declared_of("Q"),
                           (recipe.declared_of("Vmag"), recipe.declared_of("Vang")))

    est = window("estimation", plan_raw.get("estimation_scenario", "fig5"))
    val = window("validation", plan_raw.get("validation_scenario", "calib_val"))
    params0 = case.machines[gen - 1]
    for name, factor in plan_raw.get("perturb", {}).items():
        from .calibration import apply_param, get_param
        params0 = apply_param(params0, name, get_param(params0, name) * factor)
    checks = initial_checks(params0)
    plan = CalibrationPlan(candidates=list(plan_raw["candidates"]),
                           bounds={k: tuple(v) for k, v in plan_raw["bounds"].items()},
                           estimation_events=[est], validation_events=[val],
                           max_outer=int(plan_raw.get("max_outer", 3)))
    report = calibrate(params0, plan, case.omega_s, seed=seed)
    payload = {
        "initial_checks": [vars(v) for v in checks],
        "success": report.success,
        "classification": report.classification,
        "iterations": [{
            "selected": it.selected, "params": it.params,
            "statistic": it.statistic,
            "verdicts": [vars(v) for v in it.verdicts],
        } for it in report.iterations],
        "warnings": report.warnings,
    }
    write_json(out / "calibration.json", payload)
    write_manifest(out / "manifest.json", plan_raw, seed=seed)
    print(f"calibration {report.classification}; wrote {out}/calibration.json")
    return EXIT_OK if report.success else EXIT_RUNTIME


def cmd_dsa(args) -> int:
    out = _outdir(args, "dsa")
    res = fig6_experiment(seed=args.seed if args.seed is not None else 7,
                          n_instants=args.instants, load_sigma=args.load_sigma)
    payload = {"metrics": res.metrics,
               "instants": res.instants.tolist(),
               "err_dse": res.err_dse.tolist(),
               "err_sse": res.err_sse.tolist()}
    if args.exponents:
        payload["exponents"] = stability_exponents()
    write_json(out / "dsa_report.json", payload)
    write_table(out / "relative_angle.csv", {
        "t": res.sample["t"], "truth": res.sample["truth"],
        "dse_init": res.sample["dse"], "sse_init": res.sample["sse"]})
    write_manifest(out / "manifest.json",
                   {"instants": args.instants, "load_sigma": args.load_sigma},
                   seed=args.seed)
    if _figures_enabled(args):
        render_series(out / "relative_angle.png", res.sample["t"],
                      {"truth": np.rad2deg(res.sample["truth"]),
                       "DSE-initialized": np.rad2deg(res.sample["dse"]),
                       "SSE-initialized": np.rad2deg(res.sample["sse"])},
                      "relative rotor angle (deg)",
                      f"g{res.metrics.get('pair', (9, 10))[0] if False else 9} vs g10, "
                      f"instant t={res.sample['instant']:.2f}s")
    print(f"DSA ordering: DSE better at {res.metrics['wins']}/{res.metrics['n']} "
          f"instants (p={res.metrics['p_value']:.2e}); wrote {out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out = _outdir(args, f"reproduce_{args.figure}")
    seed = args.seed if args.seed is not None else 42
    if args.figure == "fig5":
        res = fig5_experiment(seed=seed)
        write_table(out / "fig5_rotor_speed.csv", {
            "t": res.t, "truth": res.truth, "dse": res.dse,
            "lowpass": res.lowpass, "washout": res.washout})
        if _figures_enabled(args):
            render_series(out / "fig5.png", res.t,
                          {"truth": res.truth, "DSE": res.dse,
                           "low-pass derivative": res.lowpass,
                           "washout derivative": res.washout},
                          "rotor speed (pu)", "internal frequency estimates (g5)")
        metrics, criterion = res.metrics, "A2"
    elif args.figure == "fig7":
        res = fig7_experiment(seed=seed)
        write_table(out / "fig7_rotor_angle.csv", {
            "t": res.t, "truth": res.truth_angle, "dse": res.dse_angle,
            "spread_deg": res.spread_deg})
        if _figures_enabled(args):
            render_series(out / "fig7.png", res.t,
                          {"truth": res.truth_angle, "robust UKF": res.dse_angle},
                          "rotor angle (rad)", "tracking through instability (g5)")
        metrics, criterion = res.metrics, "A3"
    elif args.figure == "fig6":
        res = fig6_experiment(seed=seed if args.seed is not None else 7,
                              n_instants=args.instants)
        write_table(out / "fig6_relative_angle.csv", {
            "t": res.sample["t"], "truth": res.sample["truth"],
            "dse_init": res.sample["dse"], "sse_init": res.sample["sse"]})
        if _figures_enabled(args):
            render_series(out / "fig6.png", res.sample["t"],
                          {"truth": np.rad2deg(res.sample["truth"]),
                           "DSE-initialized": np.rad2deg(res.sample["dse"]),
                           "SSE-initialized": np.rad2deg(res.sample["sse"])},
                          "g9-g10 relative angle (deg)",
                          "initialization comparison")
        metrics, criterion = res.metrics, "A4"
    else:
        raise CliError(f"unknown figure {args.figure!r}")

    write_json(out / "acceptance.json", {"criterion": criterion, **metrics})
    write_manifest(out / "manifest.json", {"figure": args.figure}, seed=seed)
    for name, ok in metrics["criteria"].items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {criterion}:{name}")
    if not metrics["passed"]:
        print(f"acceptance criterion {criterion} FAILED", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"acceptance criterion {criterion} passed; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dsekit",
        description="Dynamic state estimation toolkit for multi-machine power systems.",
        epilog="exit codes: 0 success, 2 configuration error, 1 runtime/acceptance failure")
    ap.add_argument("--version", action="version", version=f"dsekit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="scenario JSON path or bundled name (fig5/fig6/fig7)")
        p.add_argument("--out", default=None, help="output directory "
                       "(default $DSEKIT_OUT/<command>_<name>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")
        p.add_argument("--noise", default=None, help="noise recipe JSON path")

    p = sub.add_parser("simulate", help="ground-truth time-domain run")
    common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("estimate", help="simulate, synthesize measurements, filter")
    common(p)
    p.add_argument("--method", default="ukf", choices=["ekf", "ukf", "enkf", "rukf"])
    p.add_argument("--gens", default="5", help="comma-separated generator numbers")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("observability", help="grade measurement sets for one machine")
    common(p, scenario=False)
    p.add_argument("--case", default="ieee39")
    p.add_argument("--gen", type=int, default=5)
    p.add_argument("--sets", default="P,Q;P;Q",
                   help="semicolon-separated channel sets, e.g. 'P,Q;Q'")
    p.set_defaults(fn=cmd_observability)

    p = sub.add_parser("monitor", help="frequency divider, COI, anomaly flags")
    common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--buses", default=None, help="comma-separated bus ids to report")
    p.set_defaults(fn=cmd_monitor)

    p = sub.add_parser("calibrate", help="validate and calibrate machine parameters")
    common(p, scenario=False)
    p.add_argument("--plan", required=True, help="calibration plan JSON")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("dsa", help="SSE- vs DSE-initialized security assessment")
    common(p, scenario=False)
    p.add_argument("--instants", type=int, default=10)
    p.add_argument("--load-sigma", type=float, default=0.02)
    p.add_argument("--exponents", action="store_true",
                   help="also estimate stable/unstable divergence rates")
    p.set_defaults(fn=cmd_dsa)

    p = sub.add_parser("reproduce", help="run a canonical study and check its "
                                         "acceptance criterion")
    common(p, scenario=False)
    p.add_argument("figure", choices=["fig5", "fig6", "fig7"])
    p.add_argument("--instants", type=int, default=10)
    p.set_defaults(fn=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ScenarioError, CaseValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:   # runtime failures map to a distinct exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
