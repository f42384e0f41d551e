"""Command-line front-end: ``kinhydro <subcommand> [--config run.ini] [flags]``.

Every run writes into ``<output_dir>/<subcommand>/`` a manifest.json, CSV
tables, summary.txt and the exact config used (config.ini). Exit codes:
0 success, 2 numerical failure (NonContraction, DivergentNorm, ModeSingular),
1 configuration error (nothing is written).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from .io import ConfigError, RunConfig, load_config, parse_vector, read_manifest, write_csv, write_manifest

log = logging.getLogger("kinhydro")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

# (flag, section, key) overrides shared by several subcommands
FLAG_MAP = {
    "eps": ("physics", "eps"),
    "c": ("physics", "c"),
    "mesh": ("mesh", "preset"),
    "tol_outer": ("tolerances", "tol_outer"),
    "max_outer": ("tolerances", "max_outer"),
    "out": ("run", "output_dir"),
    "seed": ("run", "seed"),
    "threads": ("run", "threads"),
    "cache": ("run", "cache_dir"),
}


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1); exit 2 is reserved for numerical failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _vgrid_overrides(text):
    if text is None:
        return {}
    vals = parse_vector(text, 2)
    n = int(vals[0])
    if n != vals[0]:
        raise ConfigError("--vgrid expects n,vmax with integer n")
    return {("grid", "n_per_axis"): n, ("grid", "v_max"): vals[1]}


def _grid(cfg: RunConfig):
    from .velocity import build_grid

    try:
        return build_grid(cfg.getfloat("grid", "v_max"), cfg.getint("grid", "n_per_axis"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _drift(cfg: RunConfig):
    from .velocity import DriftContext

    eps = cfg.getfloat("physics", "eps")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    return DriftContext(eps, cfg.vector("physics", "c"))


def _positive_list(cfg, sec, key):
    vals = cfg.vector(sec, key, None)
    if not vals or min(vals) <= 0:
        raise ConfigError(f"[{sec}] {key} must be a non-empty list of positive numbers")
    return vals


# Validation happens before any file is created.


def validate(cfg: RunConfig) -> None:
    cfg.getint("run", "seed")
    if cfg.getint("run", "threads") < 1:
        raise ConfigError("threads must be >= 1")
    sub = cfg.subcommand
    if sub in ("moments", "linop-check", "boltzmann-solve", "scaling-study", "norms"):
        _grid(cfg)
    if sub in ("linop-check", "boltzmann-solve", "norms"):
        _drift(cfg)
    if sub in ("boltzmann-solve", "scaling-study"):
        cfg.mesh()
        if cfg.getfloat("tolerances", "tol_outer") <= 0 or cfg.getint("tolerances", "max_outer") < 1:
            raise ConfigError("tol_outer must be positive and max_outer >= 1")
    if sub == "scaling-study":
        _positive_list(cfg, "scaling", "eps_list")
        _positive_list(cfg, "scaling", "c_list")
    if sub == "multiplier-scan":
        if cfg.getfloat("scan", "q") <= 1 or cfg.getint("scan", "ell") not in (0, 1, 2):
            raise ConfigError("need q > 1 and ell in {0, 1, 2}")
        if min(cfg.getfloat("scan", "sigma"), cfg.getfloat("scan", "beta"), cfg.getfloat("scan", "box")) <= 0:
            raise ConfigError("sigma, beta and box must be positive")
        if cfg.getint("scan", "refinements") < 1:
            raise ConfigError("refinements must be >= 1")
        cfg.vector("scan", "c_list", None)
        _drift(cfg)
    if sub == "ns-solve":
        cfg.vector("physics", "c")
        if cfg.getint("ns", "modes") < 8 or cfg.getfloat("ns", "box") <= 4:
            raise ConfigError("ns modes must be >= 8 and box > 4")
        if cfg.getfloat("ns", "tol") <= 0 or cfg.getint("ns", "max_iter") < 1:
            raise ConfigError("ns tol must be positive and max_iter >= 1")
    if sub == "norms":
        field = cfg.extras.get("field")
        if not field or not os.path.isfile(os.path.join(field, "values.npy")):
            raise ConfigError("norms needs --field pointing at a boltzmann-solve field directory")
        rho, sig = cfg.getfloat("norms", "rho"), cfg.getfloat("norms", "sigma")
        if not (0 < rho < 1 and 0 < sig <= 0.1):
            raise ConfigError("need 0 < rho < 1 and 0 < sigma <= 0.1")


# Subcommand bodies write into ``out`` and return (manifest, summary lines).


def run_moments(cfg, out):
    from .velocity import moment_table

    grid = _grid(cfg)
    rows = moment_table(grid)
    write_csv(os.path.join(out, "moments.csv"), rows, ["poly", "value", "oracle", "expected", "abs_error", "grid_error"])
    worst = max(r["abs_error"] for r in rows)
    lines = [f"{r['poly']}: oracle {r['oracle']:.15g} (expected {r['expected']:g}), abs error {r['abs_error']:.2e}, "
             f"grid error {r['grid_error']:.2e}" for r in rows]
    lines.append(f"max oracle error {worst:.2e}")
    return {"grid": grid.spec_text(), "max_abs_error": worst, "rows": len(rows)}, lines


def run_linop_check(cfg, out):
    from .collision import (CollisionKernel, build_linearized, build_projector, fit_nu, null_residuals,
                            spectral_gap, transport_coefficients)

    grid, drift = _grid(cfg), _drift(cfg)
    op = build_linearized(drift, CollisionKernel(), grid, cache_dir=cfg.cache_dir)
    proj = build_projector(drift, grid)
    gap = spectral_gap(op, proj)
    res = null_residuals(op, proj)
    fit = fit_nu(op)
    tc = transport_coefficients(op, proj)
    row = {"symmetry_defect": op.symmetry_defect, "gap": gap.gap, "null_dimension": gap.null_dimension,
           "null_residual_max": max(res.values()), "nu_exponent": fit.exponent, "nu0": fit.nu0, "nu1": fit.nu1,
           "viscosity": tc.viscosity, "shear_viscosity": tc.shear_viscosity, "conductivity": tc.conductivity}
    row.update({f"residual_{k}": v for k, v in res.items()})
    write_csv(os.path.join(out, "linop.csv"), [row])
    lines = [f"{k} = {v:.6g}" if isinstance(v, float) else f"{k} = {v}" for k, v in row.items()]
    return {"grid": grid.spec_text(), "eps": drift.eps, "c_inf": drift.c_inf, **row}, lines


def run_multiplier_scan(cfg, out):
    from .oseen import DivergentNorm, KGrid, MultiplierSpec, multiplier_norm_scan, slope_fit, write_scan_csv

    q, ell = cfg.getfloat("scan", "q"), cfg.getint("scan", "ell")
    sigma, beta = cfg.getfloat("scan", "sigma"), cfg.getfloat("scan", "beta")
    eps = cfg.getfloat("physics", "eps")
    kg = KGrid(cfg.getfloat("scan", "box"), 8)
    refs = cfg.getint("scan", "refinements")
    c_list = cfg.vector("scan", "c_list", None)
    rows, finals, lines = [], [], []
    try:
        for cm in c_list:
            res = multiplier_norm_scan(MultiplierSpec(sigma, beta, eps, (cm, 0.0, 0.0)), q, ell, kg, refs)
            rows.extend(res.rows)
            finals.append(res.value)
            ratio = res.levels[-1] / res.levels[0]
            lines.append(f"|c| = {cm:g}: norm {res.value:.6g}, Richardson {res.richardson:.6g}, "
                         f"ratio over refinements {ratio:.4f}{' (origin divergent)' if res.divergent else ''}")
    except DivergentNorm as exc:
        write_scan_csv(os.path.join(out, "scan.csv"), rows)
        raise NumericalFailure(str(exc)) from exc
    write_scan_csv(os.path.join(out, "scan.csv"), rows)
    man = {"q": q, "ell": ell, "sigma": sigma, "beta": beta, "eps": eps, "c_list": c_list, "norms": finals}
    pos = [(c, v) for c, v in zip(c_list, finals) if c > 0]
    if len(pos) >= 2:
        slope = slope_fit([p[0] for p in pos], [p[1] for p in pos])
        delta = 1 / (5 + q * (2 - ell))
        man.update(slope=slope, delta=delta, bound=delta / q + 0.05)
        lines.append(f"fitted slope {slope:.4f}; |slope| {'<=' if abs(slope) <= delta / q + 0.05 else '>'} "
                     f"delta/q + 0.05 = {delta / q + 0.05:.4f} (delta = {delta:.4f})")
    return man, lines


def run_ns_solve(cfg, out):
    from .kinetic import NonContraction
    from .navier_stokes import build_problem, energy_bound, momentum_residual, norm_sweep, oseen_iterate

    c = cfg.vector("physics", "c")
    prob = build_problem(c, cfg.getfloat("ns", "box"), cfg.getint("ns", "modes"))
    failure = None
    try:
        state = oseen_iterate(prob, cfg.getint("ns", "max_iter"), cfg.getfloat("ns", "tol"))
    except NonContraction as exc:
        state, failure = exc.ledger, str(exc)
    U = prob.w + state.v
    sweep = norm_sweep(U, prob.c, prob.box, prob.geom)
    rows = [{"p": p, "full_box": sweep["full"][p], "half_box": sweep["half"][p],
             **{f"shell_{i}": s for i, s in enumerate(sweep["shells"][p])}} for p in sweep["full"]]
    write_csv(os.path.join(out, "norms.csv"), rows)
    write_csv(os.path.join(out, "history.csv"), state.history, ["ell", "step", "rel_step", "ratio", "inner"])
    np.save(os.path.join(out, "U.npy"), U.astype(np.float64))
    np.save(os.path.join(out, "pressure.npy"), state.p.astype(np.float64))
    eb = energy_bound(state.v, prob.box)
    man = {"c_inf": c, "box": prob.box.L, "modes": prob.box.n, "lift": prob.lift_report, "energy": eb,
           "shell_edges": sweep["shell_edges"], "iterations": state.ell, "momentum_residual": momentum_residual(prob, state.v),
           "inner_factors": state.inner_factors, "fields": {"U.npy": list(U.shape), "pressure.npy": list(state.p.shape)}}
    lines = [f"|c| = {np.linalg.norm(c):g}, box {prob.box.L:g}, {prob.box.n}^3 modes, {state.ell} outer steps",
             f"lift boundary max {prob.lift_report['boundary_max']:.2e}, discrete divergence {prob.lift_report['div_defect']:.2e}"]
    lines += [f"||U - c||_{r['p']} = {r['full_box']:.6g} (half box {r['half_box']:.6g})" for r in rows]
    if failure:
        man["failure"] = failure
        write_manifest(os.path.join(out, "manifest.json"), man)
        raise NumericalFailure(failure)
    return man, lines


def _setup(cfg, mesh=None, eps=None, c=None):
    from .kinetic import setup_problem

    drift = _drift(cfg)
    return setup_problem(eps if eps is not None else drift.eps, c if c is not None else drift.c_inf,
                         mesh=mesh or cfg.mesh(), v_max=cfg.getfloat("grid", "v_max"),
                         n_per_axis=cfg.getint("grid", "n_per_axis"), cache_dir=cfg.cache_dir)


def run_boltzmann_solve(cfg, out):
    from .kinetic import NonContraction, exact_problem_flux, positivity_iteration, write_field

    prob = _setup(cfg)
    ledger_path = cfg.extras.get("ledger") or os.path.join(out, "ledger.csv")
    try:
        res = positivity_iteration(prob, cfg.getfloat("tolerances", "tol_outer"), cfg.getint("tolerances", "max_outer"),
                                   cfg.getfloat("tolerances", "tol_inner"))
    except NonContraction as exc:
        exc.ledger.write_csv(os.path.join(out, "ledger.csv"))
        raise NumericalFailure(str(exc)) from exc
    res.ledger.write_csv(os.path.join(out, "ledger.csv"))
    if cfg.extras.get("ledger"):
        res.ledger.write_csv(ledger_path)
    write_field(os.path.join(out, "field"), res.R)
    exact = exact_problem_flux(prob, cfg.getfloat("tolerances", "tol_inner"))
    from .norms import composite_norm

    rep = composite_norm(res.R, prob.drift, prob.weights, prob.proj, prob.boundary, prob.mesh, prob.grid, prob.op.nu)
    write_csv(os.path.join(out, "norms.csv"), [rep.as_row()])
    last = res.ledger.rows[-1]
    man = {"eps": prob.drift.eps, "c_inf": prob.drift.c_inf, "grid": prob.grid.spec_text(),
           "mesh": cfg.get("mesh", "preset"), "converged": res.converged, "outer_iterations": len(res.ledger.rows),
           "last": last, "exact_problem_zgamma_max": exact["zgamma_max"], "setup": prob.reports,
           "norm_report": rep.to_dict(), "field": ["values.npy", "wall_trace.npy", "far_trace.npy"]}
    lines = [f"eps {prob.drift.eps:g}, c {prob.drift.c_inf}, converged {res.converged} after {len(res.ledger.rows)} steps",
             f"lambda {last['lambda']:.4g}, min F {last['min_F']:.3e}, mask fraction {last['mask_fraction']:.2e}",
             f"exact problem per-face z_gamma max {exact['zgamma_max']:.3e}",
             f"composite norm {rep.composite:.6g}"]
    return man, lines


def run_scaling_study(cfg, out):
    from .kinetic import NonContraction, scaling_study

    rows = []
    mesh = cfg.mesh()
    try:
        for cm in cfg.vector("scaling", "c_list", None):
            rows.extend(scaling_study(cfg.vector("scaling", "eps_list", None), cm, mesh=mesh,
                                      direction=_drift(cfg).c_inf if np.linalg.norm(_drift(cfg).c_inf) > 0 else (1, 0, 0),
                                      tol_outer=cfg.getfloat("tolerances", "tol_outer"),
                                      max_outer=cfg.getint("tolerances", "max_outer"), cache_dir=cfg.cache_dir,
                                      v_max=cfg.getfloat("grid", "v_max"), n_per_axis=cfg.getint("grid", "n_per_axis")))
    except NonContraction as exc:
        write_csv(os.path.join(out, "scaling.csv"), rows)
        raise NumericalFailure(str(exc)) from exc
    write_csv(os.path.join(out, "scaling.csv"), rows)
    lines = [f"eps {r['eps']:g} |c| {r['c_mag']:g}: composite {r['composite']:.4g}, "
             f"micro L2/eps {r['micro_L2_over_eps']:.4g}, L6 {r['R_L6']:.4g}" for r in rows]
    return {"rows": rows}, lines


def run_norms(cfg, out):
    from .mesh import KineticField
    from .norms import composite_norm, m_functional
    from .velocity import WeightFunction

    field_dir = cfg.extras["field"]
    man_path = os.path.join(os.path.dirname(os.path.abspath(field_dir)), "manifest.json")
    src_man = read_manifest(man_path) if os.path.isfile(man_path) else {}
    prob = _setup(cfg, eps=src_man.get("eps"), c=src_man.get("c_inf"))
    vals = np.load(os.path.join(field_dir, "values.npy"))
    if vals.shape != (prob.mesh.n_cells, prob.grid.size):
        raise ConfigError(f"field shape {vals.shape} does not match mesh/grid {(prob.mesh.n_cells, prob.grid.size)}")
    f = KineticField(vals, np.load(os.path.join(field_dir, "wall_trace.npy")),
                     np.load(os.path.join(field_dir, "far_trace.npy")))
    wts = WeightFunction(cfg.getfloat("norms", "beta"), cfg.getfloat("norms", "beta_prime"))
    rep = composite_norm(f, prob.drift, wts, prob.proj, prob.boundary, prob.mesh, prob.grid, prob.op.nu)
    g = np.sqrt(prob.drift.eps) * prob.Abar
    rep.m_terms = m_functional(g, prob.r_bar, prob.drift, wts, prob.proj, prob.boundary, prob.mesh, prob.grid,
                               prob.op.nu, cfg.getfloat("norms", "rho"), cfg.getfloat("norms", "sigma"))
    write_csv(os.path.join(out, "norms.csv"), [rep.as_row()])
    lines = [f"{k} = {v:.6g}" for k, v in rep.components().items()]
    lines.append(f"composite = {rep.composite:.6g}; M(g, r) = {rep.m_value:.6g}")
    return {"field": os.path.abspath(field_dir), "report": rep.to_dict()}, lines


COMMANDS = {
    "moments": run_moments,
    "linop-check": run_linop_check,
    "multiplier-scan": run_multiplier_scan,
    "ns-solve": run_ns_solve,
    "boltzmann-solve": run_boltzmann_solve,
    "scaling-study": run_scaling_study,
    "norms": run_norms,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinhydro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--cache", help="operator cache directory")
    phys = argparse.ArgumentParser(add_help=False)
    phys.add_argument("--eps", type=float)
    phys.add_argument("--c", help="cx,cy,cz")
    vg = argparse.ArgumentParser(add_help=False)
    vg.add_argument("--vgrid", help="n,vmax")
    kin = argparse.ArgumentParser(add_help=False)
    kin.add_argument("--mesh", help="mesh preset name or mesh file")
    kin.add_argument("--tol-outer", dest="tol_outer", type=float)
    kin.add_argument("--max-outer", dest="max_outer", type=int)

    sub.add_parser("moments", parents=[common, vg], help="Gaussian moment oracles")
    sub.add_parser("linop-check", parents=[common, phys, vg], help="linearized operator diagnostics")
    s = sub.add_parser("multiplier-scan", parents=[common, phys], help="multiplier norm scan and slope fit")
    s.add_argument("--q", type=float)
    s.add_argument("--ell", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--box", type=float)
    s.add_argument("--refinements", type=int)
    s.add_argument("--c-list", dest="c_list")
    s = sub.add_parser("ns-solve", parents=[common, phys], help="exterior Navier-Stokes solve")
    s.add_argument("--box", type=float)
    s.add_argument("--modes", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s = sub.add_parser("boltzmann-solve", parents=[common, phys, vg, kin], help="positivity iteration")
    s.add_argument("--ledger", help="extra copy of the iteration ledger CSV")
    s = sub.add_parser("scaling-study", parents=[common, phys, vg, kin], help="norm components over eps and |c|")
    s.add_argument("--eps-list", dest="eps_list")
    s.add_argument("--c-list", dest="c_list")
    s = sub.add_parser("norms", parents=[common, phys, vg], help="composite norm and M(g, r) of a stored field")
    s.add_argument("--field", help="field directory written by boltzmann-solve")
    s.add_argument("--mesh", help="mesh preset name or mesh file")
    return p


def _overrides(args) -> dict:
    ov = {}
    for name, (sec, key) in FLAG_MAP.items():
        if getattr(args, name, None) is not None:
            ov[(sec, key)] = getattr(args, name)
    cmd = args.command
    if cmd == "multiplier-scan":
        for k in ("q", "ell", "sigma", "beta", "box", "refinements", "c_list"):
            if getattr(args, k) is not None:
                ov[("scan", k)] = getattr(args, k)
    if cmd == "ns-solve":
        for k in ("box", "modes", "tol", "max_iter"):
            if getattr(args, k) is not None:
                ov[("ns", k)] = getattr(args, k)
    if cmd == "scaling-study":
        for k in ("eps_list", "c_list"):
            if getattr(args, k) is not None:
                ov[("scaling", k)] = getattr(args, k)
    ov.update(_vgrid_overrides(getattr(args, "vgrid", None)))
    return ov


def run(cfg: RunConfig) -> int:
    """Validate, run into a staging directory, then move it to ``<output_dir>/<subcommand>``."""
    try:
        validate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    np.random.seed(cfg.getint("run", "seed"))
    try:
        import numba

        numba.set_num_threads(min(cfg.getint("run", "threads"), numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass
    final = os.path.join(cfg.output_dir, cfg.subcommand)
    try:
        os.makedirs(cfg.output_dir, exist_ok=True)
        stage = tempfile.mkdtemp(prefix=f".{cfg.subcommand}-", dir=cfg.output_dir)
    except OSError as exc:
        print(f"config error: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    status = EXIT_OK
    try:
        with open(os.path.join(stage, "config.ini"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(cfg.text())
        try:
            man, lines = COMMANDS[cfg.subcommand](cfg, stage)
        except NumericalFailure as exc:
            status = EXIT_NUMERICAL
            man, lines = {"failure": str(exc)}, [f"numerical failure: {exc}"]
            if os.path.isfile(os.path.join(stage, "manifest.json")):
                man.update(read_manifest(os.path.join(stage, "manifest.json")))
        man = {"subcommand": cfg.subcommand, "status": "ok" if status == EXIT_OK else "numerical_failure",
               "exit_code": status, "config": {s: dict(cfg.parser.items(s)) for s in cfg.parser.sections()}, **man}
        write_manifest(os.path.join(stage, "manifest.json"), man)
        with open(os.path.join(stage, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"kinhydro {cfg.subcommand}\n" + "\n".join(lines) + "\n")
    except ConfigError as exc:
        shutil.rmtree(stage, ignore_errors=True)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if os.path.isdir(final):
        shutil.rmtree(final)
    os.replace(stage, final)
    print("\n".join(lines))
    print(f"artifacts: {final}")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "boltzmann-solve":
        cfg.extras["ledger"] = args.ledger
    if args.command == "norms":
        cfg.extras["field"] = args.field
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
