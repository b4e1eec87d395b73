"""Experiment orchestration CLI.

Subcommands::

    quench-ldp validate --config FILE
    quench-ldp run --config FILE [--experiment KIND] [overrides...]
    quench-ldp estimate|homogenize|rate|ergodic|occupation --config FILE [...]

Every run writes a manifest (config hash, seed, versions, resolved config)
before any experiment output, and all artifacts are deterministic
functions of (config, seed): rerunning a manifest reproduces outputs
byte-exactly.  Exit codes: 0 success, 2 config/schema problem, 3 numerical
failure (partial artifacts retained next to a failure marker).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .action import HalfSpaceEvent, minimize_action
from .config import RunSetup, SchemaError, build_setup, load_config, validate_config
from .corrector import solve_cell_problem_mc, solve_corrector
from .diagnostics import (
    build_occupation,
    pi_histogram,
    quenched_ergodic_report,
    total_variation,
    viability_drift_check,
)
from .dynamics import ControlPolicy, IntegrationError, ScaleParams, integrate_controlled
from .effective import homogenize
from .io import config_hash, write_csv, write_json
from .medium import FieldTerm
from .rareevent import estimate_probability, scaling_report


def _write_manifest(setup: RunSetup, out: Path) -> None:
    write_json(out / "manifest.json", {
        "config_sha256": config_hash(setup.config),
        "seed": setup.seed,
        "versions": {
            "quench_ldp": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        "config": setup.config,
    })


def _corrector_options(setup: RunSetup) -> dict:
    opts = setup.extras.get("corrector", {})
    return {
        "n_grid": opts.get("n_grid"),
        "rho_schedule": opts.get(
            "rho_schedule", (1e-2, 3.16e-3, 1e-3, 3.16e-4, 1e-4)
        ),
        "tol": opts.get("solver_tol", 1e-8),
    }


def _build_effective(setup: RunSetup):
    copts = _corrector_options(setup)
    corr = solve_corrector(setup.sample, setup.coeffs, **copts)
    eff_opts = setup.extras.get("effective", {})
    x_axes = None
    if setup.coeffs.x_dependent:
        lo = eff_opts.get("x_min", [-3.0] * setup.coeffs.slow_dim)
        hi = eff_opts.get("x_max", [3.0] * setup.coeffs.slow_dim)
        n = int(eff_opts.get("x_nodes", 81))
        x_axes = [np.linspace(l, h, n) for l, h in zip(lo, hi)]
    use_ext = setup.extras["corrector"].get("use_extrapolated", True)
    rho = setup.extras["corrector"].get("rho")
    eff = homogenize(
        setup.sample, setup.coeffs, corr,
        x_axes=x_axes, use_extrapolated=use_ext, rho=rho,
    )
    return corr, eff


def _experiment_homogenize(setup: RunSetup, out: Path) -> dict:
    corr, eff = _build_effective(setup)
    method = setup.extras["corrector"].get("method", "grid")
    corr.save(out / "corrector")
    if eff.is_constant:
        xs = [np.zeros(setup.coeffs.slow_dim)]
    else:
        mesh = np.meshgrid(*eff.x_axes, indexing="ij")
        xs = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    m = setup.coeffs.slow_dim
    header = (
        [f"x{i}" for i in range(m)]
        + [f"r{i}" for i in range(m)]
        + [f"q{i}{j}" for i in range(m) for j in range(m)]
    )
    rows = []
    for x in xs:
        r = eff.r(np.asarray(x))
        q = eff.q(np.asarray(x))
        rows.append(list(np.atleast_1d(x)) + list(r) + list(q.reshape(-1)))
    write_csv(out / "effective.csv", header, rows)
    report = {
        "r_at_x0": eff.r(setup.x0).tolist(),
        "q_at_x0": eff.q(setup.x0).tolist(),
        "corrector": {
            "n_grid": corr.n_grid,
            "rho_schedule": list(corr.rho_schedule),
            "residual_norms": {f"{r:.6g}": v for r, v in corr.residual_norms.items()},
            "extrapolation_residual": corr.extrapolation_residual,
            "mass_decay": {f"{r:.6g}": v for r, v in corr.mass_decay.items()},
            "b_offset": corr.b_offset.tolist(),
            "converged": corr.converged,
        },
    }
    if method == "mc":
        # Monte Carlo cross-check of the grid solver at probe points.  A
        # probe regularization of order one keeps the resolvent horizon
        # short; the grid equation is re-solved there for the comparison.
        rho0 = float(setup.extras["corrector"].get("rho") or 1.0)
        n_paths = int(setup.extras["corrector"].get("mc_paths", 2000))
        t_trunc = float(setup.extras["corrector"].get("mc_t_trunc", 10.0 / rho0))
        probes = np.linspace(0.0, 1.0, 9)[:-1, None]
        if setup.coeffs.fast_dim == 2:
            probes = np.concatenate([probes, probes[::-1]], axis=1)
        est, se, trunc = solve_cell_problem_mc(
            setup.sample, setup.coeffs, rho0, probes, n_paths, t_trunc,
            seed=setup.seed + 1,
        )
        from .corrector import solve_cell_problem_grid
        from .grids import PeriodicInterpolator

        chi_probe, _, _ = solve_cell_problem_grid(
            setup.sample, setup.coeffs, rho0, corr.n_grid
        )
        grid_chi = PeriodicInterpolator(chi_probe, corr.fast_dim)(probes)
        zscores = (est - grid_chi) / np.where(se > 0, se, 1.0)
        report["corrector"]["mc_crosscheck"] = {
            "rho": rho0,
            "probes": probes.tolist(),
            "mc": est.tolist(),
            "grid": grid_chi.tolist(),
            "std_err": se.tolist(),
            "max_abs_z": float(np.abs(zscores).max()),
            "truncation_bound": trunc,
        }
    write_json(out / "homogenize.json", report)
    return {"corr": corr, "eff": eff, "report": report}


def _experiment_rate(setup: RunSetup, out: Path, *, eff=None, corr=None) -> dict:
    if eff is None:
        corr, eff = _build_effective(setup)
    if setup.event is None:
        raise SchemaError("event: required for the rate experiment")
    res = minimize_action(
        setup.x0, setup.event, setup.T, eff, setup.extras["n_seg"]
    )
    psi = res.path
    vel = psi.velocities
    rows = [
        list(psi.times[i:i + 1]) + list(psi.knots[i])
        + list(vel[min(i, len(vel) - 1)])
        for i in range(len(psi.times))
    ]
    m = setup.coeffs.slow_dim
    write_csv(
        out / "psi_star.csv",
        ["t"] + [f"psi{i}" for i in range(m)] + [f"dpsi{i}" for i in range(m)],
        rows,
    )
    write_json(out / "rate.json", {
        "s_star": res.value,
        "stationarity": res.stationarity,
        "iterations": res.iterations,
        "converged": res.converged,
    })
    return {"corr": corr, "eff": eff, "minimize": res}


def _experiment_estimate(setup: RunSetup, out: Path, *, eff=None, corr=None,
                         psi=None, s_star=None) -> dict:
    mode = setup.extras["mode"]
    if eff is None and mode == "is":
        corr, eff = _build_effective(setup)
    if not isinstance(setup.event, HalfSpaceEvent):
        raise SchemaError("event: estimate needs a half_space event")
    if s_star is None:
        if eff is None:
            corr, eff = _build_effective(setup)
        res = minimize_action(setup.x0, setup.event, setup.T, eff, setup.extras["n_seg"])
        psi, s_star = res.path, res.value
    ests = estimate_probability(
        setup.sample, setup.coeffs, setup.event,
        eps_list=setup.eps_list, T=setup.T, x0=setup.x0, y0=setup.y0,
        n_replicas=setup.replicas, mode=mode,
        delta_exponent=setup.delta_exponent, c_step=setup.c_step,
        seed=setup.seed, eff=eff, corrector=corr, psi=psi,
        n_seg=setup.extras["n_seg"],
        use_extrapolated=setup.extras["corrector"].get("use_extrapolated", True),
        rho=setup.extras["corrector"].get("rho"),
        threads=setup.extras.get("threads"),
        keep_replicas=True,
    )
    report = {
        "mode": mode,
        "s_star": s_star,
        "estimates": [e.to_dict() for e in ests],
    }
    if len(ests) >= 3:
        report["scaling"] = scaling_report(ests, s_star).to_dict()
    write_json(out / "report.json", report)
    for est in ests:
        write_csv(
            out / f"weights_eps{est.eps:g}.csv",
            ["replica", "log_weight", "event_hit"],
            [
                [i, est.log_weights[i], int(est.indicators[i])]
                for i in range(est.n_replicas)
            ],
        )
    return {"estimates": ests, "report": report}


def _ergodic_observable(setup: RunSetup):
    terms = setup.extras["ergodic"].get("observable")
    if not terms:
        wv = (1,) * setup.coeffs.fast_dim
        return [FieldTerm(1.0, wv, "cos")], "cos(2*pi*k.y)"
    parsed = [
        FieldTerm(
            amplitude=float(t["amplitude"]),
            wavevector=tuple(t["wavevector"]) if "wavevector" in t else None,
            kind=t.get("kind", "cos"),
            phase=float(t.get("phase", 0.0)),
        )
        for t in terms
    ]
    return parsed, "configured"


def _experiment_ergodic(setup: RunSetup, out: Path) -> dict:
    opts = setup.extras["ergodic"]
    psi_terms, name = _ergodic_observable(setup)
    n_media = int(opts.get("media", 5))
    media = [setup.medium_for_seed(setup.seed + 1000 + i) for i in range(n_media)]
    shifts = opts.get("shifts")
    reports = {}
    for eps in setup.eps_list:
        scale = ScaleParams(eps, setup.delta_exponent, setup.c_step)
        sh = shifts if shifts else np.linspace(
            0.0, max(setup.T - scale.window(), 0.0), 8
        ).tolist()
        rep = quenched_ergodic_report(
            media, scale, psi_terms, sh,
            mode=opts.get("mode", "uncontrolled"),
            observable_name=name,
            seed=setup.seed,
            n_replicas=int(opts.get("replicas", 16)),
            beta=float(opts.get("beta", 0.5)),
        )
        reports[f"{eps:.6g}"] = rep.to_dict()
    write_json(out / "ergodic.json", reports)
    return {"reports": reports}


def _experiment_occupation(setup: RunSetup, out: Path) -> dict:
    opts = setup.extras["occupation"]
    eps = min(setup.eps_list)
    scale = ScaleParams(eps, setup.delta_exponent, setup.c_step)
    delta = float(opts.get("delta", 0.0))
    if delta <= 0.0:
        delta = 10.0 * scale.rho * scale.eps_over_delta**0.25
    n_rep = int(opts.get("replicas", 4))
    run = integrate_controlled(
        setup.sample, setup.coeffs, scale, setup.x0, setup.y0,
        setup.T + delta, ControlPolicy(setup.coeffs.k1, setup.coeffs.k2),
        setup.seed, n_replicas=n_rep, n_store=None, store_fast=True,
        store_controls=True, control_until=setup.T,
    )
    n_y = int(opts.get("n_y", 16))
    hist = build_occupation(
        run.path, delta, T=setup.T,
        n_t=int(opts.get("n_t", 10)), n_u=int(opts.get("n_u", 9)), n_y=n_y,
    )
    target = pi_histogram(setup.sample, setup.coeffs, n_y)
    tv = total_variation(hist.y_marginal(), target)
    tmarg = hist.time_marginal()
    report = {
        "eps": eps,
        "delta_window": delta,
        "time_marginal_max_error": float(
            np.abs(tmarg - np.diff(hist.t_edges)).max()
        ),
        "y_marginal_tv_to_pi": tv,
        "zero_control_mass": hist.zero_control_mass_fraction(),
    }
    write_json(out / "occupation.json", report)
    write_csv(
        out / "occupation_y_marginal.csv",
        ["bin_left", "bin_right", "mass", "pi_mass"],
        [
            [hist.y_edges[i], hist.y_edges[i + 1],
             hist.y_marginal().reshape(-1)[i] / setup.T, target.reshape(-1)[i]]
            for i in range(n_y)
        ],
    )
    flat = hist.mass.reshape(hist.mass.shape[0], hist.mass.shape[1],
                             hist.mass.shape[2], -1)
    rows = []
    for it, iu1, iu2, iy in np.argwhere(flat > 0):
        rows.append([
            hist.t_edges[it], hist.t_edges[it + 1],
            hist.u1_edges[iu1], hist.u1_edges[iu1 + 1],
            hist.u2_edges[iu2], hist.u2_edges[iu2 + 1],
            iy, flat[it, iu1, iu2, iy],
        ])
    write_csv(
        out / "occupation_histogram.csv",
        ["t_left", "t_right", "u1_left", "u1_right", "u2_left", "u2_right",
         "y_bin", "mass"],
        rows,
    )
    return {"report": report, "hist": hist}


def run_experiment(cfg: dict, out_dir, experiment: str | None = None) -> dict:
    """Run one experiment described by a validated config dict."""
    setup = build_setup(cfg)
    if experiment is not None:
        setup.config.setdefault("experiment", {})["kind"] = experiment
    kind = setup.config["experiment"]["kind"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(setup, out)
    if kind == "homogenize":
        return _experiment_homogenize(setup, out)
    if kind == "rate":
        return _experiment_rate(setup, out)
    if kind == "estimate":
        return _experiment_estimate(setup, out)
    if kind == "ergodic":
        return _experiment_ergodic(setup, out)
    if kind == "occupation":
        return _experiment_occupation(setup, out)
    if kind == "full-pipeline":
        hom = _experiment_homogenize(setup, out)
        rate = _experiment_rate(setup, out, eff=hom["eff"], corr=hom["corr"])
        return _experiment_estimate(
            setup, out, eff=hom["eff"], corr=hom["corr"],
            psi=rate["minimize"].path, s_star=rate["minimize"].value,
        )
    raise SchemaError(f"experiment.kind: unknown experiment {kind!r}")


def _apply_overrides(cfg: dict, args) -> dict:
    if args.eps:
        cfg.setdefault("scales", {})["eps"] = [float(e) for e in args.eps.split(",")]
    if args.seed is not None:
        cfg.setdefault("experiment", {})["seed"] = args.seed
    if args.replicas is not None:
        cfg.setdefault("experiment", {})["replicas"] = args.replicas
    if args.mode is not None:
        cfg.setdefault("experiment", {})["mode"] = args.mode
    if args.threads is not None:
        cfg.setdefault("experiment", {})["threads"] = args.threads
    if args.corrector_method is not None:
        cfg.setdefault("corrector", {})["method"] = args.corrector_method
    if args.rho is not None:
        cfg.setdefault("corrector", {})["rho"] = args.rho
        cfg["corrector"]["use_extrapolated"] = False
    return cfg


def _add_common(sub):
    sub.add_argument("--config", required=True, help="TOML experiment config")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--eps", default=None, help="comma-separated epsilon list")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--replicas", type=int, default=None)
    sub.add_argument("--mode", choices=("plain", "is"), default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--corrector-method", choices=("grid", "mc"), default=None)
    sub.add_argument("--rho", type=float, default=None,
                     help="track with the corrector gradient at this rho "
                          "instead of the extrapolated limit")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="quench-ldp",
        description="Multiscale small-noise diffusions in random environments",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    v = subs.add_parser("validate", help="schema and physics checks only")
    v.add_argument("--config", required=True)
    runp = subs.add_parser("run", help="run the experiment named in the config")
    _add_common(runp)
    runp.add_argument("--experiment", choices=(
        "homogenize", "rate", "estimate", "ergodic", "occupation", "full-pipeline"
    ), default=None)
    for kind in ("estimate", "homogenize", "rate", "ergodic", "occupation"):
        sub = subs.add_parser(kind, help=f"run the {kind} experiment")
        _add_common(sub)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        errors, warnings = validate_config(cfg)
        for e in errors:
            print(f"error: {e}")
        for w in warnings:
            print(f"warning: {w}")
        if not errors and not warnings:
            print("ok")
        return 2 if errors else 0

    experiment = getattr(args, "experiment", None) or (
        args.command if args.command != "run" else None
    )
    cfg = _apply_overrides(cfg, args)
    errors, warnings = validate_config(cfg)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 2

    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    try:
        run_experiment(cfg, out, experiment)
    except (SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IntegrationError, FloatingPointError, np.linalg.LinAlgError,
            RuntimeError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "failure.json", {"error": str(exc)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    print(f"artifacts written to {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
