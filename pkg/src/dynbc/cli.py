"""Batch runner: ``dynbc <subcommand> [--config PATH] [--out DIR] [--seed N] [--set KEY=VALUE ...]``.

Exit status is 0 on success, 1 on a precondition failure (bad config,
inadmissible data, unknown subcommand) and 2 on a numerical failure.
Every CSV carries a header row; floats are written with 17 significant
digits, and each subcommand draws from a single seeded generator, so a
given configuration reproduces byte-identical files.
"""

from __future__ import annotations

import argparse
import sys
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dynbc.carleman import build_eta0, build_weights, carleman_sweep, check_weight_properties, sample_field_trajectory, window_times
from dynbc.config import ConfigError, ExperimentConfig
from dynbc.errors import NumericalError, PreconditionError
from dynbc.forward import positivity_bound_report, solve_forward, trotter_solve, trotter_trajectory
from dynbc.grid import State
from dynbc.inverse_initial import (
    ground_mode,
    initial_stability_harness,
    l2_norms,
    logconvexity_check,
    split_UW,
)
from dynbc.inverse_potentials import (
    ForwardMap,
    InversionConfig,
    MisfitFunctional,
    TwinSetup,
    discrepancy_reconstruction,
    lipschitz_harness,
    reconstruct_potentials,
    relative_error,
    synthesize_observations,
)
from dynbc.io import write_csv
from dynbc.model import PotentialPair, apply_L, apply_L_gamma, assemble_generator
from dynbc.sampling import random_initial, random_potentials, random_smooth_field

EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 1, 2


@dataclass
class Outcome:
    """Files written and summary lines of one subcommand."""

    files: list[Path] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    failed: bool = False

    def csv(self, path: Path, header, rows) -> None:
        self.files.append(write_csv(path, header, rows))

    def say(self, line: str) -> None:
        self.lines.append(line)


def _summary_rows(d: dict) -> list[tuple[str, object]]:
    return [(k, v) for k, v in d.items()]


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_forward(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    grid = cfg.make_grid()
    coeffs = cfg.make_coefficients(grid)
    pq = cfg.make_potentials(grid)
    Y0 = cfg.make_initial(grid)
    window = cfg.make_window()
    gen = assemble_generator(grid, coeffs, pq)
    traj = solve_forward(gen, Y0, window, cfg.dt, scheme=cfg.solver.scheme)
    every = max(1, round(len(traj.times) / 32))
    keep = sorted(set(range(0, len(traj.times), every)) | {len(traj.times) - 1})

    def rows():
        for k in keep:
            t, u = traj.times[k], traj.values[k]
            for node in range(grid.n_bulk):
                yield (t, node, grid.x1[node], grid.x2[node], u[node])

    res.csv(out / "forward_trajectory.csv", ["t", "node", "x1", "x2", "y"], rows())
    rep = positivity_bound_report(traj, cfg.make_bounds())
    drift = float(np.max(np.abs(traj.values - traj.values[0])))
    summary = {
        "scheme": cfg.solver.scheme,
        "dt": cfg.dt,
        "n_steps": len(traj.times) - 1,
        "lower_min": rep.lower_min,
        "r": rep.r,
        "lower_ok": rep.lower_ok,
        "upper_ratio": rep.upper_ratio,
        "upper_ok": rep.upper_ok,
        "max_change_from_Y0": drift,
    }
    res.csv(out / "forward_positivity.csv", ["quantity", "value"], _summary_rows(summary))
    res.say(f"forward: {len(traj.times) - 1} steps, min y e^(Rt) = {rep.lower_min:.6g} (r = {rep.r:g}), "
            f"max|y| / (e^(RT) |Y0|_inf) = {rep.upper_ratio:.6g}")
    return res


def cmd_carleman(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    c = cfg.carleman
    grid = cfg.make_grid(c.n_r, c.n_phi)
    coeffs = cfg.make_coefficients(grid)
    window = cfg.make_window()
    dt = c.dt if c.dt > 0 else window.default_dt()
    times = window_times(window, dt)
    eta0, eta_rep = build_eta0(grid)
    prop_rows = []
    for s in c.s:
        rep = check_weight_properties(build_weights(grid, eta0, c.lambda_, s, window, times[1:-1]))
        prop_rows.append((s, c.lambda_, int(rep.ok), rep.xi_equality_gap, rep.dt_alpha_constant,
                          rep.log_inf_weight_theta, rep.log_sup_weight_xi3))
        if not rep.ok:
            res.failed = True
    res.csv(out / "carleman_weights.csv",
            ["s", "lambda", "ok", "xi_theta_gap", "dt_alpha_constant", "log_inf_weight_theta", "log_sup_weight_xi3"], prop_rows)
    fields = (sample_field_trajectory(grid, random_smooth_field(rng), times) for _ in range(c.n_fields))
    rows = carleman_sweep(grid, coeffs, window, dt, c.lambda_, c.s, fields)
    res.csv(out / "carleman_sweep.csv", ["s", "lambda", "field", "lhs", "rhs", "ratio"], rows)
    summary = []
    for s in c.s:
        ratios = np.array([r[5] for r in rows if r[0] == s])
        finite = np.isfinite(ratios)
        summary.append((s, c.lambda_, int(finite.sum()), len(ratios), float(np.max(ratios[finite])) if finite.any() else float("nan")))
        if not finite.all():
            res.failed = True
    res.csv(out / "carleman_summary.csv", ["s", "lambda", "n_finite", "n_fields", "max_ratio"], summary)
    for s, lam, nf, n, mx in summary:
        res.say(f"carleman: s = {s:g}, lambda = {lam:g}: {nf}/{n} finite, max lhs/rhs = {mx:.6g}")
    return res


def _inversion_config(cfg: ExperimentConfig) -> InversionConfig:
    inv = cfg.inversion
    return InversionConfig(inv.reg_beta, inv.max_iter, inv.grad_tol, cfg.bounds.R, reg_kind=inv.reg_kind)


def cmd_invert(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    grid = cfg.make_grid()
    coeffs = cfg.make_coefficients(grid)
    truth = cfg.make_potentials(grid)
    Y0 = cfg.make_initial(grid)
    window = cfg.make_window()
    setup = TwinSetup(grid, coeffs, window, cfg.dt, Y0)
    inv = cfg.inversion
    obs = synthesize_observations(setup, truth, inv.noise, rng, cfg.make_bounds())
    icfg = _inversion_config(cfg)
    beta = inv.reg_beta
    trail: list[tuple[float, float]] = []
    if inv.noise > 0 and inv.reg_beta == 0:
        result, beta, trail = discrepancy_reconstruction(obs, inv.betas, icfg, inv.tau)
    else:
        result = reconstruct_potentials(obs, icfg)
    err = relative_error(grid, result.pq, truth)
    res.csv(out / "invert_history.csv", ["iter", "misfit", "gnorm"], result.history)
    if trail:
        res.csv(out / "invert_discrepancy.csv", ["beta", "residual"], trail)
    pot_rows = [("p", k, grid.x1[k], grid.x2[k], result.pq.p[k], truth.p[k]) for k in range(grid.n_bulk)]
    tm = grid.trace_map
    pot_rows += [("q", k, grid.x1[tm[k]], grid.x2[tm[k]], result.pq.q[k], truth.q[k]) for k in range(grid.n_surf)]
    res.csv(out / "invert_potentials.csv", ["field", "node", "x1", "x2", "estimate", "truth"], pot_rows)
    summary = {
        "relative_error": err,
        "noise": inv.noise,
        "noise_norm": obs.noise_norm,
        "reg_kind": inv.reg_kind,
        "reg_beta": beta,
        "data_misfit": result.data_misfit,
        "iterations": len(result.history) - 1,
        "converged": result.converged,
        "stalled": result.stalled,
    }
    res.csv(out / "invert_summary.csv", ["quantity", "value"], _summary_rows(summary))
    res.say(f"invert: relative L2 error {err:.6g} after {len(result.history) - 1} iterations (beta = {beta:g})")
    if result.stalled and not result.converged:
        res.say("invert: line search stalled; best iterate reported")
    return res


def cmd_stability_potentials(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    h = cfg.harness
    grid = cfg.make_grid(h.n_r, h.n_phi)
    coeffs = cfg.make_coefficients(grid)
    window = cfg.make_window()
    bounds = cfg.make_bounds()
    setup = TwinSetup(grid, coeffs, window, window.default_dt(), random_initial(grid, rng, bounds))
    bases = [random_potentials(grid, rng, bounds.R, fill=0.5) for _ in range(h.n_samples)]
    dirs = [random_potentials(grid, rng, bounds.R) for _ in range(h.n_samples)]
    samples = lipschitz_harness(setup, bases, dirs, h.scales)
    skipped = h.n_samples * len(h.scales) - len(samples)
    if skipped > h.n_samples * len(h.scales) // 2:
        raise NumericalError(f"{skipped} degenerate samples exceed the skip quota")
    res.csv(out / "stability_potentials.csv", ["sample", "scale", "lhs", "rhs", "ratio"],
            [(s.sample_id, s.scale, s.lhs, s.rhs, s.ratio) for s in samples])
    summary = []
    for eps in h.scales:
        r = np.array([s.ratio for s in samples if s.scale == eps])
        summary.append((eps, len(r), float(np.max(r)), float(np.median(r))))
        res.say(f"stability-potentials: scale {eps:g}: max ratio {np.max(r):.6g}, median {np.median(r):.6g}")
    res.csv(out / "stability_potentials_summary.csv", ["scale", "n", "max_ratio", "median_ratio"], summary)
    return res


def cmd_logconvexity(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    h = cfg.harness
    grid = cfg.make_grid(h.n_r, h.n_phi)
    coeffs = cfg.make_coefficients(grid)
    window = cfg.make_window()
    dt = window.default_dt()
    pq = cfg.make_potentials(grid)
    n = min(h.n_samples, 20)
    trace_rows, summary = [], []
    cases = [("self_adjoint", coeffs.without_drift()), ("drift", coeffs)]
    for case, cf in cases:
        gen = assemble_generator(grid, cf, pq)
        starts = [random_smooth_field(rng, wmax=0.0).on_grid(grid) for _ in range(n)]
        if case == "self_adjoint":
            starts.append(ground_mode(gen).bulk)
        for k, u0 in enumerate(starts):
            ks = []
            for step in (dt, dt / 2):
                U = solve_forward(gen, State.from_bulk(grid, u0), window, step, t_end=window.theta)
                rep = logconvexity_check(grid, U.times, U.values, window.theta)
                ks.append(rep)
            rep, fine = ks
            label = "ground_mode" if (case == "self_adjoint" and k == n) else "random"
            summary.append((case, k, label, rep.K_hat, fine.K_hat, abs(fine.K_hat - rep.K_hat) / rep.K_hat, rep.min_second_difference))
            trace_rows += [(case, k, t, u, b) for t, u, b in zip(rep.times, rep.norms, rep.bound)]
    res.csv(out / "logconvexity.csv", ["case", "sample", "t", "norm", "bound"], trace_rows)
    res.csv(out / "logconvexity_summary.csv",
            ["case", "sample", "start", "K_hat", "K_hat_half_dt", "dt_change", "min_second_difference"], summary)
    for case, _ in cases:
        rows = [r for r in summary if r[0] == case]
        res.say(f"logconvexity: {case}: max K_hat {max(r[3] for r in rows):.6g}, "
                f"max dt-halving change {max(r[5] for r in rows):.3g}, "
                f"min second difference {min(r[6] for r in rows):.3g}")
    return res


def cmd_stability_initial(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    h = cfg.harness
    grid = cfg.make_grid(h.n_r, h.n_phi)
    window = cfg.make_window()
    gen0 = assemble_generator(grid, cfg.make_coefficients(grid))
    run = initial_stability_harness(gen0, window, window.default_dt(), rng, cfg.make_bounds(), h.n_samples, h.max_mode)
    fit = run.fit
    rows = []
    for s in run.samples:
        retained = s in fit.retained
        bound = fit.bound(s.E) if retained else float("nan")
        rows.append((s.sample_id, s.label, s.E, s.gap, bound, bound - s.gap, int(retained)))
    res.csv(out / "stability_initial.csv", ["sample", "kind", "E", "initial_gap", "bound", "margin", "retained"], rows)
    exps = run.exponents
    res.csv(out / "stability_initial_fit.csv", ["quantity", "value"],
            [("C", fit.C), ("C1", fit.C1), ("n_retained", len(fit.retained)), ("min_margin", float(np.min(fit.margins())))]
            + [(f"sweep_exponent_{k + 1}", e) for k, e in enumerate(exps)])
    res.say(f"stability-initial: C = {fit.C:.6g}, C1 = {fit.C1:.6g}, {len(fit.retained)} retained, "
            f"min margin {np.min(fit.margins()):.3g}; sweep exponents {exps[0]:.3g} -> {exps[-1]:.3g}")
    return res


# ----------------------------------------------------------------------
# selftest
# ----------------------------------------------------------------------
def _selftest_checks(cfg: ExperimentConfig, rng: np.random.Generator) -> list[tuple[str, float, float, bool]]:
    """Invariant suite on a coarse grid; rows ``(check, value, tolerance, passed)``."""
    grid = cfg.make_grid(12, 24)
    coeffs = cfg.make_coefficients(grid)
    window = cfg.make_window()
    dt = window.default_dt()
    bounds = cfg.make_bounds()
    out = []

    def check(name, value, tol, ok=None):
        value = float(value)
        out.append((name, value, tol, bool(value <= tol) if ok is None else bool(ok)))

    gen0 = assemble_generator(grid, coeffs)
    ones = np.ones(grid.n_bulk)
    check("constant_in_kernel", np.max(np.abs(gen0.gen0 @ ones)), 1e-12)
    markov = solve_forward(gen0, State.constant(grid, 1.0), window, dt)
    check("markov_preservation", np.max(np.abs(markov.values - 1.0)), 1e-10)

    pq = random_potentials(grid, rng, bounds.R)
    gen = assemble_generator(grid, coeffs, pq)
    y = random_smooth_field(rng, wmax=0.0).on_grid(grid)
    rows_b = apply_L(grid, coeffs, pq.p, y)
    rows_s = apply_L_gamma(grid, coeffs, pq.q, State.from_bulk(grid, y))
    ref_b, ref_s = gen.bulk_rows @ y, gen.surf_rows @ y
    scale = max(np.max(np.abs(ref_b)), np.max(np.abs(ref_s)), 1.0)
    check("operator_paths_agree", max(np.max(np.abs(rows_b - ref_b)), np.max(np.abs(rows_s - ref_s))) / scale, 1e-12)

    Y0 = random_initial(grid, rng, bounds)
    traj = trotter_trajectory(gen, Y0, window, dt)
    rep = positivity_bound_report(traj, bounds)
    check("positivity_lower", bounds.r - rep.lower_min, 1e-6)
    check("boundedness_upper", rep.upper_ratio - 1.0, 1e-6)
    ref = solve_forward(gen0, Y0, window, dt / 4, t_end=dt)
    split = trotter_solve(gen0.with_potentials(PotentialPair.zeros(grid)), Y0, dt, 4)
    check("trotter_no_potential", np.max(np.abs(split.bulk - ref.values[-1])), 1e-12)

    eta0, eta_rep = build_eta0(grid)
    w = build_weights(grid, eta0, 2.0, 16.0, window, window_times(window, dt)[1:-1])
    wrep = check_weight_properties(w)
    check("weight_properties", 0.0 if wrep.ok else 1.0, 0.0)
    check("xi_theta_equality", wrep.xi_equality_gap / (4 / window.length**2), 1e-12)

    setup = TwinSetup(grid, coeffs, window, dt, Y0)
    obs = synthesize_observations(setup, pq)
    fm = ForwardMap(setup)
    r = fm.reaction(pq)
    du = rng.normal(size=grid.n_bulk)
    g_th, g_d = rng.normal(size=grid.n_bulk), rng.normal(size=obs.dtY_on_omega.shape)
    t_th, t_d = fm.tangent(r, du)
    lhs = float(t_th @ g_th + np.sum(t_d * g_d))
    rhs = float(du @ fm.adjoint(r, g_th, g_d))
    check("adjoint_exactness", abs(lhs - rhs) / max(abs(lhs), abs(rhs)), 1e-10)

    J = MisfitFunctional(obs, InversionConfig())
    cand = pq * 0.8
    _, grad = J(cand)
    errs = []
    for k in rng.choice(grid.n_bulk, size=5, replace=False):
        e = np.zeros(grid.n_bulk)
        e[k] = 1.0
        step = 1e-4
        dp = PotentialPair(e * step, np.zeros(grid.n_surf))
        fd = (J(cand + dp)[0] - J(cand - dp)[0]) / (2 * step)
        errs.append(abs(fd - grad.p[k]) / max(abs(fd), abs(grad.p[k]), 1e-300))
    check("gradient_vs_fd", max(errs), 1e-5)

    pqt = random_potentials(grid, rng, bounds.R)
    sp_ = split_UW(grid, coeffs, window, dt, pq, pqt, Y0, random_initial(grid, rng, bounds), gen0)
    check("superposition_V_U_W", sp_.superposition_defect(grid), 1e-6)

    sym = assemble_generator(grid, coeffs.without_drift(), pq)
    U = solve_forward(sym, State.from_bulk(grid, y), window, dt, t_end=window.theta)
    lrep = logconvexity_check(grid, U.times, U.values, window.theta)
    check("selfadjoint_K_hat", lrep.K_hat - 1.0, 1e-3)
    check("log_convexity", -lrep.min_second_difference, 1e-8)
    # without reaction the self-adjoint flow is a contraction
    heat = solve_forward(assemble_generator(grid, coeffs.without_drift()), State.from_bulk(grid, y), window, dt, t_end=window.theta)
    check("heat_decay", np.max(np.diff(l2_norms(grid, heat.values))), 0.0)
    return out


def cmd_selftest(cfg: ExperimentConfig, out: Path, rng: np.random.Generator) -> Outcome:
    res = Outcome()
    rows = _selftest_checks(cfg, rng)
    res.csv(out / "selftest.csv", ["check", "value", "tolerance", "passed"], rows)
    for name, value, tol, ok in rows:
        res.say(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tolerance {tol:g})")
    res.failed = not all(r[3] for r in rows)
    return res


COMMANDS: dict[str, Callable[[ExperimentConfig, Path, np.random.Generator], Outcome]] = {
    "forward": cmd_forward,
    "carleman-check": cmd_carleman,
    "invert": cmd_invert,
    "stability-potentials": cmd_stability_potentials,
    "logconvexity": cmd_logconvexity,
    "stability-initial": cmd_stability_initial,
    "selftest": cmd_selftest,
}

_SEED_OF = {
    "carleman-check": lambda c: c.carleman.seed,
    "invert": lambda c: c.inversion.seed,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynbc", description="Forward, Carleman and inverse-problem experiments for bulk-surface parabolic systems.")
    p.add_argument("subcommand", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="configuration file (INI sections, dotted key paths)")
    p.add_argument("--out", help="output directory (default: $DYNBC_OUT, then output.dir)")
    p.add_argument("--seed", type=int, help="seed for every random generator")
    p.add_argument("--preset", help="named preset applied before the file (default, markov, quick)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key, e.g. geometry.n_r=16")
    return p


def _overrides(items: list[str]) -> dict[str, str]:
    pairs = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = val
    return pairs


def run(argv: list[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if args.subcommand not in COMMANDS:
            raise _UsageError(f"unknown subcommand {args.subcommand!r}; expected one of {', '.join(COMMANDS)}")
        overrides = _overrides(args.set)
        if args.preset:
            overrides = {"experiment.preset": args.preset, **overrides}
        cfg = ExperimentConfig.load(args.config, overrides)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        seed = _SEED_OF.get(args.subcommand, lambda c: c.harness.seed)(cfg)
        out = cfg.output_dir(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PreconditionError(f"cannot create output directory {out}: {exc.strerror}") from None
        outcome = COMMANDS[args.subcommand](cfg, out, np.random.default_rng(seed))
    except _UsageError as exc:
        print(f"dynbc: error: {exc}", file=stderr)
        return EXIT_PRECONDITION
    except PreconditionError as exc:
        print(f"dynbc: precondition failed: {exc}", file=stderr)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        print(f"dynbc: numerical failure: {exc}", file=stderr)
        return EXIT_NUMERICAL
    for line in outcome.lines:
        print(line, file=stdout)
    for f in outcome.files:
        print(f"wrote {f}", file=stdout)
    return EXIT_NUMERICAL if outcome.failed else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
