"""Command-line front end: ``polaronlab <subcommand> ... --out table.csv``.

Every CSV is written together with ``<table>.csv.manifest.json``; the
``rerun`` subcommand regenerates the CSV from that manifest alone.
Exit codes: 0 success, 1 invalid input, 2 numerical convergence failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConvergenceError, ValidationError
from .io import RunManifest, build_manifest, emit_csv, parse_config_text
from .manybody import (
    LatticeConfig,
    band_approximation,
    build_basis,
    build_hamiltonian,
    boltzmann_weights,
    cluster_probabilities,
    density_density_correlation,
    diagonalize,
    ground_energy,
    k_order,
    momentum_distribution,
    participation_ratio,
)
from .params import FIG4_KAPPAS, K_B, check_validity, derive_scales, recoil_energy, with_kappa
from .phonons import bec_deformation_profile, build_coupling_table, dressed_hopping, interaction_potential
from .transport import (
    crossover_temperature,
    hopping_time_unit,
    msd_coefficients,
    msd_decompose,
    transport_run,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _range(text):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH, got {text!r}") from None
    if not hi > lo:
        raise argparse.ArgumentTypeError("range must have HIGH > LOW")
    return lo, hi


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _temperature(params, value, unit):
    """Kelvin from a value in nK or in E_p/k_B."""
    if unit == "Ep":
        return value * derive_scales(params).E_p / K_B
    return value * 1e-9


# -- subcommand bodies: (args, params) -> (columns, rows, units, meta) --------------------


def _couplings(args, params):
    table = build_coupling_table(params, d_max=args.dmax)
    rows = []
    for d in range(args.dmax + 1):
        closed = interaction_potential(d, params)
        quad = table.V[d]
        rows.append((d, closed, quad, quad / closed))
    meta = {"E_p_closed_J": "%.17g" % derive_scales(params).E_p, "E_p_numeric_J": "%.17g" % table.E_p_numeric}
    units = {"d": "sites", "V_closed_J": "J", "V_quad_J": "J", "ratio": "1"}
    return ["d", "V_closed_J", "V_quad_J", "ratio"], rows, units, meta


def _dressed_hopping(args, params):
    E_p = derive_scales(params).E_p
    rows = []
    for x in np.linspace(args.tmin, args.tmax, args.tsteps):
        T = _temperature(params, x, args.t_units)
        Jt = dressed_hopping(params, T)
        rows.append((T * 1e9, Jt / params.J, K_B * T / E_p, Jt))
    units = {"T_nK": "nK", "Jt_over_J": "1", "kT_over_Ep": "1", "Jt_J": "J"}
    return ["T_nK", "Jt_over_J", "kT_over_Ep", "Jt_J"], rows, units, {}


def _deformation(args, params):
    x_a = np.linspace(args.xmin, args.xmax, args.npts)
    n = bec_deformation_profile(args.impurities, x_a * params.a, params)
    rows = [(xa, nn / params.n0, xa * params.a, nn) for xa, nn in zip(x_a, n)]
    units = {"x_over_a": "a", "n_over_n0": "1", "x_m": "m", "n_per_m": "1/m"}
    return ["x_over_a", "n_over_n0", "x_m", "n_per_m"], rows, units, {}


def _transport_temperature(args, params):
    if args.T_nK is not None:
        return args.T_nK * 1e-9
    if args.T_Ep is not None:
        return _temperature(params, args.T_Ep, "Ep")
    return params.T


def _transport(args, params):
    T = _transport_temperature(args, params)
    u = hopping_time_unit(params)
    state, _ = transport_run(params, T, args.tau_hbar_over_J * u, n_samples=args.samples, M=args.sites)
    fit = msd_decompose(state)
    A, sB = fit.scaled(u)
    rows = [(t / u, m, t) for t, m in zip(state.t_grid, state.msd)]
    meta = {"T_K": "%.17g" % T, "A_hbar_over_J": "%.17g" % A, "sqrtB_hbar_over_J": "%.17g" % sB,
            "fit_residual": "%.3g" % fit.residual, "min_P": "%.3g" % state.diagnostics["min_P"]}
    units = {"t_hbarJ": "hbar/J", "msd_a2": "a^2", "t_s": "s"}
    return ["t_hbarJ", "msd_a2", "t_s"], rows, units, meta


def _crossover(args, params):
    E_p = derive_scales(params).E_p
    tau = args.tau_hbar_over_J * hopping_time_unit(params)
    lo, hi = args.trange
    rows = []
    for r in np.linspace(lo, hi, args.npts):
        T = r * E_p / K_B
        A, sB = msd_coefficients(params, T, tau, n_samples=args.samples, M=args.sites)
        rows.append((r, A, sB, T * 1e9))
    diff = np.array([A - sB for _, A, sB, _ in rows])
    meta = {"tau_hbar_over_J": "%.17g" % args.tau_hbar_over_J}
    flips = np.nonzero(np.sign(diff[:-1]) != np.sign(diff[1:]))[0]
    if len(flips):
        i = flips[0]
        r0, r1 = rows[i][0], rows[i + 1][0]
        r_star = r0 + (r1 - r0) * diff[i] / (diff[i] - diff[i + 1])
        if args.refine:
            T_star = crossover_temperature(params, tau, (r0 * E_p / K_B, r1 * E_p / K_B), args.tol * E_p / K_B,
                                           n_samples=args.samples, M=args.sites)
            r_star = K_B * T_star / E_p
        meta["crossover_kT_over_Ep"] = "%.17g" % r_star
    else:
        meta["crossover_kT_over_Ep"] = "none"
    units = {"kT_over_Ep": "1", "A_hbar_over_J": "1", "sqrtB_hbar_over_J": "1", "T_nK": "nK"}
    return ["kT_over_Ep", "A_hbar_over_J", "sqrtB_hbar_over_J", "T_nK"], rows, units, meta


def _config(args, params, N=None):
    N = args.N if N is None else N
    return LatticeConfig(M=params.M, N=N, n_max=min(args.nmax, N) if args.nmax else None)


def _spectrum(args, params):
    cfg = _config(args, params)
    H = build_hamiltonian(build_basis(cfg), params)
    n = "full" if args.neigs <= 0 else min(args.neigs, H.dimension)
    spec = diagonalize(H, n_eigs=n, blocked=True)
    terms = H.terms
    M = cfg.M
    ks = k_order(M)
    shifted = spec.energies_ER - cfg.N * terms.mu_tilde
    band = band_approximation(cfg.N, params, 2 * math.pi * ks[spec.k_index] / M) / terms.E_R
    rows = [(int(ks[m]), e, b, E) for m, e, b, E in zip(spec.k_index, shifted, band, spec.energies)]
    meta = {"energy_offset": "energy_ER excludes N mu_tilde", "mu_tilde_ER": "%.17g" % terms.mu_tilde,
            "V1_ER": "%.17g" % terms.V[1], "J_tilde_ER": "%.17g" % terms.J_tilde}
    units = {"k_index": "2 pi/(M a)", "energy_ER": "E_R", "band_approx_ER": "E_R", "energy_J": "J"}
    return ["k_index", "energy_ER", "band_approx_ER", "energy_J"], rows, units, meta


def _thermal(args, params):
    cfg = _config(args, params, N=3)
    spec = diagonalize(build_hamiltonian(build_basis(cfg), params), blocked=True)
    Eg = [ground_energy(_config(args, params, N=n), params) for n in (1, 2)] + [spec.energies[0]]
    E_p = derive_scales(params).E_p
    lo, hi = args.trange
    rows = []
    for x in np.linspace(lo, hi, args.npts):
        T = _temperature(params, x, args.t_units)
        obs = cluster_probabilities(spec, Eg, T)
        rows.append((K_B * T / E_p, obs.P3, obs.P2, obs.P_unbound, T * 1e9))
    meta = {"E_g_J": ",".join("%.17g" % e for e in Eg)}
    units = {"kT_over_Ep": "1", "P3": "1", "P2": "1", "P_unbound": "1", "T_nK": "nK"}
    return ["kT_over_Ep", "P3", "P2", "P_unbound", "T_nK"], rows, units, meta


def _correlations(args, params):
    kappas = args.kappa_list or list(FIG4_KAPPAS)
    E_R = recoil_energy(params.m_a, params.lam)
    rows, prs = [], []
    for kap in kappas:
        p = with_kappa(params, kap * E_R * params.lam)
        cfg = _config(args, p, N=3)
        basis = build_basis(cfg)
        H = build_hamiltonian(basis, p)
        if args.T_Ep is None:
            spec = diagonalize(H, n_eigs=1, vectors=True)
            vecs, w = spec.vectors, None
        else:
            spec = diagonalize(H, blocked=True, vectors=True)
            w = boltzmann_weights(spec.energies, _temperature(p, args.T_Ep, "Ep"))
            keep = w > 1e-14 * w.max()
            vecs, w = spec.vectors[:, keep], w[keep] / w[keep].sum()
        corr = density_density_correlation(vecs, basis, w)
        nk = momentum_distribution(vecs, basis, w)
        prs.append(participation_ratio(nk))
        M = cfg.M
        ks = np.sort(k_order(M))
        for j in range(M):
            rows.append((kap, j, corr[j], int(ks[j]), nk[ks[j] % M]))
    meta = {"participation_ratio": ",".join("%.17g" % x for x in prs),
            "state": "ground" if args.T_Ep is None else f"thermal kT/E_p={args.T_Ep}"}
    units = {"kappa_over_ERlambda": "E_R lambda", "j": "sites", "corr": "1", "k_index": "2 pi/(M a)", "nk": "1"}
    return ["kappa_over_ERlambda", "j", "corr", "k_index", "nk"], rows, units, meta


def _validate(args, params):
    rep = check_validity(params, threshold=args.threshold, warn=False)
    s = derive_scales(params)
    print(f"xi/a = {s.xi / params.a:.6g}   E_R/k_B = {s.E_R / K_B * 1e9:.6g} nK   "
          f"E_p/k_B = {s.E_p / K_B * 1e9:.6g} nK   zeta = {s.zeta:.6g}")
    for name, ok in (("weak_coupling", rep.weak_coupling_ok), ("fast_phonon", rep.fast_phonon_ok),
                     ("strong_coupling", rep.strong_coupling_ok)):
        print(f"{name:16s} ratio = {rep.ratios[name]:.6g}  {'ok' if ok else 'ABOVE'} threshold {rep.threshold}")
    rows = [(rep.ratios["weak_coupling"], rep.ratios["fast_phonon"], rep.ratios["strong_coupling"],
             rep.threshold, rep.all_ok)]
    units = {c: "1" for c in ("weak_coupling", "fast_phonon", "strong_coupling", "threshold", "all_ok")}
    return ["weak_coupling", "fast_phonon", "strong_coupling", "threshold", "all_ok"], rows, units, {}


COMMANDS = {
    "couplings": (_couplings, "fig2",
                  "Induced attraction V(d): closed form vs quadrature.",
                  "columns: d [sites], V_closed_J [J], V_quad_J [J], ratio = V_quad/V_closed [1]"),
    "dressed-hopping": (_dressed_hopping, "fig2",
                        "Thermally dressed hopping J_tilde(T).",
                        "columns: T_nK [nK], Jt_over_J [1], kT_over_Ep [1], Jt_J [J]"),
    "deformation": (_deformation, "fig2",
                    "Condensate density around static impurities.",
                    "columns: x_over_a [a], n_over_n0 [1], x_m [m], n_per_m [1/m]"),
    "transport": (_transport, "fig2",
                  "Mean-squared displacement from the generalized master equation.",
                  "columns: t_hbarJ [hbar/J], msd_a2 [a^2], t_s [s]"),
    "crossover": (_crossover, "fig2",
                  "Scan of the MSD coefficients and the coherent/diffusive crossover.",
                  "columns: kT_over_Ep [1], A_hbar_over_J [1], sqrtB_hbar_over_J [1], T_nK [nK]"),
    "spectrum": (_spectrum, "fig3a",
                 "Many-body spectrum with momentum labels and the cluster band approximation.",
                 "columns: k_index [2 pi/(M a)], energy_ER [E_R, without N mu_tilde], band_approx_ER [E_R], "
                 "energy_J [J]"),
    "thermal": (_thermal, "fig3b",
                "Thermal probabilities of three-, two- and unbound polaron configurations.",
                "columns: kT_over_Ep [1], P3 [1], P2 [1], P_unbound [1], T_nK [nK]"),
    "correlations": (_correlations, "fig4",
                     "Density-density correlations and momentum distributions over a coupling ladder.",
                     "columns: kappa_over_ERlambda [E_R lambda], j [sites], corr [1], k_index [2 pi/(M a)], nk [1]"),
    "validate": (_validate, "fig2",
                 "Print derived scales and the validity ratios of the model.",
                 "columns (with --out): weak_coupling, fast_phonon, strong_coupling, threshold [1], all_ok [0/1]"),
}


def build_parser():
    parser = _Parser(prog="polaronlab", description="Lattice polarons in a 1D Bose-Einstein condensate.")
    parser.add_argument("--version", action="version", version=f"polaronlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, default, help_text, columns) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=columns)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="key = value parameter file")
        src.add_argument("--preset", help=f"named parameter set (default {default})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key; repeatable")
        p.add_argument("--out", required=name != "validate", help="output CSV path")
        if name == "couplings":
            p.add_argument("--dmax", type=int, default=8)
        elif name == "dressed-hopping":
            p.add_argument("--tmin", type=float, default=0.0)
            p.add_argument("--tmax", type=float, default=100.0)
            p.add_argument("--tsteps", type=int, default=21)
            p.add_argument("--t-units", choices=("nK", "Ep"), default="nK")
        elif name == "deformation":
            p.add_argument("--impurities", type=_int_list, default=[0], help="impurity sites, e.g. 0,1")
            p.add_argument("--xmin", type=float, default=-10.0, help="in units of a")
            p.add_argument("--xmax", type=float, default=10.0, help="in units of a")
            p.add_argument("--npts", type=int, default=401)
        elif name in ("transport", "crossover"):
            p.add_argument("--tau-hbar-over-J", type=float, default=10.0)
            p.add_argument("--samples", type=int, default=2048, help="initial kernel samples on [0, tau]")
            p.add_argument("--sites", type=int, default=201)
            if name == "transport":
                t = p.add_mutually_exclusive_group()
                t.add_argument("--T-nK", type=float)
                t.add_argument("--T-Ep", type=float, help="temperature as k_B T / E_p")
            else:
                p.add_argument("--trange", type=_range, default=(0.5, 10.0), help="k_B T / E_p range LOW:HIGH")
                p.add_argument("--npts", type=int, default=20)
                p.add_argument("--refine", action="store_true", help="bisect the crossover inside the scan")
                p.add_argument("--tol", type=float, default=0.01, help="bisection tolerance in E_p/k_B")
        elif name in ("spectrum", "thermal", "correlations"):
            p.add_argument("--nmax", type=int, default=0, help="occupancy cap per site (default N)")
            if name == "spectrum":
                p.add_argument("--N", type=int, default=3)
                p.add_argument("--neigs", type=int, default=200, help="lowest eigenvalues to keep; 0 for all")
            elif name == "thermal":
                p.add_argument("--trange", type=_range, default=(0.05, 1.2))
                p.add_argument("--npts", type=int, default=24)
                p.add_argument("--t-units", choices=("nK", "Ep"), default="Ep")
            else:
                p.add_argument("--kappa-list", type=_float_list, help="kappa values in E_R lambda")
                p.add_argument("--T-Ep", type=float, help="thermal state at k_B T / E_p (default ground state)")
        elif name == "validate":
            p.add_argument("--threshold", type=float, default=0.3)
    rr = sub.add_parser("rerun", help="Regenerate a CSV from its manifest.",
                        description="Regenerate a CSV from its manifest.")
    rr.add_argument("manifest")
    rr.add_argument("--out", help="output CSV path (default: the original one)")
    return parser


_NOT_OPTIONS = ("command", "config", "preset", "set", "out")


def _execute(command, options, config_text, overrides, argv, out, source):
    func, default = COMMANDS[command][:2]
    t0 = time.perf_counter()
    params = parse_config_text(config_text, overrides, source=source)
    args = argparse.Namespace(**options)
    columns, rows, units, extra = func(args, params)
    manifest = build_manifest(command, argv, options, config_text, overrides, params)
    if out is not None:
        meta = {"polaronlab": __version__, "command": command, "manifest_sha256": manifest.hash, **extra}
        emit_csv(columns, rows, out, meta=meta, units=units)
        manifest.wall_time_s = time.perf_counter() - t0
        manifest.write(out)
        print(f"wrote {out} ({len(rows)} rows)")


def _run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        m = RunManifest.read(args.manifest)
        original = parser.parse_args(m.argv)
        out = args.out or original.out
        _execute(m.command, m.options, m.config_text, m.overrides, m.argv, out, source=f"{args.manifest}:config")
        return
    default = COMMANDS[args.command][1]
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read {args.config}: {exc.strerror}", field="config") from None
        source = args.config
    else:
        text = f"preset = {args.preset or default}\n"
        source = "--preset"
    options = {k: v for k, v in vars(args).items() if k not in _NOT_OPTIONS}
    _execute(args.command, options, text, list(args.set), list(argv), args.out, source)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _run(argv)
    except ValidationError as exc:
        print(f"polaronlab: invalid input: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"polaronlab: convergence failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"polaronlab: invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
