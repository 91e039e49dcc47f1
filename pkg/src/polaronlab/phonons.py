"""Bogoliubov phonons of a homogeneous 1D condensate and their coupling to
lattice-trapped impurities.

Phonon sums are taken in the thermodynamic limit,
sum_q -> (L/2 pi) int dq, and folded onto q > 0.  The quantization length
L cancels: only L |M_q|^2 is ever stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError
from .params import K_B, SystemParams, derive_scales, to_natural

GL_ORDER = 16
# exp(-q_max^2 sigma^2 / 2) < 1e-12
_GAUSS_CUTOFF = math.sqrt(2 * math.log(1e12)) * 1.0001
_QUAD_RTOL = 1e-10
_MAX_REFINE = 6


# -- natural-unit kernels (q in 1/a, energies in E_R) -------------------------


def free_energy_nat(nat, q):
    return nat.alpha * q * q


def omega_nat(nat, q):
    eps = nat.alpha * q * q
    return np.sqrt(eps * (eps + 2 * nat.gn0))


def coupling_sq_nat(nat, q):
    """L |M_q|^2 in units of a."""
    q = np.asarray(q, dtype=float)
    eps = nat.alpha * q * q
    om = np.sqrt(eps * (eps + 2 * nat.gn0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # eps/om^3 -> 1/(om (eps + 2 g n0)) avoids 0/0 at q = 0
        out = nat.kappa**2 * nat.n0 / (om * (eps + 2 * nat.gn0)) * np.exp(-0.5 * (q * nat.sigma) ** 2)
    return out


def bose_nat(kT, om):
    om = np.asarray(om, dtype=float)
    if kT <= 0:
        return np.zeros_like(om)
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / np.expm1(om / kT)


def coth_weight_nat(kT, om):
    """2 N_q + 1, exactly 1 at T = 0."""
    om = np.asarray(om, dtype=float)
    if kT <= 0:
        return np.ones_like(om)
    x = om / (2 * kT)
    with np.errstate(over="ignore", divide="ignore"):
        return 1.0 / np.tanh(x)


# -- quadrature grid ------------------------------------------------------------


@dataclass(frozen=True)
class PhononGrid:
    """Composite Gauss-Legendre rule on [0, q_max]; nodes and weights in 1/m."""

    q_nodes: np.ndarray
    q_weights: np.ndarray
    q_max: float
    breakpoints: np.ndarray = field(repr=False)


def _default_q_max_nat(nat):
    return max(_GAUSS_CUTOFF / nat.sigma, 40.0 / nat.xi)


def _default_breakpoints_nat(nat, d_max=8, q_max=None):
    q_max = _default_q_max_nat(nat) if q_max is None else q_max
    # widest panel that still resolves cos(q d) and the Gaussian cutoff
    cap = 0.5 / nat.sigma
    if d_max > 0:
        cap = min(cap, 4.0 / d_max)
    h = min(0.5 / nat.xi, cap, q_max / 8)
    grade = h * 2.0 ** -np.arange(14, 0, -1)
    q_u = min(q_max, 40.0 / nat.xi)
    n_uniform = max(int(math.ceil(q_u / h)), 1)
    uniform = list(np.linspace(h, q_u, n_uniform))
    width = uniform[-1] - uniform[-2] if len(uniform) > 1 else h
    while uniform[-1] < q_max:
        width = min(width * 1.1, cap)
        uniform.append(min(uniform[-1] + width, q_max))
    return np.concatenate([[0.0], grade, uniform])


def _refine(breaks):
    mids = 0.5 * (breaks[1:] + breaks[:-1])
    out = np.empty(2 * len(breaks) - 1)
    out[0::2] = breaks
    out[1::2] = mids
    return out


def _gl_nodes(breaks, order=GL_ORDER):
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + half * (x + 1)).ravel()
    weights = (half * w).ravel()
    return nodes, weights


def phonon_grid(params: SystemParams, refine: int = 0, order: int = GL_ORDER,
                q_max: float | None = None, d_max: int = 8) -> PhononGrid:
    """Build the default quadrature grid, bisecting every panel ``refine`` times.

    ``q_max`` (1/m) defaults to the larger of the Gaussian form-factor cutoff
    and 40/xi.
    """
    nat = to_natural(params)
    breaks = _default_breakpoints_nat(nat, d_max, None if q_max is None else q_max * nat.a)
    for _ in range(refine):
        breaks = _refine(breaks)
    q, w = _gl_nodes(breaks, order)
    return PhononGrid(q_nodes=q / nat.a, q_weights=w / nat.a, q_max=breaks[-1] / nat.a,
                      breakpoints=breaks / nat.a)


def _converged(nat, integrand, d_max=8, rtol=_QUAD_RTOL, what="phonon integral"):
    """Integrate ``integrand(q) -> (n_q, k)`` over q > 0, doubling nodes until stable."""
    breaks = _default_breakpoints_nat(nat, d_max)
    q, w = _gl_nodes(breaks)
    prev = w @ integrand(q)
    for _ in range(_MAX_REFINE):
        breaks = _refine(breaks)
        q, w = _gl_nodes(breaks)
        cur = w @ integrand(q)
        scale = np.maximum(np.abs(cur), np.max(np.abs(cur)) * 1e-300 + 1e-300)
        err = np.max(np.abs(cur - prev) / scale)
        if err < rtol:
            return cur
        prev = cur
    raise ConvergenceError(f"{what} did not converge under node doubling", achieved=err)


# -- public operations ----------------------------------------------------------


def bogoliubov_dispersion(q, params: SystemParams):
    """Phonon energy hbar omega_q (J) for wavenumber q (1/m)."""
    nat = to_natural(params)
    return omega_nat(nat, np.asarray(q, dtype=float) * nat.a) * nat.E_R


def wannier_form_factor(q, params: SystemParams):
    """Modulus sqrt(L)|f(q)| = exp(-q^2 sigma^2 / 4) of a Gaussian Wannier density."""
    q = np.asarray(q, dtype=float)
    return np.exp(-0.25 * (q * params.sigma) ** 2)


@dataclass(frozen=True)
class CouplingTable:
    """Coupling strengths on a grid plus the static sums built from them.

    ``coupling_sq`` is L|M_{0,q}|^2 in m, ``omega`` is hbar omega_q in J,
    ``V`` maps separation in sites to the induced attraction in J.
    """

    grid: PhononGrid
    coupling_sq: np.ndarray
    omega: np.ndarray
    E_p_numeric: float
    V: dict


def _static_integrand(nat, d_max):
    ds = np.arange(d_max + 1)

    def f(q):
        weight = omega_nat(nat, q) * coupling_sq_nat(nat, q) / math.pi
        # column 0: E_p; columns 1..: V(d) = 2 int omega |M|^2 cos(q d) / pi
        return np.column_stack([weight] + [2 * weight * np.cos(q * d) for d in ds])

    return f


def build_coupling_table(params: SystemParams, grid: PhononGrid | None = None, d_max: int = 8) -> CouplingTable:
    """Tabulate |M_{0,q}|^2 and integrate E_p and V(d) for d = 0..d_max.

    With ``grid=None`` the default grid is refined until the sums change by
    less than 1e-10 relative under node doubling.
    """
    nat = to_natural(params)
    integrand = _static_integrand(nat, d_max)
    if grid is None:
        sums = _converged(nat, integrand, d_max, what="E_p / V(d) quadrature")
        grid = phonon_grid(params, d_max=d_max)
    else:
        q = grid.q_nodes * nat.a
        sums = (grid.q_weights * nat.a) @ integrand(q)
    q = grid.q_nodes * nat.a
    return CouplingTable(
        grid=grid,
        coupling_sq=coupling_sq_nat(nat, q) * nat.a,
        omega=omega_nat(nat, q) * nat.E_R,
        E_p_numeric=float(sums[0]) * nat.E_R,
        V={d: float(v) * nat.E_R for d, v in enumerate(sums[1:])},
    )


def interaction_potential(d, params: SystemParams, mode: str = "closed_form"):
    """Phonon-induced attraction V(d) in J between impurities d sites apart."""
    d = int(d)
    if d < 0:
        raise ValueError("separation must be non-negative")
    if mode == "closed_form":
        s = derive_scales(params)
        return params.kappa**2 / (s.xi * params.g) * math.exp(-2 * d * params.a / s.xi)
    if mode == "quadrature":
        return build_coupling_table(params, d_max=max(d, 1)).V[d]
    raise ValueError(f"unknown mode {mode!r}")


def _exponent_integrand(nat, kT):
    def f(q):
        om = omega_nat(nat, q)
        return coupling_sq_nat(nat, q) * 2 * np.sin(0.5 * q) ** 2 * coth_weight_nat(kT, om) / math.pi

    return f


def phonon_exponent(params: SystemParams, T: float) -> float:
    """S(T) = sum_q |M_{0,q}|^2 (1 - cos qa)(2 N_q + 1); J_tilde = J exp(-S)."""
    if T < 0:
        raise ValueError("temperature must be non-negative")
    nat = to_natural(params)
    if nat.kappa == 0:
        return 0.0
    kT = K_B * T / nat.E_R
    return float(_converged(nat, _exponent_integrand(nat, kT), d_max=1, what="dressed-hopping exponent"))


def dressed_hopping(params: SystemParams, T: float) -> float:
    """Thermally dressed hopping J_tilde(T) = J <<X_i^dag X_j>> in J."""
    return params.J * math.exp(-phonon_exponent(params, T))


def bec_deformation_profile(impurity_positions, x, params: SystemParams):
    """Condensate density n(x) (1/m) around static impurities at sites x_j = a j."""
    s = derive_scales(params)
    x = np.asarray(x, dtype=float)
    n = np.full_like(x, params.n0)
    depth = params.kappa / (params.g * s.xi)
    for j in impurity_positions:
        n -= depth * np.exp(-2 * np.abs(x - params.a * j) / s.xi)
    return n
