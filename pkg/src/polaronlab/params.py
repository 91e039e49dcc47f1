"""Physical parameters, unit conversion and presets.

Everything user-facing is SI.  Numerical work happens in lattice-natural
units: energies in the recoil energy E_R, lengths in the lattice spacing
a = lambda/2, times in hbar/E_R and temperatures as k_B T / E_R.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Optional

from scipy import constants

from .errors import ValidationError

HBAR = constants.hbar
K_B = constants.k
AMU = constants.atomic_mass

# masses in unified atomic mass units
ISOTOPES = {
    "K41": 40.9618252579,
    "Rb87": 86.909180531,
    "Cs133": 132.905451961,
}


def isotope_mass(name, table=None):
    """Mass in kg of a named isotope, e.g. ``"Rb87"``."""
    table = ISOTOPES if table is None else table
    try:
        return table[name] * AMU
    except KeyError:
        raise ValidationError(f"unknown isotope {name!r}", field="isotope") from None


@dataclass(frozen=True)
class SystemParams:
    """Physical inputs in SI units.

    ``J_tilde`` optionally pins the dressed hopping (J) used by the
    many-body module; when ``None`` it is computed from the phonon bath at
    T = 0.  ``M`` is the default lattice size.
    """

    m_a: float
    m_b: float
    lam: float
    J: float
    U: float
    mu: float
    kappa: float
    g: float
    n0: float
    sigma: float
    T: float = 0.0
    M: int = 201
    J_tilde: Optional[float] = None

    def __post_init__(self):
        for name in ("m_a", "m_b", "lam", "g", "n0", "sigma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"must be strictly positive, got {value!r}", field=name)
        for name in ("J", "U", "T"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"must be non-negative, got {value!r}", field=name)
        for name in ("mu", "kappa"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError("must be finite", field=name)
        if self.J_tilde is not None and not (math.isfinite(self.J_tilde) and self.J_tilde >= 0):
            raise ValidationError("must be non-negative", field="J_tilde")
        if int(self.M) != self.M or self.M < 3:
            raise ValidationError(f"lattice size must be an integer >= 3, got {self.M!r}", field="M")
        xi = healing_length(self.m_b, self.g, self.n0)
        if not self.sigma < xi:
            raise ValidationError(
                f"Wannier width sigma={self.sigma:.4g} m must be below the healing length xi={xi:.4g} m",
                field="sigma",
            )

    @property
    def a(self):
        """Lattice spacing in m."""
        return self.lam / 2

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def healing_length(m_b, g, n0):
    return HBAR / math.sqrt(m_b * g * n0)


def recoil_energy(m_a, lam):
    return (2 * math.pi * HBAR) ** 2 / (2 * m_a * lam**2)


@dataclass(frozen=True)
class DerivedScales:
    xi: float
    E_R: float
    E_p: float
    c: float
    zeta: float


def derive_scales(params: SystemParams) -> DerivedScales:
    """Healing length, recoil energy, closed-form polaron shift, sound speed, J/E_p."""
    xi = healing_length(params.m_b, params.g, params.n0)
    E_R = recoil_energy(params.m_a, params.lam)
    E_p = params.kappa**2 / (2 * xi * params.g)
    c = math.sqrt(params.g * params.n0 / params.m_b)
    zeta = params.J / E_p if E_p > 0 else math.inf
    return DerivedScales(xi=xi, E_R=E_R, E_p=E_p, c=c, zeta=zeta)


@dataclass(frozen=True)
class ValidityReport:
    weak_coupling_ok: bool
    fast_phonon_ok: bool
    strong_coupling_ok: bool
    ratios: dict
    threshold: float

    @property
    def all_ok(self):
        return self.weak_coupling_ok and self.fast_phonon_ok and self.strong_coupling_ok


def check_validity(params: SystemParams, threshold: float = 0.3, warn: bool = True) -> ValidityReport:
    """Evaluate the three small parameters the model relies on.

    The ratios are |kappa|/(g n0 xi), a J/(hbar c) and J/E_p.  Violations
    only produce a warning.
    """
    s = derive_scales(params)
    ratios = {
        "weak_coupling": abs(params.kappa) / (params.g * params.n0 * s.xi),
        "fast_phonon": params.a * params.J / (HBAR * s.c),
        "strong_coupling": s.zeta,
    }
    report = ValidityReport(
        weak_coupling_ok=ratios["weak_coupling"] < threshold,
        fast_phonon_ok=ratios["fast_phonon"] < threshold,
        strong_coupling_ok=ratios["strong_coupling"] < threshold,
        ratios=ratios,
        threshold=threshold,
    )
    if warn:
        bad = [k for k, v in ratios.items() if not v < threshold]
        if bad:
            warnings.warn(
                "validity ratios above threshold %g: %s"
                % (threshold, ", ".join(f"{k}={ratios[k]:.3g}" for k in bad)),
                stacklevel=2,
            )
    return report


@dataclass(frozen=True)
class NaturalParams:
    """Parameters in lattice-natural units plus the SI scales to undo them.

    ``alpha`` is hbar^2/(2 m_b) in E_R a^2, so the free phonon energy is
    alpha q^2 with q in 1/a.
    """

    E_R: float  # J
    a: float  # m
    m_a: float  # kg
    mass_ratio: float  # m_b / m_a
    J: float
    U: float
    mu: float
    kappa: float  # E_R a
    g: float  # E_R a
    n0: float  # 1/a
    sigma: float  # a
    kT: float  # E_R
    M: int
    J_tilde: Optional[float]

    @property
    def alpha(self):
        return 1.0 / (math.pi**2 * self.mass_ratio)

    @property
    def gn0(self):
        return self.g * self.n0

    @property
    def xi(self):
        return math.sqrt(2 * self.alpha / self.gn0)

    @property
    def E_p(self):
        return self.kappa**2 / (2 * self.xi * self.g)

    @property
    def time_unit(self):
        """hbar/E_R in seconds."""
        return HBAR / self.E_R

    def to_si(self) -> SystemParams:
        E, a = self.E_R, self.a
        return SystemParams(
            m_a=self.m_a,
            m_b=self.mass_ratio * self.m_a,
            lam=2 * a,
            J=self.J * E,
            U=self.U * E,
            mu=self.mu * E,
            kappa=self.kappa * E * a,
            g=self.g * E * a,
            n0=self.n0 / a,
            sigma=self.sigma * a,
            T=self.kT * E / K_B,
            M=self.M,
            J_tilde=None if self.J_tilde is None else self.J_tilde * E,
        )


def to_natural(params: SystemParams) -> NaturalParams:
    E = recoil_energy(params.m_a, params.lam)
    a = params.a
    return NaturalParams(
        E_R=E,
        a=a,
        m_a=params.m_a,
        mass_ratio=params.m_b / params.m_a,
        J=params.J / E,
        U=params.U / E,
        mu=params.mu / E,
        kappa=params.kappa / (E * a),
        g=params.g / (E * a),
        n0=params.n0 * a,
        sigma=params.sigma / a,
        kT=K_B * params.T / E,
        M=params.M,
        J_tilde=None if params.J_tilde is None else params.J_tilde / E,
    )


PRESETS = ("fig2", "fig3a", "fig3b", "fig4")

# Coupling ladder of the density-correlation figure, in units of E_R lambda.
FIG4_KAPPAS = (4.0e-2, 6.1e-2, 8.1e-2, 10.1e-2, 12.1e-2)

DEFAULT_SIGMA_OVER_A = 0.1


def _cluster_preset(g_over, kappa_over, U_over_Ep, M, Jt_over_ER=7.5e-3):
    m_a = isotope_mass("Cs133")
    lam = 790e-9
    E_R = recoil_energy(m_a, lam)
    base = SystemParams(
        m_a=m_a,
        m_b=isotope_mass("Rb87"),
        lam=lam,
        J=Jt_over_ER * E_R,
        U=0.0,
        mu=0.0,
        kappa=kappa_over * E_R * lam,
        g=g_over * E_R * lam,
        n0=5e6,
        sigma=DEFAULT_SIGMA_OVER_A * lam / 2,
        T=0.0,
        M=M,
        J_tilde=Jt_over_ER * E_R,
    )
    E_p = derive_scales(base).E_p
    return repin_dressed_hopping(base.replace(U=U_over_Ep * E_p))


def repin_dressed_hopping(params: SystemParams) -> SystemParams:
    """Back out the bare J so that J exp(-S(0)) equals the pinned J_tilde."""
    if params.J_tilde is None:
        return params
    from .phonons import phonon_exponent

    return params.replace(J=params.J_tilde * math.exp(phonon_exponent(params, 0.0)))


def preset(name: str) -> SystemParams:
    """Parameter sets of the published figures.

    ``fig4`` is the first member of the density-correlation coupling ladder
    (see :data:`FIG4_KAPPAS`); U tracks 3 E_p there.
    """
    if name == "fig2":
        m_a = isotope_mass("K41")
        lam = 790e-9
        E_R = recoil_energy(m_a, lam)
        return SystemParams(
            m_a=m_a,
            m_b=isotope_mass("Rb87"),
            lam=lam,
            J=2.45e-2 * E_R,
            U=0.0,
            mu=0.0,
            kappa=2.3e-2 * E_R * lam,
            g=8.9e-3 * E_R * lam,
            n0=5e6,
            sigma=DEFAULT_SIGMA_OVER_A * lam / 2,
            T=0.0,
            M=201,
        )
    if name == "fig3a":
        return _cluster_preset(4.5e-2, 1.05e-1, 50.0, 31)
    if name == "fig3b":
        return _cluster_preset(6.5e-2, 1.32e-1, 2.2, 27)
    if name == "fig4":
        return _cluster_preset(6.5e-2, FIG4_KAPPAS[0], 3.0, 27)
    raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", field="preset")


def with_kappa(params: SystemParams, kappa: float, keep_U_over_Ep: bool = True) -> SystemParams:
    """Change the impurity-boson coupling, optionally holding U/E_p fixed."""
    updates = {"kappa": kappa}
    if keep_U_over_Ep:
        E_p_old = derive_scales(params).E_p
        ratio = params.U / E_p_old if E_p_old > 0 else 0.0
        E_p_new = derive_scales(params.replace(kappa=kappa)).E_p
        updates["U"] = ratio * E_p_new
    return repin_dressed_hopping(params.replace(**updates))
