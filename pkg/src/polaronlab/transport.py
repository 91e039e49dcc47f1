"""Single-polaron transport: memory kernel, generalized master equation,
Markov limit and the coherent/diffusive crossover.

The kernel exponent

    2 sum_q |M_q|^2 (1 - cos qa) [(2N_q + 1)(cos w_q s - 1) + i sin w_q s]

is evaluated for all sample times at once.  The q-integral is rewritten
as a trapezoid rule on a uniform frequency grid so the time dependence
becomes a discrete Fourier sum; the grid spacing is chosen so that its
periodic images lie far outside the requested window.  Modes too fast to
be resolved by the time step are smoothly tapered out of the oscillating
part and kept only in the static (s -> infinity) part, which is taken
from the Gauss-Legendre quadrature shared with :mod:`polaronlab.phonons`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import nnls
from scipy.special import erfc

from .errors import ConvergenceError
from .params import HBAR, K_B, SystemParams, derive_scales, to_natural
from .phonons import (
    _default_breakpoints_nat,
    _default_q_max_nat,
    _gl_nodes,
    coth_weight_nat,
    coupling_sq_nat,
    omega_nat,
    phonon_exponent,
)

TAIL_RTOL = 1e-3
CONSERVATION_TOL = 1e-8
NEGATIVE_TOL = 1e-10
LEAKAGE_TOL = 1e-6
DEFAULT_SAMPLES = 2048
DEFAULT_SITES = 201

_FREQ_CHUNK = 2_000_000
_MAX_FFT = 2**22
_MAX_DIRECT_PANELS = 2**18


class CrossoverNotFound(ConvergenceError):
    pass


# -- memory kernel ----------------------------------------------------------------


def _spectral_density(nat, kT, om):
    """(2N+1)-weighted and bare spectral densities F_a, F_b on frequency nodes.

    Both include dq/domega and the 1/pi of the folded phonon sum.
    """
    gn0, alpha = nat.gn0, nat.alpha
    R = np.sqrt(gn0 * gn0 + om * om)
    eps = om * om / (gn0 + R)
    q = np.sqrt(eps / alpha)
    dq_dom = np.sqrt((gn0 + R) / alpha) / (2 * R)
    base = coupling_sq_nat(nat, q) * 2 * np.sin(0.5 * q) ** 2 * dq_dom / math.pi
    if kT > 0:
        with np.errstate(over="ignore"):
            coth = 1.0 / np.tanh(om / (2 * kT))
    else:
        coth = 1.0
    return base * coth, base


def _kernel_exponent_direct(nat, kT, ds, n, S_static):
    """Exponent by Gauss-Legendre quadrature in q, summed time by time.

    Panels are split so the phase omega s advances by at most 2 rad across
    any of them at the latest time.
    """
    s_max = ds * (n - 1)
    breaks = _default_breakpoints_nat(nat, d_max=1)
    pieces = np.maximum(np.ceil(np.diff(omega_nat(nat, breaks)) * s_max / 2.0), 1).astype(int)
    if pieces.sum() > _MAX_DIRECT_PANELS:
        raise ConvergenceError("kernel window too long for direct quadrature", achieved=float(pieces.sum()))
    breaks = np.concatenate([np.linspace(lo, hi, k, endpoint=False)
                             for lo, hi, k in zip(breaks[:-1], breaks[1:], pieces)] + [breaks[-1:]])
    q, w = _gl_nodes(breaks)
    om = omega_nat(nat, q)
    base = w * coupling_sq_nat(nat, q) * 2 * np.sin(0.5 * q) ** 2 / math.pi
    a = base * coth_weight_nat(kT, om)
    expo = np.empty(n, dtype=complex)
    step = max(1, _FREQ_CHUNK // len(q))
    for start in range(0, n, step):
        t = np.arange(start, min(start + step, n)) * ds
        ph = np.outer(t, om)
        expo[start : start + len(t)] = 2 * (np.cos(ph) @ a - S_static) + 2j * (np.sin(ph) @ base)
    expo[0] = 0.0
    return expo


def _kernel_exponent_nat(nat, kT, ds, n, S_static, oversample=8):
    """Complex exponent at s = 0, ds, ..., (n-1) ds (natural units)."""
    if nat.kappa == 0:
        return np.zeros(n, dtype=complex)
    dw_max = nat.gn0 / 400
    if kT > 0:
        dw_max = min(dw_max, kT / 100)
    n_fft = max(oversample * n, int(math.ceil(2 * math.pi / (dw_max * ds))))
    n_fft = int(2 ** math.ceil(math.log2(n_fft)))
    if n_fft > _MAX_FFT:
        return _kernel_exponent_direct(nat, kT, ds, n, S_static)
    dw = 2 * math.pi / (n_fft * ds)

    w_gauss = float(omega_nat(nat, _default_q_max_nat(nat)))
    w_cut = 40.0 / ds
    taper = 2 * w_cut < w_gauss
    w_top = 2.2 * w_cut if taper else w_gauss
    n_nodes = int(w_top / dw) + 1

    fold_a = np.zeros(n_fft)
    fold_b = np.zeros(n_fft)
    S_low = 0.0
    for start in range(0, n_nodes, _FREQ_CHUNK):
        k = np.arange(start, min(start + _FREQ_CHUNK, n_nodes))
        om = k * dw
        om[k == 0] = dw * 1e-6
        Fa, Fb = _spectral_density(nat, kT, om)
        wts = np.full(k.shape, dw)
        wts[k == 0] = 0.5 * dw
        if taper:
            wts *= 0.5 * erfc((om - 1.5 * w_cut) / (0.125 * w_cut))
        a, b = wts * Fa, wts * Fb
        S_low += a.sum()
        r = k % n_fft
        fold_a += np.bincount(r, weights=a, minlength=n_fft)
        fold_b += np.bincount(r, weights=b, minlength=n_fft)
    C = (np.fft.ifft(fold_a) * n_fft).real[:n]
    Sn = (np.fft.ifft(fold_b) * n_fft).imag[:n]
    expo = 2 * (C - S_static) + 2j * Sn
    expo[0] = 0.0
    return expo


def _kernel_values_nat(nat, kT, ds, n, S_static):
    J = nat.J
    return 2 * J * J * np.exp(_kernel_exponent_nat(nat, kT, ds, n, S_static)).real


@dataclass(frozen=True)
class MemoryKernel:
    """Sampled nearest-neighbour memory function W(s).

    ``times`` in s, ``values``/``plateau``/``peak`` in 1/s^2.  Kernels built
    from physical parameters keep them so they can be re-sampled exactly;
    synthetic kernels are interpolated with a cubic spline and continued
    by the plateau.
    """

    times: np.ndarray
    values: np.ndarray
    plateau: float
    peak: float
    params: Optional[SystemParams] = field(default=None, repr=False)
    T: Optional[float] = None

    @classmethod
    def constant(cls, value, t_window, n_samples=DEFAULT_SAMPLES):
        """Step kernel value * Theta(s): purely coherent hopping."""
        times = np.linspace(0.0, t_window, n_samples)
        return cls(times=times, values=np.full(n_samples, float(value)), plateau=float(value), peak=float(value))

    def tail_deviation(self):
        """Relative deviation of the mean over the last 10% of the window from the plateau."""
        n_tail = max(len(self.values) // 10, 1)
        tail = float(np.mean(self.values[-n_tail:]))
        ref = self.plateau if self.plateau != 0 else self.peak
        return abs(tail - self.plateau) / abs(ref)

    def sample(self, dt, n):
        """Kernel on the uniform grid 0, dt, ..., (n-1) dt."""
        if self.params is not None:
            nat = to_natural(self.params)
            kT = K_B * self.T / nat.E_R
            S = phonon_exponent(self.params, self.T)
            W = _kernel_values_nat(nat, kT, dt / nat.time_unit, n, S)
            return W / nat.time_unit**2
        t = np.arange(n) * dt
        spline = CubicSpline(self.times, self.values)
        out = np.where(t <= self.times[-1], spline(np.minimum(t, self.times[-1])), self.plateau)
        return out


def memory_kernel(params: SystemParams, T: float, t_window: float, n_samples: int = DEFAULT_SAMPLES,
                  extend: bool = True, max_extensions: int = 6) -> MemoryKernel:
    """Sample W(s) on [0, t_window] (seconds) at temperature T (K).

    If the tail has not settled on the plateau 2 (J_tilde/hbar)^2 to within
    1e-3, the window is doubled at fixed spacing; with ``extend=False`` or
    after ``max_extensions`` doublings a ConvergenceError is raised.
    """
    if t_window <= 0:
        raise ValueError("t_window must be positive")
    nat = to_natural(params)
    kT = K_B * T / nat.E_R
    S = phonon_exponent(params, T)
    ds = t_window / nat.time_unit / (n_samples - 1)
    rate = 1.0 / nat.time_unit**2
    peak = 2 * nat.J**2 * rate
    plateau = peak * math.exp(-2 * S)
    n = n_samples
    for attempt in range(max_extensions + 1):
        values = _kernel_values_nat(nat, kT, ds, n, S) * rate
        kern = MemoryKernel(times=np.arange(n) * ds * nat.time_unit, values=values,
                            plateau=plateau, peak=peak, params=params, T=T)
        dev = kern.tail_deviation()
        if dev <= TAIL_RTOL:
            return kern
        if not extend or attempt == max_extensions:
            break
        n = 2 * n - 1
    raise ConvergenceError("memory kernel has not reached its plateau within the window", achieved=dev)


def kernel_decay_time(kernel: MemoryKernel, fraction=math.exp(-1)):
    """First time at which |W - plateau| falls below ``fraction`` of its initial value."""
    excess = np.abs(kernel.values - kernel.plateau)
    if excess[0] == 0:
        return 0.0
    idx = np.nonzero(excess < fraction * excess[0])[0]
    if len(idx) == 0:
        return math.inf
    return float(kernel.times[idx[0]])


# -- master equations ---------------------------------------------------------------


@dataclass(frozen=True)
class GMEState:
    """Site occupation probabilities P[t, l] on sites l = -(M-1)/2 .. (M-1)/2."""

    sites: np.ndarray
    P: np.ndarray
    t_grid: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def msd(self):
        """Mean-squared displacement in units of a^2 at every time."""
        return self.P @ (self.sites.astype(float) ** 2)

    @property
    def P_reported(self):
        """P with the small negative excursions of the memory dynamics clipped to zero."""
        return np.clip(self.P, 0.0, None)


def _laplacian(P):
    out = -2.0 * P
    out[..., 1:] += P[..., :-1]
    out[..., :-1] += P[..., 1:]
    out[..., 0] += P[..., 0]
    out[..., -1] += P[..., -1]
    return out


def _integrate_gme(W, h, M):
    """Heun steps with a trapezoidal memory integral; W sampled at step h."""
    n_t = len(W) - 1
    P = np.zeros((n_t + 1, M))
    P[0, M // 2] = 1.0
    f = np.zeros(M)
    half_w0 = 0.5 * h * W[0]
    for n in range(n_t):
        hist = W[n:0:-1] @ P[1 : n + 1] if n > 0 else np.zeros(M)
        hist = h * (hist + 0.5 * W[n + 1] * P[0])
        pred = P[n] + h * f
        f_pred = _laplacian(hist + half_w0 * pred)
        P[n + 1] = P[n] + 0.5 * h * (f + f_pred)
        f = _laplacian(hist + half_w0 * P[n + 1])
    return P


def _check_state(P, label):
    drift = float(np.max(np.abs(P.sum(axis=1) - 1.0)))
    if drift > CONSERVATION_TOL:
        raise ConvergenceError(f"{label}: probability not conserved", achieved=drift)
    leak = float(np.max(np.abs(P[:, [0, -1]])))
    return drift, leak


def solve_gme(kernel: MemoryKernel, M: int = DEFAULT_SITES, t_final: float | None = None,
              dt: float | None = None, max_sites: int = 6401) -> GMEState:
    """Integrate the GME for a particle starting on site 0.

    The lattice (odd M, reflecting ends) is doubled until the occupation of
    the outermost sites stays below 1e-6.  Small negative probabilities are
    allowed by the memory dynamics; they are recorded in ``diagnostics``.
    """
    if t_final is None:
        t_final = float(kernel.times[-1])
    if dt is None:
        dt = float(kernel.times[1] - kernel.times[0])
    n_t = max(int(math.ceil(t_final / dt - 1e-9)), 1)
    dt = t_final / n_t
    W = kernel.sample(dt, n_t + 1)
    unit = 1.0 / math.sqrt(kernel.peak) if kernel.peak > 0 else 1.0
    if M % 2 == 0:
        M += 1
    while True:
        P = _integrate_gme(W * unit**2, dt / unit, M)
        drift, leak = _check_state(P, "GME")
        if leak < LEAKAGE_TOL:
            break
        if 2 * M - 1 > max_sites:
            raise ConvergenceError("GME probability reaches the lattice boundary", achieved=leak)
        M = 2 * M - 1
    min_p = float(P.min())
    if min_p < -NEGATIVE_TOL:
        warnings.warn(f"GME produced negative occupation {min_p:.3g} (memory dynamics is not positivity preserving)",
                      stacklevel=2)
    sites = np.arange(M) - M // 2
    return GMEState(sites=sites, P=P, t_grid=np.arange(n_t + 1) * dt,
                    diagnostics={"drift": drift, "leakage": leak, "min_P": min_p, "M": M, "dt": dt})


def solve_pauli(rate: float, M: int = DEFAULT_SITES, t_final: float = 1.0, n_steps: int = 200,
                max_sites: int = 6401) -> GMEState:
    """Nearest-neighbour Pauli master equation dP_i/dt = w sum_j (P_j - P_i).

    Solved exactly by diagonalizing the tridiagonal rate matrix.
    """
    if rate < 0:
        raise ValueError("rate must be non-negative")
    t = np.linspace(0.0, t_final, n_steps + 1)
    if M % 2 == 0:
        M += 1
    while True:
        diag = np.full(M, -2.0)
        diag[[0, -1]] = -1.0
        lam, vec = eigh_tridiagonal(diag, np.ones(M - 1))
        coeff = vec[M // 2]
        P = (np.exp(np.outer(rate * t, lam)) * coeff) @ vec.T
        # eigenvector round-off would otherwise smear the exact initial delta
        P[rate * t == 0] = 0.0
        P[rate * t == 0, M // 2] = 1.0
        drift, leak = _check_state(P, "Pauli")
        if leak < LEAKAGE_TOL:
            break
        if 2 * M - 1 > max_sites:
            raise ConvergenceError("Pauli probability reaches the lattice boundary", achieved=leak)
        M = 2 * M - 1
    sites = np.arange(M) - M // 2
    return GMEState(sites=sites, P=P, t_grid=t, diagnostics={"drift": drift, "leakage": leak, "M": M})


def markov_rate(kernel: MemoryKernel) -> float:
    """Incoherent hopping rate w = int_0^inf [W(s) - W(inf)] ds in 1/s."""
    dev = kernel.tail_deviation()
    if dev > TAIL_RTOL:
        raise ConvergenceError("kernel has not decayed to its plateau", achieved=dev)
    return float(np.trapezoid(kernel.values - kernel.plateau, kernel.times))


# -- mean-squared displacement ---------------------------------------------------------


@dataclass(frozen=True)
class MSDFit:
    """msd(t) ~ A t + B t^2 with A in a^2/s and B in a^2/s^2."""

    A: float
    B: float
    residual: float
    ok: bool = True

    def scaled(self, time_unit):
        """(A u, sqrt(B) u) for a time unit u, e.g. hbar/J for the figure axes."""
        return self.A * time_unit, math.sqrt(self.B) * time_unit


def msd_decompose(state: GMEState, fit_window=None, max_residual=0.05) -> MSDFit:
    """Non-negative least-squares fit of the MSD to A t + B t^2."""
    t = state.t_grid
    y = state.msd
    if fit_window is not None:
        lo, hi = fit_window
        if lo < t[0] - 1e-15 * abs(t[-1]) or hi > t[-1] * (1 + 1e-12):
            raise ValueError("fit window outside the time grid")
        sel = (t >= lo) & (t <= hi)
        t, y = t[sel], y[sel]
    scale = t[-1]
    x = t / scale
    coef, rnorm = nnls(np.column_stack([x, x * x]), y)
    ynorm = float(np.linalg.norm(y))
    residual = rnorm / ynorm if ynorm > 0 else 0.0
    ok = residual <= max_residual
    if not ok:
        warnings.warn(f"MSD fit residual {residual:.3g} above {max_residual}", stacklevel=2)
    return MSDFit(A=coef[0] / scale, B=coef[1] / scale**2, residual=residual, ok=ok)


def transport_run(params: SystemParams, T: float, tau: float, n_samples: int = DEFAULT_SAMPLES,
                  M: int = DEFAULT_SITES, rtol: float = 1e-4, max_doublings: int = 3):
    """Kernel + GME on [0, tau], densifying the grid until msd(tau) is stable.

    Returns (state, kernel).  The kernel tail is checked on the evolution
    window only when it is long enough to matter; the GME needs W(s) on
    [0, tau] alone.
    """
    nat = to_natural(params)
    kT = K_B * T / nat.E_R
    S = phonon_exponent(params, T)
    rate = 1.0 / nat.time_unit**2
    peak = 2 * nat.J**2 * rate
    prev = None
    n = n_samples
    for _ in range(max_doublings + 1):
        ds = tau / nat.time_unit / (n - 1)
        values = _kernel_values_nat(nat, kT, ds, n, S) * rate
        kern = MemoryKernel(times=np.arange(n) * ds * nat.time_unit, values=values,
                            plateau=peak * math.exp(-2 * S), peak=peak, params=params, T=T)
        state = solve_gme(kern, M=M, t_final=tau)
        cur = state.msd[-1]
        if prev is not None and abs(cur - prev) <= rtol * abs(cur):
            return state, kern
        prev = cur
        n = 2 * n - 1
    raise ConvergenceError("GME mean-squared displacement not converged under grid doubling",
                           achieved=abs(cur - prev) / abs(cur))


def hopping_time_unit(params: SystemParams) -> float:
    """hbar/J in seconds."""
    return HBAR / params.J


def msd_coefficients(params: SystemParams, T: float, tau: float, **kw):
    """(hbar A / J, hbar sqrt(B) / J) from the full kernel + GME + fit pipeline."""
    state, _ = transport_run(params, T, tau, **kw)
    fit = msd_decompose(state)
    return fit.scaled(hopping_time_unit(params))


def crossover_temperature(params: SystemParams, tau: float, T_range, tol: float, **kw):
    """Temperature (K) at which hbar A/J = hbar sqrt(B)/J, by bisection.

    ``T_range`` is a (low, high) bracket in K.  Raises CrossoverNotFound if
    A - sqrt(B) does not change sign over it.
    """
    lo, hi = map(float, T_range)

    def f(T):
        A, sB = msd_coefficients(params, T, tau, **kw)
        return A - sB

    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise CrossoverNotFound(
            f"A - sqrt(B) has no sign change on [{lo:.4g}, {hi:.4g}] K (values {f_lo:.3g}, {f_hi:.3g})")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    # linear interpolation inside the final bracket
    return lo + (hi - lo) * f_lo / (f_lo - f_hi)


def markov_window(params: SystemParams) -> float:
    """Kernel window (s) long enough for W - W(inf) to be integrated to ~1e-4."""
    s = derive_scales(params)
    return 100 * s.xi / s.c


def markov_rate_at(params: SystemParams, T: float, t_window: float | None = None) -> float:
    """Markov hopping rate (1/s) from a kernel sampled finely enough for temperature T."""
    nat = to_natural(params)
    if t_window is None:
        t_window = markov_window(params)
    kT = K_B * T / nat.E_R
    fastest = max(kT, nat.gn0)
    ds = 0.1 / fastest * nat.time_unit
    n = int(math.ceil(t_window / ds)) + 1
    return markov_rate(memory_kernel(params, T, t_window, n))


@dataclass(frozen=True)
class ActivationFit:
    E_a: float  # J
    slope: float
    intercept: float
    temperatures: np.ndarray
    rates: np.ndarray


def activation_energy(params: SystemParams, temperatures) -> ActivationFit:
    """Fit ln(w sqrt(k_B T)) = const - E_a / (k_B T) to Markov rates."""
    temps = np.asarray(temperatures, dtype=float)
    rates = np.array([markov_rate_at(params, T) for T in temps])
    kT = K_B * temps
    slope, intercept = np.polyfit(1.0 / kT, np.log(rates * np.sqrt(kT)), 1)
    return ActivationFit(E_a=-slope, slope=slope, intercept=intercept, temperatures=temps, rates=rates)
