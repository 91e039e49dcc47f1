"""Exact diagonalization of the effective extended Bose-Hubbard Hamiltonian

    H = -Jt sum_<i,j> a_i^dag a_j + U'/2 sum_j n_j (n_j - 1) + mu' sum_j n_j
        - 1/2 sum_{i != j} V(|i - j|) n_i n_j

for a few bosonic polarons on a ring of M sites, with U' = U - 2 E_p and
mu' = mu + kappa n0 - E_p.

Matrices are assembled in units of the recoil energy; results handed back
to the caller are in joules.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import ConvergenceError, ValidationError
from .params import K_B, SystemParams, derive_scales, to_natural
from .phonons import dressed_hopping

BASIS_CAP = 200_000
FULL_DIAG_CAP = 6000
V_TAIL_TOL = 1e-8
EIGSH_SEED = 12345


# -- basis ----------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeConfig:
    """Ring of ``M`` sites holding ``N`` bosons, at most ``n_max`` per site."""

    M: int
    N: int
    n_max: Optional[int] = None
    boundary: str = "periodic"

    def __post_init__(self):
        if self.n_max is None:
            object.__setattr__(self, "n_max", self.N)
        if int(self.M) != self.M or self.M < 3:
            raise ValidationError(f"need an integer M >= 3, got {self.M!r}", field="M")
        if int(self.n_max) != self.n_max or not 1 <= self.n_max <= self.N:
            raise ValidationError(f"need 1 <= n_max <= N, got {self.n_max!r}", field="n_max")
        if int(self.N) != self.N or not 1 <= self.N <= self.M * self.n_max:
            raise ValidationError(f"need 1 <= N <= M n_max, got {self.N!r}", field="N")
        if self.boundary != "periodic":
            raise ValidationError("only periodic boundaries are supported", field="boundary")


def basis_dimension(M, N, n_max):
    """Number of occupation vectors of N bosons on M sites capped at n_max."""

    @lru_cache(maxsize=None)
    def count(m, n):
        if m == 0:
            return 1 if n == 0 else 0
        return sum(count(m - 1, n - k) for k in range(min(n_max, n) + 1))

    return count(M, N)


def _compositions(M, N, n_max):
    @lru_cache(maxsize=None)
    def build(m, n):
        if m == 1:
            return np.array([[n]], dtype=np.int16) if n <= n_max else np.zeros((0, 1), dtype=np.int16)
        blocks = []
        for k in range(min(n_max, n) + 1):
            rest = build(m - 1, n - k)
            if len(rest):
                head = np.full((len(rest), 1), k, dtype=np.int16)
                blocks.append(np.hstack([head, rest]))
        if not blocks:
            return np.zeros((0, m), dtype=np.int16)
        return np.vstack(blocks)

    return build(M, N)


class FockBasis:
    """Occupation vectors in ascending lexicographic order with a reverse index.

    States are encoded as integers in base ``n_max + 1`` with site 0 most
    significant, so numeric order equals lexicographic order and lookups
    are a binary search.
    """

    def __init__(self, config: LatticeConfig, states: np.ndarray):
        self.config = config
        self.states = states
        self.states.setflags(write=False)
        base = config.n_max + 1
        if config.M * math.log2(base) < 62:
            self._weights = base ** np.arange(config.M - 1, -1, -1, dtype=np.int64)
            self.codes = states.astype(np.int64) @ self._weights
            self._table = None
        else:
            self._weights = None
            self.codes = None
            self._table = {row.tobytes(): i for i, row in enumerate(states)}

    def __len__(self):
        return len(self.states)

    @property
    def dimension(self):
        return len(self.states)

    def lookup(self, states):
        """Ordinals of an array of occupation vectors; -1 where absent."""
        states = np.atleast_2d(np.asarray(states, dtype=np.int16))
        if self._table is not None:
            return np.array([self._table.get(row.tobytes(), -1) for row in states], dtype=np.int64)
        codes = states.astype(np.int64) @ self._weights
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return np.where(self.codes[pos] == codes, pos, -1)

    def index(self, state):
        i = int(self.lookup(state)[0])
        if i < 0:
            raise KeyError(f"state {tuple(state)} not in basis")
        return i


def build_basis(config: LatticeConfig, cap: int = BASIS_CAP) -> FockBasis:
    dim = basis_dimension(config.M, config.N, config.n_max)
    if dim > cap:
        raise ValidationError(f"basis dimension {dim} exceeds cap {cap}", field="N")
    return FockBasis(config, _compositions(config.M, config.N, config.n_max).copy())


# -- Hamiltonian ------------------------------------------------------------------


@dataclass(frozen=True)
class HubbardTerms:
    """Effective couplings in units of E_R."""

    J_tilde: float
    U_tilde: float
    mu_tilde: float
    V: tuple  # V[d] for d = 0 .. d_max; V[0] is unused
    d_max: int
    E_R: float  # J


def interaction_range(params: SystemParams, M: int, tol: float = V_TAIL_TOL) -> int:
    """Smallest d with exp(-2 d a / xi) < tol, capped by the ring's half length."""
    xi_a = derive_scales(params).xi / params.a
    d = int(math.floor(-math.log(tol) * xi_a / 2)) + 1
    return max(1, min(d, M // 2))


def hubbard_terms(params: SystemParams, M: int, d_max: int | None = None, T: float = 0.0) -> HubbardTerms:
    """Dressed couplings of the effective Hamiltonian from the closed forms.

    A pinned ``params.J_tilde`` takes precedence over the phonon-bath value.
    """
    nat = to_natural(params)
    E_p = nat.E_p
    if d_max is None:
        d_max = interaction_range(params, M)
    d_max = max(1, min(int(d_max), M // 2))
    if params.J_tilde is not None:
        Jt = nat.J_tilde
    else:
        Jt = dressed_hopping(params, T) / nat.E_R
    V0 = nat.kappa**2 / (nat.xi * nat.g)
    V = tuple(V0 * math.exp(-2 * d / nat.xi) for d in range(d_max + 1))
    return HubbardTerms(
        J_tilde=Jt,
        U_tilde=nat.U - 2 * E_p,
        mu_tilde=nat.mu + nat.kappa * nat.n0 - E_p,
        V=V,
        d_max=d_max,
        E_R=nat.E_R,
    )


@dataclass(frozen=True)
class HamiltonianMatrix:
    """Sparse CSR matrix of the effective Hamiltonian in units of ``energy_unit`` (J)."""

    matrix: sp.csr_matrix
    basis: FockBasis
    terms: HubbardTerms
    energy_unit: float

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def to_joules(self):
        return self.matrix * self.energy_unit


def _hops(basis: FockBasis, src: int, dst: int):
    """Move one boson src -> dst; returns (from, to, sqrt(n_src (n_dst + 1)))."""
    n = basis.states
    cap = basis.config.n_max
    ok = np.nonzero((n[:, src] > 0) & (n[:, dst] < cap))[0]
    moved = n[ok].copy()
    amp = np.sqrt(moved[:, src].astype(float) * (moved[:, dst].astype(float) + 1))
    moved[:, src] -= 1
    moved[:, dst] += 1
    return ok, basis.lookup(moved), amp


def _diagonal(basis: FockBasis, terms: HubbardTerms):
    n = basis.states.astype(float)
    M = basis.config.M
    diag = 0.5 * terms.U_tilde * np.sum(n * (n - 1), axis=1) + terms.mu_tilde * basis.config.N
    for d in range(1, terms.d_max + 1):
        pair = np.sum(n * np.roll(n, -d, axis=1), axis=1)
        if 2 * d == M:
            pair *= 0.5  # each antipodal pair was counted from both ends
        diag -= terms.V[d] * pair
    return diag


def build_hamiltonian(basis: FockBasis, params: SystemParams, d_max: int | None = None,
                      T: float = 0.0) -> HamiltonianMatrix:
    """Assemble the effective Hamiltonian on ``basis``.

    ``d_max`` defaults to the range where the exponential attraction falls
    below 1e-8 of its contact value.
    """
    M = basis.config.M
    terms = hubbard_terms(params, M, d_max, T)
    rows, cols, vals = [], [], []
    if terms.J_tilde != 0:
        for j in range(M):
            for src, dst in ((j, (j + 1) % M), ((j + 1) % M, j)):
                frm, to, amp = _hops(basis, src, dst)
                rows.append(to)
                cols.append(frm)
                vals.append(-terms.J_tilde * amp)
    diag = _diagonal(basis, terms)
    idx = np.arange(len(basis))
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    D = len(basis)
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(D, D))
    H.sum_duplicates()
    return HamiltonianMatrix(matrix=H, basis=basis, terms=terms, energy_unit=terms.E_R)


def shift_operator(basis: FockBasis) -> sp.csr_matrix:
    """Permutation matrix of the cyclic one-site translation n_j -> n_{j+1}."""
    target = basis.lookup(np.roll(basis.states, 1, axis=1))
    D = len(basis)
    return sp.csr_matrix((np.ones(D), (target, np.arange(D))), shape=(D, D))


# -- translation symmetry ------------------------------------------------------------


@dataclass(frozen=True)
class _Orbits:
    rep: np.ndarray  # basis ordinal of each state's representative
    shift: np.ndarray  # state = T^shift rep
    period: np.ndarray  # orbit length of each state


def _orbits(basis: FockBasis) -> _Orbits:
    M = basis.config.M
    D = len(basis)
    images = np.empty((D, M), dtype=np.int64)
    cur = basis.states
    for j in range(M):
        images[:, j] = basis.lookup(cur)
        cur = np.roll(cur, 1, axis=1)
    # images[:, j] is T^j s; the smallest ordinal in the orbit is the representative
    j_min = np.argmin(images, axis=1)
    rep = images[np.arange(D), j_min]
    shift = (-j_min) % M
    same = images == images[:, :1]
    same[:, 0] = False
    period = np.where(same.any(axis=1), np.argmax(same, axis=1), M)
    return _Orbits(rep=rep, shift=shift, period=period)


def _momentum_block(H: sp.csr_matrix, orb: _Orbits, M: int, m: int):
    """Dense block of H in the momentum sector k = 2 pi m / M, plus its representatives."""
    reps = np.unique(orb.rep)
    reps = reps[(m * orb.period[reps]) % M == 0]
    nb = len(reps)
    block = np.zeros((nb, nb), dtype=complex)
    if nb == 0:
        return block, reps
    pos = np.full(len(orb.rep), -1)
    pos[reps] = np.arange(nb)
    sub = H[:, reps].tocoo()
    tgt = pos[orb.rep[sub.row]]
    keep = tgt >= 0
    s = sub.row[keep]
    col = sub.col[keep]
    k = 2 * math.pi * m / M
    amp = sub.data[keep] * np.exp(1j * k * orb.shift[s]) * np.sqrt(orb.period[reps[col]] / orb.period[orb.rep[s]])
    np.add.at(block, (tgt[keep], col), amp)
    return 0.5 * (block + block.conj().T), reps


def _block_vectors(coeff, reps, orb: _Orbits, M: int, m: int, D: int):
    """Fock-space amplitudes of block eigenvectors (columns of ``coeff``)."""
    k = 2 * math.pi * m / M
    pos = np.full(D, -1)
    pos[reps] = np.arange(len(reps))
    members = np.nonzero(pos[orb.rep] >= 0)[0]
    out = np.zeros((D, coeff.shape[1]), dtype=complex)
    r = orb.rep[members]
    factor = np.exp(-1j * k * orb.shift[members]) / np.sqrt(orb.period[r])
    out[members] = coeff[pos[r]] * factor[:, None]
    return out


# -- spectra -----------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumResult:
    """Ascending eigenvalues (J) with optional Fock-space eigenvectors (columns).

    ``k_index`` holds the momentum sector m (k = 2 pi m / (M a)) of each
    eigenvalue when translation blocking was used.
    """

    energies: np.ndarray
    energy_unit: float
    vectors: Optional[np.ndarray] = field(default=None, repr=False)
    k_index: Optional[np.ndarray] = None
    basis: Optional[FockBasis] = field(default=None, repr=False)

    @property
    def energies_ER(self):
        return self.energies / self.energy_unit


def _lowest(H, n, vectors):
    D = H.shape[0]
    if n >= D - 1 or D <= 400:
        if D > FULL_DIAG_CAP:
            raise ValidationError(f"dense diagonalization needs dimension <= {FULL_DIAG_CAP}, got {D}", field="n_eigs")
        w, v = scipy.linalg.eigh(H.toarray())
        return w[:n], (v[:, :n] if vectors else None)
    v0 = np.random.default_rng(EIGSH_SEED).standard_normal(D)
    try:
        w, v = eigsh(H, k=n, which="SA", v0=v0, tol=0.0, maxiter=max(1000, 20 * D))
    except ArpackNoConvergence as exc:
        raise ConvergenceError(
            f"Lanczos found {len(exc.eigenvalues)} of {n} eigenpairs", achieved=len(exc.eigenvalues) / n
        ) from None
    order = np.argsort(w)
    return w[order], (v[:, order] if vectors else None)


def diagonalize(H: HamiltonianMatrix, n_eigs: int | str = "full", blocked: bool = False,
                vectors: bool = False) -> SpectrumResult:
    """Eigenvalues of H, lowest first.

    ``n_eigs="full"`` gives the whole spectrum (dense, dimension <= 6000
    unless blocked).  An integer asks for the low end only, found by
    implicitly restarted Lanczos.  With ``blocked=True`` the matrix is
    split into its M momentum sectors and each block is diagonalized
    densely; eigenvalues then carry their momentum label.
    """
    D = H.dimension
    full = n_eigs == "full" or n_eigs is None
    n = D if full else int(n_eigs)
    if not 1 <= n <= D:
        raise ValidationError(f"n_eigs must lie in [1, {D}], got {n_eigs!r}", field="n_eigs")
    unit = H.energy_unit
    if blocked:
        M = H.basis.config.M
        orb = _orbits(H.basis)
        es, ks, vs = [], [], []
        for m in range(M):
            block, reps = _momentum_block(H.matrix, orb, M, m)
            if len(reps) == 0:
                continue
            w, c = scipy.linalg.eigh(block)
            es.append(w)
            # block m holds eigenvectors of T with eigenvalue exp(2 pi i m / M),
            # i.e. amplitudes exp(-i k x): crystal momentum -m
            ks.append(np.full(len(w), (-m) % M))
            if vectors:
                vs.append(_block_vectors(c, reps, orb, M, m, D))
        e = np.concatenate(es)
        k = np.concatenate(ks)
        order = np.argsort(e, kind="stable")[:n]
        v = np.hstack(vs)[:, order] if vectors else None
        return SpectrumResult(energies=e[order] * unit, energy_unit=unit, vectors=v, k_index=k[order], basis=H.basis)
    if full:
        if D > FULL_DIAG_CAP:
            raise ValidationError(
                f"full spectrum needs dimension <= {FULL_DIAG_CAP} (got {D}); use blocked=True", field="n_eigs")
        if vectors:
            w, v = scipy.linalg.eigh(H.matrix.toarray())
        else:
            w, v = scipy.linalg.eigh(H.matrix.toarray(), eigvals_only=True), None
        return SpectrumResult(energies=w * unit, energy_unit=unit, vectors=v, basis=H.basis)
    w, v = _lowest(H.matrix, n, vectors)
    return SpectrumResult(energies=w * unit, energy_unit=unit, vectors=v, basis=H.basis)


def ground_energy(config: LatticeConfig, params: SystemParams, d_max: int | None = None) -> float:
    """Lowest eigenvalue (J) in the sector with ``config.N`` particles."""
    H = build_hamiltonian(build_basis(config), params, d_max)
    return float(diagonalize(H, n_eigs=1).energies[0])


def band_approximation(s: int, params: SystemParams, ka) -> np.ndarray:
    """Lowest band of an s-polaron cluster, -E_b(s) - 2 Jt^s V(1)^(1-s) cos(ka), in J.

    Energies are relative to s free polarons with mu' = 0, and
    E_b(s) = (s - 1) V(1).
    """
    if int(s) != s or s < 1:
        raise ValueError("cluster size must be a positive integer")
    terms = hubbard_terms(params, M=3)
    V1, Jt = terms.V[1], terms.J_tilde
    E = -(s - 1) * V1 - 2 * Jt**s * V1 ** (1 - s) * np.cos(np.asarray(ka, dtype=float))
    return E * terms.E_R


# -- thermal and ground-state observables ---------------------------------------------


@dataclass(frozen=True)
class ThermalObservables:
    T: float
    P3: float
    P2: float
    P_unbound: float
    corr: Optional[np.ndarray] = None
    nk: Optional[np.ndarray] = None
    thresholds_ok: bool = True


def boltzmann_weights(energies, T):
    """Canonical weights normalized to 1; at T = 0 the ground level is shared equally."""
    e = np.asarray(energies, dtype=float)
    e0 = e.min()
    if T <= 0:
        w = (np.abs(e - e0) <= 1e-12 * max(abs(e0), np.abs(e).max(), 1e-300)).astype(float)
    else:
        w = np.exp(-(e - e0) / (K_B * T))
    return w / w.sum()


def cluster_probabilities(spectrum: SpectrumResult, thresholds, T: float) -> ThermalObservables:
    """Split the Boltzmann weight of an N = 3 spectrum into bound-cluster classes.

    ``thresholds`` is (E_g(1), E_g(2), E_g(3)) in J.  P3 collects states
    below E_g(2) + E_g(1), P2 those in [E_g(2) + E_g(1), 3 E_g(1)) and the
    rest count as unbound.
    """
    Eg1, Eg2, Eg3 = map(float, thresholds)
    lo, hi = Eg2 + Eg1, 3 * Eg1
    ok = Eg3 < lo <= hi
    if not ok:
        warnings.warn(
            f"cluster thresholds out of order (E_g(3)={Eg3:.4g}, E_g(2)+E_g(1)={lo:.4g}, 3E_g(1)={hi:.4g});"
            " parameters are outside the cluster regime", stacklevel=2)
    e = spectrum.energies
    w = boltzmann_weights(e, T)
    P3 = float(w[e < lo].sum())
    P2 = float(w[(e >= lo) & (e < hi)].sum())
    Pu = float(w[e >= hi].sum())
    return ThermalObservables(T=T, P3=P3, P2=P2, P_unbound=Pu, thresholds_ok=ok)


def _state_weights(vectors, weights=None):
    v = np.asarray(vectors)
    if v.ndim == 1:
        v = v[:, None]
    if weights is None:
        weights = np.zeros(v.shape[1])
        weights[0] = 1.0
    return v, np.asarray(weights, dtype=float)


def density_density_correlation(vectors, basis: FockBasis, weights=None) -> np.ndarray:
    """Translation-averaged <n_i n_{i+j}> for j = 0..M-1.

    ``vectors`` is one state or a matrix of columns mixed with ``weights``
    (default: the first column only).
    """
    v, w = _state_weights(vectors, weights)
    prob = (np.abs(v) ** 2) @ w
    n = basis.states.astype(float)
    M = basis.config.M
    return np.array([prob @ np.sum(n * np.roll(n, -j, axis=1), axis=1) for j in range(M)]) / M


def one_body_density_matrix(vectors, basis: FockBasis, weights=None) -> np.ndarray:
    """rho_ij = <a_i^dag a_j> (complex Hermitian M x M)."""
    v, w = _state_weights(vectors, weights)
    M = basis.config.M
    rho = np.zeros((M, M), dtype=complex)
    n = basis.states.astype(float)
    prob = (np.abs(v) ** 2) @ w
    rho[np.diag_indices(M)] = prob @ n
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            frm, to, amp = _hops(basis, j, i)
            keep = to >= 0
            frm, to, amp = frm[keep], to[keep], amp[keep]
            rho[i, j] = np.sum((np.conj(v[to]) * v[frm]) @ w * amp)
    return rho


def momentum_distribution(vectors, basis: FockBasis, weights=None) -> np.ndarray:
    """<n_k> = (1/M) sum_ij exp(i k a (i - j)) <a_i^dag a_j> for k = 2 pi m / (M a), m = 0..M-1."""
    rho = one_body_density_matrix(vectors, basis, weights)
    M = basis.config.M
    x = np.arange(M)
    phase = np.exp(2j * np.pi * np.outer(np.arange(M), x) / M)  # phase[m, i]
    nk = np.einsum("mi,ij,mj->m", phase, rho, np.conj(phase)) / M
    return nk.real


def participation_ratio(nk) -> float:
    """(sum n_k)^2 / sum n_k^2: number of momenta effectively occupied."""
    nk = np.asarray(nk, dtype=float)
    return float(nk.sum() ** 2 / np.sum(nk * nk))


def k_order(M):
    """Momentum labels m = 0..M-1 mapped to the centered range, for output."""
    m = np.arange(M)
    return np.where(m > M // 2, m - M, m)
