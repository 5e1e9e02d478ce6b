"""Exact-diagonalization reference for the Fermi-Hubbard chain.

Many-body states live in a fixed (n_up, n_down) sector spanned by occupation
bitmasks; spin orbitals are ordered with all spin-up sites before all
spin-down sites.  Reduced density matrices and their hole counterparts are
extracted directly from the defining operator strings, which makes this
module the convention oracle for everything else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from . import matcore
from .matcore import OneRDM, SpinBlock2RDM

DIMENSION_CAP = 10_000

UP, DOWN = 0, 1


@lru_cache(maxsize=None)
def _masks(sites: int, n: int) -> tuple[int, ...]:
    """All bitmasks with n set bits among ``sites`` positions, ascending."""
    masks = []
    for occ in combinations(range(sites), n):
        m = 0
        for o in occ:
            m |= 1 << o
        masks.append(m)
    return tuple(sorted(masks))


@lru_cache(maxsize=None)
def fock_basis(sites: int, n_up: int, n_down: int) -> "FockBasis":
    return FockBasis(sites, n_up, n_down)


class FockBasis:
    """Occupation-number basis of the (n_up, n_down) sector."""

    def __init__(self, sites: int, n_up: int, n_down: int):
        self.sites = sites
        self.n_up = n_up
        self.n_down = n_down
        self.up_masks = _masks(sites, n_up)
        self.down_masks = _masks(sites, n_down)
        self._up_index = {m: i for i, m in enumerate(self.up_masks)}
        self._down_index = {m: i for i, m in enumerate(self.down_masks)}
        self.dim = len(self.up_masks) * len(self.down_masks)

    def index(self, up_mask: int, down_mask: int) -> int:
        return self._up_index[up_mask] * len(self.down_masks) + self._down_index[down_mask]


@dataclass
class ManyBodyState:
    """Complex amplitudes over a FockBasis sector."""

    amplitudes: np.ndarray
    basis: FockBasis

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def _parity_below(mask: int, site: int) -> int:
    return bin(mask & ((1 << site) - 1)).count("1")


@lru_cache(maxsize=None)
def _annihilation_table(sites: int, n_up: int, n_down: int, spin: int, site: int):
    """(src_idx, dst_idx, sign) arrays for a_{site,spin} from the given sector."""
    src_basis = fock_basis(sites, n_up, n_down)
    if spin == UP:
        dst_basis = fock_basis(sites, n_up - 1, n_down)
    else:
        dst_basis = fock_basis(sites, n_up, n_down - 1)
    src, dst, sgn = [], [], []
    bit = 1 << site
    for iu, um in enumerate(src_basis.up_masks):
        for idn, dm in enumerate(src_basis.down_masks):
            if spin == UP:
                if not (um & bit):
                    continue
                sign = (-1) ** _parity_below(um, site)
                tgt = dst_basis.index(um ^ bit, dm)
            else:
                if not (dm & bit):
                    continue
                # down operators pass all up creation operators first
                sign = (-1) ** (n_up + _parity_below(dm, site))
                tgt = dst_basis.index(um, dm ^ bit)
            src.append(iu * len(src_basis.down_masks) + idn)
            dst.append(tgt)
            sgn.append(sign)
    return (np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp),
            np.array(sgn, dtype=float))


def apply_annihilation(state: ManyBodyState, spin: int, site: int) -> ManyBodyState:
    """Apply a_{site,spin} with fermionic signs."""
    b = state.basis
    n_up = b.n_up - (spin == UP)
    n_down = b.n_down - (spin == DOWN)
    if n_up < 0 or n_down < 0:
        raise ValueError("annihilation below the vacuum")
    src, dst, sgn = _annihilation_table(b.sites, b.n_up, b.n_down, spin, site)
    out = np.zeros(fock_basis(b.sites, n_up, n_down).dim, dtype=complex)
    out[dst] = sgn * state.amplitudes[src]
    return ManyBodyState(out, fock_basis(b.sites, n_up, n_down))


def apply_creation(state: ManyBodyState, spin: int, site: int) -> ManyBodyState:
    """Apply a^dagger_{site,spin} with fermionic signs."""
    b = state.basis
    n_up = b.n_up + (spin == UP)
    n_down = b.n_down + (spin == DOWN)
    if n_up > b.sites or n_down > b.sites:
        raise ValueError("creation beyond full occupation")
    # adjoint of the annihilation map from the target sector
    src, dst, sgn = _annihilation_table(b.sites, n_up, n_down, spin, site)
    out = np.zeros(fock_basis(b.sites, n_up, n_down).dim, dtype=complex)
    out[src] = sgn * state.amplitudes[dst]
    return ManyBodyState(out, fock_basis(b.sites, n_up, n_down))


# ---------------------------------------------------------------------------
# Hamiltonian and eigenstates
# ---------------------------------------------------------------------------

def _trap_profile(cfg) -> np.ndarray:
    m = cfg.sites
    centre = 0.5 * (m + 1)
    i = np.arange(1, m + 1, dtype=float)
    return 0.5 * cfg.trap ** 2 * (i - centre) ** 2


def build_hamiltonian(cfg, trapped: bool) -> np.ndarray:
    """Dense many-body Hamiltonian in the half-filled S_z = 0 sector."""
    m = cfg.sites
    n_half = cfg.particles // 2
    basis = fock_basis(m, n_half, n_half)
    if basis.dim > DIMENSION_CAP:
        raise ValueError(f"sector dimension {basis.dim} exceeds cap {DIMENSION_CAP}")
    n_dn = len(basis.down_masks)
    h = np.zeros((basis.dim, basis.dim), dtype=complex)

    trap = _trap_profile(cfg) if trapped else np.zeros(m)
    # diagonal: interaction + trap
    for iu, um in enumerate(basis.up_masks):
        for idn, dm in enumerate(basis.down_masks):
            row = iu * n_dn + idn
            docc = bin(um & dm).count("1")
            dens = sum(trap[s] * (((um >> s) & 1) + ((dm >> s) & 1)) for s in range(m))
            h[row, row] = cfg.interaction * docc + dens

    # hopping, spin up: acts on up masks only
    for iu, um in enumerate(basis.up_masks):
        for s in range(m - 1):
            b1, b2 = 1 << s, 1 << (s + 1)
            if bool(um & b1) != bool(um & b2):
                tm = um ^ b1 ^ b2
                ju = basis._up_index[tm]
                # sign from bits strictly between s and s+1: none for nearest neighbours
                for idn in range(n_dn):
                    h[ju * n_dn + idn, iu * n_dn + idn] += -cfg.hopping
    # hopping, spin down
    for idn, dm in enumerate(basis.down_masks):
        for s in range(m - 1):
            b1, b2 = 1 << s, 1 << (s + 1)
            if bool(dm & b1) != bool(dm & b2):
                tm = dm ^ b1 ^ b2
                jdn = basis._down_index[tm]
                for iu in range(len(basis.up_masks)):
                    h[iu * n_dn + jdn, iu * n_dn + idn] += -cfg.hopping
    return h


def ground_state(cfg, degeneracy_gap: float = 1e-10) -> ManyBodyState:
    """Lowest eigenvector of the trapped Hamiltonian.

    A ground-level degeneracy below ``degeneracy_gap`` is reported via a
    RuntimeWarning; the first eigenvector in LAPACK order is returned.
    """
    h = build_hamiltonian(cfg, trapped=True)
    vals, vecs = np.linalg.eigh(h)
    if len(vals) > 1 and vals[1] - vals[0] < degeneracy_gap:
        import warnings
        warnings.warn(f"ground level degenerate within {vals[1] - vals[0]:.2e}; "
                      "returning the first eigenvector", RuntimeWarning)
    n_half = cfg.particles // 2
    return ManyBodyState(vecs[:, 0].astype(complex), fock_basis(cfg.sites, n_half, n_half))


def ground_energy(cfg, trapped: bool = True) -> float:
    h = build_hamiltonian(cfg, trapped=trapped)
    return float(np.linalg.eigvalsh(h)[0])


def exact_propagate(psi: ManyBodyState, times: np.ndarray, cfg) -> np.ndarray:
    """Unitary evolution under the untrapped Hamiltonian.

    Returns an array of shape (len(times), dim) with the state at each time.
    """
    h = build_hamiltonian(cfg, trapped=False)
    vals, vecs = np.linalg.eigh(h)
    c0 = vecs.conj().T @ psi.amplitudes
    phases = np.exp(-1j * np.outer(np.asarray(times, dtype=float), vals))
    return (phases * c0) @ vecs.T


def total_spin_squared(psi: ManyBodyState) -> float:
    """<S^2> in the S_z = 0 sector via ladder operators."""
    b = psi.basis
    if b.n_up != b.n_down:
        raise ValueError("S^2 shortcut assumes the S_z = 0 sector")
    acc_plus = None
    acc_minus = None
    for s in range(b.sites):
        if b.n_down >= 1 and b.n_up + 1 <= b.sites:
            v = apply_creation(apply_annihilation(psi, DOWN, s), UP, s)
            acc_plus = v.amplitudes if acc_plus is None else acc_plus + v.amplitudes
        if b.n_up >= 1 and b.n_down + 1 <= b.sites:
            v = apply_creation(apply_annihilation(psi, UP, s), DOWN, s)
            acc_minus = v.amplitudes if acc_minus is None else acc_minus + v.amplitudes
    splus = float(np.vdot(acc_plus, acc_plus).real) if acc_plus is not None else 0.0
    sminus = float(np.vdot(acc_minus, acc_minus).real) if acc_minus is not None else 0.0
    return 0.5 * (splus + sminus)


# ---------------------------------------------------------------------------
# RDM extraction from operator strings
# ---------------------------------------------------------------------------

def extract_rdm1(psi: ManyBodyState, spin: int = UP) -> np.ndarray:
    """rho[i, j] = <a^dagger_{j,spin} a_{i,spin}> for one spin channel."""
    m = psi.basis.sites
    vecs = [apply_annihilation(psi, spin, s).amplitudes for s in range(m)]
    w = np.array(vecs).T  # columns indexed by site
    gram = w.conj().T @ w  # gram[j, i] = <a_j psi, a_i psi>
    return np.asarray(gram.conj())


def _singlet_pair_vectors(psi: ManyBodyState) -> np.ndarray:
    """Columns: singlet pair annihilators applied to psi, in sym_pairs order."""
    m = psi.basis.sites
    cols = []
    cache_up = {s: apply_annihilation(psi, UP, s) for s in range(m)}
    cache_dn = {s: apply_annihilation(psi, DOWN, s) for s in range(m)}
    for (i, j) in matcore.sym_pairs(m):
        if i == j:
            v = apply_annihilation(cache_up[i], DOWN, i).amplitudes
        else:
            v = (apply_annihilation(cache_up[i], DOWN, j).amplitudes
                 - apply_annihilation(cache_dn[i], UP, j).amplitudes) / np.sqrt(2.0)
        cols.append(v)
    return np.array(cols).T


def _triplet_pair_vectors(psi: ManyBodyState, component: int = 0) -> np.ndarray:
    """Triplet pair annihilators; component in {-1, 0, +1}."""
    m = psi.basis.sites
    cols = []
    for (i, j) in matcore.asym_pairs(m):
        if component == 0:
            v = (apply_annihilation(apply_annihilation(psi, UP, i), DOWN, j).amplitudes
                 + apply_annihilation(apply_annihilation(psi, DOWN, i), UP, j).amplitudes
                 ) / np.sqrt(2.0)
        elif component == 1:
            v = apply_annihilation(apply_annihilation(psi, UP, i), UP, j).amplitudes
        else:
            v = apply_annihilation(apply_annihilation(psi, DOWN, i), DOWN, j).amplitudes
        cols.append(v)
    return np.array(cols).T


def extract_rdm2_blocks(psi: ManyBodyState, triplet_component: int = 0) -> SpinBlock2RDM:
    """Spin-adapted 2RDM blocks from the operator-string definition."""
    n = psi.basis.n_up + psi.basis.n_down
    ws = _singlet_pair_vectors(psi)
    wt = _triplet_pair_vectors(psi, component=triplet_component)
    singlet = 2.0 * (ws.conj().T @ ws).conj()
    triplet = 2.0 * (wt.conj().T @ wt).conj()
    return SpinBlock2RDM(singlet, triplet, n, psi.basis.sites)


def extract_hole_rdm2_blocks(psi: ManyBodyState) -> SpinBlock2RDM:
    """Two-hole RDM blocks from the reversed operator ordering."""
    m = psi.basis.sites
    n = psi.basis.n_up + psi.basis.n_down
    cols_s = []
    cache_up = {s: apply_creation(psi, UP, s) for s in range(m)}
    cache_dn = {s: apply_creation(psi, DOWN, s) for s in range(m)}
    for (i, j) in matcore.sym_pairs(m):
        if i == j:
            # adjoint of b_{ii} = a_{i down} a_{i up}
            v = apply_creation(cache_dn[i], UP, i).amplitudes
        else:
            v = (apply_creation(cache_dn[j], UP, i).amplitudes
                 - apply_creation(cache_up[j], DOWN, i).amplitudes) / np.sqrt(2.0)
        cols_s.append(v)
    us = np.array(cols_s).T
    cols_t = []
    for (i, j) in matcore.asym_pairs(m):
        v = (apply_creation(apply_creation(psi, DOWN, j), UP, i).amplitudes
             + apply_creation(apply_creation(psi, UP, j), DOWN, i).amplitudes) / np.sqrt(2.0)
        cols_t.append(v)
    ut = np.array(cols_t).T
    singlet = 2.0 * (us.conj().T @ us)
    triplet = 2.0 * (ut.conj().T @ ut)
    return SpinBlock2RDM(singlet, triplet, n, m)


def extract_rdm2_spinorbital(psi: ManyBodyState) -> np.ndarray:
    """Full 2RDM on ordered spin-orbital pairs, shape (r^2, r^2), r = 2*sites.

    Spin-orbital index is spin * sites + site.
    """
    m = psi.basis.sites
    r = 2 * m
    singles = {a: apply_annihilation(psi, a // m, a % m) for a in range(r)}
    # pair annihilations of a fixed spin pattern land in one of three sectors;
    # collect them per sector and assemble the Grams blockwise
    by_sector: dict[tuple[int, int], list[tuple[int, np.ndarray]]] = {}
    for a in range(r):
        for b in range(r):
            if a == b:
                continue
            v = apply_annihilation(singles[a], b // m, b % m)
            by_sector.setdefault((v.basis.n_up, v.basis.n_down), []).append(
                (a * r + b, v.amplitudes))
    d_full = np.zeros((r * r, r * r), dtype=complex)
    for group in by_sector.values():
        idxs = [i for i, _ in group]
        w = np.array([v for _, v in group]).T
        gram = (w.conj().T @ w).conj()
        d_full[np.ix_(idxs, idxs)] = gram
    return d_full


def extract_rdm3_sectors(psi: ManyBodyState) -> dict[str, np.ndarray]:
    """3RDM sector arrays keyed by spin pattern of the canonical arrangement.

    Each array has axes (i1, i2, i3, j1, j2, j3); 'uud' holds the entries for
    upper/lower spins (up, up, down), 'udd' for (up, down, down), 'uuu' for
    all up.
    """
    m = psi.basis.sites
    out = {}
    patterns = {"uud": (UP, UP, DOWN), "udd": (UP, DOWN, DOWN), "uuu": (UP, UP, UP)}
    for name, (s1, s2, s3) in patterns.items():
        need_up = sum(1 for s in (s1, s2, s3) if s == UP)
        need_dn = 3 - need_up
        if psi.basis.n_up < need_up or psi.basis.n_down < need_dn:
            out[name] = np.zeros((m,) * 6, dtype=complex)
            continue
        cols = []
        for i1 in range(m):
            v1 = apply_annihilation(psi, s1, i1)
            for i2 in range(m):
                v2 = apply_annihilation(v1, s2, i2)
                for i3 in range(m):
                    cols.append(apply_annihilation(v2, s3, i3).amplitudes)
        w = np.array(cols).T
        gram = (w.conj().T @ w).conj()
        out[name] = gram.reshape((m,) * 6)
    return out


def extract_rdm(psi: ManyBodyState, p: int):
    """Dispatch on RDM order: p=1 OneRDM, p=2 blocks, p=3 sector dict."""
    if p == 1:
        n = psi.basis.n_up + psi.basis.n_down
        return OneRDM(matrix=extract_rdm1(psi), particle_number=n)
    if p == 2:
        return extract_rdm2_blocks(psi)
    if p == 3:
        return extract_rdm3_sectors(psi)
    raise ValueError(f"unsupported RDM order p={p}")


def extract_hole_rdm(psi: ManyBodyState, p: int = 2) -> SpinBlock2RDM:
    if p != 2:
        raise ValueError("hole RDM extraction implemented for p=2 only")
    return extract_hole_rdm2_blocks(psi)


def site_densities(psi: ManyBodyState) -> np.ndarray:
    """Total density per site (both spins)."""
    b = psi.basis
    dens = np.zeros(b.sites)
    prob = np.abs(psi.amplitudes) ** 2
    n_dn = len(b.down_masks)
    for iu, um in enumerate(b.up_masks):
        for idn, dm in enumerate(b.down_masks):
            p = prob[iu * n_dn + idn]
            if p == 0.0:
                continue
            for s in range(b.sites):
                dens[s] += p * (((um >> s) & 1) + ((dm >> s) & 1))
    return dens


def density_series(psi: ManyBodyState, times: np.ndarray, cfg) -> np.ndarray:
    """Site densities along the untrapped exact evolution, shape (nt, sites)."""
    h = build_hamiltonian(cfg, trapped=False)
    vals, vecs = np.linalg.eigh(h)
    b = psi.basis
    n_dn = len(b.down_masks)
    occ = np.zeros((b.dim, b.sites))
    for iu, um in enumerate(b.up_masks):
        for idn, dm in enumerate(b.down_masks):
            for s in range(b.sites):
                occ[iu * n_dn + idn, s] = ((um >> s) & 1) + ((dm >> s) & 1)
    c0 = vecs.conj().T @ psi.amplitudes
    phases = np.exp(-1j * np.outer(vals, np.asarray(times, dtype=float)))
    states = vecs @ (phases * c0[:, None])  # (dim, nt)
    return (np.abs(states) ** 2).T @ occ
