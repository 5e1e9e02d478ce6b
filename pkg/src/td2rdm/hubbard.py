"""Fermi-Hubbard model definitions and observables.

One-dimensional chain with hard-wall boundaries at half filling, quenched
out of a harmonic trap that is active only for t < 0.  Site indices are
1-based inside the potential formula so the trap is centred at (M_s + 1)/2.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import matcore
from .matcore import SpinBlock2RDM


@dataclass(frozen=True)
class HubbardConfig:
    """Chain geometry and couplings; energies are in units of the hopping."""

    sites: int
    particles: int
    hopping: float = 1.0
    interaction: float = 0.0
    trap: float = 0.0

    def __post_init__(self):
        if self.sites < 2:
            raise ValueError("need at least two sites")
        if self.particles % 2 != 0:
            raise ValueError("particle number must be even (equal spin populations)")
        if self.hopping <= 0:
            raise ValueError("hopping amplitude must be positive")


@dataclass
class Observables:
    site_densities: np.ndarray
    interaction_energy: float
    eta: float
    total_energy: float


def h1_matrix(cfg: HubbardConfig, t: float) -> np.ndarray:
    """Single-particle Hamiltonian per spin at time t.

    Nearest-neighbour hopping -J with hard walls; the harmonic quench
    potential is present only for t < 0 (it vanishes at t = 0 exactly).
    """
    m = cfg.sites
    h = np.zeros((m, m), dtype=complex)
    for i in range(m - 1):
        h[i, i + 1] = -cfg.hopping
        h[i + 1, i] = -cfg.hopping
    if t < 0:
        centre = 0.5 * (m + 1)
        i = np.arange(1, m + 1, dtype=float)
        h[np.diag_indices(m)] = 0.5 * cfg.trap ** 2 * (i - centre) ** 2
    return h


def w12_action(cfg: HubbardConfig) -> np.ndarray:
    """Interaction on the singlet block: U on same-site pairs, zero elsewhere.

    The triplet block carries no interaction (opposite spins only).
    """
    pairs = matcore.sym_pairs(cfg.sites)
    diag = np.array([cfg.interaction if i == j else 0.0 for (i, j) in pairs])
    return np.diag(diag).astype(complex)


def interaction_energy(singlet: np.ndarray, cfg: HubbardConfig) -> float:
    """(U/2) * sum of same-site diagonal entries of the singlet block."""
    pairs = matcore.sym_pairs(cfg.sites)
    idx = [k for k, (i, j) in enumerate(pairs) if i == j]
    return float(0.5 * cfg.interaction * np.sum(singlet[idx, idx]).real)


def eta_expectation(singlet: np.ndarray, sites: int) -> float:
    """Pairing-symmetry expectation from the same-site pair sub-block."""
    pairs = matcore.sym_pairs(sites)
    idx = [k for k, (i, j) in enumerate(pairs) if i == j]
    sub = singlet[np.ix_(idx, idx)]
    signs = np.array([(-1) ** i for i in range(sites)], dtype=float)
    return float(0.5 * (signs @ sub @ signs).real)


def conserved_ops(cfg: HubbardConfig) -> tuple[np.ndarray, np.ndarray]:
    """Singlet-block operators whose HS inner products with the 2RDM give the
    interaction energy and the pairing expectation, respectively."""
    m = cfg.sites
    pairs = matcore.sym_pairs(m)
    idx = [k for k, (i, j) in enumerate(pairs) if i == j]
    nd = matcore.singlet_dim(m)
    x1 = np.zeros((nd, nd), dtype=complex)
    for k in idx:
        x1[k, k] = 0.5 * cfg.interaction
    x2 = np.zeros((nd, nd), dtype=complex)
    for a, ka in enumerate(idx):
        for b, kb in enumerate(idx):
            x2[ka, kb] = 0.5 * (-1) ** (a + b)
    return x1, x2


# ---------------------------------------------------------------------------
# Two-particle Hamiltonian blocks
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _h2_blocks_cached(sites: int, hopping: float, trap: float, trapped: bool,
                      interaction: float) -> tuple[np.ndarray, np.ndarray]:
    cfg = HubbardConfig(sites=sites, particles=2, hopping=hopping,
                        interaction=interaction, trap=trap)
    h1 = h1_matrix(cfg, -1.0 if trapped else 1.0)
    m = sites
    eye = np.eye(m)
    h4 = (np.einsum("ij,kl->ikjl", h1, eye) + np.einsum("ij,kl->ikjl", eye, h1)
          ).reshape(m * m, m * m)
    bs = matcore.singlet_embedding(m)
    bt = matcore.triplet_embedding(m)
    h2_s = bs.T @ h4 @ bs + w12_action(cfg)
    h2_t = bt.T @ h4 @ bt
    return h2_s, h2_t


def two_particle_hamiltonian_blocks(cfg: HubbardConfig, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(singlet, triplet) matrices of h1 + h2 + W12 in the block bases."""
    return _h2_blocks_cached(cfg.sites, cfg.hopping, cfg.trap, t < 0, cfg.interaction)


def observables_from_blocks(d: SpinBlock2RDM, cfg: HubbardConfig, t: float = 0.0) -> Observables:
    """Site densities, interaction energy, eta and total energy of a 2RDM."""
    rho = matcore.contract_2rdm(d).matrix
    h1 = h1_matrix(cfg, t)
    e_int = interaction_energy(d.singlet, cfg)
    e_tot = float(2.0 * np.trace(h1 @ rho).real + e_int)
    dens = 2.0 * np.diag(rho).real
    return Observables(site_densities=dens,
                       interaction_energy=e_int,
                       eta=eta_expectation(d.singlet, d.sites),
                       total_energy=e_tot)


# ---------------------------------------------------------------------------
# Full spin-orbital 2RDM <-> spin-adapted blocks
# ---------------------------------------------------------------------------

def _pair_state_matrix(sites: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficient vectors of the block basis states in the ordered
    spin-orbital pair basis (spin-orbital index = spin * sites + site)."""
    m = sites
    r = 2 * m

    def so(spin: int, site: int) -> int:
        return spin * m + site

    def pair_vec(a: int, b: int) -> np.ndarray:
        # antisymmetric two-particle state created by a^dagger_a a^dagger_b
        v = np.zeros(r * r)
        v[a * r + b] = 1.0 / np.sqrt(2.0)
        v[b * r + a] = -1.0 / np.sqrt(2.0)
        return v

    cols_s = []
    for (i, j) in matcore.sym_pairs(m):
        if i == j:
            cols_s.append(pair_vec(so(0, i), so(1, i)))
        else:
            cols_s.append((pair_vec(so(0, i), so(1, j)) - pair_vec(so(1, i), so(0, j)))
                          / np.sqrt(2.0))
    cols_t0, cols_tp, cols_tm = [], [], []
    for (i, j) in matcore.asym_pairs(m):
        cols_t0.append((pair_vec(so(0, i), so(1, j)) + pair_vec(so(1, i), so(0, j)))
                       / np.sqrt(2.0))
        cols_tp.append(pair_vec(so(0, i), so(0, j)))
        cols_tm.append(pair_vec(so(1, i), so(1, j)))
    es = np.array(cols_s).T
    et = np.stack([np.array(cols_t0).T, np.array(cols_tp).T, np.array(cols_tm).T])
    return es, et[0], np.stack([et[1], et[2]])


@lru_cache(maxsize=None)
def _pair_state_matrix_cached(sites: int):
    return _pair_state_matrix(sites)


def spin_blocks_from_spinorbital(d_full: np.ndarray, sites: int, particle_number: int,
                                 m_equality_atol: float = 1e-8) -> SpinBlock2RDM:
    """Project a full spin-orbital 2RDM onto the spin-adapted block storage.

    The input must carry the total-spin-zero structure: the three triplet m
    components have to agree within ``m_equality_atol``.
    """
    r = 2 * sites
    if d_full.shape != (r * r, r * r):
        raise ValueError(f"expected shape {(r * r, r * r)}, got {d_full.shape}")
    es, et0, etpm = _pair_state_matrix_cached(sites)
    singlet = es.T @ d_full @ es
    t0 = et0.T @ d_full @ et0
    tp = etpm[0].T @ d_full @ etpm[0]
    tm = etpm[1].T @ d_full @ etpm[1]
    dev = max(np.max(np.abs(t0 - tp)) if t0.size else 0.0,
              np.max(np.abs(t0 - tm)) if t0.size else 0.0)
    if dev > m_equality_atol:
        raise ValueError(
            f"triplet m components differ by {dev:.3e} (> {m_equality_atol:.1e}); "
            "input is not in the total-spin-zero structure")
    return SpinBlock2RDM(singlet, t0, particle_number, sites)


def spinorbital_from_spin_blocks(d: SpinBlock2RDM) -> np.ndarray:
    """Embed the block storage back into the full spin-orbital 2RDM."""
    es, et0, etpm = _pair_state_matrix_cached(d.sites)
    out = es @ d.singlet @ es.T
    for e in (et0, etpm[0], etpm[1]):
        out = out + e @ d.triplet @ e.T
    return out
