"""Closure of the two-particle equation of motion.

The three-particle RDM is rebuilt from the one-particle RDM and the
two-particle cumulant with the three-particle cumulant set to zero, then
corrected so its partial trace reproduces (N-2) times the two-particle RDM.
Only the spin sectors entering the collision term under the S_z = 0
restriction are stored: canonical arrangements (up,up,down), (up,down,down)
and (up,up,up); the remaining sectors follow from permutation signs and the
up/down symmetry of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import matcore
from .matcore import OneRDM, SpinBlock2RDM


@dataclass
class ThreeRDM:
    """Spin-resolved three-particle matrix, canonical sector arrays.

    Each array has axes (i1, i2, i3, j1, j2, j3) over sites; the name
    records the spin pattern shared by upper and lower index triples.
    """

    uuu: np.ndarray
    uud: np.ndarray
    udd: np.ndarray
    sites: int
    particle_number: int

    def copy(self) -> "ThreeRDM":
        return ThreeRDM(self.uuu.copy(), self.uud.copy(), self.udd.copy(),
                        self.sites, self.particle_number)


# ---------------------------------------------------------------------------
# Cumulant of the 2RDM
# ---------------------------------------------------------------------------

def _sector_cumulants(rho: np.ndarray, g4: np.ndarray, a4: np.ndarray):
    """Mixed and like-spin cumulant arrays from sector entries."""
    mean_g = np.einsum("ij,kl->ikjl", rho, rho)
    mean_uu = mean_g - np.einsum("il,kj->ikjl", rho, rho)
    return g4 - mean_g, a4 - mean_uu


def cumulant_delta12(d1: OneRDM, d12: SpinBlock2RDM) -> SpinBlock2RDM:
    """Connected part of the 2RDM after removing the mean-field product.

    Vanishes identically for Slater determinants.  Returned in the same
    block storage as the input (the container's trace bookkeeping does not
    apply to a cumulant).
    """
    m = d12.sites
    rho = d1.matrix
    g4 = matcore.blocks_to_mixed_sector(d12).reshape(m, m, m, m)
    a4 = matcore.blocks_to_upup_sector(d12).reshape(m, m, m, m)
    dg, _ = _sector_cumulants(rho, g4, a4)
    bs = matcore.singlet_embedding(m)
    bt = matcore.triplet_embedding(m)
    dg_mat = dg.reshape(m * m, m * m)
    return SpinBlock2RDM(2.0 * (bs.T @ dg_mat @ bs), 2.0 * (bt.T @ dg_mat @ bt),
                         d12.particle_number, m)


# ---------------------------------------------------------------------------
# Zero-three-cumulant reconstruction
# ---------------------------------------------------------------------------

def _outer(pair4: np.ndarray, axes4: tuple[int, ...],
           single: np.ndarray, axes2: tuple[int, ...]) -> np.ndarray:
    """Broadcast product of a 4-index and a 2-index array into six axes.

    Both operands must carry their axes in ascending target order (true for
    every pattern used here), so a reshape suffices.
    """
    m = single.shape[0]
    s4 = tuple(m if i in axes4 else 1 for i in range(6))
    s2 = tuple(m if i in axes2 else 1 for i in range(6))
    return pair4.reshape(s4) * single.reshape(s2)


_AD, _AE, _AF = (0, 3), (0, 4), (0, 5)
_BD, _BE, _BF = (1, 3), (1, 4), (1, 5)
_CD, _CE, _CF = (2, 3), (2, 4), (2, 5)
_ABDE, _ABDF, _ABEF = (0, 1, 3, 4), (0, 1, 3, 5), (0, 1, 4, 5)
_ACDE, _ACDF, _ACEF = (0, 2, 3, 4), (0, 2, 3, 5), (0, 2, 4, 5)
_BCDE, _BCDF, _BCEF = (1, 2, 3, 4), (1, 2, 3, 5), (1, 2, 4, 5)


def _reconstruct_sectors(rho: np.ndarray, dg: np.ndarray, duu: np.ndarray):
    """Sector arrays of the reconstructed 3RDM from rho and the cumulants."""
    wedge2 = np.einsum("ad,be->abde", rho, rho) - np.einsum("ae,bd->abde", rho, rho)

    # (up, up, down): determinant part plus cumulant-times-rho corrections
    f_uud = _outer(wedge2 + duu, _ABDE, rho, _CF)
    f_uud += _outer(dg, _BCEF, rho, _AD)
    f_uud -= _outer(dg, _BCDF, rho, _AE)
    f_uud -= _outer(dg, _ACEF, rho, _BD)
    f_uud += _outer(dg, _ACDF, rho, _BE)

    # (up, down, down)
    f_udd = _outer(wedge2 + duu, _BCEF, rho, _AD)
    f_udd += _outer(dg, _ACDF, rho, _BE)
    f_udd -= _outer(dg, _ACDE, rho, _BF)
    f_udd -= _outer(dg, _ABDF, rho, _CE)
    f_udd += _outer(dg, _ABDE, rho, _CF)

    # (up, up, up): full six-term determinant plus nine cumulant terms
    w = wedge2 + duu
    f_uuu = _outer(w, _ABDE, rho, _CF)
    f_uuu -= _outer(w, _ABDF, rho, _CE)
    f_uuu += _outer(w, _ABEF, rho, _CD)
    f_uuu += _outer(duu, _BCEF, rho, _AD)
    f_uuu -= _outer(duu, _BCDF, rho, _AE)
    f_uuu += _outer(duu, _BCDE, rho, _AF)
    f_uuu -= _outer(duu, _ACEF, rho, _BD)
    f_uuu += _outer(duu, _ACDF, rho, _BE)
    f_uuu -= _outer(duu, _ACDE, rho, _BF)
    return f_uuu, f_uud, f_udd


def valdemoro_d123(d1: OneRDM, d12: SpinBlock2RDM) -> ThreeRDM:
    """Cumulant-based 3RDM with the three-particle cumulant set to zero.

    Exact for Slater determinants; correlated inputs require the subsequent
    contraction fix.
    """
    m = d12.sites
    rho = d1.matrix
    g4 = matcore.blocks_to_mixed_sector(d12).reshape(m, m, m, m)
    a4 = matcore.blocks_to_upup_sector(d12).reshape(m, m, m, m)
    dg, duu = _sector_cumulants(rho, g4, a4)
    f_uuu, f_uud, f_udd = _reconstruct_sectors(rho, dg, duu)
    return ThreeRDM(f_uuu, f_uud, f_udd, m, d12.particle_number)


# ---------------------------------------------------------------------------
# Contraction over the third particle
# ---------------------------------------------------------------------------

def trace3_sectors(d123: ThreeRDM) -> tuple[np.ndarray, np.ndarray]:
    """Partial traces (mixed, like-spin) of the 3RDM over its third slot.

    The mixed result matches axes (i1, i2, j1, j2) of the (up, down) sector;
    the like-spin result those of the (up, up) sector.
    """
    tr_mixed = (np.einsum("akbdke->abde", d123.uud)
                + np.einsum("abkdek->abde", d123.udd))
    tr_uu = (np.einsum("abkdek->abde", d123.uuu)
             + np.einsum("abkdek->abde", d123.uud))
    return tr_mixed, tr_uu


def _wedge_identity_g(x: np.ndarray, m: int) -> np.ndarray:
    eye = np.eye(m)
    return np.einsum("ij,kl->ikjl", eye, x) + np.einsum("ij,kl->ikjl", x, eye)


def _wedge_identity_uu(x: np.ndarray, m: int) -> np.ndarray:
    eye = np.eye(m)
    return (np.einsum("ij,kl->ikjl", eye, x) + np.einsum("ij,kl->ikjl", x, eye)
            - np.einsum("il,kj->ikjl", eye, x) - np.einsum("il,kj->ikjl", x, eye))


def _lift_from_pair(z_g: np.ndarray, z_uu: np.ndarray, m: int):
    """Antisymmetrized lift of a two-particle pair into the 3RDM sectors."""
    eye = np.eye(m)
    c_uud = (_outer(z_g, _BCEF, eye, _AD) - _outer(z_g, _BCDF, eye, _AE)
             - _outer(z_g, _ACEF, eye, _BD) + _outer(z_g, _ACDF, eye, _BE)
             + _outer(z_uu, _ABDE, eye, _CF)) / 9.0
    c_udd = (_outer(z_uu, _BCEF, eye, _AD)
             + _outer(z_g, _ACDF, eye, _BE) - _outer(z_g, _ACDE, eye, _BF)
             - _outer(z_g, _ABDF, eye, _CE) + _outer(z_g, _ABDE, eye, _CF)) / 9.0
    c_uuu = (_outer(z_uu, _BCEF, eye, _AD) - _outer(z_uu, _BCDF, eye, _AE)
             + _outer(z_uu, _BCDE, eye, _AF)
             - _outer(z_uu, _ACEF, eye, _BD) + _outer(z_uu, _ACDF, eye, _BE)
             - _outer(z_uu, _ACDE, eye, _BF)
             + _outer(z_uu, _ABEF, eye, _CD) - _outer(z_uu, _ABDF, eye, _CE)
             + _outer(z_uu, _ABDE, eye, _CF)) / 9.0
    return c_uuu, c_uud, c_udd


def _gram_action(x_g: np.ndarray, x_uu: np.ndarray, m: int):
    """Action of contraction-after-lift on a two-particle pair."""
    r = 2 * m
    tr2 = np.einsum("ikjk->ij", x_uu) + np.einsum("ikjk->ij", x_g)
    y_g = ((r - 4) * x_g + _wedge_identity_g(tr2, m)) / 9.0
    y_uu = ((r - 4) * x_uu + _wedge_identity_uu(tr2, m)) / 9.0
    return y_g, y_uu


def _antisym_pair_basis(m: int) -> list[np.ndarray]:
    """Basis of 4-index arrays antisymmetric in both index pairs."""
    packed = [(i, k) for i in range(m) for k in range(i + 1, m)]
    basis = []
    for (p1, p2) in packed:
        for (q1, q2) in packed:
            e = np.zeros((m, m, m, m))
            e[p1, p2, q1, q2] = 1.0
            e[p2, p1, q1, q2] = -1.0
            e[p1, p2, q2, q1] = -1.0
            e[p2, p1, q2, q1] = 1.0
            basis.append(e)
    return basis


def _lift_then_trace(z_g: np.ndarray, z_uu: np.ndarray, m: int) -> np.ndarray:
    c_uuu, c_uud, c_udd = _lift_from_pair(z_g, z_uu, m)
    probe = ThreeRDM(c_uuu, c_uud, c_udd, m, 0)
    t_mixed, t_uu = trace3_sectors(probe)
    return np.concatenate([t_mixed.reshape(-1), t_uu.reshape(-1)])


@lru_cache(maxsize=None)
def _gram_pinv_small(m: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Pseudoinverse of the lift normal-equation operator for tiny lattices.

    Assembled as the literal composition of the lift and the partial trace;
    the like-spin component is parameterized on the antisymmetric subspace.
    """
    nv = m ** 4
    shape4 = (m, m, m, m)
    uu_basis = _antisym_pair_basis(m)
    cols = []
    zero = np.zeros(shape4, dtype=complex)
    for col in range(nv):
        probe_g = np.zeros(shape4, dtype=complex)
        probe_g.reshape(-1)[col] = 1.0
        cols.append(_lift_then_trace(probe_g, zero, m))
    for e in uu_basis:
        cols.append(_lift_then_trace(zero, e.astype(complex), m))
    mat = np.array(cols).T
    return np.linalg.pinv(mat, rcond=1e-12), (nv, len(uu_basis))


def _solve_lift_equation(r_g: np.ndarray, r_uu: np.ndarray, m: int):
    """Solve the normal equations of the minimal-norm contraction correction."""
    r = 2 * m
    if r > 4:
        tr2 = np.einsum("ikjk->ij", r_uu) + np.einsum("ikjk->ij", r_g)
        total = 2.0 * np.trace(tr2)
        s = 9.0 * total / (3 * r - 6)
        z1 = (9.0 * tr2 - s * np.eye(m)) / (2 * r - 6)
        z_g = (9.0 * r_g - _wedge_identity_g(z1, m)) / (r - 4)
        z_uu = (9.0 * r_uu - _wedge_identity_uu(z1, m)) / (r - 4)
        return z_g, z_uu
    # four spin orbitals: the operator is singular, solve in least squares
    nv = m ** 4
    shape4 = (m, m, m, m)
    pinv, (n_g, n_uu) = _gram_pinv_small(m)
    rhs = np.concatenate([r_g.reshape(-1), r_uu.reshape(-1)])
    coeff = pinv @ rhs
    z_g = coeff[:n_g].reshape(shape4)
    z_uu = np.zeros(shape4, dtype=complex)
    for c, e in zip(coeff[n_g:], _antisym_pair_basis(m)):
        z_uu += c * e
    return z_g, z_uu


def fix_contraction_d123(d123_raw: ThreeRDM, d12: SpinBlock2RDM) -> ThreeRDM:
    """Restore the contraction of the 3RDM with the least-norm correction.

    The deficit against (N-2) times the 2RDM is lifted back into the
    three-particle space orthogonally to the kernel of the partial trace,
    preserving Hermiticity and exchange antisymmetry.
    """
    m = d123_raw.sites
    n = d12.particle_number
    g4 = matcore.blocks_to_mixed_sector(d12).reshape(m, m, m, m)
    a4 = matcore.blocks_to_upup_sector(d12).reshape(m, m, m, m)
    tr_mixed, tr_uu = trace3_sectors(d123_raw)
    r_g = (n - 2) * g4 - tr_mixed
    r_uu = (n - 2) * a4 - tr_uu
    z_g, z_uu = _solve_lift_equation(r_g, r_uu, m)
    c_uuu, c_uud, c_udd = _lift_from_pair(z_g, z_uu, m)
    return ThreeRDM(d123_raw.uuu + c_uuu, d123_raw.uud + c_uud,
                    d123_raw.udd + c_udd, m, d123_raw.particle_number)


def reconstructed_d123(d12: SpinBlock2RDM) -> ThreeRDM:
    """Convenience path: cumulant reconstruction followed by the fix."""
    d1 = matcore.contract_2rdm(d12)
    return fix_contraction_d123(valdemoro_d123(d1, d12), d12)
