"""Dense Hermitian matrix algebra for block-indexed two-particle spaces.

Two-particle quantities are kept in a spin-adapted form: a singlet block on
symmetric site pairs (i1 <= i2) and a triplet block on antisymmetric site
pairs (i1 < i2).  Both blocks are matrix representations in orthonormal pair
bases, so Hilbert-Schmidt inner products, traces and spectra agree with the
corresponding full spin-orbital objects restricted to those subspaces.

The module also provides the partial-trace (contraction) maps of the blocks
down to the one-particle space, realized as explicit matrices, and the
numerically constructed projectors onto their kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

HERMITICITY_ATOL = 1e-13

# eigenvalues above -EPS_NEG_SCALE * max|eig| are treated as zero noise
EPS_NEG_SCALE = 1e-14


def check_hermitian(h: np.ndarray, atol: float = HERMITICITY_ATOL, name: str = "matrix") -> None:
    """Raise ValueError if ``h`` is not square Hermitian within ``atol``."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"{name} must be square, got shape {h.shape}")
    dev = np.max(np.abs(h - h.conj().T)) if h.size else 0.0
    if dev > atol:
        raise ValueError(f"{name} is not Hermitian: max deviation {dev:.3e} > {atol:.1e}")


def hs_inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Hilbert-Schmidt inner product Tr(a^dagger b).

    Real (up to roundoff) when both arguments are Hermitian.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in hs_inner: {a.shape} vs {b.shape}")
    return complex(np.sum(a.conj() * b))


def eigh(h: np.ndarray, atol: float = HERMITICITY_ATOL) -> tuple[np.ndarray, np.ndarray]:
    """Spectral decomposition of a Hermitian matrix.

    The input is validated against ``atol`` and symmetrized before the
    decomposition.  Returns eigenvalues in ascending order and the matrix of
    orthonormal eigenvector columns.
    """
    check_hermitian(h, atol=atol)
    hsym = 0.5 * (h + h.conj().T)
    vals, vecs = np.linalg.eigh(hsym)
    return vals, vecs


def negative_part(h: np.ndarray, atol: float = HERMITICITY_ATOL) -> tuple[np.ndarray, np.ndarray]:
    """Split a Hermitian matrix into its negative and non-negative parts.

    ``h = h_def + h_pos`` where ``h_def`` is assembled from the strictly
    negative eigenpairs (below the noise floor) and ``h_pos`` from the rest.
    """
    vals, vecs = eigh(h, atol=atol)
    eps = EPS_NEG_SCALE * max(1.0, float(np.max(np.abs(vals))) if vals.size else 0.0)
    neg = vals < -eps
    h_def = (vecs[:, neg] * vals[neg]) @ vecs[:, neg].conj().T
    return h_def, h - h_def


def min_eigenvalue(h: np.ndarray) -> float:
    vals = np.linalg.eigvalsh(0.5 * (h + h.conj().T))
    return float(vals[0])


# ---------------------------------------------------------------------------
# Pair bookkeeping for the spin-adapted blocks
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def sym_pairs(sites: int) -> tuple[tuple[int, int], ...]:
    """Site pairs (i, j) with i <= j indexing the singlet block."""
    return tuple((i, j) for i in range(sites) for j in range(i, sites))


@lru_cache(maxsize=None)
def asym_pairs(sites: int) -> tuple[tuple[int, int], ...]:
    """Site pairs (i, j) with i < j indexing the triplet block."""
    return tuple((i, j) for i in range(sites) for j in range(i + 1, sites))


def singlet_dim(sites: int) -> int:
    return sites * (sites + 1) // 2


def triplet_dim(sites: int) -> int:
    return sites * (sites - 1) // 2


@lru_cache(maxsize=None)
def singlet_embedding(sites: int) -> np.ndarray:
    """Orthonormal embedding of the singlet pair basis into ordered site pairs.

    Columns are the coefficient vectors of the symmetric pair-basis states in
    the ordered two-site product basis (row index i*sites + k).
    """
    m = sites
    cols = []
    for (i, j) in sym_pairs(m):
        v = np.zeros(m * m)
        if i == j:
            v[i * m + i] = 1.0
        else:
            v[i * m + j] = 1.0 / np.sqrt(2.0)
            v[j * m + i] = 1.0 / np.sqrt(2.0)
        cols.append(v)
    return np.array(cols).T.copy()


@lru_cache(maxsize=None)
def triplet_embedding(sites: int) -> np.ndarray:
    """Orthonormal embedding of the triplet pair basis into ordered site pairs."""
    m = sites
    cols = []
    for (i, j) in asym_pairs(m):
        v = np.zeros(m * m)
        v[i * m + j] = 1.0 / np.sqrt(2.0)
        v[j * m + i] = -1.0 / np.sqrt(2.0)
        cols.append(v)
    return np.array(cols).T.copy()


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class SpinBlock2RDM:
    """Two-particle RDM in spin-adapted block storage.

    ``singlet`` acts on symmetric site pairs, ``triplet`` on antisymmetric
    ones; the triplet block stands for all three degenerate m components of a
    total-spin-zero state, so the total two-particle trace is
    ``Tr(singlet) + 3 Tr(triplet) = N (N - 1)``.
    """

    singlet: np.ndarray
    triplet: np.ndarray
    particle_number: int
    sites: int

    def copy(self) -> "SpinBlock2RDM":
        return SpinBlock2RDM(self.singlet.copy(), self.triplet.copy(),
                             self.particle_number, self.sites)

    def total_trace(self) -> float:
        return float(np.trace(self.singlet).real + 3.0 * np.trace(self.triplet).real)

    def hermitize(self) -> "SpinBlock2RDM":
        return SpinBlock2RDM(0.5 * (self.singlet + self.singlet.conj().T),
                             0.5 * (self.triplet + self.triplet.conj().T),
                             self.particle_number, self.sites)

    def validate(self, atol: float = HERMITICITY_ATOL, trace_atol: float = 1e-10) -> None:
        m = self.sites
        if self.singlet.shape != (singlet_dim(m), singlet_dim(m)):
            raise ValueError(f"singlet block shape {self.singlet.shape} does not match {m} sites")
        if self.triplet.shape != (triplet_dim(m), triplet_dim(m)):
            raise ValueError(f"triplet block shape {self.triplet.shape} does not match {m} sites")
        check_hermitian(self.singlet, atol=atol, name="singlet block")
        check_hermitian(self.triplet, atol=atol, name="triplet block")
        n = self.particle_number
        expected = n * (n - 1)
        if abs(self.total_trace() - expected) > trace_atol:
            raise ValueError(
                f"total trace {self.total_trace():.12e} deviates from N(N-1)={expected}")


@dataclass
class OneRDM:
    """One-particle RDM per spin channel (spin-up equals spin-down)."""

    matrix: np.ndarray
    particle_number: int


def zero_like_blocks(sites: int, particle_number: int) -> SpinBlock2RDM:
    return SpinBlock2RDM(
        np.zeros((singlet_dim(sites),) * 2, dtype=complex),
        np.zeros((triplet_dim(sites),) * 2, dtype=complex),
        particle_number, sites)


# ---------------------------------------------------------------------------
# Block <-> spin-sector conversions
# ---------------------------------------------------------------------------

def blocks_to_mixed_sector(d: SpinBlock2RDM) -> np.ndarray:
    """Entries D^{(i up)(k down)}_{(j up)(l down)} as an (m^2, m^2) matrix.

    Row/column index is i*m + k for the ordered site pair (i, k).
    """
    bs = singlet_embedding(d.sites)
    bt = triplet_embedding(d.sites)
    return 0.5 * (bs @ d.singlet @ bs.T + bt @ d.triplet @ bt.T)


def blocks_to_upup_sector(d: SpinBlock2RDM) -> np.ndarray:
    """Entries D^{(i up)(k up)}_{(j up)(l up)} as an (m^2, m^2) matrix."""
    bt = triplet_embedding(d.sites)
    return bt @ d.triplet @ bt.T


def sectors_to_blocks(g: np.ndarray, sites: int, particle_number: int,
                      coherence_atol: float | None = None) -> SpinBlock2RDM:
    """Rebuild block storage from the mixed-spin sector matrix.

    ``coherence_atol``, when given, rejects inputs whose singlet-triplet
    coherence exceeds the tolerance (the storage cannot represent it).
    """
    bs = singlet_embedding(sites)
    bt = triplet_embedding(sites)
    singlet = 2.0 * (bs.T @ g @ bs)
    triplet = 2.0 * (bt.T @ g @ bt)
    if coherence_atol is not None:
        cross = 2.0 * (bs.T @ g @ bt)
        dev = np.max(np.abs(cross)) if cross.size else 0.0
        if dev > coherence_atol:
            raise ValueError(f"singlet-triplet coherence {dev:.3e} exceeds {coherence_atol:.1e}")
    return SpinBlock2RDM(singlet, triplet, particle_number, sites)


# ---------------------------------------------------------------------------
# Contraction to the one-particle space
# ---------------------------------------------------------------------------

def _contract_sectors(g: np.ndarray, a_uu: np.ndarray, sites: int) -> np.ndarray:
    m = sites
    g4 = g.reshape(m, m, m, m)
    a4 = a_uu.reshape(m, m, m, m)
    return np.einsum("ikjk->ij", g4) + np.einsum("ikjk->ij", a4)


def contract_2rdm(d: SpinBlock2RDM) -> OneRDM:
    """Partial trace of the 2RDM down to the one-particle space.

    Returns the per-spin one-particle RDM with the 1/(N-1) prefactor; its
    trace is N/2.
    """
    n = d.particle_number
    if n <= 1:
        raise ValueError(f"contraction requires at least two particles, got N={n}")
    g = blocks_to_mixed_sector(d)
    a_uu = blocks_to_upup_sector(d)
    rho = _contract_sectors(g, a_uu, d.sites) / (n - 1)
    return OneRDM(matrix=rho, particle_number=n)


@lru_cache(maxsize=None)
def build_contraction_map(sites: int, block: str) -> np.ndarray:
    """Partial-trace map of one block as an explicit matrix.

    Maps vec(block) to the flattened one-particle matrix holding that block's
    contribution to (N-1) * rho.  ``block`` is ``"singlet"`` or ``"triplet"``.
    """
    m = sites
    if block == "singlet":
        dim = singlet_dim(m)
    elif block == "triplet":
        dim = triplet_dim(m)
    else:
        raise ValueError(f"unknown block {block!r}")
    amap = np.zeros((m * m, dim * dim), dtype=complex)
    zero_s = np.zeros((singlet_dim(m),) * 2, dtype=complex)
    zero_t = np.zeros((triplet_dim(m),) * 2, dtype=complex)
    for col in range(dim * dim):
        basis = np.zeros((dim, dim), dtype=complex)
        basis[col // dim, col % dim] = 1.0
        if block == "singlet":
            probe = SpinBlock2RDM(basis, zero_t, 2, m)
        else:
            probe = SpinBlock2RDM(zero_s, basis, 2, m)
        g = blocks_to_mixed_sector(probe)
        a_uu = blocks_to_upup_sector(probe)
        amap[:, col] = _contract_sectors(g, a_uu, m).reshape(-1)
    return amap


def kernel_projector(amap: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Orthogonal projector onto the kernel of a linear map, I - pinv(A) A."""
    amap = np.asarray(amap, dtype=complex)
    return np.eye(amap.shape[1], dtype=complex) - np.linalg.pinv(amap, rcond=rcond) @ amap


@lru_cache(maxsize=None)
def block_kernel_projector(sites: int, block: str) -> np.ndarray:
    """Cached kernel projector of one block's contraction map."""
    return kernel_projector(build_contraction_map(sites, block))


def project_to_contraction_kernel(mat: np.ndarray, sites: int, block: str) -> np.ndarray:
    p = block_kernel_projector(sites, block)
    return (p @ mat.reshape(-1)).reshape(mat.shape)


@lru_cache(maxsize=None)
def joint_kernel_projector(sites: int) -> np.ndarray:
    """Kernel projector of the joint (singlet, triplet) contraction map.

    The map acts on the concatenation of vec(singlet) and sqrt(3) vec(triplet):
    the triplet block stands for three degenerate components, so its metric
    weight carries the multiplicity.  The kernel holds every update pair that
    leaves the one-particle RDM unchanged, including compensating singlet and
    triplet density shifts.
    """
    ls = build_contraction_map(sites, "singlet")
    lt = build_contraction_map(sites, "triplet")
    return kernel_projector(np.hstack([ls, lt / np.sqrt(3.0)]))


def project_pair_to_contraction_kernel(upd_s: np.ndarray, upd_t: np.ndarray,
                                       sites: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal projection of a block pair onto the joint contraction kernel."""
    p = joint_kernel_projector(sites)
    ns = upd_s.shape[0]
    vec = np.concatenate([upd_s.reshape(-1), np.sqrt(3.0) * upd_t.reshape(-1)])
    out = p @ vec
    return (out[:ns * ns].reshape(upd_s.shape),
            out[ns * ns:].reshape(upd_t.shape) / np.sqrt(3.0))
