"""Projective purification of spin-adapted two-particle RDMs.

The engine restores positive semidefiniteness of the particle and hole RDMs
by alternating projections: negative-part extraction on all blocks, the
particle/hole coupling average, projection onto the kernel of the partial
trace, and removal of the components along orthonormalized conserved
operators.  A steering factor scales the update each iteration; by default
the loop additionally extrapolates through its recent history, which cuts
the iteration count sharply when the positivity cones meet the admissible
plane at a small angle.

A generalized engine accepts arbitrary affine positivity constraints and
reproduces the specialized path when fed the particle/hole relation alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .matcore import SpinBlock2RDM

DEFECT_TOL_SCALE = 1e-12
GRAM_SCHMIDT_DROP_TOL = 1e-10


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class MVector:
    """Particle/hole pair iterated by the purification loop."""

    d: SpinBlock2RDM
    q: SpinBlock2RDM

    @classmethod
    def from_particle(cls, d: SpinBlock2RDM) -> "MVector":
        return cls(d=d.copy(), q=hole_from_particle(d))


@dataclass
class ConservedOperatorSet:
    """Raw operators and their kernel-projected orthonormal counterparts."""

    raw: list[np.ndarray]
    ortho: list[np.ndarray]


@dataclass
class PurificationConfig:
    """Steering and stopping control for the purification loop.

    ``alpha`` scales the steered projection step.  With ``accelerate`` set
    (default), iterates are extrapolated through the history of the last
    ``window`` steered steps (Anderson mixing); a candidate is accepted only
    if it does not increase the defect, with a halved-step fallback, so the
    recorded defect sequence is non-increasing.  With ``accelerate`` off the
    loop is the plain constant-factor iteration.
    """

    alpha: float = 2.0
    k_max: int = 100
    defect_tol: float | None = None  # None: 1e-12 * total 2RDM trace
    accelerate: bool = True
    window: int = 5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("steering factor must be positive")
        if self.k_max < 1:
            raise ValueError("need at least one allowed iteration")
        if self.window < 1:
            raise ValueError("extrapolation window must be positive")

    def resolved_tol(self, d: SpinBlock2RDM) -> float:
        if self.defect_tol is not None:
            return self.defect_tol
        return DEFECT_TOL_SCALE * abs(d.total_trace())


@dataclass
class PurificationReport:
    iterations_used: int
    defect_initial: float
    defect_final: float
    per_iteration_defects: list[float] = field(default_factory=list)
    converged: bool = False


@dataclass
class AffineConstraint:
    """Positivity constraint M = offset + linmap[D] >= 0 for the generic engine.

    ``linmap`` is an explicit matrix acting on the flattened D-space;
    ``block_dims`` gives the Hermitian block layout of the constraint space.
    """

    offset: np.ndarray
    linmap: np.ndarray
    block_dims: tuple[int, ...]


# ---------------------------------------------------------------------------
# Hole RDM from the particle RDM
# ---------------------------------------------------------------------------

def hole_from_particle(d: SpinBlock2RDM) -> SpinBlock2RDM:
    """Two-hole RDM blocks from the particle blocks.

    Uses the operator-reordering identity: identity terms, one-particle
    cross terms and the particle RDM itself, evaluated per spin sector and
    recompressed into block storage.
    """
    m = d.sites
    n = d.particle_number
    g = matcore.blocks_to_mixed_sector(d).reshape(m, m, m, m)
    a_uu = matcore.blocks_to_upup_sector(d).reshape(m, m, m, m)
    if n == 0:
        rho = np.zeros((m, m), dtype=complex)
    elif n == 1:
        raise ValueError("hole construction undefined for a single particle here")
    else:
        rho = matcore.contract_2rdm(d).matrix
    eye = np.eye(m)

    # mixed sector: no exchange deltas (opposite spins)
    q_g = (np.einsum("ij,kl->ikjl", eye, eye)
           - np.einsum("kl,ij->ikjl", eye, rho)
           - np.einsum("ij,kl->ikjl", eye, rho)
           + g)
    # like-spin sector: full antisymmetrized identity and cross terms
    q_uu = (np.einsum("ij,kl->ikjl", eye, eye) - np.einsum("il,kj->ikjl", eye, eye)
            - np.einsum("kl,ij->ikjl", eye, rho) - np.einsum("ij,kl->ikjl", eye, rho)
            + np.einsum("il,kj->ikjl", eye, rho) + np.einsum("kj,il->ikjl", eye, rho)
            + a_uu)

    bs = matcore.singlet_embedding(m)
    bt = matcore.triplet_embedding(m)
    q_g_mat = q_g.reshape(m * m, m * m)
    q_singlet = 2.0 * (bs.T @ q_g_mat @ bs)
    q_triplet = bt.T @ q_uu.reshape(m * m, m * m) @ bt  # equals the mixed-sector route
    n_holes = 2 * m - n
    return SpinBlock2RDM(q_singlet, q_triplet, n_holes, m)


def dq_couple(d_def: np.ndarray, q_def: np.ndarray) -> np.ndarray:
    """Average of particle and hole defective parts (pair order two)."""
    if d_def.shape != q_def.shape:
        raise ValueError(f"block shape mismatch: {d_def.shape} vs {q_def.shape}")
    return 0.5 * (d_def + q_def)


# ---------------------------------------------------------------------------
# Conserved-operator handling
# ---------------------------------------------------------------------------

def build_conserved_set(xs: list[np.ndarray], sites: int,
                        block: str = "singlet") -> ConservedOperatorSet:
    """Kernel-project and orthonormalize conserved operators.

    Gram-Schmidt runs with the Hilbert-Schmidt inner product; residuals with
    norm below the drop tolerance are discarded as linearly dependent.
    """
    if not xs:
        raise ValueError("need at least one operator")
    dims = {x.shape for x in xs}
    if len(dims) != 1:
        raise ValueError(f"operators live on different spaces: {dims}")
    ortho: list[np.ndarray] = []
    for x in xs:
        y = matcore.project_to_contraction_kernel(np.asarray(x, dtype=complex), sites, block)
        for prev in ortho:
            y = y - matcore.hs_inner(prev, y) * prev
        norm = np.sqrt(matcore.hs_inner(y, y).real)
        if norm < GRAM_SCHMIDT_DROP_TOL:
            continue
        ortho.append(y / norm)
    if not ortho:
        import warnings
        warnings.warn("all conserved operators lie in the contraction row space; "
                      "nothing to project", RuntimeWarning)
    return ConservedOperatorSet(raw=[np.asarray(x, dtype=complex) for x in xs], ortho=ortho)


def project_conserved(mat: np.ndarray, ys: ConservedOperatorSet) -> np.ndarray:
    """Remove the components of ``mat`` along the orthonormal operators."""
    out = np.array(mat, dtype=complex, copy=True)
    for y in ys.ortho:
        out -= matcore.hs_inner(y, out) * y
    return out


# ---------------------------------------------------------------------------
# Admissible-space projection for the iteration updates
#
# Updates live on the (singlet, triplet) pair with the physical metric in
# which the triplet carries its threefold multiplicity.  The admissible space
# is the joint contraction kernel minus the span of the conserved functionals
# projected into it; removing those pair components preserves the observables
# exactly while leaving every compensating direction available.
# ---------------------------------------------------------------------------

def _scale_pair(us: np.ndarray, ut: np.ndarray) -> np.ndarray:
    return np.concatenate([us.reshape(-1), np.sqrt(3.0) * ut.reshape(-1)])


def _unscale_pair(vec: np.ndarray, sites: int) -> tuple[np.ndarray, np.ndarray]:
    ns = matcore.singlet_dim(sites)
    nt = matcore.triplet_dim(sites)
    return (vec[:ns * ns].reshape(ns, ns),
            vec[ns * ns:].reshape(nt, nt) / np.sqrt(3.0))


def conserved_pair_basis(raw: list[np.ndarray], sites: int) -> list[np.ndarray]:
    """Conserved singlet functionals lifted to the joint kernel.

    Each operator is embedded as a (singlet, zero-triplet) pair, projected
    onto the joint contraction kernel and orthonormalized; the results carry
    triplet components in general.  Returned in scaled pair coordinates.
    """
    p = matcore.joint_kernel_projector(sites)
    nt = matcore.triplet_dim(sites)
    zero_t = np.zeros((nt, nt), dtype=complex)
    basis: list[np.ndarray] = []
    for x in raw:
        vec = p @ _scale_pair(np.asarray(x, dtype=complex), zero_t)
        for y in basis:
            vec = vec - np.vdot(y, vec) * y
        norm = np.linalg.norm(vec)
        if norm < GRAM_SCHMIDT_DROP_TOL:
            continue
        basis.append(vec / norm)
    return basis


def project_admissible(us: np.ndarray, ut: np.ndarray, pair_basis: list[np.ndarray],
                       sites: int) -> tuple[np.ndarray, np.ndarray]:
    """Project a block pair onto the admissible update space."""
    vec = matcore.joint_kernel_projector(sites) @ _scale_pair(us, ut)
    for y in pair_basis:
        vec = vec - np.vdot(y, vec) * y
    return _unscale_pair(vec, sites)


def project_conserved_closed_form(m_def_k: np.ndarray, sites: int) -> np.ndarray:
    """Closed-form conserved-operator projection on the singlet block.

    Valid for contraction-free input: the same-site diagonal is shifted by
    the mean same-site diagonal sum, the distinct-pair diagonal picks up the
    compensating trace term, and the pair-transfer sub-block is corrected by
    the alternating-sign sum.  Matches the generic projection entrywise.
    """
    m = sites
    pairs = matcore.sym_pairs(m)
    diag_idx = np.array([k for k, (i, j) in enumerate(pairs) if i == j])
    off_idx = np.array([k for k, (i, j) in enumerate(pairs) if i != j])
    out = np.array(m_def_k, dtype=complex, copy=True)

    s0 = np.sum(out[diag_idx, diag_idx])
    out[diag_idx, diag_idx] -= s0 / m
    if off_idx.size:
        # distinct pairs carry both the pair-identity and exchange entries
        out[off_idx, off_idx] += 2.0 * s0 / (m * (m - 1))

    signs = np.array([(-1) ** i for i in range(m)], dtype=float)
    sub = out[np.ix_(diag_idx, diag_idx)]
    signed = signs[:, None] * signs[None, :] * sub
    s1 = np.sum(signed) - np.trace(signed)
    corr = signs[:, None] * signs[None, :] * (s1 / (m * (m - 1)))
    np.fill_diagonal(corr, 0.0)
    out[np.ix_(diag_idx, diag_idx)] = sub - corr
    return out


# ---------------------------------------------------------------------------
# Defect measure and the specialized purification loop
# ---------------------------------------------------------------------------

def defect(m: MVector) -> float:
    """Magnitude of the most negative eigenvalue over all D and Q blocks."""
    lows = [matcore.min_eigenvalue(b) for b in
            (m.d.singlet, m.d.triplet, m.q.singlet, m.q.triplet)]
    return max(0.0, -min(lows))


def _purification_update(m: MVector, pair_basis: list[np.ndarray]
                         ) -> tuple[np.ndarray, np.ndarray]:
    """One defective-part update (singlet, triplet) before steering.

    Negative parts of all four blocks are coupled pairwise and projected
    onto the admissible space (joint contraction kernel minus the conserved
    directions).
    """
    sites = m.d.sites
    ds_def, _ = matcore.negative_part(m.d.singlet)
    dt_def, _ = matcore.negative_part(m.d.triplet)
    qs_def, _ = matcore.negative_part(m.q.singlet)
    qt_def, _ = matcore.negative_part(m.q.triplet)
    upd_s = dq_couple(ds_def, qs_def)
    upd_t = dq_couple(dt_def, qt_def)
    return project_admissible(upd_s, upd_t, pair_basis, sites)


def _apply_update(m: MVector, upd_s: np.ndarray, upd_t: np.ndarray,
                  alpha: float) -> MVector:
    out = MVector(d=m.d.copy(), q=m.q.copy())
    out.d.singlet -= alpha * upd_s
    out.d.triplet -= alpha * upd_t
    out.q.singlet -= alpha * upd_s
    out.q.triplet -= alpha * upd_t
    return out


class _AndersonMixer:
    """Extrapolation through the recent history of a fixed-point iteration.

    Solves the small residual least-squares problem over the stored window;
    the extrapolated point is an affine combination of mapped iterates, so it
    stays inside any affine set the iteration itself preserves.
    """

    def __init__(self, window: int):
        self.window = window
        self.xs: list[np.ndarray] = []
        self.gs: list[np.ndarray] = []

    def push(self, x: np.ndarray, g: np.ndarray) -> None:
        self.xs.append(x)
        self.gs.append(g)
        if len(self.xs) > self.window:
            self.xs.pop(0)
            self.gs.pop(0)

    def reset(self) -> None:
        self.xs.clear()
        self.gs.clear()

    def extrapolate(self) -> np.ndarray | None:
        if len(self.xs) < 2:
            return None
        diffs = np.array([self.gs[i + 1] - self.gs[i]
                          for i in range(len(self.gs) - 1)]).T
        coef, *_ = np.linalg.lstsq(diffs, self.gs[-1], rcond=None)
        out = self.xs[-1] + self.gs[-1]
        for i, c in enumerate(coef):
            out = out - c * ((self.xs[i + 1] + self.gs[i + 1])
                             - (self.xs[i] + self.gs[i]))
        return out


def _iterate_purification(vec0: np.ndarray, step_fn, defect_fn, cfg: PurificationConfig,
                          tol: float, anchor_fn=None) -> tuple[np.ndarray, PurificationReport]:
    """Driver shared by the specialized and generalized engines.

    ``step_fn`` returns the projected defective update for the current
    iterate; the plain map subtracts ``alpha`` times that update.  With
    acceleration on, an extrapolated candidate competes against the plain
    step and halved fallback steps; the least defect wins.  ``anchor_fn``
    re-projects candidates onto the admissible affine manifold, cancelling
    roundoff amplified by the extrapolation.
    """
    if anchor_fn is None:
        anchor_fn = lambda v: v  # noqa: E731
    d0 = defect_fn(vec0)
    defects = [d0]
    if d0 <= tol:
        return vec0, PurificationReport(0, d0, d0, defects, True)
    vec = vec0
    d_prev = d0
    mixer = _AndersonMixer(cfg.window) if cfg.accelerate else None
    for k in range(1, cfg.k_max + 1):
        delta = step_fn(vec)
        phi = anchor_fn(vec - cfg.alpha * delta)
        best = phi
        d_best = defect_fn(phi)
        if mixer is not None:
            mixer.push(vec, phi - vec)
            cand = mixer.extrapolate()
            if cand is not None:
                cand = anchor_fn(cand)
                d_cand = defect_fn(cand)
                if d_cand < d_best:
                    best, d_best = cand, d_cand
            if d_best > d_prev:
                for frac in (0.5, 0.25, 0.125):
                    trial = anchor_fn(vec - frac * cfg.alpha * delta)
                    d_trial = defect_fn(trial)
                    if d_trial < d_best:
                        best, d_best = trial, d_trial
                    if d_best <= d_prev:
                        break
                mixer.reset()
        vec = best
        if not np.all(np.isfinite(vec)):
            raise RuntimeError(f"non-finite entries in purification iteration {k}")
        defects.append(d_best)
        if d_best <= tol:
            return vec, PurificationReport(k, d0, d_best, defects, True)
        d_prev = d_best
    return vec, PurificationReport(cfg.k_max, d0, defects[-1], defects, False)


def purify(m0: MVector, ys: ConservedOperatorSet,
           cfg: PurificationConfig) -> tuple[MVector, PurificationReport]:
    """Alternating-projections purification of a particle/hole pair.

    Iterates until the joint defect falls below the tolerance or the
    iteration budget is exhausted; both the particle and hole rows receive
    the same steered update, which keeps their affine relation intact.
    """
    tol = cfg.resolved_tol(m0.d)
    start = MVector(d=m0.d.hermitize(), q=m0.q.hermitize())
    sites = start.d.sites
    ns = matcore.singlet_dim(sites)
    pair_basis = conserved_pair_basis(ys.raw, sites)
    d_ref, q_ref = start.d, start.q

    def to_mvector(vec: np.ndarray) -> MVector:
        s = vec[:ns * ns].reshape(ns, ns)
        t = vec[ns * ns:].reshape(q_ref.triplet.shape)
        d = SpinBlock2RDM(s, t, d_ref.particle_number, sites)
        q = SpinBlock2RDM(q_ref.singlet + (s - d_ref.singlet),
                          q_ref.triplet + (t - d_ref.triplet),
                          q_ref.particle_number, sites)
        return MVector(d=d, q=q)

    def step_fn(vec: np.ndarray) -> np.ndarray:
        upd_s, upd_t = _purification_update(to_mvector(vec), pair_basis)
        return np.concatenate([upd_s.reshape(-1), upd_t.reshape(-1)])

    def defect_fn(vec: np.ndarray) -> float:
        return defect(to_mvector(vec))

    vec0 = np.concatenate([start.d.singlet.reshape(-1), start.d.triplet.reshape(-1)])

    def anchor_fn(vec: np.ndarray) -> np.ndarray:
        s = (vec[:ns * ns] - vec0[:ns * ns]).reshape(ns, ns)
        t = (vec[ns * ns:] - vec0[ns * ns:]).reshape(q_ref.triplet.shape)
        s, t = project_admissible(s, t, pair_basis, sites)
        s = 0.5 * (s + s.conj().T)
        t = 0.5 * (t + t.conj().T)
        return vec0 + np.concatenate([s.reshape(-1), t.reshape(-1)])

    vec, report = _iterate_purification(vec0, step_fn, defect_fn, cfg, tol, anchor_fn)
    return to_mvector(vec), report


def purify_blocks(d: SpinBlock2RDM, ys: ConservedOperatorSet,
                  cfg: PurificationConfig) -> tuple[SpinBlock2RDM, PurificationReport]:
    """Purify a particle 2RDM, constructing its hole partner internally."""
    out, report = purify(MVector.from_particle(d), ys, cfg)
    return out.d, report


# ---------------------------------------------------------------------------
# Generalized engine: arbitrary affine positivity constraints
# ---------------------------------------------------------------------------

def _split_blocks(vec: np.ndarray, dims: tuple[int, ...]) -> list[np.ndarray]:
    out = []
    ofs = 0
    for d in dims:
        out.append(vec[ofs:ofs + d * d].reshape(d, d))
        ofs += d * d
    if ofs != vec.size:
        raise ValueError("vector length does not match block layout")
    return out


def _join_blocks(mats: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([m.reshape(-1) for m in mats])


def _defective_vec(vec: np.ndarray, dims: tuple[int, ...]) -> tuple[np.ndarray, float]:
    """Negative parts of all Hermitian blocks plus the lowest eigenvalue."""
    parts = []
    low = 0.0
    for blk in _split_blocks(vec, dims):
        blk_def, _ = matcore.negative_part(blk)
        parts.append(blk_def)
        low = min(low, matcore.min_eigenvalue(blk))
    return _join_blocks(parts), -low


def assemble_projector(constraints: list[AffineConstraint], dim_d: int) -> np.ndarray:
    """Projector onto admissible stacked updates, built from the pseudoinverse
    identity: columns [I; L] times the inverse of (I + L^dagger L) times rows
    [I, L^dagger]."""
    if constraints:
        lmat = np.vstack([c.linmap for c in constraints])
    else:
        lmat = np.zeros((0, dim_d), dtype=complex)
    c = np.eye(dim_d, dtype=complex) + lmat.conj().T @ lmat
    cinv = np.linalg.inv(c)
    top = np.vstack([np.eye(dim_d, dtype=complex), lmat])
    return top @ cinv @ np.hstack([np.eye(dim_d, dtype=complex), lmat.conj().T])


def generic_purify(d0, constraints: list[AffineConstraint],
                   ys: ConservedOperatorSet | None, cfg: PurificationConfig,
                   kernel: np.ndarray | None = None):
    """Generalized purification over affine positivity constraints.

    ``d0`` is either a SpinBlock2RDM (the physical path, with the admissible
    projection onto the joint contraction kernel and conserved directions)
    or a plain Hermitian matrix with an optional explicit ``kernel``
    projector.  Constraint matrices are rebuilt from the current iterate
    each step, so the stacked vector never drifts off the affine manifold.
    """
    if isinstance(d0, SpinBlock2RDM):
        return _generic_purify_blocks(d0, constraints, ys, cfg)
    return _generic_purify_plain(np.asarray(d0, dtype=complex), constraints, ys, cfg, kernel)


def _prefactor(constraints: list[AffineConstraint], dim_d: int):
    if constraints:
        lmat = np.vstack([c.linmap for c in constraints])
        c = np.eye(dim_d, dtype=complex) + lmat.conj().T @ lmat
        return np.linalg.inv(c)
    return np.eye(dim_d, dtype=complex)


def _generic_iteration(vec0, dims_d, constraints, cinv, cfg, project_update, tol):
    def step_fn(vec):
        def_d, _ = _defective_vec(vec, dims_d)
        acc = def_d
        for con in constraints:
            mvec = con.offset + con.linmap @ vec
            dm, _ = _defective_vec(mvec, con.block_dims)
            acc = acc + con.linmap.conj().T @ dm
        return project_update(cinv @ acc)

    def defect_fn(vec):
        _, worst = _defective_vec(vec, dims_d)
        for con in constraints:
            mvec = con.offset + con.linmap @ vec
            _, dm = _defective_vec(mvec, con.block_dims)
            worst = max(worst, dm)
        return worst

    def anchor_fn(vec):
        out = vec0 + project_update(vec - vec0)
        blocks = [0.5 * (b + b.conj().T) for b in _split_blocks(out, dims_d)]
        return _join_blocks(blocks)

    return _iterate_purification(vec0, step_fn, defect_fn, cfg, tol, anchor_fn)


def _generic_purify_plain(d0, constraints, ys, cfg, kernel):
    dims = (d0.shape[0],)
    cinv = _prefactor(constraints, d0.size)
    tol = cfg.defect_tol if cfg.defect_tol is not None else \
        DEFECT_TOL_SCALE * max(1.0, abs(np.trace(d0).real))

    def project_update(vec):
        if kernel is not None:
            vec = kernel @ vec
        if ys is not None and ys.ortho:
            mat = vec.reshape(d0.shape)
            mat = project_conserved(mat, ys)
            vec = mat.reshape(-1)
        return vec

    vec, report = _generic_iteration(d0.reshape(-1), dims, constraints, cinv, cfg,
                                     project_update, tol)
    return vec.reshape(d0.shape), report


def _generic_purify_blocks(d0: SpinBlock2RDM, constraints, ys, cfg):
    m = d0.sites
    ns, nt = matcore.singlet_dim(m), matcore.triplet_dim(m)
    dims = (ns, nt)
    cinv = _prefactor(constraints, ns * ns + nt * nt)
    tol = cfg.resolved_tol(d0)

    pair_basis = conserved_pair_basis(ys.raw if ys is not None else [], m)

    def project_update(vec):
        s, t = _split_blocks(vec, dims)
        s, t = project_admissible(s, t, pair_basis, m)
        return _join_blocks([s, t])

    d_herm = d0.hermitize()
    vec0 = _join_blocks([d_herm.singlet, d_herm.triplet])
    vec, report = _generic_iteration(vec0, dims, constraints, cinv, cfg,
                                     project_update, tol)
    s, t = _split_blocks(vec, dims)
    return SpinBlock2RDM(s, t, d0.particle_number, m), report


def hole_condition_constraint(d0: SpinBlock2RDM) -> AffineConstraint:
    """Hole-positivity constraint for the generic engine.

    On contraction-free updates the hole blocks move exactly with the
    particle blocks, so the linear part is the identity; the offset is fixed
    by the entry iterate.
    """
    m = d0.sites
    ns, nt = matcore.singlet_dim(m), matcore.triplet_dim(m)
    q0 = hole_from_particle(d0)
    offset = _join_blocks([q0.singlet - d0.singlet, q0.triplet - d0.triplet])
    return AffineConstraint(offset=offset,
                            linmap=np.eye(ns * ns + nt * nt, dtype=complex),
                            block_dims=(ns, nt))
