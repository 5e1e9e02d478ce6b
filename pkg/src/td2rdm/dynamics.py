"""Time evolution of the two-particle RDM with per-step purification.

The equation of motion couples the commutator with the two-particle
Hamiltonian to a collision term built from the reconstructed three-particle
RDM.  Time stepping uses an embedded Runge-Kutta-Fehlberg 4(5) pair inside
fixed global steps; after every global step the purifier is invoked whenever
the defect exceeds its tolerance.

The higher-order solution of the embedded pair is propagated and the pair
difference controls the step size.  Conserved functionals are linear
invariants of the right-hand side, so any Runge-Kutta step preserves them to
roundoff regardless of the local tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import hubbard as hb
from . import matcore, purifier, reconstruct
from .matcore import SpinBlock2RDM

MIN_STEP = 1e-10

_RKF_C = (0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5)
_RKF_A = (
    (),
    (0.25,),
    (3.0 / 32.0, 9.0 / 32.0),
    (1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0),
    (439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0),
    (-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0),
)
_RKF_B5 = np.array([16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0,
                    -9.0 / 50.0, 2.0 / 55.0])
_RKF_B4 = np.array([25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0,
                    -1.0 / 5.0, 0.0])
_RKF_ERR = _RKF_B5 - _RKF_B4


@dataclass
class PropagationConfig:
    global_dt: float = 0.01
    horizon: float = 25.0
    rkf_rel_tol: float = 1e-8
    rkf_abs_tol: float = 1e-10
    purification: purifier.PurificationConfig = field(
        default_factory=purifier.PurificationConfig)

    def __post_init__(self):
        if self.global_dt <= 0:
            raise ValueError("global step must be positive")
        if self.horizon < self.global_dt:
            raise ValueError("horizon shorter than one global step")


@dataclass
class PropagationState:
    t: float
    d12: SpinBlock2RDM
    step_hint: float = 0.0
    rhs_evaluations: int = 0


@dataclass
class TrajectoryRecord:
    t: float
    site_densities: np.ndarray
    total_energy: float
    interaction_energy: float
    eta: float
    defect_before: float
    defect_after: float
    purification_iterations: int


# ---------------------------------------------------------------------------
# Equation-of-motion right-hand side
# ---------------------------------------------------------------------------

class _EomWorkspace:
    """Cached per-configuration matrices for the right-hand side."""

    def __init__(self, cfg: hb.HubbardConfig, trapped: bool):
        self.cfg = cfg
        m = cfg.sites
        self.sites = m
        self.h2s, self.h2t = hb.two_particle_hamiltonian_blocks(
            cfg, -1.0 if trapped else 1.0)
        self.bs = matcore.singlet_embedding(m)
        self.bt = matcore.triplet_embedding(m)

    def sector_arrays(self, s: np.ndarray, t_mat: np.ndarray):
        m = self.sites
        g = 0.5 * (self.bs @ s @ self.bs.T + self.bt @ t_mat @ self.bt.T)
        a_uu = self.bt @ t_mat @ self.bt.T
        return g.reshape(m, m, m, m), a_uu.reshape(m, m, m, m)

    def collision(self, s: np.ndarray, t_mat: np.ndarray, n: int):
        """Collision blocks (singlet, triplet) from the reconstructed 3RDM."""
        m = self.sites
        u = self.cfg.interaction
        if u == 0.0:
            nd_s, nd_t = s.shape[0], t_mat.shape[0]
            return (np.zeros((nd_s, nd_s), dtype=complex),
                    np.zeros((nd_t, nd_t), dtype=complex))
        g4, a4 = self.sector_arrays(s, t_mat)
        rho = (np.einsum("ikjk->ij", g4) + np.einsum("ikjk->ij", a4)) / (n - 1)
        dg, duu = reconstruct._sector_cumulants(rho, g4, a4)
        f_uuu, f_uud, f_udd = reconstruct._reconstruct_sectors(rho, dg, duu)
        raw = reconstruct.ThreeRDM(f_uuu, f_uud, f_udd, m, n)
        tr_mixed, tr_uu = reconstruct.trace3_sectors(raw)
        z_g, z_uu = reconstruct._solve_lift_equation(
            (n - 2) * g4 - tr_mixed, (n - 2) * a4 - tr_uu, m)
        c_uuu, c_uud, c_udd = reconstruct._lift_from_pair(z_g, z_uu, m)
        f_uud = f_uud + c_uud
        f_udd = f_udd + c_udd
        ct_g = u * (np.einsum("abbdbe->abde", f_uud)
                    - np.einsum("aebdee->abde", f_uud)
                    + np.einsum("abadea->abde", f_udd)
                    - np.einsum("abdded->abde", f_udd))
        ct_mat = 2.0 * ct_g.reshape(m * m, m * m)
        return self.bs.T @ ct_mat @ self.bs, self.bt.T @ ct_mat @ self.bt

    def rhs(self, s: np.ndarray, t_mat: np.ndarray, n: int):
        ct_s, ct_t = self.collision(s, t_mat, n)
        ds = -1j * (self.h2s @ s - s @ self.h2s + ct_s)
        dt = -1j * (self.h2t @ t_mat - t_mat @ self.h2t + ct_t)
        return ds, dt


@lru_cache(maxsize=8)
def _workspace(sites: int, particles: int, hopping: float, interaction: float,
               trap: float, trapped: bool) -> _EomWorkspace:
    cfg = hb.HubbardConfig(sites=sites, particles=particles, hopping=hopping,
                           interaction=interaction, trap=trap)
    return _EomWorkspace(cfg, trapped)


def eom_rhs(d12: SpinBlock2RDM, t: float, cfg: hb.HubbardConfig,
            d123: reconstruct.ThreeRDM | None = None) -> SpinBlock2RDM:
    """Time derivative of the 2RDM.

    With ``d123`` given, the collision term uses that 3RDM instead of the
    reconstruction (useful for substituting exact references).
    """
    ws = _workspace(cfg.sites, cfg.particles, cfg.hopping, cfg.interaction,
                    cfg.trap, t < 0)
    if d123 is None:
        ds, dt = ws.rhs(d12.singlet, d12.triplet, d12.particle_number)
    else:
        m = cfg.sites
        u = cfg.interaction
        ct_g = u * (np.einsum("abbdbe->abde", d123.uud)
                    - np.einsum("aebdee->abde", d123.uud)
                    + np.einsum("abadea->abde", d123.udd)
                    - np.einsum("abdded->abde", d123.udd))
        ct_mat = 2.0 * ct_g.reshape(m * m, m * m)
        ct_s = ws.bs.T @ ct_mat @ ws.bs
        ct_t = ws.bt.T @ ct_mat @ ws.bt
        ds = -1j * (ws.h2s @ d12.singlet - d12.singlet @ ws.h2s + ct_s)
        dt = -1j * (ws.h2t @ d12.triplet - d12.triplet @ ws.h2t + ct_t)
    if not (np.all(np.isfinite(ds)) and np.all(np.isfinite(dt))):
        raise RuntimeError("non-finite right-hand side")
    return SpinBlock2RDM(ds, dt, d12.particle_number, d12.sites)


# ---------------------------------------------------------------------------
# Embedded RKF 4(5) stepping
# ---------------------------------------------------------------------------

def _pack(d: SpinBlock2RDM) -> np.ndarray:
    return np.concatenate([d.singlet.reshape(-1), d.triplet.reshape(-1)])


def _unpack(vec: np.ndarray, template: SpinBlock2RDM) -> tuple[np.ndarray, np.ndarray]:
    ns = template.singlet.shape[0]
    s = vec[:ns * ns].reshape(ns, ns)
    t = vec[ns * ns:].reshape(template.triplet.shape)
    return s, t


def rkf45_adaptive(state: PropagationState, until_t: float, cfg: hb.HubbardConfig,
                   prop: PropagationConfig) -> PropagationState:
    """Advance the state to ``until_t`` with embedded 4(5) error control.

    The final step is clipped to land exactly on the target time; a step
    size collapse below 1e-10 aborts.
    """
    if until_t <= state.t:
        raise ValueError("target time must lie ahead of the state")
    ws = _workspace(cfg.sites, cfg.particles, cfg.hopping, cfg.interaction,
                    cfg.trap, state.t < 0)
    n = state.d12.particle_number
    template = state.d12
    y = _pack(state.d12)
    t = state.t
    h = state.step_hint if state.step_hint > 0 else min(prop.global_dt, until_t - t)
    n_rhs = state.rhs_evaluations

    def f(vec: np.ndarray) -> np.ndarray:
        s, tm = _unpack(vec, template)
        ds, dt = ws.rhs(s, tm, n)
        return np.concatenate([ds.reshape(-1), dt.reshape(-1)])

    while t < until_t - 1e-14:
        h = min(h, until_t - t)
        if h < MIN_STEP:
            raise RuntimeError(f"step size underflow at t={t:.6f}")
        k = [f(y)]
        n_rhs += 1
        for stage in range(1, 6):
            acc = sum(a * ki for a, ki in zip(_RKF_A[stage], k))
            k.append(f(y + h * acc))
            n_rhs += 1
        err_vec = h * sum(c * ki for c, ki in zip(_RKF_ERR, k))
        err = float(np.linalg.norm(err_vec))
        tol = max(prop.rkf_abs_tol, prop.rkf_rel_tol * float(np.linalg.norm(y)))
        if err <= tol:
            y = y + h * sum(b * ki for b, ki in zip(_RKF_B5, k))
            t = t + h
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * (tol / err) ** 0.2))
        h = h * factor

    s, tm = _unpack(y, template)
    d12 = SpinBlock2RDM(s, tm, n, template.sites).hermitize()
    return PropagationState(t=until_t, d12=d12, step_hint=h, rhs_evaluations=n_rhs)


# ---------------------------------------------------------------------------
# Global stepping with purification
# ---------------------------------------------------------------------------

def _record(t: float, d: SpinBlock2RDM, cfg: hb.HubbardConfig,
            defect_before: float, defect_after: float, iters: int) -> TrajectoryRecord:
    obs = hb.observables_from_blocks(d, cfg, t=max(t, 0.0))
    return TrajectoryRecord(t=t, site_densities=obs.site_densities,
                            total_energy=obs.total_energy,
                            interaction_energy=obs.interaction_energy,
                            eta=obs.eta, defect_before=defect_before,
                            defect_after=defect_after,
                            purification_iterations=iters)


def propagate(d12: SpinBlock2RDM, cfg: hb.HubbardConfig, prop: PropagationConfig,
              snapshot_hook: Callable[[float, SpinBlock2RDM], None] | None = None
              ) -> list[TrajectoryRecord]:
    """Propagate from t=0 with purification after every global step.

    ``snapshot_hook`` receives (t, pre-purification 2RDM) after each global
    step, before the purifier touches the state.  Purification failures are
    recorded in the trajectory, integrator failures raise.
    """
    x1, x2 = hb.conserved_ops(cfg)
    ys = purifier.build_conserved_set([x1, x2], cfg.sites)
    pur_cfg = prop.purification
    tol = pur_cfg.resolved_tol(d12)

    state = PropagationState(t=0.0, d12=d12.hermitize())
    m0 = purifier.MVector.from_particle(state.d12)
    d0 = purifier.defect(m0)
    records = [_record(0.0, state.d12, cfg, d0, d0, 0)]

    n_steps = int(round(prop.horizon / prop.global_dt))
    for step in range(1, n_steps + 1):
        target = step * prop.global_dt
        state = rkf45_adaptive(state, target, cfg, prop)
        if snapshot_hook is not None:
            snapshot_hook(state.t, state.d12.copy())
        mvec = purifier.MVector.from_particle(state.d12)
        before = purifier.defect(mvec)
        iters = 0
        after = before
        if before > tol:
            mvec, report = purifier.purify(mvec, ys, pur_cfg)
            state.d12 = mvec.d
            after = report.defect_final
            iters = report.iterations_used
        records.append(_record(state.t, state.d12, cfg, before, after, iters))
    return records


def free_propagation_blocks(d12: SpinBlock2RDM, cfg: hb.HubbardConfig,
                            t: float) -> SpinBlock2RDM:
    """Closed-form evolution for vanishing interaction (conjugation by the
    two-particle propagator), used as an oracle for integrator checks."""
    base = hb.HubbardConfig(sites=cfg.sites, particles=cfg.particles,
                            hopping=cfg.hopping, interaction=0.0, trap=cfg.trap)
    h2s, h2t = hb.two_particle_hamiltonian_blocks(base, 1.0)
    out = d12.copy()
    for h2, name in ((h2s, "singlet"), (h2t, "triplet")):
        vals, vecs = np.linalg.eigh(h2)
        phase = np.exp(-1j * vals * t)
        u = (vecs * phase) @ vecs.conj().T
        blk = getattr(out, name)
        setattr(out, name, u @ blk @ u.conj().T)
    return out
