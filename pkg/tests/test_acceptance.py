"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The propagation-based criteria share one session-scoped scan over the
six-cell (U, V) grid at the default global step and horizon; expect the
module to run for tens of minutes on two cores.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from td2rdm import dynamics, harness, hubbard, matcore, oracle, purifier
from td2rdm.harness import perturb_in_kernel

SITES = 6
SYSTEM_I = (2.2, 1.0)
SYSTEM_II = (1.0, 0.4)
U_GRID = [0.5, 1.0, 2.2]
V_GRID = [0.4, 1.0]

# density-error values pinned on the first verified scan (criterion 9);
# regression tolerance is 5 percent relative
PINNED_DELTA_N1 = {
    (0.5, 0.4): 5.113575e-04,
    (0.5, 1.0): 3.489852e-04,
    (1.0, 0.4): 1.693952e-03,
    (1.0, 1.0): 1.142062e-03,
    (2.2, 0.4): 4.098944e-03,
    (2.2, 1.0): 5.951562e-03,
}


def _report(criterion: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {criterion}: {status} — {detail}")


@pytest.fixture(scope="session")
def scan_artifacts(tmp_path_factory):
    """Six-cell scan with trajectories persisted per cell."""
    out_dir = tmp_path_factory.mktemp("scan")
    os.environ.setdefault("TD2RDM_SCAN_WORKERS", "2")
    cfg = harness.RunConfig(
        hubbard=hubbard.HubbardConfig(sites=SITES, particles=SITES),
        prop=dynamics.PropagationConfig(),
        u_grid=U_GRID, v_grid=V_GRID, out_dir=out_dir)
    cells = harness.run_scan(cfg)
    return out_dir, {(c.u, c.v): c for c in cells}


@pytest.fixture(scope="session")
def system_ii_snapshot():
    """Pre-purification 2RDM of system (ii) at the analysis time t = 25."""
    u, v = SYSTEM_II
    cfg = hubbard.HubbardConfig(sites=SITES, particles=SITES, interaction=u, trap=v)
    psi = oracle.ground_state(cfg)
    d12 = oracle.extract_rdm2_blocks(psi)
    captured = {}

    def hook(t, d):
        if abs(t - 25.0) < 1e-9:
            captured["d"] = d

    dynamics.propagate(d12, cfg, dynamics.PropagationConfig(), snapshot_hook=hook)
    return cfg, captured["d"]


@pytest.fixture(scope="session")
def ground_state_m6():
    u, v = SYSTEM_I
    cfg = hubbard.HubbardConfig(sites=SITES, particles=SITES, interaction=u, trap=v)
    psi = oracle.ground_state(cfg)
    return cfg, oracle.extract_rdm2_blocks(psi)


@pytest.fixture(scope="session")
def conserved_m6(ground_state_m6):
    cfg, _ = ground_state_m6
    x1, x2 = hubbard.conserved_ops(cfg)
    return purifier.build_conserved_set([x1, x2], SITES)


def test_criterion_1_oracle_consistency():
    """Extracted RDMs satisfy positivity, trace, hole and contraction
    identities across lattice sizes and couplings."""
    worst = {"defect": 0.0, "trace": 0.0, "hole": 0.0, "contract": 0.0}
    for sites in (2, 4, 6):
        for u in (0.0, 1.0, 2.2):
            for v in (0.0, 0.4, 1.0):
                cfg = hubbard.HubbardConfig(sites=sites, particles=sites,
                                            interaction=u, trap=v)
                psi = oracle.ground_state(cfg)
                d12 = oracle.extract_rdm2_blocks(psi)
                n = cfg.particles
                worst["defect"] = max(worst["defect"],
                                      purifier.defect(purifier.MVector.from_particle(d12)))
                worst["trace"] = max(worst["trace"],
                                     abs(d12.total_trace() - n * (n - 1)))
                q = purifier.hole_from_particle(d12)
                q_direct = oracle.extract_hole_rdm(psi)
                worst["hole"] = max(worst["hole"],
                                    np.max(np.abs(q.singlet - q_direct.singlet)),
                                    np.max(np.abs(q.triplet - q_direct.triplet)))
                rho = matcore.contract_2rdm(d12).matrix
                worst["contract"] = max(worst["contract"],
                                        np.max(np.abs(rho - oracle.extract_rdm1(psi))))
    ok = (worst["defect"] <= 1e-12 and worst["trace"] <= 1e-10
          and worst["hole"] <= 1e-12 and worst["contract"] <= 1e-12)
    _report(1, ok, f"oracle consistency, worst deviations {worst}")
    assert worst["defect"] <= 1e-12
    assert worst["trace"] <= 1e-10
    assert worst["hole"] <= 1e-12
    assert worst["contract"] <= 1e-12


def test_criterion_2_conserved_operator_formulas(conserved_m6):
    """Orthonormalized conserved operators match the printed index formulas
    entrywise (denominators sqrt(210) and sqrt(30))."""
    pairs = matcore.sym_pairs(SITES)
    m = SITES
    y1 = np.zeros((len(pairs), len(pairs)), dtype=complex)
    for k, (i, j) in enumerate(pairs):
        y1[k, k] = (m - 1) / np.sqrt(210.0) if i == j else -2.0 / np.sqrt(210.0)
    diag = [k for k, (i, j) in enumerate(pairs) if i == j]
    y2 = np.zeros_like(y1)
    for a, ka in enumerate(diag):
        for b, kb in enumerate(diag):
            y2[ka, kb] = ((-1) ** (a + b) - (a == b)) / np.sqrt(30.0)
    dev1 = np.max(np.abs(conserved_m6.ortho[0] - y1))
    dev2 = np.max(np.abs(conserved_m6.ortho[1] - y2))
    ok = dev1 <= 1e-13 and dev2 <= 1e-13
    _report(2, ok, f"printed operator reproduction, deviations {dev1:.2e}, {dev2:.2e}")
    assert dev1 <= 1e-13
    assert dev2 <= 1e-13


def test_criterion_3_purification_correctness(ground_state_m6, conserved_m6):
    """Fifty randomized admissible perturbations all purify within the
    iteration budget while preserving the conserved quantities."""
    cfg, d12 = ground_state_m6
    x1, x2 = hubbard.conserved_ops(cfg)
    pcfg = purifier.PurificationConfig(k_max=100)
    tol = pcfg.resolved_tol(d12)
    max_iters = 0
    worst_dev = 0.0
    all_converged = True
    for seed in range(50):
        pert = perturb_in_kernel(d12, conserved_m6, 1e-2, seed)
        out, report = purifier.purify(purifier.MVector.from_particle(pert),
                                      conserved_m6, pcfg)
        all_converged &= report.converged and report.defect_final <= tol
        max_iters = max(max_iters, report.iterations_used)
        drho = np.linalg.norm(matcore.contract_2rdm(out.d).matrix
                              - matcore.contract_2rdm(pert).matrix)
        de = abs(matcore.hs_inner(x1, out.d.singlet - pert.singlet))
        deta = abs(matcore.hs_inner(x2, out.d.singlet - pert.singlet))
        worst_dev = max(worst_dev, drho, de, deta)
    ok = all_converged and worst_dev <= 1e-10
    _report(3, ok, f"50 perturbations, max iterations {max_iters}, "
                   f"worst conservation deviation {worst_dev:.2e}")
    assert all_converged
    assert worst_dev <= 1e-10


def test_criterion_4_closed_form_projection(conserved_m6):
    """Closed-form conserved projection equals the generic one entrywise on
    contraction-free singlet inputs."""
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(100):
        mat = rng.standard_normal((21, 21)) + 1j * rng.standard_normal((21, 21))
        mat = 0.5 * (mat + mat.conj().T)
        mat = matcore.project_to_contraction_kernel(mat, SITES, "singlet")
        a = purifier.project_conserved_closed_form(mat, SITES)
        b = purifier.project_conserved(mat, conserved_m6)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-12
    _report(4, ok, f"closed-form vs generic projection, worst deviation {worst:.2e}")
    assert worst <= 1e-12


def test_criterion_5_generic_engine_equivalence(ground_state_m6, conserved_m6):
    """The generalized engine with the single hole-positivity constraint
    reproduces the specialized path; the assembled projector for an identity
    constraint is the exact pairwise average."""
    cfg, d12 = ground_state_m6
    pcfg = purifier.PurificationConfig(k_max=100)
    worst = 0.0
    for seed in range(50):
        pert = perturb_in_kernel(d12, conserved_m6, 1e-2, seed)
        spec_out, spec_rep = purifier.purify(purifier.MVector.from_particle(pert),
                                             conserved_m6, pcfg)
        con = purifier.hole_condition_constraint(pert)
        gen_out, gen_rep = purifier.generic_purify(pert, [con], conserved_m6, pcfg)
        worst = max(worst,
                    float(np.max(np.abs(gen_out.singlet - spec_out.d.singlet))),
                    float(np.max(np.abs(gen_out.triplet - spec_out.d.triplet))))
    c = purifier.AffineConstraint(offset=np.zeros(4), linmap=np.eye(4, dtype=complex),
                                  block_dims=(2,))
    p = purifier.assemble_projector([c], 4)
    eye = np.eye(4)
    proj_dev = np.max(np.abs(p - 0.5 * np.block([[eye, eye], [eye, eye]])))
    ok = worst <= 1e-10 and proj_dev == 0.0
    _report(5, ok, f"generic-engine equivalence, worst path deviation {worst:.2e}, "
                   f"projector deviation {proj_dev:.1e}")
    assert worst <= 1e-10
    assert proj_dev == 0.0


def _load_pair(out_dir: Path, u: float, v: float):
    tag = f"U{u:g}_V{v:g}"
    rec = harness.read_trajectory_csv(out_dir / f"traj_{tag}.csv")
    rec_half = harness.read_trajectory_csv(out_dir / f"traj_{tag}_halfdt.csv")
    return rec, rec_half


def test_criterion_6_dt_convergence(scan_artifacts):
    """Halved-step runs agree with the default-step runs well inside the
    convergence threshold for both analysis systems."""
    out_dir, _ = scan_artifacts
    residuals = {}
    for (u, v) in (SYSTEM_I, SYSTEM_II):
        rec, rec_half = _load_pair(out_dir, u, v)
        converged, residual = harness.dt_convergence(rec, rec_half)
        residuals[(u, v)] = (converged, residual)
    ok = all(c and r < 5e-3 for c, r in residuals.values())
    _report(6, ok, f"time-step convergence residuals {residuals}")
    for (u, v), (converged, residual) in residuals.items():
        assert converged, (u, v)
        assert residual < 5e-3


def test_criterion_7_conservation(scan_artifacts):
    """Total energy, pairing expectation and particle number drift below
    1e-8 relative over the full horizon for both systems."""
    out_dir, _ = scan_artifacts
    worst = 0.0
    for (u, v) in (SYSTEM_I, SYSTEM_II):
        rec, _ = _load_pair(out_dir, u, v)
        for series in ([r.total_energy for r in rec],
                       [r.eta for r in rec],
                       [float(np.sum(r.site_densities)) for r in rec]):
            arr = np.asarray(series)
            drift = np.max(np.abs(arr - arr[0])) / max(1.0, abs(arr[0]))
            worst = max(worst, float(drift))
    ok = worst <= 1e-8
    _report(7, ok, f"worst relative conservation drift {worst:.2e}")
    assert worst <= 1e-8


def test_criterion_8_defect_convergence(system_ii_snapshot):
    """Purifying the system-(ii) snapshot at t=25: non-increasing defect
    sequence, convergence within 100 iterations, exponential-like tail."""
    cfg, snap = system_ii_snapshot
    x1, x2 = hubbard.conserved_ops(cfg)
    ys = purifier.build_conserved_set([x1, x2], SITES)
    pcfg = purifier.PurificationConfig(k_max=100)
    m0 = purifier.MVector.from_particle(snap)
    assert purifier.defect(m0) > pcfg.resolved_tol(snap)  # defective before purifying
    out, report = purifier.purify(m0, ys, pcfg)
    seq = np.array(report.per_iteration_defects)
    non_increasing = bool(np.all(np.diff(seq) <= 1e-12))
    positive = seq[seq > 0]
    tail = positive[len(positive) // 2:]
    slope = float(np.polyfit(np.arange(len(tail)), np.log(tail), 1)[0]) \
        if len(tail) >= 3 else float("nan")
    ok = report.converged and report.iterations_used <= 100 and non_increasing \
        and slope < 0
    _report(8, ok, f"snapshot defect {report.defect_initial:.2e} -> "
                   f"{report.defect_final:.2e} in {report.iterations_used} iterations, "
                   f"tail slope {slope:.3f}")
    assert report.converged
    assert report.iterations_used <= 100
    assert non_increasing
    assert slope < 0


def test_trajectory_defect_behaviour(scan_artifacts):
    """Strongly trapped system: purification converges at every global step.
    Weak quench: the pre-purification defect stays bounded along the run."""
    out_dir, cells = scan_artifacts
    tol = purifier.PurificationConfig().defect_tol or 1e-12 * SITES * (SITES - 1)
    rec_i, _ = _load_pair(out_dir, *SYSTEM_I)
    assert max(r.defect_after for r in rec_i[1:]) <= tol * 1.01
    rec_ii, _ = _load_pair(out_dir, *SYSTEM_II)
    assert max(r.defect_before for r in rec_ii[1:]) < 1e-2


def test_criterion_9_accuracy_regression(scan_artifacts):
    """Density-error metric pinned per grid cell; the interaction-free anchor
    is checked against the one-particle closed form."""
    _, cells = scan_artifacts
    devs = {}
    ok = True
    for key, pinned in PINNED_DELTA_N1.items():
        cell = cells[key]
        ok &= cell.error is None and np.isfinite(cell.delta_n1_bar)
        devs[key] = cell.delta_n1_bar
        ok &= abs(cell.delta_n1_bar - pinned) <= 0.05 * pinned

    # interaction-free anchor against the free-fermion closed form
    cfg = hubbard.HubbardConfig(sites=SITES, particles=SITES, interaction=0.0, trap=1.0)
    psi = oracle.ground_state(cfg)
    d12 = oracle.extract_rdm2_blocks(psi)
    records = dynamics.propagate(d12, cfg, dynamics.PropagationConfig())
    times = np.array([r.t for r in records])
    n1 = np.array([r.site_densities[0] for r in records])
    h_trap = hubbard.h1_matrix(cfg, -1.0)
    h_free = hubbard.h1_matrix(cfg, 1.0)
    _, orbs = np.linalg.eigh(h_trap)
    occ = orbs[:, :SITES // 2]
    vals, vecs = np.linalg.eigh(h_free)
    exact_n1 = np.empty_like(times)
    for k, t in enumerate(times):
        u = (vecs * np.exp(-1j * vals * t)) @ vecs.conj().T
        evolved = u @ occ
        exact_n1[k] = 2.0 * np.sum(np.abs(evolved[0]) ** 2)
    anchor = harness.metric_delta_n1(times, n1, times, exact_n1)
    ok &= anchor <= 1e-6
    _report(9, ok, f"pinned metrics {devs}, interaction-free anchor {anchor:.2e}")
    for key, pinned in PINNED_DELTA_N1.items():
        assert abs(cells[key].delta_n1_bar - pinned) <= 0.05 * pinned, key
    assert anchor <= 1e-6
