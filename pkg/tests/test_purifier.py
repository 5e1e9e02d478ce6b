"""Purification engine: hole construction, projections, iteration."""

import numpy as np
import pytest

from td2rdm import hubbard, matcore, oracle, purifier
from td2rdm.harness import perturb_in_kernel

from conftest import random_hermitian


class TestHoleFromParticle:
    def test_vacuum_limit(self):
        """Empty system: the two-hole matrix is the antisymmetrized identity
        with full trace 2 M_s (2 M_s - 1)."""
        d = matcore.zero_like_blocks(2, 0)
        q = purifier.hole_from_particle(d)
        assert np.allclose(q.singlet, 2.0 * np.eye(3), atol=1e-14)
        assert np.allclose(q.triplet, 2.0 * np.eye(1), atol=1e-14)
        assert q.total_trace() == pytest.approx(12.0)

    def test_dimer_matches_oracle(self, dimer_gs):
        _, psi = dimer_gs
        d = oracle.extract_rdm2_blocks(psi)
        q = purifier.hole_from_particle(d)
        q_direct = oracle.extract_hole_rdm(psi)
        assert np.max(np.abs(q.singlet - q_direct.singlet)) < 1e-12
        assert np.max(np.abs(q.triplet - q_direct.triplet)) < 1e-12

    def test_trapped_state_hole_psd(self, trapped_gs_m6):
        _, psi = trapped_gs_m6
        d = oracle.extract_rdm2_blocks(psi)
        q = purifier.hole_from_particle(d)
        assert matcore.min_eigenvalue(q.singlet) > -1e-12
        assert matcore.min_eigenvalue(q.triplet) > -1e-12


class TestDqCouple:
    def test_zero_hole_part(self):
        d = np.diag([-1.0, 0.0]).astype(complex)
        assert np.allclose(purifier.dq_couple(d, np.zeros_like(d)), 0.5 * d)

    def test_equal_parts(self):
        d = np.diag([-1.0, -2.0]).astype(complex)
        assert np.allclose(purifier.dq_couple(d, d), d)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        a, b = random_hermitian(rng, 4), random_hermitian(rng, 4)
        assert np.allclose(purifier.dq_couple(a, b), 0.5 * (a + b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            purifier.dq_couple(np.eye(2), np.eye(3))


class TestConservedSet:
    def test_printed_energy_operator(self, conserved_set_m6):
        """The first orthonormal operator matches the printed index formula
        with denominator sqrt(210)."""
        m = 6
        pairs = matcore.sym_pairs(m)
        denom = np.sqrt(210.0)
        expected = np.zeros((len(pairs), len(pairs)), dtype=complex)
        for k, (i, j) in enumerate(pairs):
            expected[k, k] = (m - 1) / denom if i == j else -2.0 / denom
        assert np.max(np.abs(conserved_set_m6.ortho[0] - expected)) < 1e-13

    def test_printed_pairing_operator(self, conserved_set_m6):
        """The second operator, orthogonalized against the first, matches the
        printed formula with denominator sqrt(30)."""
        m = 6
        pairs = matcore.sym_pairs(m)
        diag = [k for k, (i, j) in enumerate(pairs) if i == j]
        denom = np.sqrt(30.0)
        expected = np.zeros((len(pairs), len(pairs)), dtype=complex)
        for a, ka in enumerate(diag):
            for b, kb in enumerate(diag):
                expected[ka, kb] = ((-1) ** (a + b) - (a == b)) / denom
        assert np.max(np.abs(conserved_set_m6.ortho[1] - expected)) < 1e-13

    def test_orthonormal(self, conserved_set_m6):
        ys = conserved_set_m6.ortho
        for i, yi in enumerate(ys):
            for j, yj in enumerate(ys):
                assert matcore.hs_inner(yi, yj) == pytest.approx(float(i == j), abs=1e-11)

    def test_contraction_free(self, conserved_set_m6):
        amap = matcore.build_contraction_map(6, "singlet")
        for y in conserved_set_m6.ortho:
            assert np.max(np.abs(amap @ y.reshape(-1))) < 1e-11

    def test_linear_dependence_dropped(self):
        cfg = hubbard.HubbardConfig(sites=4, particles=4, interaction=1.0)
        x1, _ = hubbard.conserved_ops(cfg)
        out = purifier.build_conserved_set([x1, 2.0 * x1], 4)
        assert len(out.ortho) == 1

    def test_zero_interaction_drops_first(self):
        cfg = hubbard.HubbardConfig(sites=4, particles=4, interaction=0.0)
        x1, x2 = hubbard.conserved_ops(cfg)
        out = purifier.build_conserved_set([x1, x2], 4)
        assert len(out.ortho) == 1

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            purifier.build_conserved_set([], 4)


class TestProjectConserved:
    def test_self_projection(self, conserved_set_m6):
        y1 = conserved_set_m6.ortho[0]
        assert np.max(np.abs(purifier.project_conserved(y1, conserved_set_m6))) < 1e-13

    def test_orthogonal_input_unchanged(self, conserved_set_m6):
        rng = np.random.default_rng(17)
        mat = random_hermitian(rng, 21)
        first = purifier.project_conserved(mat, conserved_set_m6)
        second = purifier.project_conserved(first, conserved_set_m6)
        assert np.max(np.abs(second - first)) < 1e-12

    def test_output_orthogonality(self, conserved_set_m6):
        rng = np.random.default_rng(18)
        for _ in range(10):
            mat = random_hermitian(rng, 21)
            out = purifier.project_conserved(mat, conserved_set_m6)
            for y in conserved_set_m6.ortho:
                assert abs(matcore.hs_inner(y, out)) < 1e-12


class TestClosedFormProjection:
    def test_vanishing_sums_leave_input(self):
        """Inputs whose same-site diagonal sum and alternating transfer sum
        both vanish are untouched."""
        m = 4
        rng = np.random.default_rng(23)
        pairs = matcore.sym_pairs(m)
        diag = [k for k, (i, j) in enumerate(pairs) if i == j]
        mat = random_hermitian(rng, len(pairs))
        mat[np.ix_(diag, diag)] = 0.0
        out = purifier.project_conserved_closed_form(mat, m)
        assert np.max(np.abs(out - mat)) < 1e-14

    def test_annihilates_first_operator(self, conserved_set_m6):
        out = purifier.project_conserved_closed_form(conserved_set_m6.ortho[0], 6)
        assert np.max(np.abs(out)) < 1e-13

    def test_matches_generic_projection(self, conserved_set_m6):
        """Closed-form and generic conserved projections agree entrywise on
        contraction-free singlet inputs."""
        rng = np.random.default_rng(29)
        for _ in range(100):
            mat = random_hermitian(rng, 21)
            mat = matcore.project_to_contraction_kernel(mat, 6, "singlet")
            a = purifier.project_conserved_closed_form(mat, 6)
            b = purifier.project_conserved(mat, conserved_set_m6)
            assert np.max(np.abs(a - b)) < 1e-12


class TestDefect:
    def test_psd_input(self, trapped_gs_m6):
        _, psi = trapped_gs_m6
        m = purifier.MVector.from_particle(oracle.extract_rdm2_blocks(psi))
        assert purifier.defect(m) == 0.0

    def test_single_negative_eigenvalue(self, trapped_gs_m6):
        """One negative eigenvalue in the particle singlet block against an
        otherwise clean pair gives exactly that magnitude."""
        _, psi = trapped_gs_m6
        d = oracle.extract_rdm2_blocks(psi)
        q = oracle.extract_hole_rdm(psi)
        vals, vecs = np.linalg.eigh(d.singlet)
        v = vecs[:, 0]
        d.singlet -= (vals[0] + 0.07) * np.outer(v, v.conj())
        m = purifier.MVector(d=d, q=q)
        assert purifier.defect(m) == pytest.approx(0.07, abs=1e-9)


def _perturbed_ground_state(cfg, ys, hs_norm, seed):
    psi = oracle.ground_state(cfg)
    d12 = oracle.extract_rdm2_blocks(psi)
    return d12, perturb_in_kernel(d12, ys, hs_norm, seed)


class TestPurify:
    def test_pure_input_returns_immediately(self, trapped_gs_m6, conserved_set_m6):
        _, psi = trapped_gs_m6
        d = oracle.extract_rdm2_blocks(psi)
        m0 = purifier.MVector.from_particle(d)
        out, report = purifier.purify(m0, conserved_set_m6, purifier.PurificationConfig())
        assert report.iterations_used == 0
        assert report.converged
        assert np.max(np.abs(out.d.singlet - d.singlet)) < 1e-15

    def test_dimer_perturbation_preserves_invariants(self, dimer_gs):
        """Two-particle 2RDMs are rank one, so the positivity cones touch the
        admissible plane tangentially and the iteration converges only
        sublinearly; the preserved quantities are exact regardless."""
        cfg, _ = dimer_gs
        x1, x2 = hubbard.conserved_ops(cfg)
        ys = purifier.build_conserved_set([x1, x2], cfg.sites)
        d12, pert = _perturbed_ground_state(cfg, ys, 1e-2, seed=5)
        m0 = purifier.MVector.from_particle(pert)
        d0 = purifier.defect(m0)
        out, report = purifier.purify(m0, ys, purifier.PurificationConfig())
        assert report.defect_final < 0.01 * d0
        rho0 = matcore.contract_2rdm(pert).matrix
        rho1 = matcore.contract_2rdm(out.d).matrix
        assert np.max(np.abs(rho1 - rho0)) < 1e-12
        for x in (x1, x2):
            assert abs(matcore.hs_inner(x, out.d.singlet - pert.singlet)) < 1e-12

    def test_six_site_perturbations_converge(self, trapped_gs_m6, conserved_set_m6):
        cfg, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        tol = purifier.PurificationConfig().resolved_tol(d12)
        for seed in (20, 21, 22, 23):
            pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed)
            m0 = purifier.MVector.from_particle(pert)
            out, report = purifier.purify(m0, conserved_set_m6,
                                          purifier.PurificationConfig())
            assert report.converged
            assert report.iterations_used <= 100
            assert purifier.defect(out) <= tol

    def test_preservation_suite(self, trapped_gs_m6, conserved_set_m6):
        """Conservation invariants over randomized perturbed inputs."""
        cfg, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        x1, x2 = hubbard.conserved_ops(cfg)
        cfg_p = purifier.PurificationConfig()
        rng_seeds = range(8)
        for seed in rng_seeds:
            pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed)
            m0 = purifier.MVector.from_particle(pert)
            out, report = purifier.purify(m0, conserved_set_m6, cfg_p)
            assert report.converged
            # contraction preserved
            drho = matcore.contract_2rdm(out.d).matrix - matcore.contract_2rdm(pert).matrix
            assert np.linalg.norm(drho) < 1e-10
            # conserved functionals preserved relative to their size
            for x in (x1, x2):
                ref = abs(matcore.hs_inner(x, pert.singlet))
                dev = abs(matcore.hs_inner(x, out.d.singlet - pert.singlet))
                assert dev <= 1e-10 * max(1.0, ref)
            # hole consistency after the loop
            q_re = purifier.hole_from_particle(out.d)
            assert np.max(np.abs(q_re.singlet - out.q.singlet)) < 1e-10
            assert np.max(np.abs(q_re.triplet - out.q.triplet)) < 1e-10
            # total trace untouched
            assert out.d.total_trace() == pytest.approx(pert.total_trace(), abs=1e-10)

    def test_idempotent_at_convergence(self, trapped_gs_m6, conserved_set_m6):
        _, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed=11)
        cfg_p = purifier.PurificationConfig()
        out, _ = purifier.purify(purifier.MVector.from_particle(pert),
                                 conserved_set_m6, cfg_p)
        again, report = purifier.purify(out, conserved_set_m6, cfg_p)
        tol = cfg_p.resolved_tol(out.d)
        assert report.iterations_used == 0
        assert np.max(np.abs(again.d.singlet - out.d.singlet)) <= 10 * tol

    def test_constant_alpha_mode(self, trapped_gs_m6, conserved_set_m6):
        """The plain loop follows the constant-steering update."""
        _, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed=13)
        cfg_p = purifier.PurificationConfig(accelerate=False)
        out, report = purifier.purify(purifier.MVector.from_particle(pert),
                                      conserved_set_m6, cfg_p)
        assert report.converged
        # one manual iteration reproduces the first recorded defect
        m0 = purifier.MVector.from_particle(pert)
        basis = purifier.conserved_pair_basis(conserved_set_m6.raw, 6)
        upd_s, upd_t = purifier._purification_update(m0, basis)
        manual = purifier._apply_update(m0, upd_s, upd_t, 2.0)
        assert purifier.defect(manual) == pytest.approx(report.per_iteration_defects[1],
                                                        abs=1e-14)

    def test_nonfinite_rejected(self, conserved_set_m6, trapped_gs_m6):
        _, psi = trapped_gs_m6
        d = oracle.extract_rdm2_blocks(psi)
        d.singlet[0, 0] = np.nan
        with pytest.raises((RuntimeError, ValueError)):
            m0 = purifier.MVector.from_particle(d)
            purifier.purify(m0, conserved_set_m6, purifier.PurificationConfig())


class TestAssembleProjector:
    def test_identity_constraint(self):
        c = purifier.AffineConstraint(offset=np.zeros(4), linmap=np.eye(4, dtype=complex),
                                      block_dims=(2,))
        p = purifier.assemble_projector([c], 4)
        eye = np.eye(4)
        expected = 0.5 * np.block([[eye, eye], [eye, eye]])
        assert np.max(np.abs(p - expected)) < 1e-14

    def test_negated_identity(self):
        c = purifier.AffineConstraint(offset=np.zeros(4), linmap=-np.eye(4, dtype=complex),
                                      block_dims=(2,))
        p = purifier.assemble_projector([c], 4)
        eye = np.eye(4)
        expected = 0.5 * np.block([[eye, -eye], [-eye, eye]])
        assert np.max(np.abs(p - expected)) < 1e-14

    def test_random_constraints_projector(self):
        rng = np.random.default_rng(37)
        for _ in range(5):
            l1 = rng.standard_normal((4, 9)) + 1j * rng.standard_normal((4, 9))
            l2 = rng.standard_normal((9, 9)) + 1j * rng.standard_normal((9, 9))
            cons = [purifier.AffineConstraint(np.zeros(4), l1, (2,)),
                    purifier.AffineConstraint(np.zeros(9), l2, (3,))]
            p = purifier.assemble_projector(cons, 9)
            assert np.max(np.abs(p @ p - p)) < 1e-10
            assert np.max(np.abs(p - p.conj().T)) < 1e-10
            # range vectors satisfy the linear constraint rows
            v = p @ (rng.standard_normal(9 + 4 + 9)
                     + 1j * rng.standard_normal(9 + 4 + 9))
            d_row = v[:9]
            assert np.max(np.abs(l1 @ d_row - v[9:13])) < 1e-10
            assert np.max(np.abs(l2 @ d_row - v[13:])) < 1e-10


class TestGenericPurify:
    def test_single_cone_plain_matrix(self):
        """Without affine constraints the engine is a single cone projection
        and converges in one step at unit steering."""
        d0 = np.diag([-0.5, 1.0, 2.0]).astype(complex)
        cfg = purifier.PurificationConfig(alpha=1.0, accelerate=False, k_max=5,
                                          defect_tol=1e-14)
        out, report = purifier.generic_purify(d0, [], None, cfg)
        assert report.converged
        assert report.iterations_used == 1
        assert np.allclose(out, np.diag([0.0, 1.0, 2.0]), atol=1e-14)

    def test_reproduces_specialized_path(self, trapped_gs_m6, conserved_set_m6):
        cfg, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        for seed in (0, 1, 2):
            pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed)
            pcfg = purifier.PurificationConfig()
            spec_out, spec_rep = purifier.purify(
                purifier.MVector.from_particle(pert), conserved_set_m6, pcfg)
            con = purifier.hole_condition_constraint(pert)
            gen_out, gen_rep = purifier.generic_purify(pert, [con], conserved_set_m6, pcfg)
            assert gen_rep.converged == spec_rep.converged
            assert gen_rep.iterations_used == spec_rep.iterations_used
            assert np.max(np.abs(gen_out.singlet - spec_out.d.singlet)) < 1e-10
            assert np.max(np.abs(gen_out.triplet - spec_out.d.triplet)) < 1e-10

    def test_alpha_two_vs_one_both_converge(self, trapped_gs_m6, conserved_set_m6):
        _, psi = trapped_gs_m6
        d12 = oracle.extract_rdm2_blocks(psi)
        pert = perturb_in_kernel(d12, conserved_set_m6, 1e-2, seed=4)
        counts = {}
        for alpha in (1.0, 2.0):
            con = purifier.hole_condition_constraint(pert)
            cfg_p = purifier.PurificationConfig(alpha=alpha, k_max=400)
            _, rep = purifier.generic_purify(pert, [con], conserved_set_m6, cfg_p)
            assert rep.converged
            counts[alpha] = rep.iterations_used
        assert counts[2.0] <= counts[1.0]
