import math

import numpy as np
import pytest
import scipy.sparse as sp

import basinflow as bf
from basinflow import estimator as est
from basinflow import measurement as ms
from basinflow.core_net import build_incidence, default_operands

from pipeline_util import assemble_bundle, build_constraints


def data_row(coefficients, constant, label):
    return ms.MeasurementConstraint(tuple(sorted(coefficients.items())),
                                    constant, label)


def mini_chain_constraints():
    """Seven measurement rows over the 3-capability chain."""
    rows = [
        data_row({(1, 0): 1.0}, 100.0, "accept/alpha/agricultural/nitrogen"),
        data_row({(1, 1): 1.0}, 50.0, "eos/alpha/nitrogen"),
        data_row({(1, 2): 1.0}, 25.0, "eot/nitrogen"),
        data_row({(1, 1): 1.0, (1, 0): -0.5}, 0.0,
                 "transport/land/land-1/nitrogen"),
        data_row({(1, 2): 1.0, (1, 1): -0.5}, 0.0,
                 "transport/river/out-1->bay/nitrogen"),
        data_row({(1, 1): 1.0}, 48.0, "eos/alpha-recount/nitrogen"),
        data_row({(1, 0): 1.0}, 104.0, "accept/alpha-recount/agricultural/nitrogen"),
    ]
    return ms.compute_weights(rows)


class TestAssembleProblem:
    def test_chain_dimension_count(self, mini_chain_incidence):
        problem = est.assemble_problem(mini_chain_incidence,
                                       mini_chain_constraints())
        assert problem.n_variables == 13  # 3 Q_B + 3 U + 7 errors
        assert problem.n_rows == 10  # 3 balance + 7 measurement

    def test_defaults_are_penalty_constants(self, mini_chain_incidence):
        problem = est.assemble_problem(mini_chain_incidence,
                                       mini_chain_constraints())
        assert problem.alpha == 1e-10
        assert problem.beta == 1e-12

    def test_no_constraints_warns_and_solves_to_zero(self, mini_chain_incidence):
        with pytest.warns(est.AssemblyWarning, match="all-zero"):
            problem = est.assemble_problem(mini_chain_incidence, [])
        solution = est.solve(problem)
        assert np.abs(solution.x).max() == 0.0
        assert solution.converged

    def test_missing_weight_rejected(self, mini_chain_incidence):
        row = data_row({(1, 0): 1.0}, 5.0, "accept/a/agricultural/nitrogen")
        with pytest.raises(ValueError, match="weight"):
            est.assemble_problem(mini_chain_incidence, [row])

    def test_step_out_of_range(self, mini_chain_incidence):
        row = ms.compute_weights(
            [data_row({(2, 0): 1.0}, 5.0, "accept/a/agricultural/nitrogen")])
        with pytest.raises(ValueError, match="step 2"):
            est.assemble_problem(mini_chain_incidence, row, k_steps=1)

    def test_hessian_layout(self, mini_chain_incidence):
        constraints = mini_chain_constraints()
        problem = est.assemble_problem(mini_chain_incidence, constraints)
        h = problem.hessian_diag
        assert (h[:3] == problem.beta).all()
        assert (h[3:6] == problem.alpha).all()
        assert h[6:].tolist() == [c.weight for c in constraints]

    def test_variable_index_bijection(self):
        index = est.VariableIndex(n_steps=2, n_places=3, n_caps=4, n_errors=5)
        mapping = index.as_dict()
        assert sorted(mapping.values()) == list(range(index.total))
        with pytest.raises(IndexError):
            index.q_b(1, 0)  # step 1 is the eliminated zero state
        with pytest.raises(IndexError):
            index.u(3, 0)
        with pytest.raises(IndexError):
            index.err(5)


class TestSolveBasics:
    def test_single_variable_pin(self):
        # minimize x^2 subject to x = 3
        problem = est.EstimationProblem(
            n_steps=1, dt=1.0, hessian_diag=np.array([2.0]),
            constraint_matrix=sp.csr_matrix(np.array([[1.0]])),
            rhs=np.array([3.0]),
            var_index=est.VariableIndex(1, 0, 1, 0),
            alpha=est.DEFAULT_FLOW_PENALTY, beta=est.DEFAULT_BUFFER_PENALTY)
        solution = est.solve(problem)
        assert solution.x[0] == pytest.approx(3.0, rel=1e-12)
        assert solution.converged

    def test_symmetric_pair(self):
        # identity Hessian, x1 + x2 = 2 -> (1, 1) by symmetry
        problem = est.EstimationProblem(
            n_steps=1, dt=1.0, hessian_diag=np.ones(2),
            constraint_matrix=sp.csr_matrix(np.array([[1.0, 1.0]])),
            rhs=np.array([2.0]),
            var_index=est.VariableIndex(1, 0, 2, 0),
            alpha=est.DEFAULT_FLOW_PENALTY, beta=est.DEFAULT_BUFFER_PENALTY)
        solution = est.dense_oracle_solve(problem)
        assert solution.x == pytest.approx([1.0, 1.0], rel=1e-12)

    def test_dense_guard(self):
        n = est.DENSE_ORACLE_MAX_VARS + 1
        problem = est.EstimationProblem(
            n_steps=1, dt=1.0, hessian_diag=np.ones(n),
            constraint_matrix=sp.csr_matrix((1, n)), rhs=np.zeros(1),
            var_index=est.VariableIndex(1, 0, n, 0),
            alpha=1e-10, beta=1e-12)
        with pytest.raises(ValueError, match="dense oracle"):
            est.dense_oracle_solve(problem)

    def test_objective_matches_reevaluation(self, mini_chain_incidence):
        problem = est.assemble_problem(mini_chain_incidence,
                                       mini_chain_constraints())
        solution = est.solve(problem)
        recomputed = 0.5 * solution.x @ (problem.hessian_diag * solution.x)
        assert solution.objective_value == pytest.approx(recomputed, rel=1e-10)

    def test_rank_deficient_rows_regularized(self):
        # duplicated hard rows without error variables: A is rank 1
        problem = est.EstimationProblem(
            n_steps=1, dt=1.0, hessian_diag=np.array([1.0]),
            constraint_matrix=sp.csr_matrix(np.array([[1.0], [1.0]])),
            rhs=np.array([1.0, 1.0]),
            var_index=est.VariableIndex(1, 0, 1, 0),
            alpha=1e-10, beta=1e-12)
        solution = est.solve(problem)
        assert solution.diagnostics["regularized"]
        assert "dual_shift" in solution.diagnostics
        assert solution.x[0] == pytest.approx(1.0, rel=1e-9)
        assert solution.converged


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", [0, 3, 9])
    def test_consistent_bundle(self, seed):
        _, truth, _, _, _, problem = assemble_bundle(4, branching=2, seed=seed)
        sparse = est.solve(problem)
        dense = est.dense_oracle_solve(problem)
        scale = 1.0 + np.abs(dense.x).max()
        assert np.abs(sparse.x - dense.x).max() / scale <= 1e-6
        assert abs(sparse.objective_value - dense.objective_value) \
            <= 1e-8 * (1.0 + abs(dense.objective_value))

    def test_chain_identical_objective(self, mini_chain_incidence):
        problem = est.assemble_problem(mini_chain_incidence,
                                       mini_chain_constraints())
        sparse = est.solve(problem)
        dense = est.dense_oracle_solve(problem)
        assert sparse.objective_value == pytest.approx(
            dense.objective_value, rel=1e-8)


class TestRecovery:
    def test_chain_consistency(self):
        _, truth, _, constraints, _, problem = assemble_bundle(1, 1, seed=42)
        solution = est.solve(problem)
        deviation = np.abs(solution.u[0] - truth.u) / np.abs(truth.u)
        assert deviation.max() <= 1e-4
        for r, con in enumerate(constraints):
            bound = 1e-6 * max(abs(con.constant), math.sqrt(2))
            assert abs(solution.errors[r]) <= bound

    def test_perturbed_eot_matches_oracle(self):
        network, truth, datasets, _, incidence, _ = assemble_bundle(1, 1, seed=42)
        loads = [
            ms.LoadRecord(r.county, r.operand, r.kind,
                          r.mass * 1.1 if (r.kind == "EoT"
                                           and r.operand == "nitrogen")
                          else r.mass)
            for r in datasets.loads
        ]
        perturbed = datasets.__class__(datasets.applied, tuple(loads),
                                       datasets.delivery_factors, datasets.areas)
        constraints, _ = build_constraints(network, truth.capabilities, perturbed)
        problem = est.assemble_problem(incidence, constraints)
        sparse = est.solve(problem)
        dense = est.dense_oracle_solve(problem)
        scale = 1.0 + np.abs(dense.x).max()
        assert np.abs(sparse.x - dense.x).max() / scale <= 1e-6
        eot_rows = [r for r, c in enumerate(constraints) if c.family == "eot"
                    and c.operand_name == "nitrogen"]
        assert np.abs(sparse.errors[eot_rows]).max() > 0


class TestConservation:
    @pytest.mark.parametrize("n_outlets,seed", [(1, 1), (10, 2), (30, 3)])
    def test_mass_balance_and_totals(self, n_outlets, seed):
        _, truth, _, _, incidence, problem = assemble_bundle(
            n_outlets, branching=3, seed=seed)
        solution = est.solve(problem)
        n_balance = problem.n_balance_rows
        balance_residual = (problem.constraint_matrix @ solution.x
                            - problem.rhs)[:n_balance]
        tol = 1e-8 * (1.0 + np.abs(problem.rhs).max())
        assert np.abs(balance_residual).max() <= tol

        accept_ids = [c.id for c in truth.capabilities
                      if c.capability_class.is_accept]
        total_mass = solution.q_b[-1].sum()
        accepted = problem.dt * solution.u.sum(axis=0)[accept_ids].sum()
        assert total_mass == pytest.approx(accepted, rel=1e-8)

    def test_multi_step_balance(self, mini_chain_incidence):
        constraints = ms.expand_constraints(mini_chain_constraints(), 3)
        problem = est.assemble_problem(mini_chain_incidence, constraints,
                                       k_steps=3, dt=0.5)
        solution = est.solve(problem)
        assert solution.converged
        # states chain together: q[k+1] = q[k] + M u[k] dt
        m = mini_chain_incidence.m.toarray()
        q_prev = np.zeros(3)
        for k in range(3):
            expected = q_prev + m @ solution.u[k] * 0.5
            assert solution.q_b[k] == pytest.approx(expected, abs=1e-9)
            q_prev = solution.q_b[k]


class TestScaling:
    def test_data_row_scaling(self, mini_chain_incidence):
        # all constants comfortably above sqrt(2) so weights stay 1/C^2
        rows = [
            data_row({(1, 0): 1.0}, 20.0, "accept/a/agricultural/nitrogen"),
            data_row({(1, 1): 1.0}, 9.0, "eos/a/nitrogen"),
            data_row({(1, 2): 1.0}, 4.2, "eot/nitrogen"),
        ]
        s = 5.0

        def solve_scaled(factor):
            scaled = [data_row(dict(r.coefficients), r.constant * factor,
                               r.label) for r in rows]
            problem = est.assemble_problem(mini_chain_incidence,
                                           ms.compute_weights(scaled))
            return est.solve(problem).x

        x1 = solve_scaled(1.0)
        xs = solve_scaled(s)
        assert np.abs(xs - s * x1).max() <= 1e-5 * (1.0 + np.abs(s * x1).max())


class TestUniqueness:
    def test_permuted_variables_same_solution(self):
        _, _, _, _, _, problem = assemble_bundle(3, branching=2, seed=13)
        baseline = est.solve(problem)
        rng = np.random.RandomState(0)
        perm = rng.permutation(problem.n_variables)
        permuted = est.EstimationProblem(
            n_steps=problem.n_steps, dt=problem.dt,
            hessian_diag=problem.hessian_diag[perm],
            constraint_matrix=problem.constraint_matrix[:, perm].tocsr(),
            rhs=problem.rhs, var_index=problem.var_index,
            alpha=problem.alpha, beta=problem.beta,
            constraints=problem.constraints)
        shuffled = est.solve(permuted)
        scale = 1.0 + np.abs(baseline.x).max()
        assert np.abs(shuffled.x - baseline.x[perm]).max() / scale <= 1e-8


class TestResidualReport:
    def test_consistent_families_near_zero(self):
        _, _, _, _, _, problem = assemble_bundle(10, branching=3, seed=21,
                                                 load_scale=0.1)
        solution = est.solve(problem)
        report = est.residual_report(problem, solution)
        families = {f.family for f in report}
        assert families == {"mass_balance", "accept", "eos", "eot", "transport"}
        scale = 1.0 + np.abs(problem.rhs).max()
        for fam in report:
            assert max(abs(fam.row_residuals.min),
                       abs(fam.row_residuals.max)) <= 1e-8 * scale
            if fam.errors is not None:
                assert max(abs(fam.errors.min), abs(fam.errors.max)) \
                    <= 1e-8 * scale

    def test_perturbation_locality_across_operands(self):
        network, truth, datasets, _, incidence, _ = assemble_bundle(
            10, branching=3, seed=21)
        baseline_cons, _ = build_constraints(network, truth.capabilities,
                                             datasets)
        baseline = est.solve(est.assemble_problem(incidence, baseline_cons))

        loads = [
            ms.LoadRecord(r.county, r.operand, r.kind,
                          r.mass * 1.1 if (r.kind == "EoT"
                                           and r.operand == "nitrogen")
                          else r.mass)
            for r in datasets.loads
        ]
        perturbed_ds = datasets.__class__(
            datasets.applied, tuple(loads), datasets.delivery_factors,
            datasets.areas)
        cons, _ = build_constraints(network, truth.capabilities, perturbed_ds)
        perturbed = est.solve(est.assemble_problem(incidence, cons))

        p_rows = [r for r, c in enumerate(cons)
                  if c.operand_name == "phosphorus"]
        n_rows = [r for r, c in enumerate(cons)
                  if c.operand_name == "nitrogen"]
        # phosphorus rows never shared a capability with the perturbed datum
        assert np.abs(perturbed.errors[p_rows]
                      - baseline.errors[p_rows]).max() <= 1e-10
        assert np.abs(perturbed.errors[n_rows]).max() > 1e-3

    def test_empty_family_omitted(self, mini_chain_incidence):
        rows = ms.compute_weights([
            data_row({(1, 2): 1.0}, 25.0, "eot/nitrogen"),
        ])
        problem = est.assemble_problem(mini_chain_incidence, rows)
        report = est.residual_report(problem, est.solve(problem))
        assert {f.family for f in report} == {"mass_balance", "eot"}
