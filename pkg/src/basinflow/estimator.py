"""Equality-constrained quadratic program for flow estimation.

The decision vector stacks buffer masses after each step, per-capability
firings per step, and one error variable per measurement row:

    x = [ Q_B[2..K+1] | U[1..K] | errors ]

subject to the mass balance ``-Q_B[k+1] + Q_B[k] + M U[k] dt = 0`` (with
``Q_B[1] = 0`` eliminated) and the measurement rows ``D U - error = c``.
The objective is ``1/2 x^T H x`` with a strictly positive diagonal H:
measurement weights on the errors, and small uniqueness penalties on flows
and buffer masses.

The solver factorizes the full bordered KKT matrix ``[[H, A^T], [A, 0]]``
(never the normal equations, whose conditioning collapses under the tiny
penalties), after symmetric max-norm equilibration, with iterative
refinement when the first solve misses tolerance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_net import IncidenceMatrices
from .measurement import MeasurementConstraint

DEFAULT_FLOW_PENALTY = 1e-10
DEFAULT_BUFFER_PENALTY = 1e-12
DEFAULT_TOL = 1e-8

DENSE_ORACLE_MAX_VARS = 2000


class AssemblyWarning(UserWarning):
    """Assembly produced a degenerate but solvable problem."""


@dataclass(frozen=True)
class VariableIndex:
    """Bijection from named variables to columns of the decision vector.

    Step labels follow the recursion convention: firings U exist for steps
    1..K and buffer masses Q_B for steps 2..K+1 (the initial state is zero
    and eliminated).
    """

    n_steps: int
    n_places: int
    n_caps: int
    n_errors: int

    def q_b(self, k: int, place: int) -> int:
        if not 2 <= k <= self.n_steps + 1:
            raise IndexError(f"Q_B step {k} outside [2, {self.n_steps + 1}]")
        if not 0 <= place < self.n_places:
            raise IndexError(f"place {place} outside [0, {self.n_places})")
        return (k - 2) * self.n_places + place

    def u(self, k: int, cap: int) -> int:
        if not 1 <= k <= self.n_steps:
            raise IndexError(f"U step {k} outside [1, {self.n_steps}]")
        if not 0 <= cap < self.n_caps:
            raise IndexError(f"capability {cap} outside [0, {self.n_caps})")
        return self.n_steps * self.n_places + (k - 1) * self.n_caps + cap

    def err(self, row: int) -> int:
        if not 0 <= row < self.n_errors:
            raise IndexError(f"error row {row} outside [0, {self.n_errors})")
        return self.n_steps * (self.n_places + self.n_caps) + row

    @property
    def total(self) -> int:
        return self.n_steps * (self.n_places + self.n_caps) + self.n_errors

    def as_dict(self) -> dict[tuple, int]:
        """Materialize the full mapping (tests and debugging)."""
        out: dict[tuple, int] = {}
        for k in range(2, self.n_steps + 2):
            for p in range(self.n_places):
                out[("q_b", k, p)] = self.q_b(k, p)
        for k in range(1, self.n_steps + 1):
            for c in range(self.n_caps):
                out[("u", k, c)] = self.u(k, c)
        for r in range(self.n_errors):
            out[("err", r)] = self.err(r)
        return out


@dataclass
class EstimationProblem:
    """Assembled sparse QP: min 1/2 x^T diag(h) x  s.t.  A x = b."""

    n_steps: int
    dt: float
    hessian_diag: np.ndarray
    constraint_matrix: sp.csr_matrix
    rhs: np.ndarray
    var_index: VariableIndex
    alpha: float
    beta: float
    constraints: tuple[MeasurementConstraint, ...] = ()

    @property
    def n_variables(self) -> int:
        return self.hessian_diag.shape[0]

    @property
    def n_rows(self) -> int:
        return self.constraint_matrix.shape[0]

    @property
    def n_balance_rows(self) -> int:
        return self.n_steps * self.var_index.n_places

    def measurement_row_label(self, r: int) -> str:
        return self.constraints[r].label if r < len(self.constraints) else f"row {r}"


@dataclass
class Solution:
    """Estimated trajectories with residual diagnostics.

    ``q_b[i]`` is the place-mass vector after step ``i + 1`` (the state
    labeled ``Q_B[i + 2]``); ``u[i]`` the firings of step ``i + 1``.
    Residuals are recomputed from the returned vectors, never read off
    solver internals.
    """

    q_b: np.ndarray
    u: np.ndarray
    errors: np.ndarray
    objective_value: float
    kkt_residual: float
    constraint_residual: float
    converged: bool
    x: np.ndarray
    multipliers: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def assemble_problem(incidence: IncidenceMatrices,
                     constraints: Sequence[MeasurementConstraint],
                     k_steps: int = 1,
                     dt: float = 1.0,
                     alpha: float = DEFAULT_FLOW_PENALTY,
                     beta: float = DEFAULT_BUFFER_PENALTY) -> EstimationProblem:
    """Build the QP from the incidence structure and measurement rows.

    Balance rows come first (one block of ``n_places`` rows per step),
    then one row per measurement constraint.  Constraints must have their
    weights set (see ``measurement.compute_weights``).
    """
    if incidence.n_capabilities == 0:
        raise ValueError("cannot assemble a problem with no capabilities")
    if k_steps < 1:
        raise ValueError(f"k_steps must be >= 1, got {k_steps}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta penalties must be positive")
    if not constraints:
        warnings.warn(
            "no measurement constraints: the problem admits the all-zero "
            "trivial solution", AssemblyWarning, stacklevel=2,
        )

    n_places = incidence.n_places
    n_caps = incidence.n_capabilities
    index = VariableIndex(k_steps, n_places, n_caps, len(constraints))

    h = np.empty(index.total)
    h[: k_steps * n_places] = beta
    h[k_steps * n_places: k_steps * (n_places + n_caps)] = alpha
    for r, con in enumerate(constraints):
        if con.weight is None:
            raise ValueError(
                f"constraint {con.label!r} has no weight; run compute_weights"
            )
        h[index.err(r)] = con.weight

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    m_coo = incidence.m.tocoo()

    for k in range(1, k_steps + 1):
        base = (k - 1) * n_places
        for p in range(n_places):
            rows.append(base + p)
            cols.append(index.q_b(k + 1, p))
            vals.append(-1.0)
            if k >= 2:
                rows.append(base + p)
                cols.append(index.q_b(k, p))
                vals.append(1.0)
        for p, c, v in zip(m_coo.row, m_coo.col, m_coo.data):
            rows.append(base + int(p))
            cols.append(index.u(k, int(c)))
            vals.append(float(v) * dt)

    b = np.zeros(k_steps * n_places + len(constraints))
    for r, con in enumerate(constraints):
        row = k_steps * n_places + r
        for (k, cap), coef in con.coefficients:
            if not 1 <= k <= k_steps:
                raise ValueError(
                    f"constraint {con.label!r} references step {k} outside "
                    f"[1, {k_steps}]"
                )
            rows.append(row)
            cols.append(index.u(k, cap))
            vals.append(coef)
        rows.append(row)
        cols.append(index.err(r))
        vals.append(-1.0)
        b[row] = con.constant

    a = sp.coo_matrix((vals, (rows, cols)),
                      shape=(b.shape[0], index.total)).tocsr()
    a.sum_duplicates()
    a.sort_indices()
    return EstimationProblem(
        n_steps=k_steps, dt=dt, hessian_diag=h, constraint_matrix=a, rhs=b,
        var_index=index, alpha=alpha, beta=beta, constraints=tuple(constraints),
    )


# ---------------------------------------------------------------------------
# KKT solvers
# ---------------------------------------------------------------------------

def _kkt_matrix(problem: EstimationProblem, dual_shift: float = 0.0) -> sp.csc_matrix:
    h = sp.diags(problem.hessian_diag)
    a = problem.constraint_matrix
    lower_right = None
    if dual_shift:
        lower_right = -dual_shift * sp.identity(a.shape[0])
    kkt = sp.bmat([[h, a.T], [a, lower_right]], format="csc")
    kkt.sort_indices()
    return kkt


def _equilibrate(kkt: sp.csc_matrix) -> np.ndarray:
    """Symmetric max-norm scaling: s_i = 1/sqrt(max_j |K_ij|)."""
    row_max = np.abs(kkt).max(axis=1).toarray().ravel()
    row_max[row_max == 0] = 1.0
    return 1.0 / np.sqrt(row_max)


def _suspect_rows(problem: EstimationProblem, lu, n_vars: int) -> list[str]:
    """Name measurement rows whose pivots collapsed during factorization."""
    diag = np.abs(lu.U.diagonal())
    scale = diag.max() if diag.size else 0.0
    if scale == 0.0:
        return []
    tiny = np.nonzero(diag < 1e-10 * scale)[0]
    labels = []
    for i in tiny:
        col = int(lu.perm_c[i])
        if col >= n_vars:
            r = col - n_vars - problem.n_balance_rows
            if r >= 0:
                labels.append(problem.measurement_row_label(r))
            else:
                labels.append(f"balance row {col - n_vars}")
    return labels


def solve(problem: EstimationProblem, tol: float = DEFAULT_TOL) -> Solution:
    """Solve via sparse LU of the equilibrated bordered KKT system.

    Convergence means ``||A x - b||_inf <= tol * (1 + ||b||_inf)``.  Up to
    two rounds of iterative refinement are applied when the first solve
    misses that; on a singular factorization the dual block is shifted by
    ``-delta I`` (delta = 1e-12 * ||A||_inf) and the shift is surfaced in
    the diagnostics together with the suspect rows.
    """
    if np.any(problem.hessian_diag <= 0):
        raise ValueError("hessian diagonal must be strictly positive")
    n = problem.n_variables
    a = problem.constraint_matrix
    rhs = np.concatenate([np.zeros(n), problem.rhs])
    diagnostics: dict = {"regularized": False, "refinement_rounds": 0,
                         "suspect_rows": [], "tol": tol}

    def factorize(dual_shift: float):
        kkt = _kkt_matrix(problem, dual_shift)
        s = _equilibrate(kkt)
        scaled = sp.diags(s) @ kkt @ sp.diags(s)
        try:
            lu = spla.splu(scaled.tocsc(), permc_spec="MMD_AT_PLUS_A",
                           options=dict(SymmetricMode=True,
                                        DiagPivotThresh=0.001))
        except RuntimeError:
            return None, kkt, s
        return lu, kkt, s

    lu, kkt, s = factorize(0.0)
    if lu is None:
        norm_a = spla.norm(a, np.inf) if a.nnz else 1.0
        delta = 1e-12 * max(norm_a, 1.0)
        diagnostics["regularized"] = True
        diagnostics["dual_shift"] = delta
        lu, kkt, s = factorize(delta)
        if lu is None:
            raise np.linalg.LinAlgError(
                "KKT system is singular even after dual regularization; "
                "the constraint matrix is rank deficient"
            )

    suspects = _suspect_rows(problem, lu, n)
    if suspects and not diagnostics["regularized"]:
        diagnostics["suspect_rows"] = suspects

    def kkt_solve(vec: np.ndarray) -> np.ndarray:
        return s * lu.solve(s * vec)

    y = kkt_solve(rhs)
    b_scale = 1.0 + np.abs(problem.rhs).max(initial=0.0)
    for _ in range(2):
        residual = rhs - kkt @ y
        if np.abs(residual).max(initial=0.0) <= tol * b_scale:
            break
        y = y + kkt_solve(residual)
        diagnostics["refinement_rounds"] += 1

    return _extract_solution(problem, y[:n], y[n:], tol, diagnostics)


def dense_oracle_solve(problem: EstimationProblem,
                       tol: float = DEFAULT_TOL) -> Solution:
    """Independent dense factorization of the same KKT system (tests only).

    Guarded to ``DENSE_ORACLE_MAX_VARS`` decision variables.
    """
    n = problem.n_variables
    if n > DENSE_ORACLE_MAX_VARS:
        raise ValueError(
            f"dense oracle limited to {DENSE_ORACLE_MAX_VARS} variables, "
            f"problem has {n}"
        )
    m_rows = problem.n_rows
    kkt = np.zeros((n + m_rows, n + m_rows))
    kkt[:n, :n] = np.diag(problem.hessian_diag)
    a_dense = problem.constraint_matrix.toarray()
    kkt[:n, n:] = a_dense.T
    kkt[n:, :n] = a_dense
    rhs = np.concatenate([np.zeros(n), problem.rhs])
    try:
        y = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        delta = 1e-12 * max(np.abs(a_dense).sum(axis=1).max(initial=0.0), 1.0)
        kkt[n:, n:] -= delta * np.eye(m_rows)
        y = np.linalg.solve(kkt, rhs)
        return _extract_solution(problem, y[:n], y[n:], tol,
                                 {"regularized": True, "dual_shift": delta,
                                  "dense_oracle": True, "tol": tol})
    residual = rhs - kkt @ y
    b_scale = 1.0 + np.abs(problem.rhs).max(initial=0.0)
    if np.abs(residual).max(initial=0.0) > tol * b_scale:
        y = y + np.linalg.solve(kkt, residual)
    return _extract_solution(problem, y[:n], y[n:], tol,
                             {"dense_oracle": True, "tol": tol})


def _extract_solution(problem: EstimationProblem, x: np.ndarray,
                      lam: np.ndarray, tol: float,
                      diagnostics: dict) -> Solution:
    index = problem.var_index
    a = problem.constraint_matrix
    row_residual = a @ x - problem.rhs
    grad_residual = problem.hessian_diag * x + a.T @ lam
    constraint_residual = float(np.abs(row_residual).max(initial=0.0))
    kkt_residual = float(max(np.abs(grad_residual).max(initial=0.0),
                             constraint_residual))
    objective = 0.5 * float(x @ (problem.hessian_diag * x))
    converged = bool(
        constraint_residual <= tol * (1.0 + np.abs(problem.rhs).max(initial=0.0)))

    k, n_places, n_caps = index.n_steps, index.n_places, index.n_caps
    q_b = x[: k * n_places].reshape(k, n_places).copy()
    u = x[k * n_places: k * (n_places + n_caps)].reshape(k, n_caps).copy()
    errors = x[k * (n_places + n_caps):].copy()

    diagnostics = dict(diagnostics)
    diagnostics["negative_flow_count"] = int((u < 0).sum())
    return Solution(
        q_b=q_b, u=u, errors=errors, objective_value=objective,
        kkt_residual=kkt_residual, constraint_residual=constraint_residual,
        converged=converged, x=x, multipliers=lam, diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Residual reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualStats:
    count: int
    min: float
    median: float
    max: float
    l2: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "ResidualStats":
        return cls(int(values.size), float(values.min()),
                   float(np.median(values)), float(values.max()),
                   float(np.linalg.norm(values)))

    def to_dict(self) -> dict:
        return {"count": self.count, "min": self.min, "median": self.median,
                "max": self.max, "l2": self.l2}


@dataclass(frozen=True)
class FamilyResiduals:
    family: str
    row_residuals: ResidualStats
    errors: Optional[ResidualStats] = None

    def to_dict(self) -> dict:
        out = {"family": self.family,
               "row_residuals": self.row_residuals.to_dict()}
        if self.errors is not None:
            out["errors"] = self.errors.to_dict()
        return out


def residual_report(problem: EstimationProblem,
                    solution: Solution) -> list[FamilyResiduals]:
    """Group measurement errors and row residuals by constraint family.

    The mass-balance block reports row residuals only; empty families are
    omitted.
    """
    row_residual = problem.constraint_matrix @ solution.x - problem.rhs
    report: list[FamilyResiduals] = []
    n_balance = problem.n_balance_rows
    if n_balance:
        report.append(FamilyResiduals(
            "mass_balance",
            ResidualStats.from_values(row_residual[:n_balance])))

    by_family: dict[str, list[int]] = {}
    for r, con in enumerate(problem.constraints):
        by_family.setdefault(con.family, []).append(r)
    for family, indices in by_family.items():
        idx = np.asarray(indices)
        report.append(FamilyResiduals(
            family,
            ResidualStats.from_values(row_residual[n_balance + idx]),
            ResidualStats.from_values(solution.errors[idx]),
        ))
    return report
