"""
Slack-maximising feasibility LP for a signed system of homogeneous half-spaces.

For constraint rows a_i = (1, x_iᵀ) with signs s_i, solve

    max r   s.t.   s_i·a_i·β ≥ r·‖a_i‖,   0 ≤ r ≤ 1,   −B ≤ β_j ≤ B

with a dual simplex over active sets. A basis is J+2 linearly independent
active constraints; the box and slack bounds come first in the constraint
order and the rows follow in input order, so a basis optimal for a prefix
of the rows stays dual feasible when rows are appended. The enumeration
warm-starts every child LP from its parent's basis this way. The optimum β
is a pseudo-Chebyshev centre of the cell.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .conf import get_setting
from .exceptions import DimensionMismatchError, InvariantViolationError

logger = logging.getLogger(__name__)

PLUS = 1
MINUS = -1

# Most-violated entering row until then, lowest index afterwards (Bland).
BLAND_AFTER = 50


class FeasibilityStatus(enum.Enum):
    FEASIBLE = 'feasible'
    INFEASIBLE = 'infeasible'
    DEGENERATE = 'degenerate'


@dataclass(frozen=True)
class SignedConstraint:
    """One hyperplane row with the side (+1 or -1) the cell must lie on."""
    row: np.ndarray
    sign: int
    norm: Optional[float] = None

    def __post_init__(self):
        row = np.array(self.row, dtype=float).reshape(-1)
        row.setflags(write=False)
        if self.sign not in (PLUS, MINUS):
            raise InvariantViolationError(f"Constraint sign must be +1 or -1, got {self.sign!r}")
        norm = float(np.linalg.norm(row)) if self.norm is None else float(self.norm)
        if not norm > 0:
            raise InvariantViolationError("Constraint row must be nonzero")
        object.__setattr__(self, 'row', row)
        object.__setattr__(self, 'norm', norm)


@dataclass(frozen=True)
class FeasibilityResult:
    r_star: float
    witness: np.ndarray
    status: FeasibilityStatus
    iterations: int = 0
    basis: Optional[Tuple[int, ...]] = None

    @property
    def feasible(self):
        return self.status is FeasibilityStatus.FEASIBLE


def bound_count(width):
    """Box constraints ±β_j ≤ B for every coefficient, then r ≤ 1 and −r ≤ 0."""
    return 2 * width + 2


def cold_basis(width):
    """β_j ≤ B for every j plus r ≤ 1: dual feasible for the objective max r."""
    return tuple(range(0, 2 * width, 2)) + (2 * width,)


def bound_system(width, box):
    G = np.zeros((bound_count(width), width + 1))
    h = np.zeros(bound_count(width))
    for j in range(width):
        G[2 * j, j], G[2 * j + 1, j] = 1.0, -1.0
        h[2 * j] = h[2 * j + 1] = box
    G[2 * width, width], h[2 * width] = 1.0, 1.0
    G[2 * width + 1, width] = -1.0
    return G, h


def row_system(units, signs):
    """Rows r − s_i·(a_i/‖a_i‖)·β ≤ 0 over the variables (β, r)."""
    units = np.atleast_2d(units)
    signed = units * np.asarray(signs, dtype=float)[:, None]
    return np.hstack([-signed, np.ones((units.shape[0], 1))])


def _dual_simplex(G, h, basis, max_iter, feas_tol, pivot_tol):
    """
    Maximise r = z[-1] s.t. G·z ≤ h, starting from a dual-feasible basis.

    Returns (z, basis, iterations, converged).
    """
    n_vars = G.shape[1]
    basis = np.array(basis, dtype=int)
    c = np.zeros(n_vars)
    c[-1] = 1.0
    z = np.zeros(n_vars)
    for iteration in range(max_iter):
        try:
            inverse = np.linalg.inv(G[basis])
        except np.linalg.LinAlgError:
            logger.debug(f"Singular basis {basis.tolist()} after {iteration} pivots")
            return z, tuple(int(i) for i in basis), iteration, False
        z = inverse @ h[basis]
        violation = G @ z - h
        violated = np.flatnonzero(violation > feas_tol)
        if violated.size == 0:
            return z, tuple(int(i) for i in basis), iteration, True
        if iteration < BLAND_AFTER:
            entering = int(violated[np.argmax(violation[violated])])
        else:
            entering = int(violated[0])

        duals = c @ inverse
        direction = G[entering] @ inverse
        candidates = np.flatnonzero(direction > pivot_tol)
        if candidates.size == 0:
            # Dual unbounded means an empty primal, impossible while z = 0 is feasible.
            logger.debug(f"No leaving row for entering constraint {entering}")
            return z, tuple(int(i) for i in basis), iteration, False
        ratios = np.maximum(duals[candidates], 0.0) / direction[candidates]
        tied = candidates[ratios <= ratios.min() + pivot_tol]
        leaving = int(tied[np.argmin(basis[tied])])
        basis[leaving] = entering
    return z, tuple(int(i) for i in basis), max_iter, False


def solve_units(units, signs, bounds, basis=None, eps=1e-7, max_iter=5000, pivot_tol=1e-10):
    """
    Solve the LP for unit-normalised rows with a prebuilt bound system.

    `bounds` is the (G, h) pair from bound_system; `basis` a warm start whose
    row indices refer to positions in `units`, offset by the bound count.
    """
    G_bounds, h_bounds = bounds
    width = G_bounds.shape[1] - 1
    G = np.vstack([G_bounds, row_system(units, signs)])
    h = np.concatenate([h_bounds, np.zeros(G.shape[0] - G_bounds.shape[0])])
    start = cold_basis(width) if basis is None else basis
    z, basis, iterations, converged = _dual_simplex(G, h, start, max_iter, 10 * pivot_tol, pivot_tol)
    witness = z[:width].copy()
    r_star = float(min(max(z[-1], 0.0), 1.0))
    if not converged:
        logger.warning(f"Feasibility LP stopped after {iterations} pivots on {len(signs)} constraints")
        return FeasibilityResult(r_star=r_star, witness=witness, status=FeasibilityStatus.DEGENERATE,
                                 iterations=iterations, basis=basis)
    status = FeasibilityStatus.FEASIBLE if r_star > eps else FeasibilityStatus.INFEASIBLE
    return FeasibilityResult(r_star=r_star, witness=witness, status=status, iterations=iterations, basis=basis)


def solve_system(rows, signs, norms, box=None, eps=None, max_iter=None, pivot_tol=None,
                 basis=None) -> FeasibilityResult:
    """Array form of solve_feasibility, with an optional warm-start basis."""
    box = get_setting('LP_BOX_BOUND') if box is None else box
    eps = get_setting('LP_FEASIBILITY_EPS') if eps is None else eps
    max_iter = get_setting('LP_MAX_ITER') if max_iter is None else max_iter
    pivot_tol = get_setting('LP_PIVOT_TOL') if pivot_tol is None else pivot_tol
    if not box > 0:
        raise InvariantViolationError(f"Coefficient box bound must be positive, got {box}")

    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    units = rows / np.asarray(norms, dtype=float)[:, None]
    return solve_units(units, signs, bound_system(rows.shape[1], float(box)), basis=basis, eps=eps,
                       max_iter=max_iter, pivot_tol=pivot_tol)


def solve_feasibility(constraints: Sequence[SignedConstraint], box: Optional[float] = None) -> FeasibilityResult:
    """
    Maximise the slack r of a signed half-space system and return the witness
    β. Status is Feasible iff r* exceeds the feasibility threshold; hitting the
    iteration cap gives Degenerate, which callers treat as Infeasible.
    """
    if not constraints:
        raise InvariantViolationError("The feasibility LP needs at least one constraint")
    widths = {c.row.size for c in constraints}
    if len(widths) > 1:
        raise DimensionMismatchError("Constraint rows", min(widths), max(widths))
    rows = np.array([c.row for c in constraints])
    signs = np.array([c.sign for c in constraints])
    norms = np.array([c.norm for c in constraints])
    return solve_system(rows, signs, norms, box=box)


def witness_slack(rows, signs, norms, witness):
    """Per-constraint s_i·a_i·β / ‖a_i‖, i.e. the normalised slack of a witness."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return np.asarray(signs) * (rows @ witness) / np.asarray(norms)
