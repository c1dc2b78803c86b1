"""
Reference computations: central finite differences, a Jacobi SVD, exactly
rounded summation, an argmax scan and a geometric-recursion checker.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    reference: float
    candidate: float
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def compare(quantity: str, reference, candidate, rel_tol: float = 1e-12, abs_tol: float = 0.0) -> OracleReport:
    """
    Compare two scalars or arrays.

    For arrays the errors are ‖candidate − reference‖₂ and that norm over
    ‖reference‖₂. Passes when the absolute error is within abs_tol or the
    relative error within rel_tol.
    """
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ValueError(f"{quantity}: shapes differ ({ref.shape} vs {cand.shape})")
    abs_error = float(np.linalg.norm((cand - ref).reshape(-1)))
    scale = float(np.linalg.norm(ref.reshape(-1)))
    rel_error = abs_error / scale if scale > 0 else (0.0 if abs_error == 0 else math.inf)
    passed = abs_error <= abs_tol or rel_error <= rel_tol

    def summary(a: np.ndarray) -> float:
        return float(a) if a.ndim == 0 else float(np.linalg.norm(a.reshape(-1)))

    return OracleReport(quantity, summary(ref), summary(cand), abs_error, rel_error, rel_tol, passed)


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences (f(p + h e_j) − f(p − h e_j)) / 2h for every coordinate."""
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros(p.size)
    for j in range(p.size):
        x = p.copy()
        x[j] = p[j] + step
        f_plus = f(x)
        x[j] = p[j] - step
        f_minus = f(x)
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad


def dense_sigma_min(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> float:
    """
    Smallest singular value by one-sided Jacobi rotations.

    Columns are rotated pairwise until all are mutually orthogonal to `tol`
    (relative); the singular values are then the column norms. For a tall
    d×m matrix the m singular values are returned; wide inputs are
    transposed first.
    """
    A = np.array(matrix, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("dense_sigma_min needs a nonempty 2-D matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if A.shape[0] < A.shape[1]:
        A = A.T
    n = A.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = A[:, i] @ A[:, i]
                beta = A[:, j] @ A[:, j]
                gamma = A[:, i] @ A[:, j]
                if gamma == 0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                left = A[:, i].copy()
                A[:, i] = c * left - s * A[:, j]
                A[:, j] = s * left + c * A[:, j]
        if not rotated:
            break
    else:
        logger.warning(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    return float(np.min(np.linalg.norm(A, axis=0)))


def compensated_sum(values: Sequence[float]) -> float:
    """Exactly rounded sum of floats."""
    return math.fsum(float(v) for v in values)


def argmax_scan(values: Sequence[float]) -> int:
    """Index of the first maximum found by a left-to-right scan."""
    if len(values) == 0:
        raise ValueError("argmax of an empty sequence")
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def check_geometric(errors: Sequence[float], factor: float, rel_tol: float = 1e-12) -> list[OracleReport]:
    """Check errors[t] == factor**t * errors[0] for every t."""
    errors = [float(e) for e in errors]
    return [compare(f"step {t}", factor ** t * errors[0], e, rel_tol=rel_tol, abs_tol=1e-300)
            for t, e in enumerate(errors)]
