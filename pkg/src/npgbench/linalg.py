"""Dense linear algebra kernels shared by the curvature backends.

Matrices are plain float64 numpy arrays, shape (n, n) or (m, n); vectors are
1-d arrays.  Everything here is deterministic given its inputs (and seed,
where one is taken).
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky factorization fails on the given matrix."""


def cholesky_solve(a, b):
    """Solve a @ x = b for symmetric positive definite a.

    Raises NotPositiveDefiniteError if the factorization fails.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    try:
        c, low = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"matrix of shape {a.shape} is not positive definite: {exc}"
        ) from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def sym_eig(a, symmetry_tol=1e-10):
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending and
    eigenvectors[:, i] the unit eigenvector for eigenvalues[i].
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > symmetry_tol * scale:
        raise ValueError("matrix is not symmetric")
    w, q = np.linalg.eigh(a)
    order = np.argsort(w)[::-1]
    return w[order], q[:, order]


@dataclass
class CGResult:
    x: np.ndarray
    residual: float
    iterations: int


def conjugate_gradient(apply_a, b, max_iters, tol=1e-10):
    """Solve A x = b by conjugate gradients, A given as the operator apply_a.

    A must be symmetric positive definite for the recurrence to be valid.
    The residual is recomputed from scratch every 10 iterations to bound the
    drift of the recursive update.  Convergence test is ||r|| <= tol * ||b||.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return CGResult(x=x, residual=0.0, iterations=0)

    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    threshold = tol * norm_b
    for k in range(max_iters):
        ap = apply_a(p)
        if not np.all(np.isfinite(ap)):
            raise FloatingPointError(
                f"conjugate gradient produced non-finite values at iteration {k}"
            )
        alpha = rr / float(p @ ap)
        x = x + alpha * p
        if (k + 1) % 10 == 0:
            r = b - apply_a(x)
        else:
            r = r - alpha * ap
        rr_next = float(r @ r)
        if not np.isfinite(rr_next):
            raise FloatingPointError(
                f"conjugate gradient produced non-finite values at iteration {k}"
            )
        if np.sqrt(rr_next) <= threshold:
            return CGResult(x=x, residual=float(np.sqrt(rr_next)), iterations=k + 1)
        p = r + (rr_next / rr) * p
        rr = rr_next
    return CGResult(x=x, residual=float(np.sqrt(rr)), iterations=max_iters)


def orthogonal_matrix(rows, cols, seed):
    """Seeded orthogonal(-ish) matrix of shape (rows, cols).

    For rows >= cols the columns are orthonormal; otherwise the rows are.
    The QR sign ambiguity is fixed by forcing a nonnegative diagonal of R, so
    the result is deterministic in the seed.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    if rows >= cols:
        return q
    return q.T
