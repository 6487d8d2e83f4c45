"""Minimal dense double-precision linear algebra.

Matrices are row-major ``numpy.ndarray`` of dtype float64, vectors are 1-D
arrays. The symmetric eigensolver is a cyclic Jacobi rotation scheme: the
covariance matrices it has to handle are tiny (at most a few dozen rows),
and Jacobi is deterministic, which keeps whitening transforms reproducible.
"""

import numpy as np

JACOBI_MAX_SWEEPS = 100


class LinalgError(ValueError):
    """Raised when an operation's input contract is violated."""


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise LinalgError(
            f"matmul dimension mismatch: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def _check_symmetric(s: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    s = as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise LinalgError(f"expected a square matrix, got {s.shape}")
    if s.size and np.max(np.abs(s - s.T)) > tol:
        raise LinalgError(f"matrix is not symmetric within {tol}")
    return s


def jacobi_eigh(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors as the corresponding columns, so that
    ``s = V @ diag(w) @ V.T``. Raises :class:`LinalgError` for non-square or
    asymmetric input, or if the off-diagonal mass has not vanished after
    ``JACOBI_MAX_SWEEPS`` sweeps.
    """
    a = _check_symmetric(s).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n < 2:
        return a.diagonal().copy(), v

    scale = max(1.0, float(np.max(np.abs(a))))
    tol = 1e-14 * scale

    def off_diag() -> float:
        return float(np.sqrt(np.sum(np.tril(a, -1) ** 2)))

    for _ in range(JACOBI_MAX_SWEEPS):
        if off_diag() <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # rotate rows/columns p and q of a, and columns of v
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - sn * rq
                a[q, :] = sn * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - sn * cq
                a[:, q] = sn * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    if off_diag() > tol:
        raise LinalgError(
            f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )

    w = a.diagonal().copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _psd_power(s, power: float, eps: float) -> np.ndarray:
    w, v = jacobi_eigh(s)
    if np.any(w < -1e-8):
        raise LinalgError(f"matrix is not PSD: smallest eigenvalue {w.min():g}")
    w = np.maximum(w, 0.0) + eps
    if power < 0 and np.any(w <= 0.0):
        raise LinalgError("zero eigenvalue with eps=0: inverse power undefined")
    out = (v * w**power) @ v.T
    return 0.5 * (out + out.T)


def inv_sqrt_psd(s, eps: float = 1e-6) -> np.ndarray:
    """Inverse square root ``V diag((w+eps)^-1/2) V^T`` of a PSD matrix."""
    return _psd_power(s, -0.5, eps)


def sqrt_psd(s, eps: float = 0.0) -> np.ndarray:
    """Square root ``V diag((w+eps)^1/2) V^T`` of a PSD matrix."""
    return _psd_power(s, 0.5, eps)
