"""Dense spectral primitives: top singular pair by power iteration, nuclear
norms, and a small-matrix full-SVD oracle used by tests and feasibility checks.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITERS = 500
SVD_SIZE_LIMIT = 64


@dataclass(frozen=True)
class SingularTriple:
    """Leading singular value and unit singular vectors of a matrix."""

    sigma: float
    u: np.ndarray
    v: np.ndarray
    converged: bool = True


def _as_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def _canonical_zero_triple(rows, cols):
    u = np.zeros(rows)
    v = np.zeros(cols)
    u[0] = 1.0
    v[0] = 1.0
    return SingularTriple(0.0, u, v, converged=True)


def top_singular_pair(m, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, seed=0):
    """Leading singular triple of ``m`` via power iteration on the Gram operator.

    Iterates v <- normalize(M^T (M v)) from a seeded random start and stops when
    successive iterates have cosine >= 1 - tol.  Restarts once with a different
    seed if the first run stalls (start vector orthogonal to the leading
    subspace).  Non-convergence returns the best estimate with
    ``converged=False``; a zero matrix returns sigma 0 with canonical e1 vectors.
    """
    m = _as_matrix(m)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rows, cols = m.shape
    if not np.any(m):
        return _canonical_zero_triple(rows, cols)

    gram = m.T @ m if cols <= 256 else None
    best = None
    for attempt in range(2):
        rng = np.random.default_rng(seed + attempt)
        v = rng.standard_normal(cols)
        v /= np.linalg.norm(v)
        converged = False
        stalled = False
        for _ in range(max_iters):
            w = gram @ v if gram is not None else m.T @ (m @ v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                # v landed in the nullspace; only a restart can help
                stalled = True
                break
            w /= nw
            if abs(w @ v) >= 1.0 - tol:
                v = w
                converged = True
                break
            v = w
        mv = m @ v
        sigma = float(np.linalg.norm(mv))
        if sigma > 0.0:
            u = mv / sigma
        else:
            u = np.zeros(rows)
            u[0] = 1.0
        candidate = SingularTriple(sigma, u, v, converged=converged)
        if best is None or candidate.sigma > best.sigma:
            best = candidate
        if converged and not stalled:
            break
    return best


def full_svd_small(m):
    """Full SVD of a small matrix; the independent oracle for spectral checks.

    Refuses matrices larger than 64 in either dimension: this routine backs
    tests and feasibility audits, not the attack hot path.
    """
    m = _as_matrix(m)
    rows, cols = m.shape
    if rows > SVD_SIZE_LIMIT or cols > SVD_SIZE_LIMIT:
        raise ValueError(
            f"full_svd_small limited to {SVD_SIZE_LIMIT}x{SVD_SIZE_LIMIT}, got {rows}x{cols}"
        )
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return u, s, vt.T


def nuclear_norm(m):
    """Sum of singular values of a matrix."""
    m = _as_matrix(m)
    return float(np.linalg.svd(m, compute_uv=False).sum())


def tensor_nuclear_norm(x):
    """Channel-summed nuclear norm of a (channels, height, width) tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (c, h, w) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite entries")
    return float(sum(np.linalg.svd(x[c], compute_uv=False).sum() for c in range(x.shape[0])))


def vector_norms(x):
    """Flattened (l1, l2, linf) norms of an array."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    a = np.abs(flat)
    return float(a.sum()), float(np.linalg.norm(flat)), float(a.max(initial=0.0))


def inner_product(a, b):
    """Flattened inner product; refuses mismatched shapes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(a.ravel() @ b.ravel())
