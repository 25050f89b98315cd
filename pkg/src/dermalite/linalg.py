"""Symmetric eigendecomposition by cyclic Jacobi rotations."""

from __future__ import annotations

import numpy as np

from .errors import NaNInput, NonSymmetric


def _round_robin(m):
    """Rounds of disjoint index pairs covering every pair of 0..m-1 once per sweep."""
    players = list(range(m if m % 2 == 0 else m + 1))
    half = len(players) // 2
    rounds = []
    for _ in range(len(players) - 1):
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < m) & (q < m)  # drop pairings with the odd-size bye
        p, q = p[keep], q[keep]
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def off_norm(a) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def jacobi_eigh(a, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigenvalues and eigenvectors of a real symmetric matrix.

    Returns ``(w, v, sweeps)`` with ``a ~= v @ diag(w) @ v.T``; eigenvalues are
    unsorted. Iteration stops once the off-diagonal Frobenius norm falls below
    ``tol * ||a||_F`` (or ``tol`` for a zero-norm matrix).

    Every sweep visits all n(n-1)/2 pairs; pairs are grouped into n-1 rounds of
    disjoint rotations so each round is one vectorised update. Rotation formulas
    follow the classical stable form t = sgn(theta) / (|theta| + sqrt(theta^2 + 1)).
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NonSymmetric(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NaNInput("matrix contains NaN or Inf")
    scale = np.abs(a).max() if a.size else 0.0
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(scale, 1.0)):
        raise NonSymmetric("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = len(a)
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v, 0
    threshold = tol * max(float(np.linalg.norm(a)), 1.0) if tol > 0 else 0.0
    rounds = _round_robin(n)
    sweeps = 0
    while sweeps < max_sweeps and off_norm(a) > threshold:
        sweeps += 1
        for p, q in rounds:
            apq = a[p, q]
            nz = apq != 0.0
            if not nz.any():
                continue
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                theta = (a[q, q] - a[p, p]) / (2.0 * np.where(nz, apq, 1.0))
                # |theta| -> inf gives t -> 0, a no-op rotation
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(nz, np.nan_to_num(t, nan=0.0), 0.0)
            t = np.where(nz & (theta == 0.0), 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # columns, then rows, then accumulate into v
            ap, aq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            ap, aq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * ap - s[:, None] * aq, s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(a).copy(), v, sweeps


def eigh_descending(a, **kw):
    """Jacobi eigenpairs sorted by descending eigenvalue."""
    w, v, _ = jacobi_eigh(a, **kw)
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


# full Jacobi above this size is minutes per sweep in numpy
JACOBI_FULL_MAX = 500


def top_eigenpairs(a, dim: int, full_max: int = JACOBI_FULL_MAX, seed: int = 0,
                   max_iter: int = 500, tol: float = 1e-10):
    """The ``dim`` largest eigenpairs of symmetric ``a`` (descending).

    Matrices up to ``full_max`` rows are diagonalised directly. Larger ones go
    through block subspace iteration; the Rayleigh-Ritz step on the small
    projected matrix is again solved by Jacobi.
    """
    a = np.asarray(a, dtype=np.float64)
    m = len(a)
    if m <= full_max:
        w, v = eigh_descending(a)
        return w[:dim], v[:, :dim]
    if not np.all(np.isfinite(a)):
        raise NaNInput("matrix contains NaN or Inf")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(np.abs(a).max(), 1.0)):
        raise NonSymmetric("matrix is not symmetric")
    block = min(m, dim + 16)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((m, block)))
    prev = None
    for _ in range(max_iter):
        q, _ = np.linalg.qr(a @ q)
        w, s = eigh_descending(q.T @ a @ q)
        if prev is not None and np.all(np.abs(w[:dim] - prev) <= tol * max(np.abs(w).max(), 1.0)):
            break
        prev = w[:dim]
    v = q @ s
    return w[:dim], v[:, :dim]
