"""Deterministic dense linear algebra in float64.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
routines here (Householder QR, cyclic Jacobi eigensolver, one-sided Jacobi
SVD, randomized SVD) are written out explicitly so their behaviour is fixed
and testable rather than depending on whichever LAPACK build is installed.

Randomness comes from a counter-based splitmix64 stream. A given
``(seed, counter)`` pair always produces the same 64-bit word on every
platform, and Gaussian samples are derived from pairs of words with the
Box-Muller transform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DimensionError, ParameterError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


# ---------------------------------------------------------------------------
# dense kernels
# ---------------------------------------------------------------------------

def as_matrix(a, name="matrix") -> np.ndarray:
    """Return ``a`` as a finite float64 2-D array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains non-finite entries")
    return m


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return a @ b


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _check_same(a, b, "add")
    return a + b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def scale(a, alpha: float) -> np.ndarray:
    return as_matrix(a) * float(alpha)


def power(a, k: float) -> np.ndarray:
    return as_matrix(a) ** k


def frobenius(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def trace(a) -> float:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"trace: matrix must be square, got {a.shape}")
    return float(np.trace(a))


# ---------------------------------------------------------------------------
# counter-based RNG
# ---------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, counters) -> np.ndarray:
    """64-bit words for the given counters of the stream keyed by ``seed``.

    Word ``i`` is the splitmix64 finaliser applied to ``seed + (i + 1) * gamma``
    (mod 2**64), so any position of the stream can be computed directly.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + (c + np.uint64(1)) * _GAMMA
        return _mix64(z)


def keyed_seed(seed: int, *keys) -> int:
    """Derive a stream seed from ``seed`` and any number of str/int keys."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    for k in keys:
        h.update(b"\x00")
        h.update(str(k).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngState:
    """Immutable position ``counter`` in the splitmix64 stream keyed by ``seed``."""

    seed: int
    counter: int = 0

    def advance(self, steps: int) -> "RngState":
        return RngState(self.seed, self.counter + int(steps))

    def words(self, n: int) -> tuple[np.ndarray, "RngState"]:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        return splitmix64(self.seed, idx), self.advance(n)


def _to_unit(words: np.ndarray) -> np.ndarray:
    # top 53 bits -> [0, 1)
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def rng_uniform(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """``n`` uniforms on [0, 1); consumes exactly ``n`` counter steps."""
    w, nxt = rng.words(n)
    return _to_unit(w), nxt


def gaussian_steps(rows: int, cols: int) -> int:
    """Counter steps consumed by :func:`rng_gaussian` for a ``rows x cols`` draw."""
    n = rows * cols
    return 2 * ((n + 1) // 2)


def rng_gaussian(rng: RngState, rows: int, cols: int) -> tuple[np.ndarray, RngState]:
    """Standard normal ``rows x cols`` matrix filled in row-major order.

    Each pair of outputs uses two consecutive words (u1, u2) through
    Box-Muller: ``r = sqrt(-2 ln(1 - u1))``, outputs ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)``. Consumes :func:`gaussian_steps` counter steps.
    """
    if rows < 1 or cols < 1:
        raise ParameterError(f"rng_gaussian needs rows, cols >= 1, got {rows}x{cols}")
    n = rows * cols
    steps = gaussian_steps(rows, cols)
    w, nxt = rng.words(steps)
    u = _to_unit(w).reshape(-1, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    z = np.empty(steps)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(rows, cols), nxt


# ---------------------------------------------------------------------------
# factorizations
# ---------------------------------------------------------------------------

class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def householder_qr(a) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR by Householder reflections.

    Returns ``q`` (rows x cols, orthonormal columns) and upper-triangular
    ``r`` (cols x cols) with a non-negative diagonal.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        raise DimensionError(f"householder_qr needs rows >= cols, got {a.shape}")
    r = a.copy()
    vs = []
    for j in range(n):
        x = r[j:, j]
        nx = np.linalg.norm(x)
        if nx == 0.0:
            vs.append(None)
            continue
        alpha = -nx if x[0] >= 0 else nx
        v = x.copy()
        v[0] -= alpha
        nv = np.linalg.norm(v)
        if nv == 0.0:
            vs.append(None)
            continue
        v /= nv
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        vs.append(v)
    q = np.eye(m, n)
    for j in range(n - 1, -1, -1):
        v = vs[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    r = np.triu(r[:n, :])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def jacobi_eigh(s, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = JACOBI_TOL) -> EigenDecomposition:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    ``s`` is symmetrized as (S + S^T)/2. Sweeps stop once the off-diagonal
    Frobenius norm is at most ``tol * ||S||_F``. Eigenvalues come back in
    descending order, ties keeping their original index order.
    """
    s = as_matrix(s, "s")
    if s.shape[0] != s.shape[1]:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {s.shape}")
    n = s.shape[0]
    a = 0.5 * (s + s.T)
    v = np.eye(n)
    thresh = tol * np.linalg.norm(a)

    def off(m):
        return np.linalg.norm(m - np.diag(np.diag(m)))

    converged = off(a) <= thresh
    sweep = 0
    while not converged and sweep < max_sweeps:
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
        converged = off(a) <= thresh
    if not converged:
        res = off(a)
        raise ConvergenceError(
            f"jacobi_eigh did not converge in {max_sweeps} sweeps "
            f"(off-diagonal norm {res:.3e}, threshold {thresh:.3e})",
            residual=res,
        )
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], v[:, order])


def _complete_basis(u: np.ndarray, k: int) -> np.ndarray:
    """Extend orthonormal columns ``u`` (n x r) to ``k`` columns using e_1, e_2, ..."""
    n = u.shape[0]
    cols = [u[:, i] for i in range(u.shape[1])]
    for i in range(n):
        if len(cols) >= k:
            break
        e = np.zeros(n)
        e[i] = 1.0
        for _ in range(2):
            for c in cols:
                e -= (c @ e) * c
        ne = np.linalg.norm(e)
        if ne > 1e-8:
            cols.append(e / ne)
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0))


def jacobi_svd(a, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = 1e-15):
    """Thin SVD of a tall matrix by one-sided (Hestenes) Jacobi.

    Returns ``u`` (m x n), ``sigma`` (n,) descending and ``v`` (n x n) with
    ``a = u @ diag(sigma) @ v.T``. Columns of ``u`` that belong to zero
    singular values are filled in to keep ``u`` orthonormal.
    """
    g = as_matrix(a, "a").copy()
    m, n = g.shape
    if m < n:
        raise DimensionError(f"jacobi_svd needs rows >= cols, got {g.shape}")
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = g[:, i] @ g[:, i]
                beta = g[:, j] @ g[:, j]
                gamma = g[:, i] @ g[:, j]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                gi, gj = g[:, i].copy(), g[:, j].copy()
                g[:, i] = c * gi - s * gj
                g[:, j] = s * gi + c * gj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise ConvergenceError(f"jacobi_svd did not converge in {max_sweeps} sweeps")
    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    cutoff = (sigma[0] if n else 0.0) * max(m, n) * np.finfo(float).eps
    keep = sigma > cutoff
    r = int(np.sum(keep))
    u = g[:, :r] / sigma[:r]
    u = _complete_basis(u, n)
    sigma = np.where(keep, sigma, 0.0)
    return u, sigma, v


def rsvd(a, k: int, oversample: int = 8, rng: RngState | None = None, power_iters: int = 1):
    """Randomized truncated SVD ``a ~= u @ diag(sigma) @ v.T``.

    Random range finder (Gaussian test matrix, ``power_iters`` rounds of
    ``A A^T`` sharpening with re-orthonormalisation), Householder QR, then an
    exact small SVD of ``Q^T A``. The test matrix is drawn transposed so that
    increasing ``k`` for a fixed seed only appends sample columns.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ParameterError(f"rsvd rank k must lie in [1, {min(m, n)}], got {k}")
    if oversample < 0:
        raise ParameterError(f"oversample must be >= 0, got {oversample}")
    rng = rng if rng is not None else RngState(0)
    width = min(k + oversample, m, n)
    omega, _ = rng_gaussian(rng, width, n)
    y = a @ omega.T
    for _ in range(power_iters):
        q, _ = householder_qr(y)
        y = a @ (a.T @ q)
    q, _ = householder_qr(y)
    b = q.T @ a
    # b is width x n with width <= n: take the SVD of its transpose
    vb, sigma, ub = jacobi_svd(b.T)
    u = q @ ub
    return u[:, :k], sigma[:k], vb[:, :k]


def symmetric_top_eigh(s, k: int, oversample: int = 8, rng: RngState | None = None,
                       max_iters: int = 200, tol: float = 1e-13) -> EigenDecomposition:
    """Top-``k`` eigenpairs of a symmetric PSD matrix.

    Randomized range finder followed by subspace iteration with
    Rayleigh-Ritz extraction, stopped once the top-``k`` Ritz values move by
    less than ``tol`` relative to the largest. The basis is completed with
    the orthogonal complement (eigenvalue 0 placeholder), so callers always
    receive a square orthonormal matrix.
    """
    s = as_matrix(s, "s")
    n = s.shape[0]
    if s.shape != (n, n):
        raise DimensionError(f"symmetric_top_eigh needs a square matrix, got {s.shape}")
    if not 1 <= k <= n:
        raise ParameterError(f"rank k must lie in [1, {n}], got {k}")
    s = 0.5 * (s + s.T)
    rng = rng if rng is not None else RngState(0)
    width = min(k + oversample, n)
    omega, _ = rng_gaussian(rng, width, n)
    y = s @ omega.T
    prev = None
    for _ in range(max_iters):
        q, _ = householder_qr(y)
        small = jacobi_eigh(q.T @ s @ q)
        ritz = small.eigenvalues[:k]
        if prev is not None and np.max(np.abs(ritz - prev)) <= tol * max(abs(ritz[0]), 1e-300):
            break
        prev = ritz
        y = s @ (q @ small.eigenvectors)
    u = q @ small.eigenvectors[:, :k]
    full = _complete_basis(u, n)
    vals = np.zeros(n)
    vals[:k] = np.maximum(ritz, 0.0)
    return EigenDecomposition(vals, full)
