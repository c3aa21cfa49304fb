"""Dense linear algebra used by every protocol step.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The exact SVD is a one-sided (Hestenes) Jacobi iteration; the randomized SVD
is a Gaussian range finder with QR-stabilised subspace iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
DEFAULT_POWER_ITERS = 8


class ShapeError(ValueError):
    """Raised when matrix dimensions are incompatible."""


class NonFiniteError(ValueError):
    """Raised when a matrix contains NaN or Inf."""


class SvdConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with ``sigma`` non-increasing."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    clamped: bool = False

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class FactorPair:
    """Low-rank factors with ``b @ a`` of shape ``(m, n)``."""

    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        if self.b.ndim != 2 or self.a.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(
                f"factor inner dimensions disagree: b{self.b.shape} a{self.a.shape}"
            )

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.b.shape[0], self.a.shape[1])

    def product(self) -> np.ndarray:
        return self.b @ self.a


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (no copy when possible)."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def matmul(lhs, rhs) -> np.ndarray:
    lhs = as_matrix(lhs, "lhs")
    rhs = as_matrix(rhs, "rhs")
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    out = lhs @ rhs
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("matrix product overflowed")
    return out


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _orthonormal_completion(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged in ``keep`` by an orthonormal
    completion of the kept ones (Gram-Schmidt against the standard basis)."""
    rows, cols = q.shape
    out = q.copy()
    basis = [out[:, j] for j in range(cols) if keep[j]]
    fill = [j for j in range(cols) if not keep[j]]
    e = 0
    for j in fill:
        while e < rows:
            cand = np.zeros(rows)
            cand[e] = 1.0
            e += 1
            # two passes of classical Gram-Schmidt keep this orthogonal to 1e-15
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-8:
                cand /= nrm
                basis.append(cand)
                out[:, j] = cand
                break
    return out


def _jacobi_columns(g: np.ndarray):
    """One-sided Jacobi on the columns of ``g`` (rows >= cols).

    Returns the rotated matrix (mutually orthogonal columns) and the
    accumulated right rotation ``v``.
    """
    n = g.shape[1]
    v = np.eye(n)
    # columns below eps * |g| end up under the singular-value cutoff anyway;
    # rotating them only chases subnormal rounding
    negligible = (np.finfo(np.float64).eps * float(np.linalg.norm(g))) ** 2
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                gi = g[:, i]
                gj = g[:, j]
                alpha = float(gi @ gi)
                beta = float(gj @ gj)
                gamma = float(gi @ gj)
                # sqrt of each norm separately so tiny columns do not underflow
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= JACOBI_TOL * math.sqrt(alpha) * math.sqrt(beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if math.isinf(zeta) or abs(zeta) > 1e150:
                    # the rotation angle is below double precision
                    continue
                rotated = True
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                gi_new = c * gi - s * gj
                g[:, j] = s * gi + c * gj
                g[:, i] = gi_new
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            return g, v
    # measure how far from orthogonal the columns still are
    norms = np.linalg.norm(g, axis=0)
    norms[norms == 0] = 1.0
    gram = (g / norms).T @ (g / norms)
    off = frobenius_norm(gram - np.diag(np.diag(gram)))
    raise SvdConvergenceError(
        f"one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps", off
    )


def svd_exact(m) -> SvdResult:
    """Thin SVD with ``k = min(rows, cols)`` via one-sided Jacobi.

    Works on the orientation with fewer columns so the rotations act on the
    smaller Gram matrix. Columns of ``u`` belonging to zero singular values are
    filled with an orthonormal completion.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    transposed = cols > rows
    g = (m.T if transposed else m).copy()
    g, v = _jacobi_columns(g)

    sigma = np.linalg.norm(g, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]

    cutoff = max(g.shape) * np.finfo(np.float64).eps * (sigma[0] if sigma.size else 0.0)
    keep = sigma > cutoff
    u = np.zeros_like(g)
    u[:, keep] = g[:, keep] / sigma[keep]
    if not np.all(keep):
        u = _orthonormal_completion(u, keep)

    if transposed:
        u, v = v, u
    return SvdResult(u=u, sigma=sigma, v=v)


def default_oversample(target_rank: int) -> int:
    return 4 * target_rank


def svd_randomized(
    m,
    target_rank: int,
    oversample: int | None = None,
    power_iters: int = DEFAULT_POWER_ITERS,
    rng: np.random.Generator | None = None,
) -> SvdResult:
    """Truncated SVD from a Gaussian sketch with subspace iteration.

    ``oversample`` defaults to ``4 * target_rank``. When ``target_rank +
    oversample`` exceeds ``min(m.shape)`` the sketch width is clamped and
    ``SvdResult.clamped`` is set.
    """
    m = as_matrix(m)
    if rng is None:
        raise ValueError("svd_randomized needs an explicit random generator")
    if target_rank < 1:
        raise ShapeError(f"target_rank must be >= 1, got {target_rank}")
    if oversample is None:
        oversample = default_oversample(target_rank)
    rows, cols = m.shape
    width = target_rank + oversample
    clamped = width > min(rows, cols)
    width = min(width, min(rows, cols))
    k = min(target_rank, width)

    omega = rng.standard_normal((cols, width))
    q, _ = np.linalg.qr(m @ omega)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(m.T @ q)
        q, _ = np.linalg.qr(m @ z)
    small = svd_exact(q.T @ m)
    u = q @ small.u
    return SvdResult(u=u[:, :k], sigma=small.sigma[:k], v=small.v[:, :k], clamped=clamped)


def svd_approx(
    m,
    r: int,
    mode: str = "exact",
    rng: np.random.Generator | None = None,
    oversample: int | None = None,
    power_iters: int = DEFAULT_POWER_ITERS,
) -> FactorPair:
    """Rank-``r`` factorisation ``(U_r S_r^{1/2}, S_r^{1/2} V_r^T)``.

    With ``mode="exact"`` the product is the Eckart-Young optimal rank-``r``
    approximation. Zero singular values give zero factor columns.
    """
    m = as_matrix(m)
    if r < 1 or r > min(m.shape):
        raise ShapeError(f"rank {r} out of range for matrix of shape {m.shape}")
    if mode == "exact":
        res = svd_exact(m)
    elif mode == "randomized":
        res = svd_randomized(m, r, oversample=oversample, power_iters=power_iters, rng=rng)
    else:
        raise ValueError(f"unknown svd mode {mode!r}")
    root = np.sqrt(res.sigma[:r])
    b = res.u[:, :r] * root
    a = (res.v[:, :r] * root).T
    return FactorPair(b=np.ascontiguousarray(b), a=np.ascontiguousarray(a))
