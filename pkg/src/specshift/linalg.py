"""Kernel reshaping and a one-sided Jacobi SVD.

Weights are plain ``numpy`` arrays in float64. 4-D convolution kernels
``(c_out, c_in, h, w)`` are viewed as ``c_out x (c_in*h*w)`` matrices with
C (row-major) flattening; 2-D weights are already matrices; 1-D weights are
never decomposed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError, ShapeError

_PAIR_TOL = 1e-15
_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = U @ diag(sigma) @ V.T`` with ``sigma`` descending.

    ``U`` is ``M x r``, ``V`` is ``N x r`` and ``r = min(M, N)``.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


def reshape_kernel(t: np.ndarray) -> np.ndarray:
    """Return the matrix view of a 2-D or 4-D weight as a new float64 array."""
    t = np.asarray(t)
    if t.ndim == 2:
        return np.array(t, dtype=np.float64)
    if t.ndim == 4:
        return np.array(t.reshape(t.shape[0], -1), dtype=np.float64)
    raise ShapeError(f"only 2-D and 4-D kernels are decomposed, got {t.ndim}-D")


def unreshape_kernel(m: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`reshape_kernel` for a kernel of shape ``dims``."""
    m = np.asarray(m)
    dims = tuple(int(d) for d in dims)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got {m.ndim}-D")
    if len(dims) == 2:
        if m.shape != dims:
            raise ShapeError(f"matrix {m.shape} does not match dims {dims}")
        return np.array(m, dtype=np.float64)
    if len(dims) != 4:
        raise ShapeError(f"dims must have 2 or 4 extents, got {dims}")
    if m.shape != (dims[0], dims[1] * dims[2] * dims[3]):
        raise ShapeError(f"matrix {m.shape} does not match kernel dims {dims}")
    return np.array(m.reshape(dims), dtype=np.float64)


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method tournament: each round is a set of disjoint column pairs,
    # so all rotations inside a round commute and can be applied at once.
    m = n + (n % 2)
    order = list(range(m))
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for k in range(m // 2):
            a, b = order[k], order[m - 1 - k]
            if max(a, b) < n:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        order = [order[0], order[-1]] + order[1:-1]
    return tuple(rounds)


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of a tall matrix; returns (A V, V)."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return a, v
    rounds = _round_robin(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for left, right in rounds:
            ai = a[:, left]
            aj = a[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > _PAIR_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            li, ri = left[active], right[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            # A huge zeta overflows to inf, which correctly gives t = 0.
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            ai, aj = a[:, li], a[:, ri]
            a[:, li] = c * ai - s * aj
            a[:, ri] = s * ai + c * aj
            vi, vj = v[:, li], v[:, ri]
            v[:, li] = c * vi - s * vj
            v[:, ri] = s * vi + c * vj
        if not rotated:
            break
    return a, v


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    # Replace columns belonging to (numerically) zero singular values with
    # unit vectors orthogonal to everything else, drawn from the standard basis.
    u = u.copy()
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    candidates = iter(range(m))
    for j in np.flatnonzero(~good):
        for k in candidates:
            x = np.zeros(m)
            x[k] = 1.0
            for _ in range(2):
                for b in basis:
                    x -= (b @ x) * b
            nrm = np.linalg.norm(x)
            if nrm > 0.5:
                u[:, j] = x / nrm
                basis.append(u[:, j])
                break
    return u


def svd_decompose(m: np.ndarray) -> SvdFactors:
    """Thin SVD by one-sided (Hestenes) Jacobi with cyclic round-robin sweeps.

    Deterministic: the sweep order is fixed and each column of ``U`` is signed
    so that its largest-magnitude entry is positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")

    transposed = m.shape[1] > m.shape[0]
    work = m.T if transposed else m
    av, v = _jacobi_tall(work)

    sigma = np.sqrt(np.einsum("ij,ij->j", av, av))
    order = np.argsort(-sigma, kind="stable")
    sigma, av, v = sigma[order], av[:, order], v[:, order]

    top = sigma[0] if sigma.size else 0.0
    good = sigma > max(work.shape) * np.finfo(np.float64).eps * top
    u = np.zeros_like(av)
    u[:, good] = av[:, good] / sigma[good]
    if not good.all():
        sigma = np.where(good, sigma, 0.0)
        u = _complete_basis(u, good)

    if transposed:
        u, v = v, u

    flip = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdFactors(U=u, sigma=sigma, V=v)
