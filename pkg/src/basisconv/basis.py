"""Eigenfilters, truncation, projection and random orthonormal bases.

A filter bank of P filters of size ``D x D x L`` is viewed as the matrix
``A`` of shape ``(L*D*D, P)`` whose columns are the vectorized filters.  The
eigenvectors of ``A A^T`` span the bank; keeping the top-Q of them gives the
least-squares optimal Q-dimensional basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import FilterBank, ShapeError, bank_from_matrix, bank_matrix, vectorize

RANK_EPS = 1e-10
ORTHO_TOL = 1e-8


class DegenerateBankError(ValueError):
    """The filter bank has no nonzero spectrum."""


def jacobi_eigh(s, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Iterates until every off-diagonal magnitude drops below
    ``tol * ||diag||``.

    Returns:
        (eigenvalues, eigenvectors) with eigenvectors as columns, in the
        order they appear on the diagonal (unsorted).
    """
    a = np.array(s, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        scale = np.linalg.norm(a.diagonal())
        off = np.abs(a[iu]).max()
        if off == 0.0 or off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        raise ArithmeticError("Jacobi iteration did not converge")
    return a.diagonal().copy(), v


def _fix_signs(vecs):
    # largest-magnitude entry of each column made positive
    idx = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _orthonormalize(g, passes: int = 2):
    """Modified Gram-Schmidt on the columns of ``g`` (repeated ``passes`` times)."""
    q = np.array(g, dtype=np.float64, copy=True)
    for _ in range(passes):
        for k in range(q.shape[1]):
            for j in range(k):
                q[:, k] -= (q[:, j] @ q[:, k]) * q[:, j]
            nrm = np.linalg.norm(q[:, k])
            if nrm == 0.0:
                raise ArithmeticError("linearly dependent columns in Gram-Schmidt")
            q[:, k] /= nrm
    return q


@dataclass(frozen=True)
class FilterMatrix:
    """Vectorized filters as columns: ``A`` has shape ``(L*D*D, P)``."""

    A: np.ndarray
    size: int
    channels: int

    @property
    def count(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class Spectrum:
    """Nonzero eigenpairs of ``A A^T`` in descending order.

    ``discarded`` holds eigenvalues that fell under the numeric rank
    threshold (clamped at zero); they count toward the total mass but can
    never be selected.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    discarded: np.ndarray
    size: int
    channels: int

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    @property
    def total(self) -> float:
        return float(self.eigenvalues.sum() + self.discarded.sum())


@dataclass(frozen=True)
class BasisSet:
    """Q orthonormal basis filters stored as the columns of ``F``.

    ``origin`` is ``"eigen"`` or ``"random"``; ``seed`` is set for random
    bases.  Eigen bases keep the source bank's full ``eigenvalues`` for
    provenance.
    """

    F: np.ndarray
    size: int
    channels: int
    origin: str = "eigen"
    seed: int | None = None
    eigenvalues: np.ndarray | None = None

    def __post_init__(self):
        # contiguous so matmul rounding does not depend on how F was sliced
        f = np.ascontiguousarray(self.F, dtype=np.float64)
        n = self.channels * self.size * self.size
        if f.ndim != 2 or f.shape[0] != n:
            raise ShapeError(f"basis must have {n} rows, got shape {f.shape}")
        if not 1 <= f.shape[1] <= n:
            raise ShapeError(f"basis size Q={f.shape[1]} outside [1, {n}]")
        if self.origin not in ("eigen", "random"):
            raise ValueError(f"unknown basis origin {self.origin!r}")
        defect = np.abs(f.T @ f - np.eye(f.shape[1])).max()
        if defect > ORTHO_TOL:
            raise ValueError(f"basis columns not orthonormal (max defect {defect:.2e})")
        f.setflags(write=False)
        object.__setattr__(self, "F", f)
        if self.eigenvalues is not None:
            object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))

    @property
    def q(self) -> int:
        return self.F.shape[1]

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    def filters(self) -> np.ndarray:
        """Basis filters as a ``(Q, D, D, L)`` array."""
        return bank_from_matrix(self.F, self.size, self.channels)


def build_filter_matrix(bank: FilterBank) -> FilterMatrix:
    return FilterMatrix(np.asarray(bank_matrix(bank.weights), dtype=np.float64),
                        bank.size, bank.channels)


def eigen_decompose(fm: FilterMatrix, rank_eps: float = RANK_EPS) -> Spectrum:
    """Nonzero eigenpairs of ``A A^T``, largest first.

    When P is smaller than the filter dimension the P x P Gram matrix
    ``A^T A`` is decomposed instead and its eigenvectors are lifted through
    ``f = A v / sqrt(lambda)``.
    """
    a = np.asarray(fm.A, dtype=np.float64)
    n, p = a.shape
    if not np.any(a):
        raise DegenerateBankError("degenerate filter bank")
    if p < n:
        vals, vecs = jacobi_eigh(a.T @ a)
    else:
        vals, vecs = jacobi_eigh(a @ a.T)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    keep = vals > rank_eps * vals[0]
    kept, dropped = vals[keep], np.clip(vals[~keep], 0.0, None)
    vecs = vecs[:, keep]
    if p < n:
        vecs = (a @ vecs) / np.sqrt(kept)
        if np.abs(vecs.T @ vecs - np.eye(len(kept))).max() > 1e-12:
            vecs = _orthonormalize(vecs)
    return Spectrum(kept, _fix_signs(vecs), dropped, fm.size, fm.channels)


def select_q(spectrum: Spectrum, t: float) -> int:
    """Smallest Q whose leading eigenvalues hold at least a fraction ``t`` of the mass."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold t must lie in (0, 1], got {t}")
    if len(spectrum) == 0:
        raise DegenerateBankError("degenerate filter bank")
    frac = np.cumsum(spectrum.eigenvalues) / spectrum.total
    hits = np.nonzero(frac >= t - 1e-12)[0]
    q = int(hits[0]) + 1 if len(hits) else len(spectrum)
    return max(1, min(q, len(spectrum)))


def truncate(spectrum: Spectrum, q: int) -> BasisSet:
    if not 1 <= q <= len(spectrum):
        raise ValueError(f"Q={q} outside [1, {len(spectrum)}]")
    return BasisSet(spectrum.eigenvectors[:, :q], spectrum.size, spectrum.channels,
                    origin="eigen", eigenvalues=spectrum.eigenvalues)


def _check_compatible(basis: BasisSet, size: int, channels: int):
    if (basis.size, basis.channels) != (size, channels):
        raise ShapeError(
            f"basis is for D={basis.size}, L={basis.channels}; got D={size}, L={channels}"
        )


def project_weights(basis: BasisSet, bank: FilterBank) -> np.ndarray:
    """Coefficient matrix ``W`` (P x Q) with row k equal to ``F^T h_k``."""
    _check_compatible(basis, bank.size, bank.channels)
    return (basis.F.T @ bank_matrix(bank.weights)).T


def reconstruct(basis: BasisSet, coeffs, biases=None) -> FilterBank:
    """Filters ``h_k = F w_k``; biases are carried through unchanged (zeros if omitted)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != basis.q:
        raise ShapeError(f"coefficients {coeffs.shape} do not match Q={basis.q}")
    weights = bank_from_matrix(basis.F @ coeffs.T, basis.size, basis.channels)
    if biases is None:
        biases = np.zeros(coeffs.shape[0])
    return FilterBank(weights, np.asarray(biases, dtype=np.float64))


def random_orthonormal(size: int, channels: int, q: int, seed: int) -> BasisSet:
    """Frozen random basis: Gram-Schmidt on Q standard-normal vectors."""
    n = channels * size * size
    if not 1 <= q <= n:
        raise ValueError(f"Q={q} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, q))
    return BasisSet(_orthonormalize(g), size, channels, origin="random", seed=int(seed))


class Approximation(NamedTuple):
    coeffs: np.ndarray
    rel_sq_err: float
    rel_err: float


def approx_error(basis: BasisSet, h) -> Approximation:
    """Least-squares fit of one filter in the basis and its relative error.

    The squared relative error is computed from the residual and from the
    quadratic form ``h^T (I - F F^T) h``; the two must agree.
    """
    h = np.asarray(h, dtype=np.float64)
    _check_compatible(basis, h.shape[0], h.shape[2])
    v = vectorize(h)
    hh = float(v @ v)
    if hh == 0.0:
        raise ValueError("zero filter has no relative error")
    b = basis.F.T @ v
    resid = basis.F @ b - v
    rel = float(resid @ resid) / hh
    quad = (hh - float(b @ b)) / hh
    if abs(rel - quad) > 1e-9:
        raise ArithmeticError(f"residual ({rel}) and quadratic-form ({quad}) errors disagree")
    return Approximation(b, rel, float(np.sqrt(rel)))


class ErrorBounds(NamedTuple):
    """Bounds on the squared relative error: ``1 - lambda_max(FF^T)`` to ``1 - lambda_min(FF^T)``."""

    lower: float
    upper: float

    def contains(self, value: float, tol: float = 1e-12) -> bool:
        return self.lower - tol <= value <= self.upper + tol


def error_bounds(basis: BasisSet) -> ErrorBounds:
    # nonzero spectrum of F F^T equals that of F^T F; the rest is zero when Q < n
    vals, _ = jacobi_eigh(basis.F.T @ basis.F)
    lam_max = float(vals.max())
    lam_min = float(vals.min()) if basis.q == basis.dim else 0.0
    return ErrorBounds(1.0 - lam_max, 1.0 - lam_min)
