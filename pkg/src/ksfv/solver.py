"""Sparse linear systems and a residual-checked solve."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# above this size the direct factorization is replaced by preconditioned GMRES
DIRECT_LIMIT = 256 * 256


class SolverError(RuntimeError):
    """The residual contract could not be met."""

    def __init__(self, message: str, residual: float = np.inf):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        A = sp.csr_matrix(self.matrix, dtype=float)
        b = np.asarray(self.rhs, dtype=float)
        if A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ValueError(f"inconsistent system: matrix {A.shape}, rhs {b.shape}")
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "rhs", b)

    @property
    def n(self) -> int:
        return self.rhs.shape[0]

    def residual(self, x: np.ndarray) -> float:
        """Relative residual ||Ax - b|| / ||b|| (absolute if b = 0)."""
        r = np.linalg.norm(self.matrix @ x - self.rhs)
        nb = np.linalg.norm(self.rhs)
        return float(r / nb) if nb > 0 else float(r)

    def backward_error(self, x: np.ndarray) -> float:
        """Componentwise backward error max_i |Ax - b|_i / (|A||x| + |b|)_i.

        A value near machine epsilon certifies that x is the exact solution
        of a system perturbed entry by entry at rounding level. Unlike the
        relative residual, this is attainable for badly scaled systems.
        """
        r = np.abs(self.matrix @ x - self.rhs)
        scale = abs(self.matrix) @ np.abs(x) + np.abs(self.rhs)
        ok = scale > 0
        if np.any(r[~ok] > 0):
            return np.inf
        return float(np.max(r[ok] / scale[ok], initial=0.0))

    def accepts(self, x: np.ndarray, tol: float) -> bool:
        """Residual contract of a direct solve: small relative residual, or exact up to rounding."""
        return self.residual(x) <= tol or self.backward_error(x) <= tol


class Factorization:
    """Reusable sparse LU of a fixed matrix.

    Pivoting is restricted to the diagonal (after a symmetric fill-reducing
    ordering) so that M-matrices factor into sign-consistent triangular
    factors: a nonnegative right-hand side then gives a nonnegative solution
    in floating point. Matrices for which this fails fall back to partial
    pivoting.

    Each solve is followed by ``refine`` sweeps of iterative refinement with
    residuals accumulated in extended precision (``np.longdouble``; a no-op
    gain on platforms where it aliases double). This brings the forward error
    down to a few ulps even for the poorly scaled S-block, where the plain LU
    solution carries relative errors near cond * eps.
    """

    def __init__(self, matrix, refine: int = 1):
        self.matrix = sp.csc_matrix(matrix, dtype=float)
        self.refine = refine
        self._ext = None
        try:
            self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError:
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:
                raise SolverError(f"singular matrix: {exc}") from exc

    def _refined(self, b: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self._ext is None:
            self._ext = sp.csr_matrix(self.matrix, dtype=np.longdouble)
        b_ext = b.astype(np.longdouble)
        x_ext = x.astype(np.longdouble)
        for _ in range(self.refine):
            r = b_ext - self._ext @ x_ext
            x_ext += self._lu.solve(r.astype(float))
        return x_ext.astype(float)

    def solve(self, rhs: np.ndarray, tol: float = 1e-12, max_iter: int = 3) -> np.ndarray:
        system = SparseSystem(self.matrix, rhs)
        b = system.rhs
        x = self._lu.solve(b)
        if self.refine and np.all(np.isfinite(x)):
            xr = self._refined(b, x)
            # the plain solve is exactly sign-preserving for M-matrices; never trade that away
            if not (np.all(b >= 0) and np.all(x >= 0) and np.any(xr < 0)):
                x = xr
        it = 0
        while not system.accepts(x, tol) and it < max_iter:
            x = x + self._lu.solve(b - self.matrix @ x)
            it += 1
        if not system.accepts(x, tol):
            raise SolverError("direct solve missed the residual tolerance", system.residual(x))
        return x


def solve(system: SparseSystem, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Solve ``system`` and verify the residual contract.

    Sparse LU for systems up to ``DIRECT_LIMIT`` unknowns (``max_iter`` bounds
    the refinement sweeps), ILU-preconditioned GMRES beyond. GMRES results
    must satisfy ``||Ax - b|| <= tol ||b||``; direct results may instead
    certify a componentwise backward error ``<= tol`` (see
    ``SparseSystem.backward_error``), since the relative residual of even the
    correctly rounded solution can exceed ``tol`` when ``cond(A) * eps > tol``.
    """
    if system.n <= DIRECT_LIMIT:
        return Factorization(system.matrix).solve(system.rhs, tol, min(max_iter, 5))
    A = system.matrix.tocsc()
    ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20)
    M = spla.LinearOperator(A.shape, ilu.solve)
    x, info = spla.gmres(A, system.rhs, rtol=tol, atol=0.0, M=M, maxiter=max_iter, restart=50)
    res = system.residual(x)
    if not res <= tol:
        raise SolverError(f"GMRES did not converge (info={info})", res)
    return x


@dataclass
class DominanceReport:
    margins: np.ndarray  # |a_LL| - sum_{K != L} |a_KL| per column

    @property
    def min_margin(self) -> float:
        return float(self.margins.min())

    @property
    def strictly_dominant(self) -> bool:
        return bool(self.min_margin > 0)


def check_column_dominance(system: SparseSystem | sp.spmatrix) -> DominanceReport:
    A = system.matrix if isinstance(system, SparseSystem) else sp.csc_matrix(system)
    A = sp.coo_matrix(A)
    off = A.row != A.col
    offsum = np.bincount(A.col[off], weights=np.abs(A.data[off]), minlength=A.shape[1])
    return DominanceReport(np.abs(A.diagonal()) - offsum)


def m_matrix_sign_pattern(system: SparseSystem) -> bool:
    """Positive diagonal and nonpositive off-diagonal entries."""
    A = system.matrix.tocoo()
    off = A.row != A.col
    return bool(np.all(A.diagonal() > 0) and np.all(A.data[off] <= 0))
