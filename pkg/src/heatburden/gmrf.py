"""Sparse symmetric factorizations and hard-constrained Gaussian operations.

Everything downstream (Laplace inner step, marginal likelihood, posterior
sampling) reduces to four primitives on a symmetric positive definite
precision matrix M:

* solve M x = b,
* log det M,
* draw x ~ N(0, M^{-1}),
* condition any of the above on hard linear constraints C x = 0
  ("conditioning by kriging").

The sparse path factorizes M = L D L^T through SuperLU in symmetric mode
(diagonal pivoting, fill-reducing symmetric permutation).  The factor is
verified against the reconstruction identity U = D L^T; if pivoting broke
symmetry the implementation falls back to a dense Cholesky, so results
never silently depend on the factorization route.

Subspace log-determinants (the determinant of M restricted to the null
space of C) use

    logdet_C(M) = logdet(M) + logdet(C M^{-1} C^T) - logdet(C C^T),

which follows from integrating the Gaussian kernel over {Cx = 0}.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.sparse.linalg import spsolve_triangular

from .errors import NumericError

_RECONSTRUCTION_TOL = 1e-8


class SymmetricFactor:
    """Factorization of a sparse symmetric positive definite matrix."""

    def __init__(self, mat, force_dense: bool = False):
        mat = sp.csc_matrix(mat)
        self.n = mat.shape[0]
        self._dense = None
        self._lu = None
        if force_dense or self.n <= 64:
            self._factor_dense(mat)
            return
        try:
            self._factor_sparse(mat)
        except (RuntimeError, NumericError):
            self._factor_dense(mat)

    def _factor_sparse(self, mat: sp.csc_matrix):
        lu = spla.splu(mat, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NumericError("symmetric factorization lost its permutation symmetry")
        d = lu.U.diagonal()
        if not np.all(d > 0):
            raise NumericError("matrix is not positive definite")
        recon = lu.U - sp.diags(d) @ lu.L.T
        scale = max(np.abs(d).max(), 1.0)
        if recon.nnz and np.abs(recon.data).max() > _RECONSTRUCTION_TOL * scale:
            raise NumericError("LDL^T reconstruction check failed")
        self._lu = lu
        self._d = d
        self.logdet = float(np.sum(np.log(d)))

    def _factor_dense(self, mat):
        dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
        try:
            self._dense = cho_factor(dense, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"dense Cholesky failed: {exc}") from exc
        self.logdet = float(2.0 * np.sum(np.log(np.diag(self._dense[0]))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self._dense is not None:
            return cho_solve(self._dense, b)
        if b.ndim == 1:
            return self._lu.solve(b)
        return self._lu.solve(np.ascontiguousarray(b))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """m draws from N(0, M^{-1}), returned as columns of an (n, m) array."""
        z = rng.standard_normal((self.n, m))
        if self._dense is not None:
            # M = L L^T  =>  x = L^{-T} z
            return solve_triangular(self._dense[0], z, lower=True, trans="T")
        y = spsolve_triangular(self._lu.L.T.tocsr(), z / np.sqrt(self._d)[:, None],
                               lower=False)
        return y[self._lu.perm_c]


class ConstrainedFactor:
    """A SymmetricFactor conditioned on hard constraints C x = 0."""

    def __init__(self, factor: SymmetricFactor, constraints):
        self.factor = factor
        self.c = sp.csr_matrix(constraints) if constraints is not None else None
        if self.c is not None and self.c.shape[0] == 0:
            self.c = None
        if self.c is None:
            return
        self._w = factor.solve(self.c.T.toarray())          # M^{-1} C^T, (n, k)
        s = self.c @ self._w                                # C M^{-1} C^T, (k, k)
        s = np.asarray(s)
        try:
            self._s_cho = cho_factor(0.5 * (s + s.T), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"constraint Schur complement not PD: {exc}") from exc
        self._logdet_s = float(2.0 * np.sum(np.log(np.diag(self._s_cho[0]))))
        cct = np.asarray((self.c @ self.c.T).todense())
        self._logdet_cct = float(np.linalg.slogdet(cct)[1])
        self._cct_cho = cho_factor(cct)

    @property
    def n(self) -> int:
        return self.factor.n

    @property
    def n_constraints(self) -> int:
        return 0 if self.c is None else self.c.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Kriging correction: map x to the conditional mean given Cx = 0.

        A final orthogonal cleanup removes the O(cond * eps) feasibility
        residual the M-solves leave behind; it shifts the sample only
        along constraint-violating directions.
        """
        if self.c is None:
            return x
        x = x - self._w @ cho_solve(self._s_cho, self.c @ x)
        return x - self.c.T @ cho_solve(self._cct_cho, self.c @ x)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Constrained quadratic minimizer: argmin x'Mx/2 - b'x s.t. Cx = 0."""
        return self.project(self.factor.solve(b))

    def sample(self, rng: np.random.Generator, m: int,
               mean: np.ndarray | None = None) -> np.ndarray:
        x = self.factor.sample(rng, m)
        x = self.project(x)
        if mean is not None:
            x = x + mean[:, None]
        return x

    def subspace_logdet(self) -> float:
        """log det of M restricted to the null space of C."""
        if self.c is None:
            return self.factor.logdet
        return self.factor.logdet + self._logdet_s - self._logdet_cct


def stack_constraints(rows: list, dim: int) -> sp.csr_matrix | None:
    """Assemble (index_array, value_array) pairs into a k x dim CSR matrix."""
    if not rows:
        return None
    data, ri, ci = [], [], []
    for k, (idx, val) in enumerate(rows):
        ri.extend([k] * len(idx))
        ci.extend(list(idx))
        data.extend(list(val))
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), dim))
