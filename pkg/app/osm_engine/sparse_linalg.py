# app/osm_engine/sparse_linalg.py

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

from app.core.config import settings
from .errors import ContractViolation, NumericFailure, SingularMatrixError

logger = logging.getLogger(__name__)

SMALL_MATRIX_LIMIT = 16
PINV_RCOND = 1e-12
CG_RTOL = 1e-14


# ==============================================================================
# --- 对称矩阵存储 ---
# ==============================================================================

def sparse_sym(n: int, rows, cols, values) -> sp.csr_matrix:
    """
    由上三角三元组 (row <= col) 构造对称稀疏矩阵，重复项求和。
    """
    rows, cols, values = np.asarray(rows), np.asarray(cols), np.asarray(values, dtype=float)
    if np.any(rows > cols):
        raise ContractViolation("对称存储只接受 row <= col 的三元组。")
    upper = sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsr()
    return (upper + sp.triu(upper, k=1).T).tocsr()


def is_symmetric(matrix, tol: float = 0.0) -> bool:
    difference = matrix - matrix.T
    if sp.issparse(difference):
        return difference.count_nonzero() == 0 if tol == 0 else abs(difference).max() <= tol
    return bool(np.max(np.abs(difference), initial=0.0) <= tol)


# ==============================================================================
# --- 子区域线性求解器 ---
# ==============================================================================

class LinearSolver:
    """线性求解器基类：update 负责分解，solve 可以对不同右端项重复调用。"""

    def __init__(self, A=None):
        self.n = 0
        if A is not None:
            self.update(A)

    def update(self, A):
        raise NotImplementedError

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SolverDenseCholesky(LinearSolver):
    """稠密 Cholesky 分解，适合桌面规模的小子区域。"""

    def update(self, A):
        dense = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        self.n = dense.shape[0]
        try:
            self.factor = scipy.linalg.cho_factor(dense, lower=True, check_finite=True)
        except np.linalg.LinAlgError as e:
            raise SingularMatrixError(f"Cholesky 分解遇到非正主元（矩阵非正定）: {e}") from e

    def solve(self, rhs):
        return scipy.linalg.cho_solve(self.factor, rhs, check_finite=False)


class SolverSparseLU(LinearSolver):
    """SuperLU 分解，按对称模式选择对角主元。"""

    def update(self, A):
        A = sp.csc_matrix(A)
        self.n = A.shape[0]
        try:
            self.inv = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})
        except RuntimeError as e:
            raise SingularMatrixError(f"稀疏 LU 分解失败: {e}") from e
        pivots = self.inv.U.diagonal()
        if np.any(pivots <= 0):
            raise SingularMatrixError("稀疏分解出现非正主元（矩阵非正定）。")

    def solve(self, rhs):
        return self.inv.solve(rhs)


class SolverCG(LinearSolver):
    """共轭梯度回退求解器，相对容差 1e-14，最多 10n 次迭代。"""

    def update(self, A):
        self.A = sp.csr_matrix(A)
        self.n = self.A.shape[0]

    def solve(self, rhs):
        if not np.any(rhs):
            return np.zeros_like(rhs, dtype=float)
        x, info = cg(self.A, rhs, rtol=CG_RTOL, atol=0.0, maxiter=10 * max(self.n, 1))
        if info != 0:
            raise NumericFailure(f"共轭梯度在 {10 * self.n} 次迭代内未收敛 (info={info})。")
        return x


def factorize(M, method: str | None = None, dense_limit: int | None = None) -> LinearSolver:
    """
    分解对称正定矩阵 M。

    :param method: auto / cholesky / lu / cg，默认取 settings.SOLVER。
    :param dense_limit: auto 模式下使用稠密 Cholesky 的最大维数。
    """
    method = (method or settings.SOLVER).lower()
    dense_limit = settings.DENSE_SOLVER_LIMIT if dense_limit is None else dense_limit
    n = M.shape[0]
    if method == "auto":
        method = "cholesky" if n <= dense_limit else "lu"
    if method == "cholesky":
        return SolverDenseCholesky(M)
    if method == "cg":
        return SolverCG(M)
    if method != "lu":
        raise ContractViolation(f"未知的求解方法: {method}")
    try:
        return SolverSparseLU(M)
    except MemoryError:
        logger.warning("稀疏 LU 内存不足（n=%d），改用共轭梯度", n)
        return SolverCG(M)


# ==============================================================================
# --- 小型稠密矩阵 ---
# ==============================================================================

def circulant_from_row(row) -> np.ndarray:
    """首行为 row 的循环矩阵：C[i, i'] = row[(i' - i) mod n]。"""
    return scipy.linalg.circulant(np.asarray(row, dtype=float)).T


def pseudo_inverse(M) -> np.ndarray:
    """基于 SVD 的 Moore–Penrose 伪逆，奇异值小于 1e-12·σ_max 视为零。"""
    M = np.asarray(M, dtype=float)
    if max(M.shape) > SMALL_MATRIX_LIMIT:
        raise ContractViolation(f"pseudo_inverse 只用于不超过 {SMALL_MATRIX_LIMIT} 阶的矩阵。")
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    cutoff = PINV_RCOND * (s.max() if s.size else 0.0)
    s_inv = np.zeros_like(s)
    s_inv[s > cutoff] = 1.0 / s[s > cutoff]
    return (vt.T * s_inv) @ u.T


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray
    vectors: np.ndarray

    @property
    def max_imag(self) -> float:
        return float(np.max(np.abs(self.values.imag), initial=0.0))

    def has_eigenvalue(self, target: float, tol: float = 1e-10) -> bool:
        return bool(np.any(np.abs(self.values - target) <= tol))

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.values), initial=0.0))


def eig_small(M) -> EigenDecomposition:
    """小型稠密矩阵（不超过 16 阶）的完整特征分解，复特征值原样保留。"""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] > SMALL_MATRIX_LIMIT:
        raise ContractViolation(f"eig_small 需要不超过 {SMALL_MATRIX_LIMIT} 阶的方阵，收到 {M.shape}。")
    try:
        values, vectors = np.linalg.eig(M)
    except np.linalg.LinAlgError as e:
        raise NumericFailure(f"特征值计算未收敛: {e}") from e
    return EigenDecomposition(values=values.astype(complex), vectors=vectors.astype(complex))
