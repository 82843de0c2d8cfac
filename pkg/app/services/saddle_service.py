import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import structlog

from app.core.config import get_settings
from app.core.exceptions import DomainError, InvalidArgumentError, RankDeficiencyError, StateError
from app.models.fem import WeightedGramFamily

logger = structlog.get_logger(__name__)
settings = get_settings()

Factorization = Tuple[np.ndarray, np.ndarray]


@dataclass
class SaddleSolution:
    r: np.ndarray
    u: np.ndarray
    qoi_value: float
    gram: np.ndarray
    factorization: Optional[Factorization] = None


@dataclass
class BatchSolution:
    """Primal and adjoint results of a stack of samples, row i belongs to sample i."""

    r: np.ndarray  # (N, m)
    u: np.ndarray  # (N, n)
    qoi: np.ndarray  # (N,)
    gradient: np.ndarray  # (N, n_a) dq/dc


def _dense(matrix) -> np.ndarray:
    if sp.issparse(matrix):
        return matrix.toarray()
    return np.asarray(matrix, dtype=float)


class SaddleSolver:
    """Weighted MinRes online stage: [[G, B], [Bᵀ, 0]] [r; u] = [ℓ; 0]."""

    def __init__(
        self,
        pivot_tolerance: Optional[float] = None,
        residual_tolerance: Optional[float] = None,
        threads: Optional[int] = None,
    ):
        self.pivot_tolerance = (
            pivot_tolerance if pivot_tolerance is not None else settings.pivot_tolerance
        )
        self.residual_tolerance = (
            residual_tolerance
            if residual_tolerance is not None
            else settings.residual_tolerance
        )
        self.threads = threads if threads is not None else settings.threads
        if self.threads < 1:
            raise InvalidArgumentError(f"Need at least one worker thread, got {self.threads}")
        if self.pivot_tolerance < 0 or self.residual_tolerance < 0:
            raise InvalidArgumentError("Solver tolerances must not be negative")

    @staticmethod
    def _check_weights(c: np.ndarray, family: WeightedGramFamily) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if c.shape[-1] != family.n_patches:
            raise InvalidArgumentError(
                f"Expected {family.n_patches} weight coefficients, got {c.shape[-1]}"
            )
        if not np.all(c > 0):
            raise DomainError(
                f"Weight coefficients must stay positive, smallest is {float(np.min(c)):.3e}"
            )
        return c

    def combine_gram(self, c: np.ndarray, family: WeightedGramFamily) -> np.ndarray:
        c = self._check_weights(c, family)
        m = family.size
        return np.asarray(family.flat @ c).reshape(m, m)

    def combine_gram_batch(self, weights: np.ndarray, family: WeightedGramFamily) -> np.ndarray:
        weights = self._check_weights(np.atleast_2d(weights), family)
        m = family.size
        return np.asarray(family.flat @ weights.T).T.reshape(-1, m, m)

    @staticmethod
    def block_matrix(gram: np.ndarray, operator) -> np.ndarray:
        operator = _dense(operator)
        m, n = operator.shape
        block = np.zeros((m + n, m + n))
        block[:m, :m] = gram
        block[:m, m:] = operator
        block[m:, :m] = operator.T
        return block

    def _factorize(self, block: np.ndarray, sample_index: Optional[int] = None) -> Factorization:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(block, check_finite=True)
        scale = float(np.max(np.abs(block))) or 1.0
        smallest = float(np.min(np.abs(np.diag(lu))))
        if smallest < self.pivot_tolerance * scale:
            raise RankDeficiencyError(
                f"Saddle factorization has pivot {smallest:.3e} against scale {scale:.3e}; "
                "trial and test spaces look Fortin-incompatible",
                sample_index=sample_index,
            )
        return lu, piv

    def _check_residual(self, block: np.ndarray, x: np.ndarray, rhs: np.ndarray) -> bool:
        residual = float(np.max(np.abs(block @ x - rhs), initial=0.0))
        return residual <= self.residual_tolerance * float(np.max(np.abs(rhs), initial=0.0))

    def solve(
        self,
        gram: np.ndarray,
        operator,
        load: np.ndarray,
        q: Optional[np.ndarray] = None,
        sample_index: Optional[int] = None,
    ) -> SaddleSolution:
        operator = _dense(operator)
        load = np.asarray(load, dtype=float)
        m, n = operator.shape
        if gram.shape != (m, m) or load.shape != (m,):
            raise InvalidArgumentError("Gram matrix, operator and load sizes disagree")

        block = self.block_matrix(gram, operator)
        rhs = np.concatenate([load, np.zeros(n)])
        factorization = self._factorize(block, sample_index)
        x = sla.lu_solve(factorization, rhs)
        if not self._check_residual(block, x, rhs):
            # one step of iterative refinement
            x = x + sla.lu_solve(factorization, rhs - block @ x)
            if not self._check_residual(block, x, rhs):
                logger.warning(
                    "Saddle residual above tolerance",
                    residual=float(np.max(np.abs(block @ x - rhs))),
                    load_norm=float(np.max(np.abs(load))),
                    sample_index=sample_index,
                )

        r, u = x[:m], x[m:]
        value = self.qoi(u, q) if q is not None else float("nan")
        return SaddleSolution(r=r, u=u, qoi_value=value, gram=gram, factorization=factorization)

    @staticmethod
    def qoi(u: np.ndarray, q: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        q = np.asarray(q, dtype=float)
        if u.shape != q.shape:
            raise InvalidArgumentError(f"QoI vector has length {q.size}, solution {u.size}")
        return float(u @ q)

    def qoi_weight_gradient(
        self, solution: SaddleSolution, family: WeightedGramFamily, q: np.ndarray
    ) -> np.ndarray:
        """∂q/∂c_l = −p_rᵀ M^l r from a single adjoint back-substitution."""
        if solution.factorization is None:
            raise StateError("Solution carries no factorization for the adjoint solve")
        m = solution.r.shape[0]
        rhs = np.concatenate([np.zeros(m), np.asarray(q, dtype=float)])
        # the block matrix is symmetric, so the adjoint reuses the primal factors
        adjoint = sla.lu_solve(solution.factorization, rhs)
        p_r = adjoint[:m]
        outer = np.outer(p_r, solution.r).ravel()
        return -np.asarray(family.flat.T @ outer)

    def solve_unweighted(self, family: WeightedGramFamily, operator, load, q) -> SaddleSolution:
        return self.solve(self.combine_gram(np.ones(family.n_patches), family), operator, load, q)

    def _solve_chunk(
        self,
        grams: np.ndarray,
        operators: np.ndarray,
        loads: np.ndarray,
        q: np.ndarray,
        family: WeightedGramFamily,
        offset: int,
    ) -> BatchSolution:
        count, m, n = operators.shape
        blocks = np.zeros((count, m + n, m + n))
        blocks[:, :m, :m] = grams
        blocks[:, :m, m:] = operators
        blocks[:, m:, :m] = np.transpose(operators, (0, 2, 1))

        rhs = np.zeros((count, m + n, 2))
        rhs[:, :m, 0] = loads
        rhs[:, m:, 1] = q

        try:
            x = np.linalg.solve(blocks, rhs)
            residual = np.max(np.abs(blocks @ x - rhs), axis=1)
            bound = self.residual_tolerance * np.max(np.abs(rhs), axis=1)
            bad = np.flatnonzero(np.any(residual > bound, axis=1) | ~np.all(np.isfinite(x), axis=(1, 2)))
        except np.linalg.LinAlgError:
            x = np.zeros_like(rhs)
            bad = np.arange(count)

        for i in bad:
            solution = self.solve(grams[i], operators[i], loads[i], q, sample_index=offset + i)
            adjoint = sla.lu_solve(solution.factorization, rhs[i, :, 1])
            x[i, :m, 0], x[i, m:, 0] = solution.r, solution.u
            x[i, :, 1] = adjoint

        r, u = x[:, :m, 0], x[:, m:, 0]
        p_r = x[:, :m, 1]
        outer = (p_r[:, :, None] * r[:, None, :]).reshape(count, m * m)
        gradient = -np.asarray(family.flat.T @ outer.T).T
        return BatchSolution(r=r, u=u, qoi=u @ q, gradient=gradient)

    def solve_batch(
        self,
        weights: np.ndarray,
        family: WeightedGramFamily,
        operators: np.ndarray,
        loads: np.ndarray,
        q: np.ndarray,
    ) -> BatchSolution:
        """Primal, QoI and adjoint gradient of every sample in one pass."""
        grams = self.combine_gram_batch(weights, family)
        operators = np.asarray(operators, dtype=float)
        loads = np.asarray(loads, dtype=float)
        q = np.asarray(q, dtype=float)
        count = operators.shape[0]
        if grams.shape[0] != count or loads.shape[0] != count:
            raise InvalidArgumentError("Weight, operator and load stacks differ in length")

        workers = min(self.threads, count)
        if workers <= 1:
            return self._solve_chunk(grams, operators, loads, q, family, 0)

        bounds = np.linspace(0, count, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts: List[BatchSolution] = list(
                pool.map(
                    lambda k: self._solve_chunk(
                        grams[bounds[k] : bounds[k + 1]],
                        operators[bounds[k] : bounds[k + 1]],
                        loads[bounds[k] : bounds[k + 1]],
                        q,
                        family,
                        int(bounds[k]),
                    ),
                    range(workers),
                )
            )
        return BatchSolution(
            r=np.concatenate([p.r for p in parts]),
            u=np.concatenate([p.u for p in parts]),
            qoi=np.concatenate([p.qoi for p in parts]),
            gradient=np.concatenate([p.gradient for p in parts]),
        )
