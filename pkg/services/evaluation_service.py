from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from config.settings import settings
from core import tensor_ad as ad
from core.errors import EvaluationError, PinnForgeError
from core.physics import split_points
from core.sampling import ObservationSet, sample_interior
from services.problem_registry import Problem, problem_registry
from utils.artifacts import artifact_store
from utils.logger import logger

CHUNK_ROWS = 2048


def _norm_ratio(est, ref, order: int) -> float:
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise EvaluationError(f"estimate has {est.size} values, reference has {ref.size}")
    denominator = np.linalg.norm(ref, ord=order)
    if denominator == 0.0:
        raise EvaluationError("degenerate reference: zero norm")
    return float(np.linalg.norm(est - ref, ord=order) / denominator)


def l1_relative_error(est, ref) -> float:
    """||est - ref||_1 / ||ref||_1"""
    return _norm_ratio(est, ref, 1)


def l2_relative_error(est, ref) -> float:
    """||est - ref||_2 / ||ref||_2"""
    return _norm_ratio(est, ref, 2)


def cole_hopf_burgers(points: np.ndarray, nu: float, nodes: Optional[int] = None) -> np.ndarray:
    """Burgers solution for u0 = -sin(pi x) from the Cole-Hopf integral.

    The heat-kernel integrals over eta are evaluated with the trapezoid rule
    on +-10 kernel widths, in log space so the 1/(2 pi nu) exponent cannot overflow.
    """
    nodes = nodes or settings.BURGERS_QUADRATURE_NODES
    t = points[:, 0]
    x = points[:, 1]
    values = -np.sin(np.pi * x)
    for i in np.flatnonzero(t > 0):
        width = 10.0 * np.sqrt(4.0 * nu * t[i])
        eta = np.linspace(-width, width, nodes)
        shifted = np.pi * (x[i] - eta)
        log_weight = -np.cos(shifted) / (2.0 * np.pi * nu) - eta**2 / (4.0 * nu * t[i])
        weight = np.exp(log_weight - log_weight.max())
        weight[[0, -1]] *= 0.5
        values[i] = -np.sum(np.sin(shifted) * weight) / np.sum(weight)
    return values


class EvaluationService:
    def grid(self, problem: Problem, points_per_axis: int, time_horizon: Optional[float] = None) -> np.ndarray:
        domain = problem.domain(time_horizon)
        return sample_interior(domain, points_per_axis ** domain.input_dim, "grid")

    def make_reference(
        self,
        problem_id: str,
        points_per_axis: Optional[int] = None,
        eq: Optional[Mapping[str, float]] = None,
        time_horizon: Optional[float] = None,
    ) -> ObservationSet:
        """Reference solution on a full grid: closed form, or the cached Cole-Hopf table"""
        problem = problem_registry.get(problem_id)
        points_per_axis = points_per_axis or settings.VALIDATION_POINTS_PER_AXIS
        eq = problem.eq_values(eq or {})
        if problem.reference == "analytic":
            points = self.grid(problem, points_per_axis, time_horizon)
            return ObservationSet(points, problem.exact_solution(points, eq), source=f"analytic:{problem.id}")
        return self._burgers_table(problem, points_per_axis, eq, time_horizon)

    def reference_path(self, problem: Problem, points_per_axis: int, directory: Optional[Path] = None) -> Path:
        directory = Path(directory or settings.DATA_DIR)
        return directory / f"{problem.id}_reference_{points_per_axis}.csv"

    def _burgers_table(self, problem: Problem, points_per_axis: int, eq, time_horizon) -> ObservationSet:
        default_setup = eq == dict(problem.eq_defaults) and time_horizon in (None, problem.time_horizon)
        path = self.reference_path(problem, points_per_axis)
        if default_setup and path.is_file():
            try:
                return artifact_store.read_reference_table(path, problem.has_time, problem.d)
            except (EvaluationError, ValueError) as e:
                logger.warning(f"Regenerating unreadable reference table {path}: {str(e)}")
        points = self.grid(problem, points_per_axis, time_horizon)
        logger.info(f"Computing Cole-Hopf reference for {problem.id} on {len(points)} points")
        reference = ObservationSet(points, cole_hopf_burgers(points, eq["nu"]), source=f"cole-hopf:{problem.id}")
        if default_setup:
            artifact_store.write_reference_table(path, reference, problem.has_time, problem.d)
            logger.info(f"Cached reference table at {path}")
        return reference

    def load_reference(self, path: Path, problem: Problem) -> ObservationSet:
        return artifact_store.read_reference_table(path, problem.has_time, problem.d)

    def write_reference(self, problem_id: str, out_dir: Path, points_per_axis: Optional[int] = None) -> Path:
        problem = problem_registry.get(problem_id)
        points_per_axis = points_per_axis or settings.VALIDATION_POINTS_PER_AXIS
        reference = self.make_reference(problem_id, points_per_axis)
        path = self.reference_path(problem, points_per_axis, out_dir)
        artifact_store.write_reference_table(path, reference, problem.has_time, problem.d)
        logger.info(f"Reference table for {problem_id} written to {path} ({len(reference)} rows)")
        return path

    def evaluate(
        self,
        u: Callable,
        kind: str,
        points: np.ndarray,
        theta: Optional[np.ndarray] = None,
        threads: Optional[int] = None,
    ) -> np.ndarray:
        """Surrogate values at point rows, chunked over a thread pool"""
        threads = max(1, threads or settings.THREADS)
        starts = list(range(0, len(points), CHUNK_ROWS))

        def run(start: int) -> np.ndarray:
            rows = points[start:start + CHUNK_ROWS]
            kwargs = {} if theta is None else {"theta": theta[start:start + CHUNK_ROWS]}
            return ad.primal(u(*split_points(kind, rows), **kwargs))

        if threads == 1 or len(starts) == 1:
            chunks = [run(start) for start in starts]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                chunks = list(pool.map(run, starts))
        values = np.concatenate(chunks)
        if not np.all(np.isfinite(values)):
            raise EvaluationError("surrogate produced non-finite values on the evaluation grid")
        return values

    def solution_errors(self, predicted: np.ndarray, reference: ObservationSet) -> Dict[str, float]:
        ref = reference.values[:, 0]
        return {"l1re": l1_relative_error(predicted, ref), "l2re": l2_relative_error(predicted, ref)}

    def parameter_errors(self, estimate: float, truth: float) -> Dict[str, float]:
        return {"l1re": l1_relative_error([estimate], [truth]), "l2re": l2_relative_error([estimate], [truth])}

    def field_errors(self, estimate: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
        return {"l1re": l1_relative_error(estimate, truth), "l2re": l2_relative_error(estimate, truth)}

    def safe_l2(self, predicted: np.ndarray, reference: ObservationSet) -> float:
        try:
            return self.solution_errors(predicted, reference)["l2re"]
        except PinnForgeError as e:
            logger.warning(f"Validation metric unavailable: {str(e)}")
            return float("nan")


evaluation_service = EvaluationService()
