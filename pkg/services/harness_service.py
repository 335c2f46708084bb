import hashlib
import itertools
import tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import orjson
from pydantic import ValidationError

from config.settings import settings
from core import tensor_ad as ad
from core.errors import ConfigError, ParameterError, PinnForgeError
from core.networks import build_network, init_mlp
from core.parameters import DerivativeMask, EqParam, Params, eval_eq_param
from core.sampling import CollocationSampler, Domain, ObservationSet, load_observations, sample_interior
from models.schemas import (
    GradCheckCase,
    GradCheckReport,
    LossWeights,
    MlpSpec,
    ProblemSummary,
    Report,
    RunConfig,
    SamplerSpec,
    SpinnSpec,
)
from services.evaluation_service import evaluation_service
from services.problem_registry import Problem, problem_registry
from services.solver_service import ProblemSetup, TrainState, network_surrogate, solver_service
from utils.artifacts import artifact_store
from utils.logger import logger
from utils.rng import Stream, generator


@dataclass
class RunContext:
    config: RunConfig
    problem: Problem
    domain: Domain
    eq: Dict[str, float]
    params: Params
    setup: ProblemSetup
    seed: int


def config_hash(config: RunConfig) -> str:
    """sha256 of the resolved config serialized with sorted keys"""
    return hashlib.sha256(orjson.dumps(_config_payload(config), option=orjson.OPT_SORT_KEYS)).hexdigest()


def _config_payload(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json", exclude={"output_dir"})


def _case_key(values: Dict[str, float]) -> str:
    return "u[" + ",".join(f"{name}={value:g}" for name, value in values.items()) + "]"


class HarnessService:
    def load_config(self, path: str | Path) -> RunConfig:
        """Parse and validate a TOML run config; every failure is a ConfigError"""
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {str(e)}") from e
        try:
            config = RunConfig.model_validate(raw)
        except ValidationError as e:
            details = "; ".join(
                f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in e.errors()
            )
            raise ConfigError(f"{path}: {details}") from e
        return self._check(config, path.parent)

    def _check(self, config: RunConfig, base: Path) -> RunConfig:
        problem = problem_registry.get(config.problem.id)
        spec = config.problem
        if spec.mode not in problem.modes:
            raise ConfigError(f"problem '{problem.id}' does not support mode '{spec.mode}' (supports {list(problem.modes)})")
        problem.eq_values(spec.eq)
        unknown = set(spec.estimate) - set(problem.parameter_names())
        if unknown:
            raise ConfigError(f"cannot estimate unknown parameter(s) {sorted(unknown)} of '{problem.id}'")
        unknown = (set(spec.theta_ranges) | set(spec.meta_eval)) - set(problem.eq_defaults)
        if unknown:
            raise ConfigError(f"meta-model parameter(s) {sorted(unknown)} are not scalar parameters of '{problem.id}'")
        stray = set(spec.meta_eval) - set(spec.theta_ranges)
        if stray:
            raise ConfigError(f"meta_eval names {sorted(stray)} have no theta range")
        updates: Dict[str, Any] = {}
        if spec.observations.source == "file":
            obs_path = self._resolve(base, spec.observations.path)
            updates["problem"] = spec.model_copy(
                update={"observations": spec.observations.model_copy(update={"path": str(obs_path)})}
            )
        if config.reference.kind == "file":
            updates["reference"] = config.reference.model_copy(
                update={"path": str(self._resolve(base, config.reference.path))}
            )
        return config.model_copy(update=updates)

    @staticmethod
    def _resolve(base: Path, value: Optional[str]) -> Path:
        if not value:
            raise ConfigError("a file source needs a path")
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        if not path.is_file():
            raise ConfigError(f"referenced file does not exist: {path}")
        return path

    def apply_overrides(self, config: RunConfig, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
        if seed is not None:
            config = config.model_copy(update={"solve": config.solve.model_copy(update={"seed": seed})})
        if out_dir is not None:
            config = config.model_copy(update={"output_dir": str(out_dir)})
        return config

    # -- wiring ----------------------------------------------------------------

    def _network_spec(self, config: RunConfig, input_dim: int, seed: int):
        net = config.net
        net_seed = seed if net.seed is None else net.seed
        if net.kind == "spinn":
            return SpinnSpec(
                axis_dims=[1] * input_dim, rank=net.rank, subnet_sizes=net.hidden,
                activation=net.activation, seed=net_seed,
            )
        return MlpSpec(layer_sizes=[input_dim, *net.hidden, 1], activation=net.activation, seed=net_seed)

    def _params(self, config: RunConfig, problem: Problem, eq: Dict[str, float], nn, seed: int) -> Params:
        spec = config.problem
        estimate = set(spec.estimate) if spec.mode == "inverse" else set()
        params: Dict[str, EqParam] = {}
        for name, value in eq.items():
            if name in estimate:
                value = spec.initial_guess.get(name, problem.initial_guess.get(name, 1.0))
            params[name] = EqParam.scalar(value)
        for name, expression in problem.fields.items():
            if name in estimate:
                field_spec = MlpSpec(layer_sizes=[problem.d, *spec.field_net, 1], seed=seed)
                params[name] = EqParam.network(init_mlp(field_spec, key=1))
            else:
                params[name] = EqParam.field(expression)
        return Params(nn=nn, eq=params)

    def _observations(self, config: RunConfig, problem: Problem, domain: Domain, eq, seed: int) -> Optional[ObservationSet]:
        spec = config.problem.observations
        if config.problem.mode != "inverse":
            return None
        if spec.source == "file":
            return load_observations(spec.path, domain.has_time, domain.d, out_dim=1)
        if problem.exact is None:
            raise ConfigError(f"problem '{problem.id}' has no closed form; give observations.source = 'file'")
        points = sample_interior(domain, spec.n, spec.scheme, seed, stream=Stream.OBSERVATIONS)
        values = problem.exact_solution(points, eq)
        if spec.noise_std > 0:
            values = values + spec.noise_std * generator(seed, Stream.NOISE).standard_normal(values.shape)
        logger.info(f"Generated {len(points)} synthetic observations (noise_std={spec.noise_std})")
        return ObservationSet(points, values, source="synthetic")

    def _weights(self, config: RunConfig, domain: Domain, observations) -> LossWeights:
        weights = config.solve.weights
        absent = {
            "bc": domain.d == 0,
            "init": not domain.has_time,
            "obs": observations is None,
        }
        updates = {name: 0.0 for name, missing in absent.items() if missing and getattr(weights, name) > 0}
        if updates:
            logger.info(f"Dropping loss weights without point sets: {sorted(updates)}")
        return weights.model_copy(update=updates)

    def build(self, config: RunConfig, sampler_spec: Optional[SamplerSpec] = None) -> RunContext:
        problem = problem_registry.get(config.problem.id)
        spec = config.problem
        seed = config.solve.seed
        domain = problem.domain(spec.time_horizon)
        eq = problem.eq_values(spec.eq)
        theta_names = tuple(sorted(spec.theta_ranges)) if spec.mode == "meta" else ()
        try:
            network = build_network(self._network_spec(config, domain.input_dim + len(theta_names), seed))
            params = self._params(config, problem, eq, network.init(), seed)
            observations = self._observations(config, problem, domain, eq, seed)
            mask_config = config.solve.mask or config.mask
            mask = DerivativeMask.from_config(
                mask_config, spec.mode, estimate=spec.estimate if spec.mode == "inverse" else None, params=params
            )
        except ParameterError as e:
            raise ConfigError(str(e)) from e
        sampler = CollocationSampler(
            domain,
            sampler_spec or config.sampler,
            seed=seed,
            batch_sizes=config.solve.batch_sizes,
            observations=observations,
            theta_ranges={name: spec.theta_ranges[name] for name in theta_names},
        )
        setup = ProblemSetup(
            kind=problem.kind,
            residual=problem.residual_fn(eq, spec.ad_mode),
            conditions=problem.conditions(eq),
            sampler=sampler,
            network=network,
            weights=self._weights(config, domain, observations),
            mask=mask,
            theta_names=theta_names,
        )
        logger.info(
            f"Wired problem '{problem.id}' ({spec.mode}, ad_mode={spec.ad_mode}) with a {config.net.kind} "
            f"of input dim {network.input_dim}"
        )
        return RunContext(config, problem, domain, eq, params, setup, seed)

    # -- evaluation --------------------------------------------------------------

    def _cases(self, context: RunContext) -> List[Dict[str, float]]:
        """Theta values at which a meta-model is evaluated; one empty case otherwise."""
        spec = context.config.problem
        if not context.setup.theta_names:
            return [{}]
        grid = {
            name: spec.meta_eval.get(name) or [0.5 * sum(spec.theta_ranges[name])]
            for name in context.setup.theta_names
        }
        return [dict(zip(grid, values)) for values in itertools.product(*grid.values())]

    def _reference(self, context: RunContext, points_per_axis: int, case: Dict[str, float]) -> ObservationSet:
        reference = context.config.reference
        if reference.kind == "file":
            return evaluation_service.load_reference(Path(reference.path), context.problem)
        return evaluation_service.make_reference(
            context.problem.id, points_per_axis, {**context.eq, **case}, context.config.problem.time_horizon
        )

    def _predict(self, context: RunContext, params: Params, points: np.ndarray, case: Dict[str, float], threads) -> np.ndarray:
        u = network_surrogate(context.setup.network, params.nn, context.problem.kind)
        theta = None
        if case:
            theta = np.tile([case[name] for name in context.setup.theta_names], (len(points), 1))
        return evaluation_service.evaluate(u, context.problem.kind, points, theta=theta, threads=threads)

    def _validation_fn(self, context: RunContext, threads) -> Optional[Callable[[TrainState], float]]:
        if not context.config.solve.validation_every:
            return None
        case = self._cases(context)[0]
        try:
            reference = self._reference(context, context.config.reference.validation_points_per_axis, case)
        except PinnForgeError as e:
            logger.warning(f"Validation disabled, no reference: {str(e)}")
            return None

        def validate(state: TrainState) -> float:
            predicted = self._predict(context, state.params, reference.points, case, threads)
            return evaluation_service.safe_l2(predicted, reference)

        return validate

    def _metrics(self, context: RunContext, params: Params, threads) -> Tuple[Dict, Dict, Dict[str, Any]]:
        spec = context.config.problem
        points_per_axis = context.config.reference.points_per_axis or settings.VALIDATION_POINTS_PER_AXIS
        l1re, l2re, extras = {}, {}, {"solution": {}}
        solution: Dict[str, Any] = {}
        for case in self._cases(context):
            reference = self._reference(context, points_per_axis, case)
            predicted = self._predict(context, params, reference.points, case, threads)
            errors = evaluation_service.solution_errors(predicted, reference)
            solution["points"] = np.ascontiguousarray(reference.points)
            if case:
                key = _case_key(case)
                l1re[key], l2re[key] = errors["l1re"], errors["l2re"]
                solution.setdefault("values", {})[key] = predicted
                solution.setdefault("reference", {})[key] = np.ascontiguousarray(reference.values[:, 0])
                solution["theta"] = solution.get("theta", {}) | {key: case}
            else:
                extras["solution_l1re"], extras["solution_l2re"] = errors["l1re"], errors["l2re"]
                solution["values"] = predicted
                solution["reference"] = np.ascontiguousarray(reference.values[:, 0])
                if spec.mode == "forward":
                    l1re["u"], l2re["u"] = errors["l1re"], errors["l2re"]
        if spec.mode == "inverse":
            for name in sorted(spec.estimate):
                param = params.eq[name]
                if param.kind == "scalar":
                    errors = evaluation_service.parameter_errors(float(param.value), context.eq[name])
                    extras.setdefault("estimates", {})[name] = float(param.value)
                else:
                    x = solution["points"][:, -context.problem.d:]
                    truth = np.asarray(context.problem.fields[name](x))
                    errors = evaluation_service.field_errors(ad.primal(eval_eq_param(param, x=x)), truth)
                l1re[name], l2re[name] = errors["l1re"], errors["l2re"]
        extras["solution"] = solution
        return l1re, l2re, extras

    # -- operations --------------------------------------------------------------

    def run(
        self,
        config_path: str | Path,
        out_dir: Optional[str | Path] = None,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
    ) -> Report:
        """Config to report: wire the problem, solve, evaluate, write artifacts"""
        config = self.apply_overrides(self.load_config(config_path), seed=seed, out_dir=out_dir)
        context = self.build(config)
        digest = config_hash(config)
        threads = threads or settings.THREADS
        logger.info(f"Run {config.problem.id} seed={context.seed} config_hash={digest[:12]}")

        validation_fn = self._validation_fn(context, threads)
        if context.setup.theta_names:
            state, summary = solver_service.meta_solve(
                context.setup, {name: config.problem.theta_ranges[name] for name in context.setup.theta_names},
                config.solve, config.optimizer, context.params, validation_fn,
            )
        else:
            state, summary = solver_service.solve(context.setup, config.solve, config.optimizer, context.params, validation_fn)

        l1re, l2re, extras = self._metrics(context, state.params, threads)
        report = Report(
            problem=config.problem.id,
            mode=config.problem.mode,
            l1re=l1re,
            l2re=l2re,
            solution_l1re=extras.get("solution_l1re"),
            solution_l2re=extras.get("solution_l2re"),
            estimates=extras.get("estimates", {}),
            final_loss=summary["final_loss"],
            n_iter=summary["n_iter"],
            seed=context.seed,
            validation_points_per_axis=config.reference.points_per_axis or settings.VALIDATION_POINTS_PER_AXIS,
            wall_clock_seconds=summary["wall_clock_seconds"],
            config_hash=digest,
            config=_config_payload(config),
        )

        directory = Path(config.output_dir or Path(settings.OUTPUT_DIR) / config.problem.id)
        artifact_store.write_json(directory / "report.json", report.model_dump(mode="json"))
        artifact_store.write_history(directory / "history.csv", state.history)
        artifact_store.write_json(directory / "solution.json", extras["solution"])
        solver_service.write_checkpoint(directory / "checkpoint", state, context.seed, digest)
        logger.info(f"Run complete: l2re={l2re} artifacts in {directory}")
        return report

    def check_grad(
        self,
        config_path: str | Path,
        step_size: float = 1e-6,
        tolerance: float = 1e-5,
        mode_tolerance: float = 1e-10,
        threads: Optional[int] = None,
    ) -> GradCheckReport:
        """Central finite differences against the AD gradient of every loss term, per leaf"""
        config = self.load_config(config_path)
        small = config.net.model_copy(update={"hidden": [min(width, 8) for width in config.net.hidden[:3]]})
        config = config.model_copy(update={"net": small, "solve": config.solve.model_copy(update={"batch_sizes": {}})})
        sampler = SamplerSpec(scheme="uniform", n_interior=8, n_per_facet=2, n_initial=2)
        context = self.build(config, sampler_spec=sampler)
        setup = context.setup
        batch = setup.sampler.batch(0)
        if batch.observations is not None:
            batch.observations = batch.observations.take(np.arange(min(4, len(batch.observations))))
        terms = [t for t, w in (("dynamic", setup.weights.dyn), ("boundary", setup.weights.bc),
                                ("initial", setup.weights.init), ("observations", setup.weights.obs)) if w > 0]

        def term_losses(p: Params):
            components = solver_service.loss(setup, p, batch).by_term()
            return {term: components[term] for term in terms}

        values, grads, _ = ad.value_and_grads(lambda p: (term_losses(p), None), context.params, has_aux=True)
        base = context.params.leaves()

        def check_leaf(path: str) -> List[GradCheckCase]:
            leaf = np.asarray(base[path], dtype=np.float64)
            fd = {term: np.zeros(leaf.shape) for term in terms}
            for index in np.ndindex(leaf.shape):
                shifted = []
                for sign in (1.0, -1.0):
                    moved = leaf.copy()
                    moved[index] += sign * step_size
                    losses = term_losses(context.params.replace_leaves({**base, path: moved}))
                    shifted.append({term: float(ad.primal(v)) for term, v in losses.items()})
                for term in terms:
                    fd[term][index] = (shifted[0][term] - shifted[1][term]) / (2.0 * step_size)
            cases = []
            for term in terms:
                analytic = np.asarray(grads[term].leaves()[path])
                scale = max(np.linalg.norm(fd[term]), 1e-4 * max(1.0, abs(float(values[term]))))
                error = float(np.linalg.norm(analytic - fd[term]) / scale)
                cases.append(GradCheckCase(term=term, leaf=path, rel_error=error, passed=error < tolerance))
            return cases

        workers = max(1, threads or settings.THREADS)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = [case for leaf_cases in pool.map(check_leaf, list(base)) for case in leaf_cases]

        u = setup.surrogate(context.params.nn)
        forward = ad.primal(setup.residual(batch.interior, u, context.params, ad_mode="forward"))
        reverse = ad.primal(setup.residual(batch.interior, u, context.params, ad_mode="reverse"))
        agreement = float(np.max(np.abs(forward - reverse)) / max(1.0, float(np.max(np.abs(forward)))))

        passed = all(case.passed for case in cases) and agreement < mode_tolerance
        failing = [f"{c.term}:{c.leaf}" for c in cases if not c.passed]
        if passed:
            logger.info(f"Gradient check passed: {len(cases)} cases, mode agreement {agreement:.1e}")
        else:
            logger.warning(f"Gradient check failed for {failing or ['mode agreement']} (mode agreement {agreement:.1e})")
        return GradCheckReport(
            problem=config.problem.id,
            step_size=step_size,
            tolerance=tolerance,
            cases=cases,
            mode_agreement=agreement,
            mode_tolerance=mode_tolerance,
            passed=passed,
        )

    def list_problems(self) -> List[ProblemSummary]:
        return problem_registry.list_problems()

    def make_reference(self, problem_id: str, out_dir: str | Path, points_per_axis: Optional[int] = None) -> Path:
        return evaluation_service.write_reference(problem_id, Path(out_dir), points_per_axis)


harness_service = HarnessService()
