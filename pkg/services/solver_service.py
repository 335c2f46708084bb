import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from config.settings import settings
from core import tensor_ad as ad
from core.errors import DivergenceError, SpecError
from core.networks import Network
from core.parameters import DerivativeMask, Params, mask_gradient
from core.physics import ConditionFn, Kind, LossComponents, ResidualFn, global_loss
from core.sampling import Bounds, CollocationBatch, CollocationSampler
from models.schemas import LOSS_TERMS, LossWeights, OptimizerSpec, SolveConfig
from utils.artifacts import artifact_store
from utils.logger import logger


def network_surrogate(network: Network, nn, kind: Kind) -> Callable:
    """Wrap a network as u(t), u(x) or u(t, x); meta-models take ``theta=`` rows as extra inputs."""

    def u(*coords, theta=None):
        if kind == "ODE":
            parts = [ad.expand_last(coords[0])]
        elif kind == "PDEStatio":
            parts = [coords[0]]
        else:
            parts = [ad.expand_last(coords[0]), coords[1]]
        if theta is not None:
            parts.append(theta)
        z = parts[0] if len(parts) == 1 else ad.concatenate(parts, axis=-1)
        return ad.getitem(network(nn, z), (Ellipsis, 0))

    return u


@dataclass
class ProblemSetup:
    """Everything one optimization run needs besides the parameters."""

    kind: Kind
    residual: ResidualFn
    conditions: ConditionFn
    sampler: CollocationSampler
    network: Network
    weights: LossWeights
    mask: DerivativeMask
    theta_names: Tuple[str, ...] = ()

    def surrogate(self, nn) -> Callable:
        return network_surrogate(self.network, nn, self.kind)


@dataclass
class TrainState:
    params: Params
    # "m" / "v" -> leaf path -> moment array
    moments: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    history: List[Dict[str, Optional[float]]] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)
    best_validation: Optional[float] = None


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def _gradient_leaves(grad: Params, step: int) -> Dict[str, np.ndarray]:
    leaves = {path: np.asarray(g, dtype=np.float64) for path, g in grad.leaves().items()}
    for path, g in leaves.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence: non-finite gradient at '{path}' on step {step}", step=step)
    return leaves


def adam_step(state: TrainState, grad: Params, spec: OptimizerSpec = OptimizerSpec()) -> TrainState:
    """One bias-corrected Adam update; moments are created at zero on first use."""
    grads = _gradient_leaves(grad, state.step)
    t = state.step + 1
    bc1 = 1.0 - spec.beta1**t
    bc2 = 1.0 - spec.beta2**t
    first, second = state.moments.get("m", {}), state.moments.get("v", {})
    new_leaves, new_m, new_v = {}, {}, {}
    for path, value in state.params.leaves().items():
        g = grads[path]
        m = spec.beta1 * first.get(path, np.zeros_like(g)) + (1.0 - spec.beta1) * g
        v = spec.beta2 * second.get(path, np.zeros_like(g)) + (1.0 - spec.beta2) * (g * g)
        update = spec.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + spec.eps)
        new_leaves[path] = _frozen(np.asarray(value) - update)
        new_m[path], new_v[path] = m, v
    return replace(
        state, params=state.params.replace_leaves(new_leaves), moments={"m": new_m, "v": new_v}, step=t
    )


def sgd_step(state: TrainState, grad: Params, spec: OptimizerSpec = OptimizerSpec(kind="sgd")) -> TrainState:
    grads = _gradient_leaves(grad, state.step)
    new_leaves = {
        path: _frozen(np.asarray(value) - spec.learning_rate * grads[path])
        for path, value in state.params.leaves().items()
    }
    return replace(state, params=state.params.replace_leaves(new_leaves), step=state.step + 1)


def _add_params(a: Params, b: Params) -> Params:
    right = b.leaves()
    return a.replace_leaves({path: np.asarray(left) + np.asarray(right[path]) for path, left in a.leaves().items()})


class SolverService:
    def loss(self, setup: ProblemSetup, params: Params, batch: CollocationBatch) -> LossComponents:
        return global_loss(setup.surrogate(params.nn), params, batch, setup.residual, setup.conditions, setup.weights)

    def loss_and_grad(
        self, setup: ProblemSetup, params: Params, batch: CollocationBatch
    ) -> Tuple[LossComponents, Params]:
        """Loss components and the masked parameter gradient from a single trace.

        Terms sharing a mask are differentiated together; each group's gradient
        is masked before the groups are summed.
        """
        groups: Dict[frozenset, List[str]] = {}
        for term in LOSS_TERMS:
            paths = setup.mask.terms.get(term, frozenset())
            if setup.weights.for_term(term) > 0 and paths:
                groups.setdefault(paths, []).append(term)
        named = {f"group{i}": terms for i, terms in enumerate(groups.values())}

        def objective(p: Params):
            components = self.loss(setup, p, batch)
            by_term = components.by_term()
            outputs = {}
            for name, terms in named.items():
                total = 0.0
                for term in terms:
                    total = ad.add(total, ad.multiply(setup.weights.for_term(term), by_term[term]))
                outputs[name] = total
            return outputs, components

        _, grads, components = ad.value_and_grads(objective, params, has_aux=True)
        total = None
        for name, terms in named.items():
            masked = mask_gradient(grads[name], setup.mask, terms[0])
            total = masked if total is None else _add_params(total, masked)
        if total is None:
            total = params.replace_leaves({path: np.zeros(np.shape(leaf)) for path, leaf in params.leaves().items()})
        return components, total

    def validation_hook(self, state: TrainState, fn: Callable[[TrainState], float]) -> float:
        value = float(fn(state))
        state.validation.append((state.step, value))
        if np.isfinite(value) and (state.best_validation is None or value < state.best_validation):
            state.best_validation = value
        return value

    def solve(
        self,
        setup: ProblemSetup,
        config: SolveConfig,
        optimizer: OptimizerSpec,
        params0: Params,
        validation_fn: Optional[Callable[[TrainState], float]] = None,
    ) -> Tuple[TrainState, Dict[str, Any]]:
        """Run ``config.n_iter`` steps of sample, loss, masked gradient and update"""
        setup.mask.validate(params0)
        step_fn = adam_step if optimizer.kind == "adam" else sgd_step
        state = TrainState(params=params0)
        started = time.perf_counter()
        logger.info(
            f"Solving for {config.n_iter} steps with {optimizer.kind} (lr={optimizer.learning_rate}), "
            f"{len(params0.leaves())} parameter leaves"
        )
        for k in range(config.n_iter):
            batch = setup.sampler.batch(k)
            components, grad = self.loss_and_grad(setup, state.params, batch)
            record: Dict[str, Optional[float]] = components.as_dict()
            if not all(np.isfinite(value) for value in record.values()):
                logger.error(f"Non-finite loss at step {k}: {record}")
                raise DivergenceError(f"divergence: non-finite loss at step {k} ({record})", step=k, components=record)
            state = step_fn(state, grad, optimizer)
            record["validation"] = None
            state.history.append(record)
            if validation_fn is not None and config.validation_every and (k + 1) % config.validation_every == 0:
                record["validation"] = self.validation_hook(state, validation_fn)
            if (k + 1) % settings.LOG_EVERY == 0 or k + 1 == config.n_iter:
                logger.info(
                    f"step {k + 1}/{config.n_iter} total={record['total']:.3e} dyn={record['dyn']:.3e} "
                    f"bc={record['bc']:.3e} init={record['init']:.3e} obs={record['obs']:.3e}"
                    + (f" validation={record['validation']:.3e}" if record["validation"] is not None else "")
                )
        final = self.loss(setup, state.params, setup.sampler.batch(config.n_iter - 1)).as_dict()
        summary = {
            "final_loss": final,
            "n_iter": config.n_iter,
            "wall_clock_seconds": time.perf_counter() - started,
        }
        logger.info(f"Solve finished in {summary['wall_clock_seconds']:.1f}s, final total loss {final['total']:.3e}")
        return state, summary

    def meta_solve(
        self,
        setup: ProblemSetup,
        theta_ranges: Mapping[str, Bounds],
        config: SolveConfig,
        optimizer: OptimizerSpec,
        params0: Params,
        validation_fn: Optional[Callable[[TrainState], float]] = None,
    ) -> Tuple[TrainState, Dict[str, Any]]:
        """Train one network over a family of equations indexed by theta"""
        names = tuple(sorted(theta_ranges))
        if setup.theta_names != names or setup.sampler.theta_ranges != dict(theta_ranges):
            raise SpecError(f"meta-model setup does not sample theta {list(names)}")
        expected = setup.sampler.domain.input_dim + len(names)
        if setup.network.input_dim != expected:
            raise SpecError(f"invalid spec: meta-model network input is {setup.network.input_dim}, needs {expected}")
        return self.solve(setup, config, optimizer, params0, validation_fn)

    def write_checkpoint(self, directory: Path, state: TrainState, seed: int, config_hash: str) -> Path:
        return artifact_store.write_checkpoint(
            directory, state.params, {"step": state.step, "seed": seed, "config_hash": config_hash}
        )

    def read_checkpoint(self, directory: Path, like: Params) -> Tuple[Params, Dict[str, Any]]:
        return artifact_store.read_checkpoint(directory, like)


solver_service = SolverService()
