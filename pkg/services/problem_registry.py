from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np

from core import tensor_ad as ad
from core.errors import ConfigError, EvaluationError
from core.physics import (
    BoundaryCondition,
    ConditionFn,
    Kind,
    ResidualFn,
    residual_burgers_1d,
    residual_fisher_kpp,
    residual_linear_ode,
    residual_poisson_2d,
)
from core.sampling import Bounds, Domain
from models.schemas import AdMode, ProblemMode, ProblemSummary
from utils.logger import logger

PI = np.pi


@dataclass(frozen=True)
class Problem:
    """A registered equation: domain, residual, conditions and its reference solution."""

    id: str
    description: str
    kind: Kind
    space: Tuple[Bounds, ...]
    residual: Callable
    conditions: Callable[[Mapping[str, float]], ConditionFn]
    modes: Tuple[ProblemMode, ...]
    reference: Literal["analytic", "generated"]
    time_horizon: Optional[float] = None
    eq_defaults: Mapping[str, float] = field(default_factory=dict)
    # closed-form equation fields, AD-traceable functions of x
    fields: Mapping[str, Callable] = field(default_factory=dict)
    initial_guess: Mapping[str, float] = field(default_factory=dict)
    exact: Optional[Callable[[np.ndarray, Mapping[str, float]], np.ndarray]] = None
    source: Optional[Callable[[Mapping[str, float]], Callable]] = None

    @property
    def has_time(self) -> bool:
        return self.kind != "PDEStatio"

    @property
    def d(self) -> int:
        return len(self.space)

    def domain(self, time_horizon: Optional[float] = None) -> Domain:
        horizon = time_horizon or self.time_horizon
        return Domain(space=self.space, time=(0.0, horizon) if self.has_time else None)

    def eq_values(self, overrides: Mapping[str, float]) -> Dict[str, float]:
        unknown = set(overrides) - set(self.eq_defaults)
        if unknown:
            raise ConfigError(f"problem '{self.id}' has no equation parameter(s) {sorted(unknown)}")
        return {**self.eq_defaults, **overrides}

    def parameter_names(self) -> List[str]:
        return sorted({*self.eq_defaults, *self.fields})

    def residual_fn(self, eq: Mapping[str, float], ad_mode: AdMode = "forward") -> ResidualFn:
        evaluate = self.residual if self.source is None else partial(self.residual, source=self.source(eq))
        return ResidualFn(kind=self.kind, eval=evaluate, ad_mode=ad_mode)

    def exact_solution(self, points: np.ndarray, eq: Mapping[str, float]) -> np.ndarray:
        if self.exact is None:
            raise EvaluationError(f"problem '{self.id}' has no closed-form solution")
        return np.asarray(self.exact(points, eq), dtype=np.float64)

    def summary(self) -> ProblemSummary:
        return ProblemSummary(
            id=self.id,
            kind=self.kind,
            modes=list(self.modes),
            reference=self.reference,
            description=self.description,
        )


# Linear ODE: du/dt = a u, u(0) = 1

def _linear_ode_exact(points, eq):
    return np.exp(eq["a"] * points[..., 0])


def _linear_ode_conditions(eq):
    return ConditionFn(initial=1.0)


# Poisson on the unit square with the manufactured solution sin(pi x) sin(pi y)

def _poisson_exact(points, eq=None):
    return np.sin(PI * points[..., 0]) * np.sin(PI * points[..., 1])


def _poisson_source(eq):
    a = eq["a"]
    return lambda x: 2.0 * PI**2 * a * _poisson_exact(x)


def _dirichlet_zero(eq):
    return ConditionFn(default_boundary=BoundaryCondition("dirichlet", 0.0))


def heterogeneous_coefficient(x):
    """a(x, y) = 1 / (1 + x^2 + y^2 + (x-1)^2 + (y-1)^2), traceable."""
    x0 = ad.getitem(x, (Ellipsis, 0))
    x1 = ad.getitem(x, (Ellipsis, 1))
    spread = ad.add(
        ad.add(ad.square(x0), ad.square(x1)),
        ad.add(ad.square(ad.subtract(x0, 1.0)), ad.square(ad.subtract(x1, 1.0))),
    )
    return ad.divide(1.0, ad.add(1.0, spread))


def _heterogeneous_source(eq):
    def source(x):
        x0, x1 = x[..., 0], x[..., 1]
        a = np.asarray(heterogeneous_coefficient(x))
        u = _poisson_exact(x)
        # grad a = -a^2 (4x - 2, 4y - 2); lap u = -2 pi^2 u
        grad_a = (-a**2 * (4.0 * x0 - 2.0), -a**2 * (4.0 * x1 - 2.0))
        grad_u = (PI * np.cos(PI * x0) * np.sin(PI * x1), PI * np.sin(PI * x0) * np.cos(PI * x1))
        return -(a * (-2.0 * PI**2 * u) + grad_a[0] * grad_u[0] + grad_a[1] * grad_u[1])

    return source


# Fisher-KPP travelling wave

def _fisher_exact(points, eq):
    D, r, gamma = eq["D"], eq["r"], eq["gamma"]
    t, x = points[..., 0], points[..., 1]
    return (r / gamma) / (1.0 + np.exp(x * np.sqrt(r / D) / np.sqrt(6.0) - 5.0 * r * t / 6.0)) ** 2


def _fisher_conditions(eq):
    def boundary(rows):
        return _fisher_exact(rows, eq)

    def initial(x):
        return _fisher_exact(np.column_stack([np.zeros(len(x)), x]), eq)

    return ConditionFn(default_boundary=BoundaryCondition("dirichlet", boundary), initial=initial)


# Burgers1D

def _burgers_conditions(eq):
    return ConditionFn(
        default_boundary=BoundaryCondition("dirichlet", 0.0),
        initial=lambda x: -np.sin(PI * x[:, 0]),
    )


def _builtin_problems() -> List[Problem]:
    return [
        Problem(
            id="linear_ode",
            description="du/dt = a u on [0, T], u(0) = 1; exact solution exp(a t)",
            kind="ODE",
            space=(),
            time_horizon=1.0,
            residual=residual_linear_ode,
            conditions=_linear_ode_conditions,
            modes=("forward", "inverse", "meta"),
            reference="analytic",
            eq_defaults={"a": 1.0},
            initial_guess={"a": 1.0},
            exact=_linear_ode_exact,
        ),
        Problem(
            id="poisson_2d",
            description="-div(a grad u) = f on [0,1]^2 with u = sin(pi x) sin(pi y), zero Dirichlet data",
            kind="PDEStatio",
            space=((0.0, 1.0), (0.0, 1.0)),
            residual=residual_poisson_2d,
            conditions=_dirichlet_zero,
            modes=("forward", "inverse"),
            reference="analytic",
            eq_defaults={"a": 1.0},
            initial_guess={"a": 0.5},
            exact=_poisson_exact,
            source=_poisson_source,
        ),
        Problem(
            id="poisson_2d_heterogeneous",
            description="Poisson with a(x,y) = 1/(1 + x^2 + y^2 + (x-1)^2 + (y-1)^2); inverse learns the field",
            kind="PDEStatio",
            space=((0.0, 1.0), (0.0, 1.0)),
            residual=residual_poisson_2d,
            conditions=_dirichlet_zero,
            modes=("forward", "inverse"),
            reference="analytic",
            fields={"a": heterogeneous_coefficient},
            exact=_poisson_exact,
            source=_heterogeneous_source,
        ),
        Problem(
            id="fisher_kpp",
            description="du/dt = D u_xx + u (r - gamma u) on [0,1] x [-1,1]; travelling-wave reference",
            kind="PDENonStatio",
            space=((-1.0, 1.0),),
            time_horizon=1.0,
            residual=residual_fisher_kpp,
            conditions=_fisher_conditions,
            modes=("forward", "inverse"),
            reference="analytic",
            eq_defaults={"D": 0.01, "r": 1.0, "gamma": 1.0},
            initial_guess={"D": 0.05, "r": 0.5},
            exact=_fisher_exact,
        ),
        Problem(
            id="burgers_1d",
            description="u_t + u u_x = nu u_xx, nu = 0.01/pi, u0 = -sin(pi x); Cole-Hopf reference table",
            kind="PDENonStatio",
            space=((-1.0, 1.0),),
            time_horizon=1.0,
            residual=residual_burgers_1d,
            conditions=_burgers_conditions,
            modes=("forward",),
            reference="generated",
            eq_defaults={"nu": 0.01 / PI},
        ),
    ]


class ProblemRegistry:
    def __init__(self):
        self._problems: Dict[str, Problem] = {}
        for problem in _builtin_problems():
            self.register(problem)

    def register(self, problem: Problem) -> None:
        if problem.id in self._problems:
            logger.warning(f"Replacing registered problem: {problem.id}")
        self._problems[problem.id] = problem

    def get(self, problem_id: str) -> Problem:
        try:
            return self._problems[problem_id]
        except KeyError:
            known = ", ".join(sorted(self._problems))
            raise ConfigError(f"unknown problem '{problem_id}' (known: {known})") from None

    def list_problems(self) -> List[ProblemSummary]:
        return [self._problems[key].summary() for key in sorted(self._problems)]


problem_registry = ProblemRegistry()
