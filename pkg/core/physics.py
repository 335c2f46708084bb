"""Differential operators, built-in residuals, condition terms and the global loss.

Surrogates follow one calling convention per equation kind:

* ``ODE``:          ``u(t)``     with ``t`` of shape ``(...,)``
* ``PDEStatio``:    ``u(x)``     with ``x`` of shape ``(..., d)``
* ``PDENonStatio``: ``u(t, x)``

and return shape ``(...,)``. Residuals are written for one point and rely on
those leading axes to evaluate a whole set at once; since points never
interact, reverse-mode input derivatives are taken as the gradient of the sum
over points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Literal, Mapping, Optional, Union

import numpy as np

from core import tensor_ad as ad
from core.errors import PhysicsError
from core.parameters import Params
from core.sampling import BoundarySet, CollocationBatch
from models.schemas import AdMode, LossWeights

Kind = Literal["ODE", "PDEStatio", "PDENonStatio"]
Target = Union[float, Callable[[np.ndarray], Any]]


# -- operators ---------------------------------------------------------------

def _unit(shape: tuple[int, ...], axis: int) -> np.ndarray:
    direction = np.zeros(shape)
    direction[..., axis] = 1.0
    return direction


def _check_mode(ad_mode: str) -> None:
    if ad_mode not in ("forward", "reverse"):
        raise PhysicsError(f"unknown ad_mode '{ad_mode}'")


def _reverse_input_grad(f: Callable, x):
    return ad.vjp(lambda y: ad.reduce_sum(f(y)), x)[1]


def time_derivative(u: Callable, t, ad_mode: AdMode = "forward"):
    """du/dt for every entry of ``t``."""
    _check_mode(ad_mode)
    if ad_mode == "forward":
        return ad.jvp(u, t, np.ones(ad.shape_of(t)))[1]
    return _reverse_input_grad(u, t)


def gradient_op(u: Callable, x, ad_mode: AdMode = "forward"):
    _check_mode(ad_mode)
    if ad_mode == "reverse":
        return _reverse_input_grad(u, x)
    shape = ad.shape_of(x)
    return ad.stack([ad.jvp(u, x, _unit(shape, i))[1] for i in range(shape[-1])], axis=-1)


def divergence_op(F: Callable, x, ad_mode: AdMode = "forward"):
    _check_mode(ad_mode)
    shape = ad.shape_of(x)
    terms = []
    for i in range(shape[-1]):
        if ad_mode == "forward":
            column = ad.jvp(F, x, _unit(shape, i))[1]
        else:
            column = _reverse_input_grad(lambda y, i=i: ad.getitem(F(y), (Ellipsis, i)), x)
        terms.append(ad.getitem(column, (Ellipsis, i)))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def laplacian_op(u: Callable, x, ad_mode: AdMode = "forward"):
    _check_mode(ad_mode)
    if ad_mode == "reverse":
        return divergence_op(lambda y: gradient_op(u, y, "reverse"), x, "reverse")
    shape = ad.shape_of(x)
    total = None
    for i in range(shape[-1]):
        term = ad.second_directional(u, x, _unit(shape, i))
        total = term if total is None else ad.add(total, term)
    return total


def _per_point(value):
    """Give a coefficient a trailing axis so it scales (..., d) vectors."""
    return value if len(ad.shape_of(value)) == 0 else ad.expand_last(value)


# -- built-in residuals --------------------------------------------------------

def residual_linear_ode(t, u: Callable, params: Params, ad_mode: AdMode = "forward"):
    """du/dt - a u."""
    params.require("a")
    a = params.eq_value("a", t=t)
    if ad_mode == "forward":
        value, dudt = ad.jvp(u, t, np.ones(ad.shape_of(t)))
    else:
        value, dudt = u(t), time_derivative(u, t, "reverse")
    return ad.subtract(dudt, ad.multiply(a, value))


def residual_poisson_2d(x, u: Callable, params: Params, ad_mode: AdMode = "forward", source: Optional[Callable] = None):
    """-div(a grad u) - f, with ``a`` inside the divergence."""
    params.require("a")
    if source is None:
        raise PhysicsError("poisson residual needs a source term f")
    _check_mode(ad_mode)
    shape = ad.shape_of(x)
    if ad_mode == "forward":
        divergence = None
        for j in range(shape[-1]):
            e_j = _unit(shape, j)

            def flux(y, e_j=e_j):
                return ad.multiply(params.eq_value("a", x=y), ad.jvp(u, y, e_j)[1])

            term = ad.jvp(flux, x, e_j)[1]
            divergence = term if divergence is None else ad.add(divergence, term)
    else:
        divergence = divergence_op(
            lambda y: ad.multiply(_per_point(params.eq_value("a", x=y)), gradient_op(u, y, "reverse")),
            x,
            "reverse",
        )
    return ad.subtract(ad.negative(divergence), source(x))


def residual_fisher_kpp(t, x, u: Callable, params: Params, ad_mode: AdMode = "forward"):
    """du/dt - D lap(u) - u (r - gamma u)."""
    params.require("D", "r", "gamma")
    D = params.eq_value("D", t=t, x=x)
    r = params.eq_value("r", t=t, x=x)
    gamma = params.eq_value("gamma", t=t, x=x)
    value = u(t, x)
    dudt = time_derivative(lambda s: u(s, x), t, ad_mode)
    lap = laplacian_op(lambda y: u(t, y), x, ad_mode)
    growth = ad.multiply(value, ad.subtract(r, ad.multiply(gamma, value)))
    return ad.subtract(ad.subtract(dudt, ad.multiply(D, lap)), growth)


def residual_burgers_1d(t, x, u: Callable, params: Params, ad_mode: AdMode = "forward"):
    """du/dt + u du/dx - nu d2u/dx2."""
    params.require("nu")
    nu = params.eq_value("nu", t=t, x=x)
    value = u(t, x)
    dudt = time_derivative(lambda s: u(s, x), t, ad_mode)
    dudx = ad.getitem(gradient_op(lambda y: u(t, y), x, ad_mode), (Ellipsis, 0))
    d2udx2 = laplacian_op(lambda y: u(t, y), x, ad_mode)
    return ad.subtract(ad.add(dudt, ad.multiply(value, dudx)), ad.multiply(nu, d2udx2))


# -- problem pieces ------------------------------------------------------------

def split_points(kind: Kind, points) -> tuple:
    """Surrogate arguments for a matrix of point rows."""
    if kind == "ODE":
        return (ad.getitem(points, (Ellipsis, 0)),)
    if kind == "PDEStatio":
        return (points,)
    return ad.getitem(points, (Ellipsis, 0)), ad.getitem(points, (Ellipsis, slice(1, None)))


@dataclass(frozen=True)
class ResidualFn:
    kind: Kind
    eval: Callable[..., Any]
    ad_mode: AdMode = "forward"

    def __call__(self, points, u: Callable, params: Params, ad_mode: Optional[AdMode] = None):
        return self.eval(*split_points(self.kind, points), u, params, ad_mode=ad_mode or self.ad_mode)

    def with_mode(self, ad_mode: AdMode) -> "ResidualFn":
        return ResidualFn(self.kind, self.eval, ad_mode)


@dataclass(frozen=True)
class BoundaryCondition:
    """Dirichlet target g or Neumann target h, called with boundary point rows."""

    kind: Literal["dirichlet", "neumann"] = "dirichlet"
    target: Target = 0.0


@dataclass(frozen=True)
class ConditionFn:
    boundary: Mapping[int, BoundaryCondition] = field(default_factory=dict)
    default_boundary: Optional[BoundaryCondition] = None
    initial: Optional[Target] = None

    def for_facet(self, facet: int) -> Optional[BoundaryCondition]:
        return self.boundary.get(int(facet), self.default_boundary)


def _target(target: Target, points: np.ndarray) -> np.ndarray:
    if callable(target):
        values = np.asarray(target(points), dtype=np.float64)
    else:
        values = np.full(points.shape[0], float(target))
    if not np.all(np.isfinite(values)):
        raise PhysicsError("condition target is not finite")
    return values


@dataclass
class LossComponents:
    dyn: Any
    bc: Any
    init: Any
    obs: Any
    total: Any

    def as_dict(self) -> dict[str, float]:
        return {name: float(ad.primal(getattr(self, name))) for name in ("total", "dyn", "bc", "init", "obs")}

    def by_term(self) -> dict[str, Any]:
        return {"dynamic": self.dyn, "boundary": self.bc, "initial": self.init, "observations": self.obs}


def _bind_theta(u: Callable, params: Params, theta: Optional[Mapping[str, np.ndarray]], index=None):
    if not theta:
        return u, params
    samples = {name: (values if index is None else values[index]) for name, values in theta.items()}
    stacked = np.stack([samples[name] for name in sorted(samples)], axis=-1)
    return partial(u, theta=stacked), params.with_eq_overrides(samples)


def _mse(violations) -> Any:
    return ad.pairwise_mean(ad.reshape(ad.square(violations), (-1,)))


def _boundary_violations(u, params, boundary: BoundarySet, kind: Kind, cond: ConditionFn, ad_mode, theta):
    parts = []
    dirichlet, neumann = [], []
    for i, facet in enumerate(boundary.facet):
        bc = cond.for_facet(facet)
        if bc is None:
            continue
        (dirichlet if bc.kind == "dirichlet" else neumann).append(i)
    if dirichlet:
        index = np.array(dirichlet)
        rows = boundary.points[index]
        u_d, _ = _bind_theta(u, params, theta, index)
        targets = np.zeros(len(index))
        for facet in np.unique(boundary.facet[index]):
            sel = boundary.facet[index] == facet
            targets[sel] = _target(cond.for_facet(facet).target, rows[sel])
        parts.append(ad.subtract(u_d(*split_points(kind, rows)), targets))
    if neumann:
        index = np.array(neumann)
        rows = boundary.points[index]
        u_n, _ = _bind_theta(u, params, theta, index)
        targets = np.zeros(len(index))
        for facet in np.unique(boundary.facet[index]):
            sel = boundary.facet[index] == facet
            targets[sel] = _target(cond.for_facet(facet).target, rows[sel])
        args = split_points(kind, rows)
        x = args[-1]
        normal = np.zeros(x.shape)
        normal[np.arange(len(index)), boundary.axis[index]] = boundary.sign[index]
        spatial = (lambda y: u_n(args[0], y)) if kind == "PDENonStatio" else u_n
        if ad_mode == "forward":
            dudn = ad.jvp(spatial, x, normal)[1]
        else:
            dudn = ad.reduce_sum(ad.multiply(gradient_op(spatial, x, "reverse"), normal), axis=-1)
        parts.append(ad.subtract(dudn, targets))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ad.concatenate(parts)


def global_loss(
    u: Callable,
    params: Params,
    batch: CollocationBatch,
    residual: ResidualFn,
    cond: ConditionFn,
    w: LossWeights,
) -> LossComponents:
    """Weighted sum of mean-squared dynamic, boundary, initial and observation terms.

    A term whose weight is zero and whose point set is absent contributes 0;
    a positively weighted term with no points is an error.
    """
    kind = residual.kind
    theta = batch.theta

    def required(term: str, points) -> bool:
        empty = points is None or len(points) == 0
        if empty and w.for_term(term) > 0:
            raise PhysicsError(f"empty term: '{term}' has weight {w.for_term(term)} but no points")
        return not empty

    dyn = bc = init = obs = 0.0

    if required("dynamic", batch.interior):
        u_i, p_i = _bind_theta(u, params, theta.get("dynamic"))
        dyn = _mse(residual(batch.interior, u_i, p_i))

    if required("boundary", batch.boundary):
        violations = _boundary_violations(
            u, params, batch.boundary, kind, cond, residual.ad_mode, theta.get("boundary")
        )
        if violations is not None:
            bc = _mse(violations)
        elif w.bc > 0:
            raise PhysicsError("empty term: 'boundary' has weight but no facet carries a condition")

    if required("initial", batch.initial):
        if cond.initial is None:
            raise PhysicsError("initial points given but the problem defines no initial condition")
        x0 = batch.initial
        u_0, _ = _bind_theta(u, params, theta.get("initial"))
        t0 = np.zeros(x0.shape[0])
        predicted = u_0(t0) if kind == "ODE" else u_0(t0, x0)
        init = _mse(ad.subtract(predicted, _target(cond.initial, x0)))

    if required("observations", batch.observations):
        o = batch.observations
        u_o, _ = _bind_theta(u, params, theta.get("observations"))
        predicted = u_o(*split_points(kind, o.points))
        obs = _mse(ad.subtract(ad.expand_last(predicted), o.values))

    total = ad.add(
        ad.add(ad.multiply(w.dyn, dyn), ad.multiply(w.bc, bc)),
        ad.add(ad.multiply(w.init, init), ad.multiply(w.obs, obs)),
    )
    return LossComponents(dyn=dyn, bc=bc, init=init, obs=obs, total=total)
