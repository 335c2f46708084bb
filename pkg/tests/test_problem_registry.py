import numpy as np
import pytest

from core.errors import ConfigError, EvaluationError
from services.problem_registry import heterogeneous_coefficient, problem_registry


def test_builtin_problems_are_listed_in_order():
    ids = [summary.id for summary in problem_registry.list_problems()]
    assert ids == sorted(ids)
    assert {"linear_ode", "poisson_2d", "poisson_2d_heterogeneous", "fisher_kpp", "burgers_1d"} <= set(ids)


def test_unknown_problem():
    with pytest.raises(ConfigError, match="unknown problem"):
        problem_registry.get("navier_stokes")


def test_eq_values_merge_and_reject_unknown_names():
    problem = problem_registry.get("fisher_kpp")
    assert problem.eq_values({"D": 0.5}) == {"D": 0.5, "r": 1.0, "gamma": 1.0}
    with pytest.raises(ConfigError):
        problem.eq_values({"nu": 1.0})


def test_domains_follow_the_problem_kind():
    assert problem_registry.get("linear_ode").domain().input_dim == 1
    assert problem_registry.get("poisson_2d").domain().has_time is False
    fisher = problem_registry.get("fisher_kpp").domain(time_horizon=2.0)
    assert fisher.bounds == ((0.0, 2.0), (-1.0, 1.0))


def test_exact_solutions_match_known_values():
    assert problem_registry.get("linear_ode").exact_solution(np.array([[0.0]]), {"a": 1.0})[0] == 1.0
    poisson = problem_registry.get("poisson_2d")
    assert poisson.exact_solution(np.array([[0.5, 0.5]]), {"a": 1.0})[0] == pytest.approx(1.0)
    with pytest.raises(EvaluationError):
        problem_registry.get("burgers_1d").exact_solution(np.zeros((1, 2)), {})


def test_fisher_wave_sits_between_states():
    problem = problem_registry.get("fisher_kpp")
    eq = problem.eq_values({})
    rows = np.column_stack([np.full(5, 0.5), np.linspace(-1, 1, 5)])
    values = problem.exact_solution(rows, eq)
    assert np.all((values > 0) & (values < 1))
    assert np.all(np.diff(values) < 0)


def test_heterogeneous_coefficient_values():
    a = heterogeneous_coefficient(np.array([[0.0, 0.0], [0.5, 0.5]]))
    np.testing.assert_allclose(a, [1.0 / 3.0, 1.0 / 2.0])


def test_summary_lists_modes():
    summary = problem_registry.get("linear_ode").summary()
    assert summary.modes == ["forward", "inverse", "meta"]
    assert summary.kind == "ODE"
