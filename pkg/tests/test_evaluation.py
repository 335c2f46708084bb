import numpy as np
import pytest

from config.settings import settings
from core.errors import EvaluationError
from services.evaluation_service import (
    cole_hopf_burgers,
    evaluation_service,
    l1_relative_error,
    l2_relative_error,
)
from services.problem_registry import problem_registry
from utils.artifacts import artifact_store


def test_relative_errors_on_small_vectors():
    assert l1_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert l1_relative_error([2.0], [1.0]) == 1.0
    assert l2_relative_error([2.0], [1.0]) == 1.0
    assert l1_relative_error([1.0, 1.0], [1.0, 0.0]) == 1.0
    assert l2_relative_error([1.0, 1.0], [1.0, 0.0]) == 1.0


def test_degenerate_reference():
    with pytest.raises(EvaluationError, match="degenerate reference"):
        l2_relative_error([1.0], [0.0])


def test_linear_ode_reference_starts_at_one():
    reference = evaluation_service.make_reference("linear_ode", 11)
    assert reference.points.shape == (11, 1)
    assert reference.values[0, 0] == 1.0
    np.testing.assert_allclose(reference.values[:, 0], np.exp(reference.points[:, 0]))


def test_poisson_reference_peaks_at_the_center():
    reference = evaluation_service.make_reference("poisson_2d", 5)
    center = np.all(reference.points == 0.5, axis=1)
    assert reference.values[center, 0] == pytest.approx([1.0])


def test_cole_hopf_matches_initial_data_and_symmetry():
    nu = 0.01 / np.pi
    x = np.linspace(-1, 1, 21)
    at_zero = cole_hopf_burgers(np.column_stack([np.zeros(21), x]), nu)
    np.testing.assert_allclose(at_zero, -np.sin(np.pi * x))
    later = cole_hopf_burgers(np.column_stack([np.full(21, 0.5), x]), nu, nodes=801)
    np.testing.assert_allclose(later, -later[::-1], atol=1e-10)
    assert np.all(np.abs(later) <= 1.0 + 1e-12)


def test_reference_table_header_matches_rows(tmp_path):
    path = evaluation_service.write_reference("fisher_kpp", tmp_path, points_per_axis=6)
    first = path.read_text().splitlines()[0]
    assert first == "# rows=36"
    table = artifact_store.read_reference_table(path, has_time=True, d=1)
    assert len(table) == 36


def test_truncated_reference_table_is_rejected(tmp_path):
    path = evaluation_service.write_reference("linear_ode", tmp_path, points_per_axis=4)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(EvaluationError):
        artifact_store.read_reference_table(path, has_time=True, d=0)


def test_burgers_reference_is_cached(tmp_path, monkeypatch):
    from config.settings import settings

    monkeypatch.setattr(settings, "DATA_DIR", str(tmp_path))
    monkeypatch.setattr(settings, "BURGERS_QUADRATURE_NODES", 201)
    first = evaluation_service.make_reference("burgers_1d", 5)
    cached = tmp_path / "burgers_1d_reference_5.csv"
    assert cached.is_file()
    second = evaluation_service.make_reference("burgers_1d", 5)
    np.testing.assert_array_equal(first.values, second.values)


def test_evaluate_chunks_over_threads(small_mlp):
    from core.networks import Mlp
    from models.schemas import MlpSpec
    from services.solver_service import network_surrogate

    u = network_surrogate(Mlp(MlpSpec(layer_sizes=[1, 8, 8, 1], seed=3)), small_mlp, "ODE")
    points = np.linspace(0, 1, 5000)[:, None]
    serial = evaluation_service.evaluate(u, "ODE", points, threads=1)
    parallel = evaluation_service.evaluate(u, "ODE", points, threads=3)
    assert serial.shape == (5000,)
    np.testing.assert_array_equal(serial, parallel)


def test_every_analytic_problem_has_a_reference():
    for summary in problem_registry.list_problems():
        if summary.reference == "analytic":
            assert len(evaluation_service.make_reference(summary.id, 3)) > 0


def test_cole_hopf_quadrature_has_converged():
    nu = 0.01 / np.pi
    points = np.column_stack([np.array([0.1, 0.5, 1.0, 1.0]), np.array([-0.5, 0.02, 0.0, 0.9])])
    np.testing.assert_allclose(
        cole_hopf_burgers(points, nu), cole_hopf_burgers(points, nu, nodes=20001), rtol=0, atol=1e-12
    )


def test_burgers_reference_is_cached_in_the_data_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "DATA_DIR", str(tmp_path))
    first = evaluation_service.make_reference("burgers_1d", 6)
    path = tmp_path / "burgers_1d_reference_6.csv"
    assert path.is_file()
    assert first.source.startswith("cole-hopf")
    second = evaluation_service.make_reference("burgers_1d", 6)
    assert second.source == "table:burgers_1d_reference_6.csv"
    np.testing.assert_array_equal(second.values, first.values)
    np.testing.assert_array_equal(second.points, first.points)
