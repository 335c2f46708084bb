import pytest
from typer.testing import CliRunner

from api.deps import EXIT_CONFIG, EXIT_NUMERIC, exit_code_for
from core.errors import (
    ADError,
    ConfigError,
    DivergenceError,
    EvaluationError,
    ParameterError,
    SamplingError,
    SpecError,
)
from main import app
from services.harness_service import harness_service
from tests.conftest import write_config

runner = CliRunner()


@pytest.mark.parametrize(
    "error, code",
    [
        (DivergenceError("divergence"), EXIT_NUMERIC),
        (EvaluationError("degenerate reference"), EXIT_NUMERIC),
        (ADError("not differentiable"), EXIT_NUMERIC),
        (ConfigError("unknown problem"), EXIT_CONFIG),
        (SpecError("invalid spec"), EXIT_CONFIG),
        (ParameterError("unknown parameter path"), EXIT_CONFIG),
        (SamplingError("grid size"), EXIT_CONFIG),
    ],
)
def test_exit_code_per_error_class(error, code):
    assert exit_code_for(error) == code


def test_list_problems_prints_every_id():
    result = runner.invoke(app, ["list-problems"])
    assert result.exit_code == 0
    for problem_id in ("linear_ode", "poisson_2d", "fisher_kpp", "burgers_1d"):
        assert problem_id in result.stdout


def test_run_succeeds(tiny_ode_config, run_dir):
    result = runner.invoke(app, ["run", "--config", str(tiny_ode_config), "--out", str(run_dir), "--seed", "3"])
    assert result.exit_code == 0, result.stdout
    assert "L2RE" in result.stdout
    assert (run_dir / "report.json").is_file()


def test_malformed_config_exits_2_without_artifacts(tmp_path):
    path = write_config(tmp_path / "bad.toml", "[problem\nid = 1\n")
    result = runner.invoke(app, ["run", "--config", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert not (tmp_path / "out").exists()


def test_unknown_problem_exits_2(tmp_path):
    path = write_config(tmp_path / "c.toml", '[problem]\nid = "nope"\n\n[solve]\nn_iter = 1\n')
    assert runner.invoke(app, ["run", "--config", str(path)]).exit_code == 2


def test_divergence_exits_1(tiny_ode_config, monkeypatch, tmp_path):
    def diverge(*args, **kwargs):
        raise DivergenceError("divergence: non-finite loss at step 4", step=4)

    monkeypatch.setattr(harness_service, "run", diverge)
    result = runner.invoke(app, ["run", "--config", str(tiny_ode_config), "--out", str(tmp_path / "out")])
    assert result.exit_code == 1


def test_check_grad_exit_codes(tiny_ode_config):
    result = runner.invoke(app, ["check-grad", "--config", str(tiny_ode_config)])
    assert result.exit_code == 0, result.stdout
    failing = runner.invoke(app, ["check-grad", "--config", str(tiny_ode_config), "--tolerance", "0"])
    assert failing.exit_code == 1


def test_make_reference_writes_table(tmp_path):
    result = runner.invoke(app, ["make-reference", "poisson_2d", "--out", str(tmp_path), "--points-per-axis", "4"])
    assert result.exit_code == 0
    table = tmp_path / "poisson_2d_reference_4.csv"
    assert table.read_text().splitlines()[0] == "# rows=16"


def test_make_reference_unknown_problem(tmp_path):
    assert runner.invoke(app, ["make-reference", "nope", "--out", str(tmp_path)]).exit_code == 2
