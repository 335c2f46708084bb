import numpy as np
import pytest

from core.errors import ConfigError
from services.harness_service import config_hash, harness_service
from tests.conftest import CONFIG_DIR, write_config
from utils.artifacts import artifact_store


def test_bundled_configs_load():
    for path in sorted(CONFIG_DIR.glob("*.toml")):
        config = harness_service.load_config(path)
        assert config.problem.id


def test_meta_config_enforces_the_initial_value_across_the_family():
    context = harness_service.build(harness_service.load_config(CONFIG_DIR / "linear_ode_meta.toml"))
    batch = context.setup.sampler.batch(0)
    assert batch.initial.shape == (128, 0)
    a = batch.theta["initial"]["a"]
    assert a.min() < 0.6 and a.max() > 1.4
    assert context.setup.weights.init == 10.0


def test_toml_syntax_error_names_the_line(tmp_path):
    path = write_config(tmp_path / "broken.toml", "[problem]\nid = \"linear_ode\"\nmode = \n")
    with pytest.raises(ConfigError, match="line 3"):
        harness_service.load_config(path)


def test_field_errors_carry_their_location(tmp_path):
    path = write_config(tmp_path / "bad.toml", "[problem]\nid = \"linear_ode\"\n\n[solve]\nn_iter = 0\n")
    with pytest.raises(ConfigError, match="solve.n_iter"):
        harness_service.load_config(path)


def test_unknown_fields_are_rejected(tmp_path):
    path = write_config(tmp_path / "extra.toml", "[problem]\nid = \"linear_ode\"\ncolour = 1\n\n[solve]\nn_iter = 1\n")
    with pytest.raises(ConfigError, match="colour"):
        harness_service.load_config(path)


@pytest.mark.parametrize(
    "problem",
    [
        'id = "heat_3d"',
        'id = "burgers_1d"\nmode = "inverse"\nestimate = ["nu"]',
        'id = "linear_ode"\nmode = "inverse"\nestimate = ["b"]',
        'id = "linear_ode"\nmode = "meta"\ntheta_ranges = { a = [0.5, 1.5] }\nmeta_eval = { b = [1.0] }',
    ],
)
def test_semantic_config_errors(tmp_path, problem):
    path = write_config(tmp_path / "c.toml", f"[problem]\n{problem}\n\n[solve]\nn_iter = 1\n")
    with pytest.raises(ConfigError):
        harness_service.load_config(path)


def test_missing_observation_file(tmp_path):
    path = write_config(
        tmp_path / "c.toml",
        '[problem]\nid = "linear_ode"\nmode = "inverse"\nestimate = ["a"]\n\n'
        '[problem.observations]\nsource = "file"\npath = "nowhere.csv"\n\n[solve]\nn_iter = 1\n',
    )
    with pytest.raises(ConfigError, match="does not exist"):
        harness_service.load_config(path)


def test_config_hash_ignores_output_dir(tiny_ode_config):
    config = harness_service.load_config(tiny_ode_config)
    moved = harness_service.apply_overrides(config, out_dir="elsewhere")
    assert config_hash(config) == config_hash(moved)
    assert config_hash(config) != config_hash(harness_service.apply_overrides(config, seed=99))


def test_build_drops_weights_without_points(tiny_ode_config):
    context = harness_service.build(harness_service.load_config(tiny_ode_config))
    assert context.setup.weights.bc == 0.0
    assert context.setup.weights.obs == 0.0
    assert context.setup.weights.init == 1.0
    assert context.setup.network.input_dim == 1


def test_build_inverse_starts_from_the_initial_guess():
    context = harness_service.build(harness_service.load_config(CONFIG_DIR / "ode_inverse.toml"))
    assert float(context.params.eq["a"].value) == 1.0
    assert context.eq["a"] == 2.0
    observations = context.setup.sampler.observations
    assert len(observations) == 50
    np.testing.assert_allclose(observations.values[:, 0], np.exp(2.0 * observations.points[:, 0]))
    assert context.setup.mask.selects("dynamic", "eq.a")
    assert not context.setup.mask.selects("observations", "eq.a")


def test_build_field_inverse_uses_an_auxiliary_network():
    context = harness_service.build(harness_service.load_config(CONFIG_DIR / "poisson_2d_heterogeneous_inverse.toml"))
    assert context.params.eq["a"].net is not None
    assert "eq.a.W1" in context.params.leaves()


def test_build_meta_widens_the_network_input():
    context = harness_service.build(harness_service.load_config(CONFIG_DIR / "linear_ode_meta.toml"))
    assert context.setup.theta_names == ("a",)
    assert context.setup.network.input_dim == 2


def test_run_writes_artifacts(tiny_ode_config, run_dir):
    report = harness_service.run(tiny_ode_config, out_dir=run_dir)
    for name in ("report.json", "history.csv", "solution.json", "checkpoint/checkpoint.bin", "checkpoint/manifest.json"):
        assert (run_dir / name).is_file()
    saved = artifact_store.read_json(run_dir / "report.json")
    assert saved["l2re"]["u"] == report.l2re["u"]
    assert saved["config_hash"] == report.config_hash
    assert saved["validation_points_per_axis"] == 11
    assert "output_dir" not in saved["config"]
    history = artifact_store.read_history(run_dir / "history.csv")
    assert len(history) == 20
    assert history[9]["validation"] != "" and history[8]["validation"] == ""


def test_report_errors_match_solution_file(tiny_ode_config, run_dir):
    report = harness_service.run(tiny_ode_config, out_dir=run_dir)
    solution = artifact_store.read_json(run_dir / "solution.json")
    values = np.asarray(solution["values"])
    reference = np.asarray(solution["reference"])
    l2 = np.linalg.norm(values - reference) / np.linalg.norm(reference)
    assert abs(l2 - report.l2re["u"]) < 1e-12


def test_runs_are_reproducible(tiny_ode_config, tmp_path):
    first = harness_service.run(tiny_ode_config, out_dir=tmp_path / "a")
    second = harness_service.run(tiny_ode_config, out_dir=tmp_path / "b")
    assert first.l2re == second.l2re
    assert first.final_loss == second.final_loss
    blob_a = (tmp_path / "a" / "checkpoint" / "checkpoint.bin").read_bytes()
    assert blob_a == (tmp_path / "b" / "checkpoint" / "checkpoint.bin").read_bytes()


def test_config_error_writes_nothing(tmp_path):
    path = write_config(tmp_path / "bad.toml", "[problem]\nid = \"nope\"\n\n[solve]\nn_iter = 1\n")
    with pytest.raises(ConfigError):
        harness_service.run(path, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_inverse_run_reports_parameter_errors(tmp_path):
    path = write_config(
        tmp_path / "inv.toml",
        '[problem]\nid = "linear_ode"\nmode = "inverse"\neq = { a = 2.0 }\nestimate = ["a"]\n\n'
        '[problem.observations]\nn = 10\n\n[net]\nhidden = [4]\n\n[sampler]\nn_interior = 8\n\n'
        '[solve]\nn_iter = 5\n\n[reference]\npoints_per_axis = 5\n',
    )
    report = harness_service.run(path, out_dir=tmp_path / "out")
    assert set(report.l1re) == {"a"}
    assert report.estimates["a"] == pytest.approx(1.0, abs=0.05)
    assert report.l1re["a"] == pytest.approx(abs(report.estimates["a"] - 2.0) / 2.0)
    assert report.solution_l2re is not None


def test_meta_run_reports_per_theta_errors(tmp_path):
    path = write_config(
        tmp_path / "meta.toml",
        '[problem]\nid = "linear_ode"\nmode = "meta"\ntheta_ranges = { a = [0.5, 1.5] }\n'
        'meta_eval = { a = [0.5, 1.5] }\n\n[net]\nhidden = [4]\n\n[sampler]\nn_interior = 8\n\n'
        '[solve]\nn_iter = 3\n\n[reference]\npoints_per_axis = 5\n',
    )
    report = harness_service.run(path, out_dir=tmp_path / "out")
    assert set(report.l2re) == {"u[a=0.5]", "u[a=1.5]"}


def test_check_grad_passes_on_the_ode(tiny_ode_config):
    report = harness_service.check_grad(tiny_ode_config)
    assert report.passed, [case for case in report.cases if not case.passed]
    assert {case.term for case in report.cases} == {"dynamic", "initial"}
    assert report.mode_agreement < 1e-10


def test_check_grad_covers_equation_parameters():
    report = harness_service.check_grad(CONFIG_DIR / "ode_inverse.toml")
    leaves = {case.leaf for case in report.cases}
    assert "eq.a" in leaves
    assert report.passed
