"""End-to-end runs of the bundled configs; the long ones need PINNFORGE_RUN_SLOW=1."""
import numpy as np
import pytest

from services.harness_service import harness_service
from tests.conftest import CONFIG_DIR, write_config
from utils.artifacts import artifact_store


@pytest.mark.parametrize("seed", range(20))
def test_gradient_oracle_on_seeded_networks(tmp_path, seed):
    path = write_config(
        tmp_path / "oracle.toml",
        f"""
[problem]
id = "fisher_kpp"
mode = "inverse"
estimate = ["D", "r"]

[problem.observations]
n = 4

[net]
hidden = [{4 + seed % 5}, {3 + seed % 4}]
seed = {seed}

[solve]
n_iter = 1
seed = {seed}
""",
    )
    report = harness_service.check_grad(path)
    assert report.passed, [(c.term, c.leaf, c.rel_error) for c in report.cases if not c.passed]


@pytest.mark.slow
def test_forward_linear_ode(tmp_path):
    report = harness_service.run(CONFIG_DIR / "linear_ode_forward.toml", out_dir=tmp_path)
    assert report.l2re["u"] < 1e-2


@pytest.mark.slow
def test_forward_linear_ode_is_bitwise_reproducible(tmp_path):
    first = harness_service.run(CONFIG_DIR / "linear_ode_forward.toml", out_dir=tmp_path / "a")
    second = harness_service.run(CONFIG_DIR / "linear_ode_forward.toml", out_dir=tmp_path / "b")
    assert (first.l1re, first.l2re) == (second.l1re, second.l2re)
    for name in ("checkpoint.bin", "manifest.json", "metadata.json"):
        assert (tmp_path / "a" / "checkpoint" / name).read_bytes() == (tmp_path / "b" / "checkpoint" / name).read_bytes()


@pytest.mark.slow
def test_inverse_linear_ode_recovers_a(tmp_path):
    report = harness_service.run(CONFIG_DIR / "ode_inverse.toml", out_dir=tmp_path)
    assert report.l1re["a"] < 0.05


@pytest.mark.slow
def test_manufactured_poisson(tmp_path):
    report = harness_service.run(CONFIG_DIR / "poisson_2d.toml", out_dir=tmp_path)
    assert report.l2re["u"] < 5e-2


@pytest.mark.slow
def test_meta_model_over_a_family(tmp_path):
    report = harness_service.run(CONFIG_DIR / "linear_ode_meta.toml", out_dir=tmp_path)
    assert set(report.l2re) == {"u[a=0.5]", "u[a=1]", "u[a=1.5]"}
    assert all(value < 5e-2 for value in report.l2re.values())


@pytest.mark.slow
def test_burgers_smoke(tmp_path):
    report = harness_service.run(CONFIG_DIR / "burgers_1d.toml", out_dir=tmp_path)
    assert np.isfinite(report.final_loss["total"])
    assert report.l2re["u"] < 0.1
    history = artifact_store.read_history(tmp_path / "history.csv")
    assert len(history) == report.n_iter
