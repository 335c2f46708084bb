import numpy as np
import pytest

from core.errors import ParameterError
from core.parameters import DerivativeMask, EqParam, Params, eval_eq_param, flatten, mask_gradient, unflatten
from models.schemas import MaskConfig
from utils.rng import generator


def test_leaves_list_eq_before_nn(ode_params):
    paths = list(ode_params.leaves())
    assert paths[0] == "eq.a"
    assert all(path.startswith("nn.") for path in paths[1:])


def test_network_field_leaves_are_nested(small_mlp_2d, small_mlp):
    p = Params(nn=small_mlp, eq={"a": EqParam.network(small_mlp_2d), "b": EqParam.scalar(0.5)})
    paths = list(p.leaves())
    assert "eq.a.W1" in paths and "eq.b" in paths
    assert paths.index("eq.b") < paths.index("nn.W1")


def test_eval_scalar_ignores_coordinates():
    assert float(eval_eq_param(EqParam.scalar(2.5), x=np.zeros((3, 2)))) == 2.5


def test_eval_field_expression_and_missing_coordinate():
    field = EqParam.field(lambda t, x: t + x[..., 0], coords=("t", "x"))
    value = eval_eq_param(field, t=np.array([1.0]), x=np.array([[2.0]]))
    np.testing.assert_array_equal(value, [3.0])
    with pytest.raises(ParameterError):
        eval_eq_param(field, x=np.array([[2.0]]))


def test_eval_network_field_shape(small_mlp_2d):
    field = EqParam.network(small_mlp_2d)
    assert np.shape(eval_eq_param(field, x=np.zeros((7, 2)))) == (7,)


def test_missing_parameter_is_named(ode_params):
    with pytest.raises(ParameterError, match="missing equation parameter"):
        ode_params.eq_value("nu")


def test_overrides_replace_scalars_not_fields(ode_params):
    overridden = ode_params.with_eq_overrides({"a": np.array([0.5, 1.5])})
    np.testing.assert_array_equal(overridden.eq_value("a"), [0.5, 1.5])
    with_field = Params(nn=ode_params.nn, eq={"a": EqParam.field(lambda x: x)})
    with pytest.raises(ParameterError):
        with_field.with_eq_overrides({"a": 1.0})


def test_flatten_unflatten_preserves_values(ode_params):
    vector, manifest = flatten(ode_params)
    assert vector.ndim == 1
    restored = unflatten(vector, manifest, ode_params)
    for path, leaf in ode_params.leaves().items():
        np.testing.assert_array_equal(restored.leaves()[path], leaf)


def test_unflatten_rejects_wrong_manifest(ode_params):
    vector, manifest = flatten(ode_params)
    with pytest.raises(ParameterError, match="manifest mismatch"):
        unflatten(vector[:-1], manifest, ode_params)
    with pytest.raises(ParameterError, match="manifest mismatch"):
        unflatten(vector, manifest[1:], ode_params)


def test_default_masks_by_mode():
    forward = DerivativeMask.default("forward")
    assert all(paths == frozenset({"nn"}) for paths in forward.terms.values())
    inverse = DerivativeMask.default("inverse", estimate=["a"])
    assert inverse.terms["dynamic"] == frozenset({"nn", "eq.a"})
    assert inverse.terms["observations"] == frozenset({"nn"})


def test_mask_from_config_overrides_terms(ode_params):
    config = MaskConfig(boundary=[], initial=["nn", "eq.*"])
    mask = DerivativeMask.from_config(config, "inverse", params=ode_params)
    assert mask.terms["boundary"] == frozenset()
    assert mask.selects("initial", "eq.a")
    assert mask.selects("dynamic", "eq.a")
    assert not mask.selects("boundary", "nn.W1")


def test_mask_rejects_unknown_path(ode_params):
    with pytest.raises(ParameterError, match="unknown parameter path"):
        DerivativeMask.from_config(MaskConfig(dynamic=["eq.nu"]), "forward", params=ode_params)


def test_mask_gradient_zeroes_unselected(ode_params):
    grad = ode_params.replace_leaves({path: np.ones(np.shape(leaf)) for path, leaf in ode_params.leaves().items()})
    mask = DerivativeMask.default("inverse", estimate=["a"])
    masked = mask_gradient(grad, mask, "observations").leaves()
    assert float(masked["eq.a"]) == 0.0
    assert np.all(masked["nn.W1"] == 1.0)
    kept = mask_gradient(grad, mask, "dynamic").leaves()
    assert float(kept["eq.a"]) == 1.0


def _random_grad(params, seed):
    draws = generator(seed, 80)
    return params.replace_leaves({path: draws.normal(size=np.shape(leaf)) for path, leaf in params.leaves().items()})


MASKS = [
    DerivativeMask.default("forward"),
    DerivativeMask.default("inverse", estimate=["a"]),
    DerivativeMask.from_config(MaskConfig(dynamic=["eq.a"], initial=[]), "inverse"),
]


@pytest.mark.parametrize("mask", MASKS, ids=["forward", "inverse", "custom"])
@pytest.mark.parametrize("term", ["dynamic", "boundary", "initial", "observations"])
def test_mask_gradient_is_idempotent(ode_params, mask, term):
    grad = _random_grad(ode_params, 0)
    once = mask_gradient(grad, mask, term).leaves()
    twice = mask_gradient(mask_gradient(grad, mask, term), mask, term).leaves()
    for path, leaf in once.items():
        np.testing.assert_array_equal(twice[path], leaf)


@pytest.mark.parametrize("mask", MASKS, ids=["forward", "inverse", "custom"])
@pytest.mark.parametrize("scale", [0.0, -2.0, 1e-3])
def test_mask_gradient_commutes_with_scaling(ode_params, mask, scale):
    grad = _random_grad(ode_params, 1)
    scaled = grad.replace_leaves({path: scale * leaf for path, leaf in grad.leaves().items()})
    for term in ("dynamic", "initial"):
        left = mask_gradient(scaled, mask, term).leaves()
        right = mask_gradient(grad, mask, term).leaves()
        for path, leaf in left.items():
            np.testing.assert_array_equal(leaf, scale * right[path])
