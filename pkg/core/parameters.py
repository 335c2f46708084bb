"""The two-branch parameter record: network weights ``nn`` and equation parameters ``eq``.

Leaf paths are dotted strings: ``nn.W1``, ``nn.axis0.b2``, ``eq.a`` for a
scalar, ``eq.a.W1`` for a network-backed field. Leaf order is deterministic,
depth-first with names sorted at every level.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from core import tensor_ad as ad
from core.errors import ParameterError
from core.networks import ParamTree, forward_mlp, tree_leaves, tree_replace
from models.schemas import LOSS_TERMS, MaskConfig, ProblemMode

Coordinate = Literal["t", "x"]


@dataclass(frozen=True)
class EqParam:
    """One equation parameter: a scalar, or a field over (t, x).

    A field is either a fixed closed-form ``expression`` called with the
    coordinates it declares as keywords, or an auxiliary MLP in ``net``.
    """

    kind: Literal["scalar", "field"]
    value: Any = None
    expression: Optional[Callable[..., Any]] = None
    net: Optional[ParamTree] = None
    coords: tuple[Coordinate, ...] = ("x",)
    activation: str = "tanh"

    @classmethod
    def scalar(cls, value) -> "EqParam":
        return cls(kind="scalar", value=np.asarray(value, dtype=np.float64))

    @classmethod
    def field(cls, expression: Callable[..., Any], coords: Sequence[Coordinate] = ("x",)) -> "EqParam":
        return cls(kind="field", expression=expression, coords=tuple(coords))

    @classmethod
    def network(cls, net: ParamTree, coords: Sequence[Coordinate] = ("x",), activation: str = "tanh") -> "EqParam":
        return cls(kind="field", net=net, coords=tuple(coords), activation=activation)

    @property
    def trainable(self) -> bool:
        return self.kind == "scalar" or self.net is not None

    def leaves(self) -> dict[str, Any]:
        if self.kind == "scalar":
            return {"": self.value}
        if self.net is not None:
            return tree_leaves(self.net)
        return {}

    def replace_leaves(self, leaves: Mapping[str, Any]) -> "EqParam":
        if self.kind == "scalar":
            return replace(self, value=leaves[""])
        if self.net is not None:
            return replace(self, net=tree_replace(self.net, leaves))
        return self


def eval_eq_param(p: EqParam, t=None, x=None):
    """Value of ``p`` at (t, x); a scalar ignores the coordinates."""
    if p.kind == "scalar":
        return p.value
    given = {"t": t, "x": x}
    missing = [c for c in p.coords if given[c] is None]
    if missing:
        raise ParameterError(f"field parameter needs coordinate(s) {missing}")
    if p.expression is not None:
        return p.expression(**{c: given[c] for c in p.coords})
    inputs = []
    for c in p.coords:
        # t arrives as (...,), x as (..., d)
        inputs.append(ad.expand_last(given[c]) if c == "t" else given[c])
    z = inputs[0] if len(inputs) == 1 else ad.concatenate(inputs, axis=-1)
    return ad.getitem(forward_mlp(p.net, z, p.activation), (Ellipsis, 0))


@dataclass(frozen=True)
class Params:
    nn: ParamTree
    eq: Mapping[str, EqParam] = field(default_factory=dict)

    def leaves(self) -> dict[str, Any]:
        out = {}
        for name in sorted(self.eq):
            for suffix, leaf in self.eq[name].leaves().items():
                out[f"eq.{name}.{suffix}" if suffix else f"eq.{name}"] = leaf
        for path, leaf in tree_leaves(self.nn).items():
            out[f"nn.{path}"] = leaf
        return out

    def replace_leaves(self, leaves: Mapping[str, Any]) -> "Params":
        nn_leaves = {path[3:]: leaf for path, leaf in leaves.items() if path.startswith("nn.")}
        eq = {}
        for name, param in self.eq.items():
            prefix = f"eq.{name}"
            sub = {}
            for path, leaf in leaves.items():
                if path == prefix:
                    sub[""] = leaf
                elif path.startswith(prefix + "."):
                    sub[path[len(prefix) + 1:]] = leaf
            eq[name] = param.replace_leaves(sub) if param.trainable else param
        return Params(nn=tree_replace(self.nn, nn_leaves), eq=eq)

    def eq_value(self, name: str, t=None, x=None):
        try:
            param = self.eq[name]
        except KeyError:
            raise ParameterError(f"missing equation parameter '{name}'") from None
        return eval_eq_param(param, t=t, x=x)

    def require(self, *names: str) -> None:
        missing = [name for name in names if name not in self.eq]
        if missing:
            raise ParameterError(f"missing equation parameter(s) {missing}")

    def with_eq_overrides(self, values: Mapping[str, Any]) -> "Params":
        """Replace scalar equation parameters, e.g. with per-point meta-model samples."""
        eq = dict(self.eq)
        for name, value in values.items():
            if name in eq and eq[name].kind != "scalar":
                raise ParameterError(f"cannot override field parameter '{name}' with a value")
            eq[name] = EqParam(kind="scalar", value=value)
        return replace(self, eq=eq)

    def scalars(self) -> dict[str, float]:
        return {name: float(ad.primal(p.value)) for name, p in self.eq.items() if p.kind == "scalar"}


def flatten(p: Params) -> tuple[np.ndarray, list[dict]]:
    """Concatenate every leaf into one float64 vector plus its shape manifest."""
    leaves = p.leaves()
    manifest = [{"path": path, "shape": list(np.shape(leaf))} for path, leaf in leaves.items()]
    if not leaves:
        return np.zeros(0), manifest
    vector = np.concatenate([np.asarray(leaf, dtype=np.float64).ravel() for leaf in leaves.values()])
    return vector, manifest


def unflatten(vector: np.ndarray, manifest: Sequence[Mapping], like: Params) -> Params:
    expected = [path for path in like.leaves()]
    declared = [entry["path"] for entry in manifest]
    if declared != expected:
        raise ParameterError(f"manifest mismatch: paths {declared} do not match parameters {expected}")
    sizes = [int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest]
    if np.size(vector) != sum(sizes):
        raise ParameterError(f"manifest mismatch: vector holds {np.size(vector)} values, manifest declares {sum(sizes)}")
    leaves, offset = {}, 0
    for entry, size in zip(manifest, sizes):
        leaf = np.array(vector[offset:offset + size], dtype=np.float64).reshape(entry["shape"])
        leaf.setflags(write=False)
        leaves[entry["path"]] = leaf
        offset += size
    return like.replace_leaves(leaves)


@dataclass(frozen=True)
class DerivativeMask:
    """Per loss term, the parameter paths that receive gradient.

    Paths are ``nn``, ``eq.*`` or ``eq.<name>``.
    """

    terms: Mapping[str, frozenset[str]]

    @classmethod
    def default(
        cls,
        mode: ProblemMode,
        eq_terms: Iterable[str] = ("dynamic",),
        estimate: Optional[Iterable[str]] = None,
    ) -> "DerivativeMask":
        terms = {term: frozenset({"nn"}) for term in LOSS_TERMS}
        if mode == "inverse":
            extra = {"eq.*"} if estimate is None else {f"eq.{name}" for name in estimate}
            for term in eq_terms:
                terms[term] = terms[term] | extra
        return cls(terms)

    @classmethod
    def from_config(
        cls,
        config: Optional[MaskConfig],
        mode: ProblemMode,
        estimate: Optional[Iterable[str]] = None,
        params: Optional[Params] = None,
    ) -> "DerivativeMask":
        eq_terms = config.eq_terms if config is not None else ("dynamic",)
        terms = dict(cls.default(mode, eq_terms, estimate).terms)
        if config is not None:
            for term in LOSS_TERMS:
                paths = getattr(config, term)
                if paths is not None:
                    terms[term] = frozenset(paths)
        mask = cls(terms)
        if params is not None:
            mask.validate(params)
        return mask

    def validate(self, params: Params) -> None:
        for term, paths in self.terms.items():
            if term not in LOSS_TERMS:
                raise ParameterError(f"unknown loss term '{term}' in derivative mask")
            for path in paths:
                if path in ("nn", "eq.*"):
                    continue
                if path.startswith("eq.") and path[3:] in params.eq:
                    continue
                raise ParameterError(f"unknown parameter path '{path}' in mask for term '{term}'")

    def selects(self, term: str, leaf_path: str) -> bool:
        paths = self.terms.get(term, frozenset())
        branch, _, rest = leaf_path.partition(".")
        if branch == "nn":
            return "nn" in paths
        return "eq.*" in paths or f"eq.{rest.split('.')[0]}" in paths


def mask_gradient(g: Params, m: DerivativeMask, term: str) -> Params:
    """Zero every leaf of ``g`` that ``m`` does not select for ``term``."""
    leaves = {
        path: leaf if m.selects(term, path) else np.zeros(np.shape(leaf))
        for path, leaf in g.leaves().items()
    }
    return g.replace_leaves(leaves)
