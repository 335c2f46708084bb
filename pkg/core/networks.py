"""Solution surrogates: a plain MLP and the separable SPINN architecture.

Parameter trees are nested dicts of read-only float64 arrays. Layer ``k``
holds ``W{k}`` with shape ``(fan_out, fan_in)`` and ``b{k}`` with shape
``(fan_out,)``; inputs carry their features on the last axis so the same code
evaluates one point or a whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from core import tensor_ad as ad
from core.errors import ShapeError, SpecError
from models.schemas import MlpSpec, SpinnSpec
from utils.rng import Stream, generator

ParamTree = dict

ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "sin": ad.sin}


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=np.float64, order="C")
    array.setflags(write=False)
    return array


def _check_layers(sizes: Sequence[int]) -> None:
    if len(sizes) < 2:
        raise SpecError(f"invalid spec: need at least 2 layer sizes, got {list(sizes)}")
    if any(int(size) <= 0 for size in sizes):
        raise SpecError(f"invalid spec: zero-size layer in {list(sizes)}")


def _glorot_layers(sizes: Sequence[int], rng: np.random.Generator) -> ParamTree:
    tree = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tree[f"W{k}"] = _frozen(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        tree[f"b{k}"] = _frozen(np.zeros(fan_out))
    return tree


def init_mlp(spec: MlpSpec, key: Optional[int] = None) -> ParamTree:
    # auxiliary nets draw from their own stream, apart from SPINN axis subnets
    stream = (Stream.NETWORK,) if key is None else (Stream.AUXILIARY, key)
    _check_layers(spec.layer_sizes)
    return _glorot_layers(spec.layer_sizes, generator(spec.seed, *stream))


def init_spinn(spec: SpinnSpec) -> ParamTree:
    if any(dim != 1 for dim in spec.axis_dims):
        raise SpecError(f"invalid spec: SPINN axes must be scalar, got axis_dims={spec.axis_dims}")
    sizes = [1, *spec.subnet_sizes, spec.rank]
    _check_layers(sizes)
    return {
        f"axis{axis}": _glorot_layers(sizes, generator(spec.seed, Stream.NETWORK, axis))
        for axis in range(len(spec.axis_dims))
    }


def init(spec: MlpSpec | SpinnSpec) -> ParamTree:
    """Glorot-uniform weights and zero biases drawn from the network seed."""
    if isinstance(spec, SpinnSpec):
        return init_spinn(spec)
    return init_mlp(spec)


def _depth(p: Mapping) -> int:
    return sum(1 for name in p if name.startswith("W"))


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise SpecError(f"invalid spec: unknown activation '{name}'") from None


def forward_mlp(p: Mapping, z, activation: str = "tanh"):
    depth = _depth(p)
    if depth == 0:
        raise ShapeError("parameter tree holds no layers")
    fan_in = ad.shape_of(p["W1"])[1]
    if ad.shape_of(z)[-1:] != (fan_in,):
        raise ShapeError(f"input of shape {ad.shape_of(z)} does not end in the network input dimension {fan_in}")
    act = _activation(activation)
    h = z
    for k in range(1, depth + 1):
        h = ad.add(ad.matmul(h, ad.transpose(p[f"W{k}"])), p[f"b{k}"])
        if k < depth:
            h = act(h)
    return h


@dataclass
class EvaluationCounter:
    """Counts how many scalar inputs each SPINN axis subnet has processed."""

    per_axis: dict[int, int] = field(default_factory=dict)

    def record(self, axis: int, points: int) -> None:
        self.per_axis[axis] = self.per_axis.get(axis, 0) + points

    @property
    def total(self) -> int:
        return sum(self.per_axis.values())


def _axis_count(p: Mapping) -> int:
    return sum(1 for name in p if name.startswith("axis"))


def _axis_features(p: Mapping, axis: int, coord, activation: str, counter: EvaluationCounter | None):
    if counter is not None:
        counter.record(axis, int(np.prod(ad.shape_of(coord))))
    return forward_mlp(p[f"axis{axis}"], ad.expand_last(coord), activation)


def forward_spinn(p: Mapping, z: Sequence, activation: str = "tanh", counter: EvaluationCounter | None = None):
    """u(z_1, ..., z_k) = sum over ranks of the product of per-axis features."""
    n_axes = _axis_count(p)
    if len(z) != n_axes:
        raise ShapeError(f"SPINN expects {n_axes} axis coordinates, got {len(z)}")
    product = None
    for axis, coord in enumerate(z):
        features = _axis_features(p, axis, coord, activation, counter)
        product = features if product is None else ad.multiply(product, features)
    return ad.reduce_sum(product, axis=-1)


def forward_spinn_grid(p: Mapping, axes: Sequence, activation: str = "tanh", counter: EvaluationCounter | None = None):
    """Evaluate on the Cartesian product of 1-D axis samples, returning shape (n_1, ..., n_k)."""
    n_axes = _axis_count(p)
    if len(axes) != n_axes:
        raise ShapeError(f"SPINN expects {n_axes} axes, got {len(axes)}")
    product = None
    for axis, coord in enumerate(axes):
        if len(ad.shape_of(coord)) != 1:
            raise ShapeError(f"grid axis {axis} must be 1-D, got shape {ad.shape_of(coord)}")
        features = _axis_features(p, axis, coord, activation, counter)
        shape = [1] * n_axes + [ad.shape_of(features)[-1]]
        shape[axis] = ad.shape_of(coord)[0]
        features = ad.reshape(features, tuple(shape))
        product = features if product is None else ad.multiply(product, features)
    return ad.reduce_sum(product, axis=-1)


class Mlp:
    def __init__(self, spec: MlpSpec):
        self.spec = spec

    @property
    def input_dim(self) -> int:
        return self.spec.layer_sizes[0]

    def init(self) -> ParamTree:
        return init_mlp(self.spec)

    def __call__(self, p: Mapping, z):
        return forward_mlp(p, z, self.spec.activation)


class Spinn:
    def __init__(self, spec: SpinnSpec):
        self.spec = spec
        self.counter = EvaluationCounter()

    @property
    def input_dim(self) -> int:
        return len(self.spec.axis_dims)

    def init(self) -> ParamTree:
        return init_spinn(self.spec)

    def __call__(self, p: Mapping, z):
        # Pointwise evaluation; output keeps a trailing feature axis like the MLP
        columns = [ad.getitem(z, (Ellipsis, axis)) for axis in range(self.input_dim)]
        return ad.expand_last(forward_spinn(p, columns, self.spec.activation, self.counter))

    def grid(self, p: Mapping, axes: Sequence):
        return forward_spinn_grid(p, axes, self.spec.activation, self.counter)


Network = Union[Mlp, Spinn]


def build_network(spec: MlpSpec | SpinnSpec) -> Network:
    return Spinn(spec) if isinstance(spec, SpinnSpec) else Mlp(spec)


def tree_leaves(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    """Leaves keyed by dotted path, depth-first with names sorted at each level."""
    leaves = {}
    for name in sorted(tree):
        path = f"{prefix}.{name}" if prefix else name
        node = tree[name]
        if isinstance(node, Mapping):
            leaves.update(tree_leaves(node, path))
        else:
            leaves[path] = node
    return leaves


def tree_replace(tree: Mapping, leaves: Mapping[str, Any], prefix: str = "") -> ParamTree:
    out = {}
    for name in sorted(tree):
        path = f"{prefix}.{name}" if prefix else name
        node = tree[name]
        if isinstance(node, Mapping):
            out[name] = tree_replace(node, leaves, path)
        elif path in leaves:
            out[name] = leaves[path]
        else:
            raise ShapeError(f"no replacement given for leaf '{path}'")
    return out


def serialize_tree(tree: Mapping) -> tuple[bytes, list[dict]]:
    """Little-endian float64 blob plus the JSON-ready shape manifest."""
    leaves = tree_leaves(tree)
    manifest = [{"path": path, "shape": list(np.shape(value))} for path, value in leaves.items()]
    blob = b"".join(np.asarray(value, dtype="<f8").tobytes(order="C") for value in leaves.values())
    return blob, manifest


def deserialize_tree(blob: bytes, manifest: Sequence[Mapping]) -> ParamTree:
    flat = np.frombuffer(blob, dtype="<f8")
    sizes = [int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest]
    if flat.size != sum(sizes):
        raise ShapeError(f"manifest mismatch: blob holds {flat.size} values, manifest declares {sum(sizes)}")
    tree: ParamTree = {}
    offset = 0
    for entry, size in zip(manifest, sizes):
        node = tree
        *parents, leaf = entry["path"].split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = _frozen(flat[offset:offset + size].reshape(entry["shape"]))
        offset += size
    return tree
