"""Full network: input projection, CAPRMIL blocks, MIL aggregator, classifier."""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace

import numpy as np

from .attention import AssignmentMap, AttentionParams, caprmil_attention, head_dim, init_attention
from .numerics import ops
from .numerics.ops import ConfigError
from .numerics.rng import Rng
from .numerics.tensor import DimensionError, Tensor, default_dtype

LN_EPS = 1e-5


class Aggregator(enum.IntEnum):
    MEAN = 0
    ATTN = 1
    GATTN = 2

    @classmethod
    def parse(cls, value) -> "Aggregator":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown aggregator {value!r} (expected mean, attn or gattn)") from None


@dataclass(frozen=True)
class CaprmilConfig:
    d_in: int = 1024
    d_model: int = 128
    n_blocks: int = 1
    n_heads: int = 8
    n_clusters: int = 4
    mlp_ratio: int = 4
    dropout_p: float = 0.1
    aggregator: Aggregator = Aggregator.MEAN
    n_classes: int = 2
    attn_hidden: int = 128

    def __post_init__(self):
        object.__setattr__(self, "aggregator", Aggregator.parse(self.aggregator))
        self.validate()

    def validate(self) -> None:
        for name in ("d_in", "d_model", "n_heads", "n_clusters", "mlp_ratio", "attn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        head_dim(self.d_model, self.n_heads)

    @property
    def head_dim(self) -> int:
        return head_dim(self.d_model, self.n_heads)

    def replace(self, **changes) -> "CaprmilConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["aggregator"] = self.aggregator.name.lower()
        return d


def mean_baseline(config: CaprmilConfig) -> CaprmilConfig:
    """The same network without any CAPRMIL block (projection, mean pooling, classifier)."""
    return config.replace(n_blocks=0, aggregator=Aggregator.MEAN)


class ModelState:
    """Named parameter tensors of one network plus the config that shaped them."""

    def __init__(self, config: CaprmilConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def attention(self, block: int) -> AttentionParams:
        return AttentionParams.from_state(self.params, f"blocks.{block}.attn.", self.config.dropout_p)

    def copy(self) -> "ModelState":
        params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype, name=k))
            for k, v in self.params.items()
        )
        return ModelState(self.config, params)

    def astype(self, dtype) -> "ModelState":
        params = OrderedDict(
            (k, Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype, name=k))
            for k, v in self.params.items()
        )
        return ModelState(self.config, params)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)


def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    return (
        rng.uniform(-bound, bound, (fan_in, fan_out), dtype=np.float64),
        rng.uniform(-bound, bound, (fan_out,), dtype=np.float64),
    )


def parameter_shapes(config: CaprmilConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name and shape of every parameter, in checkpoint order."""
    c = config
    dh = c.head_dim
    inner = c.n_heads * dh
    hidden = c.mlp_ratio * c.d_model
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["proj.weight"] = (c.d_in, c.d_model)
    shapes["proj.bias"] = (c.d_model,)
    shapes["proj.ln.gamma"] = (c.d_model,)
    shapes["proj.ln.beta"] = (c.d_model,)
    for i in range(c.n_blocks):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = (c.d_model,)
        shapes[p + "ln1.beta"] = (c.d_model,)
        a = p + "attn."
        shapes[a + "w_x"] = (c.d_model, inner)
        shapes[a + "b_x"] = (inner,)
        shapes[a + "w_f"] = (c.d_model, inner)
        shapes[a + "b_f"] = (inner,)
        shapes[a + "w_cluster"] = (dh, c.n_clusters)
        shapes[a + "b_cluster"] = (c.n_clusters,)
        shapes[a + "tau"] = (c.n_heads,)
        for m in ("q", "k", "v"):
            shapes[a + "w_" + m] = (dh, dh)
            shapes[a + "b_" + m] = (dh,)
        shapes[a + "w_out"] = (inner, c.d_model)
        shapes[a + "b_out"] = (c.d_model,)
        shapes[p + "ln2.gamma"] = (c.d_model,)
        shapes[p + "ln2.beta"] = (c.d_model,)
        shapes[p + "mlp.w1"] = (c.d_model, hidden)
        shapes[p + "mlp.b1"] = (hidden,)
        shapes[p + "mlp.w2"] = (hidden, c.d_model)
        shapes[p + "mlp.b2"] = (c.d_model,)
    if c.aggregator in (Aggregator.ATTN, Aggregator.GATTN):
        shapes["agg.v.weight"] = (c.d_model, c.attn_hidden)
        shapes["agg.v.bias"] = (c.attn_hidden,)
        if c.aggregator == Aggregator.GATTN:
            shapes["agg.u.weight"] = (c.d_model, c.attn_hidden)
            shapes["agg.u.bias"] = (c.attn_hidden,)
        shapes["agg.w.weight"] = (c.attn_hidden, 1)
        shapes["agg.w.bias"] = (1,)
    shapes["head.weight"] = (c.d_model, c.n_classes)
    shapes["head.bias"] = (c.n_classes,)
    return shapes


def init_model(config: CaprmilConfig, rng: Rng, dtype=None) -> ModelState:
    """Deterministic initial parameters for ``config``.

    Linear layers draw from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, LayerNorms
    start at ``gamma=1, beta=0``, every cluster projection is orthogonal and
    every temperature starts at 0.5.
    """
    config.validate()
    dtype = dtype or default_dtype()
    c = config
    values: dict[str, np.ndarray] = {}
    values["proj.weight"], values["proj.bias"] = _linear_init(rng.spawn("proj"), c.d_in, c.d_model)
    for i in range(c.n_blocks):
        p = f"blocks.{i}."
        brng = rng.spawn("block", i)
        attn = init_attention(c.d_model, c.n_heads, c.n_clusters, brng.spawn("attn"))
        for k, v in attn.items():
            values[p + "attn." + k] = v
        hidden = c.mlp_ratio * c.d_model
        values[p + "mlp.w1"], values[p + "mlp.b1"] = _linear_init(brng.spawn("mlp1"), c.d_model, hidden)
        values[p + "mlp.w2"], values[p + "mlp.b2"] = _linear_init(brng.spawn("mlp2"), hidden, c.d_model)
    if c.aggregator in (Aggregator.ATTN, Aggregator.GATTN):
        arng = rng.spawn("agg")
        values["agg.v.weight"], values["agg.v.bias"] = _linear_init(arng.spawn("v"), c.d_model, c.attn_hidden)
        if c.aggregator == Aggregator.GATTN:
            values["agg.u.weight"], values["agg.u.bias"] = _linear_init(arng.spawn("u"), c.d_model, c.attn_hidden)
        values["agg.w.weight"], values["agg.w.bias"] = _linear_init(arng.spawn("w"), c.attn_hidden, 1)
    values["head.weight"], values["head.bias"] = _linear_init(rng.spawn("head"), c.d_model, c.n_classes)

    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(c).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta"):
            arr = np.zeros(shape)
        else:
            arr = values[name]
        assert arr.shape == shape, (name, arr.shape, shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return ModelState(c, params)


# -- forward pieces -----------------------------------------------------------

def _as_bag_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data, dtype=dtype)
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr, dtype=dtype)


def _site(rng: Rng | None, *key) -> Rng | None:
    return rng.spawn(*key) if rng is not None else None


def project_input(x: Tensor, state: ModelState, rng: Rng | None = None, training: bool = False) -> Tensor:
    """``Dropout(GELU(LN(Linear(X))))``."""
    c = state.config
    if x.shape[-1] != c.d_in:
        raise DimensionError(f"input feature width mismatch: expected d_in={c.d_in}, got {x.shape[-1]}")
    h = ops.linear(x, state["proj.weight"], state["proj.bias"])
    h = ops.layer_norm(h, state["proj.ln.gamma"], state["proj.ln.beta"], LN_EPS)
    h = ops.gelu(h)
    return ops.dropout(h, c.dropout_p, _site(rng, "proj"), training)


def mlp(h: Tensor, state: ModelState, block: int) -> Tensor:
    p = f"blocks.{block}.mlp."
    h = ops.gelu(ops.linear(h, state[p + "w1"], state[p + "b1"]))
    return ops.linear(h, state[p + "w2"], state[p + "b2"])


def caprmil_block(h: Tensor, state: ModelState, block: int, rng: Rng | None = None,
                  training: bool = False) -> tuple[Tensor, AssignmentMap]:
    """Pre-norm residual attention sublayer followed by a pre-norm residual MLP."""
    p = f"blocks.{block}."
    p_drop = state.config.dropout_p
    brng = _site(rng, "block", block)
    normed = ops.layer_norm(h, state[p + "ln1.gamma"], state[p + "ln1.beta"], LN_EPS)
    attn_out, assign = caprmil_attention(normed, state.attention(block), _site(brng, "attn"), training)
    h = ops.add(h, ops.dropout(attn_out, p_drop, _site(brng, "drop1"), training))
    normed = ops.layer_norm(h, state[p + "ln2.gamma"], state[p + "ln2.beta"], LN_EPS)
    h = ops.add(h, ops.dropout(mlp(normed, state, block), p_drop, _site(brng, "drop2"), training))
    return h, assign


def aggregator_weights(h: Tensor, state: ModelState) -> Tensor:
    """Pooling weights ``[B, N, 1]`` over patches (uniform for the mean head)."""
    kind = state.config.aggregator
    b, n, _ = h.shape
    if kind == Aggregator.MEAN:
        return Tensor(np.full((b, n, 1), 1.0 / n), dtype=h.dtype)
    hidden = ops.tanh(ops.linear(h, state["agg.v.weight"], state["agg.v.bias"]))
    if kind == Aggregator.GATTN:
        hidden = ops.mul(hidden, ops.sigmoid(ops.linear(h, state["agg.u.weight"], state["agg.u.bias"])))
    scores = ops.linear(hidden, state["agg.w.weight"], state["agg.w.bias"])
    return ops.softmax(scores, axis=1)


def aggregate(h: Tensor, state: ModelState) -> Tensor:
    """Slide embedding ``z`` ``[B, D]`` from patch representations."""
    if h.shape[1] < 1:
        raise DimensionError("cannot aggregate an empty bag")
    kind = Aggregator.parse(state.config.aggregator)
    if kind == Aggregator.MEAN:
        return ops.mean(h, axis=1)
    a = aggregator_weights(h, state)
    z = ops.matmul(ops.transpose(a, (0, 2, 1)), h)
    return ops.reshape(z, (h.shape[0], h.shape[2]))


def forward(x, state: ModelState, rng: Rng | None = None,
            training: bool = False) -> tuple[Tensor, list[AssignmentMap]]:
    """Slide logits ``[B, C]`` and the assignment map of every block."""
    dtype = state["head.weight"].dtype
    h = project_input(_as_bag_tensor(x, dtype), state, rng, training)
    maps: list[AssignmentMap] = []
    for i in range(state.config.n_blocks):
        h, assign = caprmil_block(h, state, i, rng, training)
        maps.append(assign)
    z = aggregate(h, state)
    return ops.linear(z, state["head.weight"], state["head.bias"]), maps
