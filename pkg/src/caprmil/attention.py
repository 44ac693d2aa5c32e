"""Context-aware attention head.

Patches are softly assigned to ``M`` clusters per head, each cluster is pooled
into a token, the ``M`` tokens attend to one another, and the updated tokens
are broadcast back to patches through the same assignment weights. Cost is
linear in the number of patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .numerics import ops
from .numerics.ops import ConfigError
from .numerics.rng import Rng
from .numerics.tensor import Tensor, grad_enabled

TAU_INIT = 0.5
TAU_MIN = 0.01
AGG_EPS = 1e-8


@dataclass
class AttentionParams:
    w_x: Tensor
    b_x: Tensor
    w_f: Tensor
    b_f: Tensor
    w_cluster: Tensor
    b_cluster: Tensor
    tau: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor
    attn_dropout_p: float = 0.0

    @property
    def n_heads(self) -> int:
        return self.tau.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_cluster.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.w_cluster.shape[1]

    @classmethod
    def from_state(cls, state, prefix: str, attn_dropout_p: float = 0.0) -> "AttentionParams":
        kwargs = {f.name: state[prefix + f.name] for f in fields(cls) if f.name != "attn_dropout_p"}
        return cls(**kwargs, attn_dropout_p=attn_dropout_p)

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "attn_dropout_p"}


@dataclass
class AssignmentMap:
    """Soft patch-to-token assignment ``[B, H, N, M]`` of one attention layer."""

    weights: Tensor

    @property
    def mass(self) -> np.ndarray:
        """Per-cluster mass ``[B, H, M]``: column sums of the weights."""
        return self.weights.data.sum(axis=2)

    def numpy(self) -> np.ndarray:
        return self.weights.data


def head_dim(d_model: int, n_heads: int) -> int:
    """Per-head width ``D // H``; heads span ``H * (D // H)`` of the model width."""
    if n_heads < 1 or d_model < n_heads:
        raise ConfigError(f"n_heads={n_heads} is incompatible with d_model={d_model}")
    return d_model // n_heads


def orthogonal(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Seeded orthogonal matrix from the QR factorisation of a Gaussian draw.

    Signs are fixed so that ``R`` has a positive diagonal. When ``rows >= cols``
    the columns are orthonormal, otherwise the rows are.
    """
    tall = rows >= cols
    a = rng.normal((max(rows, cols), min(rows, cols)), dtype=np.float64)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if tall else q.T


def _fan_in_uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape, dtype=np.float64)


def init_attention(d_model: int, n_heads: int, n_clusters: int, rng: Rng) -> dict[str, np.ndarray]:
    """Initial values (float64) for every tensor of one attention head group."""
    dh = head_dim(d_model, n_heads)
    inner = n_heads * dh
    out: dict[str, np.ndarray] = {}
    for name, fan_in, shape in (
        ("x", d_model, (d_model, inner)),
        ("f", d_model, (d_model, inner)),
        ("q", dh, (dh, dh)),
        ("k", dh, (dh, dh)),
        ("v", dh, (dh, dh)),
        ("out", inner, (inner, d_model)),
    ):
        sub = rng.spawn(name)
        out["w_" + name] = _fan_in_uniform(sub, fan_in, shape)
        out["b_" + name] = _fan_in_uniform(sub, fan_in, (shape[1],))
    out["w_cluster"] = orthogonal(dh, n_clusters, rng.spawn("cluster"))
    out["b_cluster"] = _fan_in_uniform(rng.spawn("cluster_bias"), dh, (n_clusters,))
    out["tau"] = np.full(n_heads, TAU_INIT)
    order = ["w_x", "b_x", "w_f", "b_f", "w_cluster", "b_cluster", "tau",
             "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out"]
    return {k: out[k] for k in order}


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, inner = t.shape
    return ops.transpose(ops.reshape(t, (b, n, n_heads, inner // n_heads)), (0, 2, 1, 3))


def soft_cluster(h: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, AssignmentMap]:
    """Project patches per head and softly assign them to clusters.

    Returns ``x~`` and ``f~`` as ``[B, H, N, D_head]`` and the assignment map
    ``softmax_M((x~ W_cluster + b) / tau_h)``.
    """
    nh = params.n_heads
    xt = _split_heads(ops.linear(h, params.w_x, params.b_x), nh)
    ft = _split_heads(ops.linear(h, params.w_f, params.b_f), nh)
    logits = ops.linear(xt, params.w_cluster, params.b_cluster)
    logits = ops.div(logits, ops.reshape(params.tau, (1, nh, 1, 1)))
    return xt, ft, AssignmentMap(ops.softmax(logits, axis=-1))


def aggregate_tokens(ft: Tensor, assign: AssignmentMap, eps: float = AGG_EPS) -> Tensor:
    """Assignment-weighted mean of patch features per cluster, ``[B, H, M, D_head]``."""
    if eps <= 0:
        raise ConfigError("aggregation eps must be positive")
    w = assign.weights
    mass = ops.sum(w, axis=2, keepdims=True)  # [B,H,1,M]
    num = ops.matmul(ops.transpose(w, (0, 1, 3, 2)), ft)
    denom = ops.transpose(ops.add(mass, eps), (0, 1, 3, 2))
    return ops.div(num, denom)


def token_attention_weights(s: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    q = ops.linear(s, params.w_q, params.b_q)
    k = ops.linear(s, params.w_k, params.b_k)
    v = ops.linear(s, params.w_v, params.b_v)
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
    attn = ops.softmax(ops.mul(scores, 1.0 / math.sqrt(params.head_dim)), axis=-1)
    return attn, v


def token_self_attention(s: Tensor, params: AttentionParams, rng: Rng | None = None,
                         training: bool = False) -> Tensor:
    """Self-attention among the ``M`` tokens with Q/K/V shared across heads."""
    attn, v = token_attention_weights(s, params)
    return ops.dropout(ops.matmul(attn, v), params.attn_dropout_p, rng, training)


def broadcast_context(s_prime: Tensor, assign: AssignmentMap, params: AttentionParams) -> Tensor:
    """Rebuild each patch as an assignment-weighted mix of tokens, then project to ``D``."""
    o = ops.matmul(assign.weights, s_prime)  # [B,H,N,dh]
    b, nh, n, dh = o.shape
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (b, n, nh * dh))
    return ops.linear(o, params.w_out, params.b_out)


def caprmil_attention(h: Tensor, params: AttentionParams, rng: Rng | None = None,
                      training: bool = False) -> tuple[Tensor, AssignmentMap]:
    if h.shape[-1] != params.w_x.shape[0]:
        raise ConfigError(f"attention expects width {params.w_x.shape[0]}, got {h.shape[-1]}")
    if not grad_enabled() and not training:
        return _fused_forward(h, params)
    _, ft, assign = soft_cluster(h, params)
    s = aggregate_tokens(ft, assign)
    s_prime = token_self_attention(s, params, rng, training)
    return broadcast_context(s_prime, assign, params), assign


def _fused_forward(h: Tensor, params: AttentionParams) -> tuple[Tensor, AssignmentMap]:
    """Inference path: cluster/pool/broadcast run in the compiled kernel when available."""
    b, n, _ = h.shape
    nh, dh = params.n_heads, params.head_dim
    h2 = h.data.reshape(b * n, -1)
    x = (h2 @ params.w_x.data + params.b_x.data).reshape(b, n, -1)
    f = (h2 @ params.w_f.data + params.b_f.data).reshape(b, n, -1)
    outs, maps = [], []
    for i in range(b):
        w, s, _ = kernels.assign_aggregate(
            x[i], f[i], params.w_cluster.data, params.b_cluster.data, params.tau.data, nh, AGG_EPS
        )
        attn, v = token_attention_weights(Tensor(s[None], dtype=s.dtype), params)
        s_prime = np.matmul(attn.data, v.data)[0]
        outs.append(kernels.broadcast(w, s_prime))
        maps.append(w)
    o = np.stack(outs).reshape(b * n, nh * dh)
    out = (o @ params.w_out.data + params.b_out.data).reshape(b, n, -1)
    return Tensor(out, dtype=h.dtype), AssignmentMap(Tensor(np.stack(maps), dtype=h.dtype))
