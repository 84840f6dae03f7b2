"""Reference aggregators: materialized self-attention and DeepSets-style mean pooling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggr import LN_EPS, ParamGroup, uniform_init
from .interaction import multi_head_attention
from .tensor import Tensor

AGGREGATORS = ("rwkv", "self_attention", "mean_pool")


def check_kind(kind: str) -> str:
    if kind not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {kind!r}; valid: {', '.join(AGGREGATORS)}")
    return kind


@dataclass(eq=False)
class SelfAttentionParams(ParamGroup):
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int = 1

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator) -> "SelfAttentionParams":
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        P = T.parameter
        return cls(*(P(uniform_init(rng, d, (d, d))) for _ in range(3)),
                   P(np.ones(d)), P(np.zeros(d)), heads=heads)


def self_attention_aggregate(H: Tensor, p: SelfAttentionParams) -> Tensor:
    """One post-norm self-attention layer with the full ``n x n`` score matrix.

    No output projection: the value path feeds the residual directly.
    """
    H = T.as_tensor(H)
    mixed, _ = multi_head_attention(H @ p.W_q, H @ p.W_k, H @ p.W_v, p.heads)
    return T.layer_norm(H + mixed, p.ln_gain, p.ln_bias, LN_EPS)


@dataclass(eq=False)
class MeanPoolParams(ParamGroup):
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "MeanPoolParams":
        P = T.parameter
        return cls(P(uniform_init(rng, d, (d, d))), P(np.zeros(d)),
                   P(uniform_init(rng, d, (d, d))), P(np.zeros(d)))


def mean_pool_aggregate(H: Tensor, p: MeanPoolParams) -> Tensor:
    """rho(mean(H)): column mean followed by a two-layer perceptron."""
    pooled = T.mean_rows(T.as_tensor(H))
    return T.relu(pooled @ p.W1 + p.b1) @ p.W2 + p.b2
