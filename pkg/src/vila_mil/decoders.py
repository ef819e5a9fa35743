"""Prototype-guided patch decoder and context-guided text decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, concat_rows, layer_norm_rows, matmul,
                     mean_rows, scale, softmax_rows, tanh_elem, transpose)


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class PoolingParams:
    """Gated attention pooling weights; matrices act on column vectors."""

    W_a: Tensor
    W_v: Tensor
    W_c: Tensor
    W_b: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, suffix: str = "") -> "PoolingParams":
        mats = {k: Tensor(xavier_uniform(rng, d, d), requires_grad=True, name=f"{k}{suffix}")
                for k in ("W_a", "W_v", "W_c")}
        W_b = Tensor(xavier_uniform(rng, d, 1), requires_grad=True, name=f"W_b{suffix}")
        return cls(W_b=W_b, **mats)

    def tensors(self) -> dict[str, Tensor]:
        return {"W_a": self.W_a, "W_v": self.W_v, "W_c": self.W_c, "W_b": self.W_b}


@dataclass
class QKVProjection:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, suffix: str = "") -> "QKVProjection":
        return cls(*(Tensor(xavier_uniform(rng, d, d), requires_grad=True, name=f"{k}{suffix}")
                     for k in ("W_q", "W_k", "W_vproj")))

    def tensors(self) -> dict[str, Tensor]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_vproj": self.W_v}


@dataclass
class DecoderOutput:
    prototypes: Tensor      # (N_p, d) updated prototypes
    weights: Tensor         # (1, N_p) prototype attention A
    slide: Tensor           # (1, d) slide feature S
    raw_attention: Tensor   # (N_p, N) pre-softmax prototype/patch logits


def prototype_attention(Pr: Tensor, H: Tensor, layers: int = 1,
                        proj: QKVProjection | None = None) -> tuple[Tensor, Tensor]:
    """Cross-attention from prototypes (queries) to patches (keys = values).

    Returns the updated prototypes ``Norm(Softmax(Pr H^T / sqrt(d)) H) + Pr``
    and the last layer's pre-softmax logits.
    """
    if H.shape[0] < 1:
        raise ValueError("prototype_attention needs at least one patch")
    if Pr.shape[1] != H.shape[1]:
        raise ValueError(f"prototype dim {Pr.shape[1]} != patch dim {H.shape[1]}")
    inv_sqrt_d = 1.0 / math.sqrt(H.shape[1])
    if proj is None:
        K_t, V = transpose(H), H
    else:
        K_t, V = transpose(matmul(H, proj.W_k)), matmul(H, proj.W_v)
    out = Pr
    for _ in range(layers):
        Q = out if proj is None else matmul(out, proj.W_q)
        raw = scale(matmul(Q, K_t), inv_sqrt_d)
        out = add(layer_norm_rows(matmul(softmax_rows(raw), V)), out)
    return out, raw


def attention_pool(X: Tensor, params: PoolingParams) -> tuple[Tensor, Tensor]:
    """Gated attention fusion of the rows of ``X`` into one (1, d) feature.

    X'_i = W_a x_i;  A = softmax_i(W_b^T tanh(W_v X'_i));  S = W_c sum_i A_i X'_i
    """
    Xp = matmul(X, transpose(params.W_a))
    scores = matmul(tanh_elem(matmul(Xp, transpose(params.W_v))), params.W_b)
    A = softmax_rows(transpose(scores))
    S = matmul(matmul(A, Xp), transpose(params.W_c))
    return S, A


def decode_patches(Pr: Tensor, H: Tensor, params: PoolingParams, layers: int = 1,
                   proj: QKVProjection | None = None) -> DecoderOutput:
    updated, raw = prototype_attention(Pr, H, layers, proj)
    S, A = attention_pool(updated, params)
    return DecoderOutput(updated, A, S, raw)


def self_attention_pool(H: Tensor) -> Tensor:
    """One identity-projection self-attention layer over patches, then mean."""
    d = H.shape[1]
    att = softmax_rows(scale(matmul(H, transpose(H)), 1.0 / math.sqrt(d)))
    return mean_rows(matmul(att, H))


def context_attention(D: Tensor, prototypes: Tensor | None, H: Tensor | None,
                      layer_norm: bool = False) -> Tensor:
    """Refine class text features with visual context rows.

    ``D' = Softmax(D K^T / sqrt(d)) K + D`` with ``K = [prototypes; H]``.
    """
    parts = [t for t in (prototypes, H) if t is not None and t.shape[0] > 0]
    if not parts:
        raise ValueError("context_attention needs at least one context row")
    K = parts[0] if len(parts) == 1 else concat_rows(*parts)
    if K.shape[1] != D.shape[1]:
        raise ValueError(f"context dim {K.shape[1]} != text dim {D.shape[1]}")
    att = softmax_rows(scale(matmul(D, transpose(K)), 1.0 / math.sqrt(D.shape[1])))
    out = matmul(att, K)
    if layer_norm:
        out = layer_norm_rows(out)
    return add(out, D)
