"""Differentiable building blocks: affine maps and attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from . import autodiff as ad
from .autodiff import Tensor, as_tensor


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two plain vectors.

    Returns 0.0 when either vector has zero norm, so downstream reward
    arithmetic stays defined for degenerate embeddings.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError("cosine_similarity expects 1-D vectors")
    if u.shape[0] != v.shape[0]:
        raise DimensionError(
            f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def affine(w, x, b) -> Tensor:
    """w @ x + b for a 1-D input, or x @ w^T + b row-wise for a 2-D input."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    if x.data.ndim == 1:
        return ad.add(ad.matmul(w, x), b)
    if x.data.ndim == 2:
        return ad.add(ad.matmul(x, ad.transpose(w)), b)
    raise DimensionError("affine expects a 1-D or 2-D input")


@dataclass
class AttentionOutput:
    values: Tensor  # (n_queries, d_v)
    weights: Tensor  # (n_queries, n_keys), rows sum to 1


def scaled_dot_attention(q, k, v) -> AttentionOutput:
    """softmax(q k^T / sqrt(d_k)) v with row-stochastic weights."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects 2-D q, k, v")
    if q.data.shape[1] != k.data.shape[1]:
        raise DimensionError(
            f"query dim {q.data.shape[1]} != key dim {k.data.shape[1]}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(
            f"key count {k.data.shape[0]} != value count {v.data.shape[0]}")
    d_k = q.data.shape[1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    weights = ad.row_softmax(scores)
    return AttentionOutput(values=ad.matmul(weights, v), weights=weights)


def multi_head_attention(x, w_q, w_k, w_v, w_o, heads: int) -> Tensor:
    """Self-attention with `heads` parallel heads over the rows of x.

    x: (n, d_model).  w_q/w_k/w_v: (d_model, d_model) applied as x @ w.
    Heads are contiguous column blocks of the projections; their outputs are
    concatenated and projected by w_o: (d_out, d_model).
    """
    x = as_tensor(x)
    d_model = x.data.shape[1]
    if heads < 1 or d_model % heads != 0:
        raise DimensionError(
            f"head count {heads} must divide model dim {d_model}")
    q = ad.matmul(x, as_tensor(w_q))
    k = ad.matmul(x, as_tensor(w_k))
    v = ad.matmul(x, as_tensor(w_v))
    step = d_model // heads
    outputs = []
    for h in range(heads):
        lo, hi = h * step, (h + 1) * step
        head = scaled_dot_attention(
            ad.col_slice(q, lo, hi), ad.col_slice(k, lo, hi), ad.col_slice(v, lo, hi))
        outputs.append(head.values)
    merged = outputs[0] if heads == 1 else ad.hcat(outputs)
    return ad.matmul(merged, ad.transpose(as_tensor(w_o)))
