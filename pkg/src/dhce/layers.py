"""Differentiable building blocks of the DHCE network.

All functions take and return :class:`~dhce.numkit.Tensor` values in
row-vector convention (``x @ W``), so a set of nodes is an ``n x d`` matrix.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import numkit as nk
from .hypergraph import hyperedge_mean_operator
from .numkit import ShapeError, Tensor


def hyper_context(node_reps: Tensor, incidence, transform: Tensor | None = None,
                  activation: bool = True) -> Tensor:
    """Two-stage mean aggregation over a hypergraph, then ``tanh(ctx @ transform)``.

    ``incidence`` is a node x edge matrix or a VisitHypergraph (whose mean
    operator is cached). ``transform=None, activation=False`` leaves the raw
    neighbour mean.
    """
    op = incidence.mean_operator if hasattr(incidence, "mean_operator") else hyperedge_mean_operator(incidence)
    if op.shape[0] != node_reps.rows:
        raise ShapeError(f"incidence has {op.shape[0]} rows for {node_reps.rows} nodes")
    ctx = Tensor._wrap(op) @ node_reps
    if transform is not None:
        ctx = ctx @ transform
    return nk.tanh(ctx) if activation else ctx


def transfer_attention(prev_reps: Tensor, cur_reps: Tensor, w_query: Tensor, w_key: Tensor,
                       w_value: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of current-visit codes over the previous visit.

    Keys and values come from ``prev_reps`` (m x d), queries from ``cur_reps``
    (n x d). Returns the n x d context and the n x m weight matrix.
    """
    if prev_reps.rows == 0:
        raise ValueError("transfer attention needs at least one previous-visit node")
    if cur_reps.rows == 0:
        raise ValueError("transfer attention needs at least one query")
    q = cur_reps @ w_query
    k = prev_reps @ w_key
    v = prev_reps @ w_value
    weights = nk.softmax_rows((q @ k.T) * (1.0 / math.sqrt(k.cols)))
    return weights @ v, weights


def gru_step(x: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """GRU update applied row-wise; ``x`` and ``h_prev`` are n x d.

    z = sigmoid([x, h] Wz + bz), r = sigmoid([x, h] Wr + br),
    h~ = tanh([x, r*h] Wh + bh), h' = (1 - z) * h + z * h~.
    """
    if x.shape != h_prev.shape:
        raise ShapeError(f"gru_step: input {x.shape} and state {h_prev.shape} differ")
    xh = nk.concat([x, h_prev], axis=1)
    z = nk.sigmoid(xh @ params["gru_update_w"] + params["gru_update_b"])
    r = nk.sigmoid(xh @ params["gru_reset_w"] + params["gru_reset_b"])
    cand = nk.tanh(nk.concat([x, r * h_prev], axis=1) @ params["gru_cand_w"] + params["gru_cand_b"])
    return (1.0 - z) * h_prev + z * cand


def additive_attention(items: Tensor, proj: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
    """score_i = tanh(x_i P) w; returns the weighted sum (1 x m) and weights (1 x k)."""
    if items.rows == 0:
        raise ValueError("attention over an empty sequence")
    scores = nk.tanh(items @ proj) @ context
    weights = nk.softmax_rows(scores.T)
    return weights @ items, weights


def visit_attention(visit_reps: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    return additive_attention(visit_reps, params["visit_attn_proj"], params["visit_attn_ctx"])


def fuse_predict(o_v: Tensor, o_e: Tensor, params: Mapping[str, Tensor], output_activation: str = "softmax",
                 eps_clip: float = 1e-12) -> tuple[Tensor, Tensor, Tensor]:
    """Gate the visit and event representations and score every code.

    Returns (gate, fused, prediction), with every prediction entry in
    ``[eps_clip, 1 - eps_clip]``. Sigmoid scores are clipped. Softmax scores
    are floored affinely, ``(1 - C eps) p + eps``, which keeps rows summing
    to one where a hard clip would not.
    """
    if o_v.shape != o_e.shape or o_v.rows != 1:
        raise ShapeError(f"fuse_predict: O_v {o_v.shape} and O_e {o_e.shape} must both be 1 x d")
    gate = nk.sigmoid(o_e @ params["gate_event"] + o_v @ params["gate_visit"] + params["gate_bias"])
    fused = gate * o_v + (1.0 - gate) * o_e
    logits = fused @ params["out_w"] + params["out_b"]
    if output_activation == "softmax":
        n = logits.cols
        if n * eps_clip >= 1.0:
            raise ValueError(f"eps_clip {eps_clip} too large for {n} codes")
        y = nk.softmax_rows(logits) * (1.0 - n * eps_clip) + eps_clip
    elif output_activation == "sigmoid":
        y = nk.clip(nk.sigmoid(logits), eps_clip, 1.0 - eps_clip)
    else:
        raise ValueError(f"unknown output activation {output_activation!r}")
    return gate, fused, y


def bce_terms(y_hat: Tensor, target: np.ndarray) -> Tensor:
    """Per-code binary cross-entropy, 1 x |C|."""
    y = Tensor(np.asarray(target, dtype=np.float64).reshape(1, -1))
    if y.shape != y_hat.shape:
        raise ShapeError(f"target {y.shape} does not match prediction {y_hat.shape}")
    return -(y * nk.log(y_hat) + (1.0 - y) * nk.log(1.0 - y_hat))


def visit_bce(y_hat: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over codes for one predicted visit."""
    return nk.sum_all(bce_terms(y_hat, target))


def sequence_loss(predictions: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean per-visit BCE over the predicted visits."""
    if not predictions or len(predictions) != len(targets):
        raise ValueError("sequence_loss needs equally many (>= 1) predictions and targets")
    total = visit_bce(predictions[0], targets[0])
    for y_hat, y in zip(predictions[1:], targets[1:]):
        total = total + visit_bce(y_hat, y)
    return total * (1.0 / len(predictions))
