"""Cross attention between support/query feature maps and task attention over support blocks.

Layouts (leading batch axis ``B`` optional everywhere):

* support LS blocks ``n x w x 2``, query LS block ``w x 2``
* support features ``P``: ``n x w x c``; query features ``Q``: ``w x c``
* ``F_initial``: ``2n x w x c`` with pairs interleaved (P_1, Q_1, P_2, Q_2, ...)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class AttentionOutput:
    A_p: Tensor
    A_q: Tensor
    weighted_P: Tensor
    weighted_Q_pairs: Tensor


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == rank:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != rank + 1:
        raise ad.ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# cross attention
# ---------------------------------------------------------------------------

def correlation_maps(P, Q, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Cosine relevance between every support position and every query position.

    ``P`` is ``[B,] nw x c`` (or ``[B,] n x w x c``), ``Q`` is ``[B,] w x c``.
    Returns ``R_p`` (``nw x w``) and ``R_q = R_p^T``.
    """
    P, Q = ad.as_tensor(P), ad.as_tensor(Q)
    if P.shape[-1] == 0:
        raise ad.ShapeError("feature maps need at least one channel")
    if P.shape[-1] != Q.shape[-1]:
        raise ad.ShapeError(f"channel counts differ: {P.shape} vs {Q.shape}")
    if np.isnan(P.data).any() or np.isnan(Q.data).any():
        raise ValueError("NaN in feature maps")
    if P.ndim == Q.ndim + 1:
        P = ad.reshape(P, P.shape[:-3] + (P.shape[-3] * P.shape[-2], P.shape[-1]))
    Pn = ad.l2_normalize_rows(P, eps)
    Qn = ad.l2_normalize_rows(Q, eps)
    R_p = ad.matmul(Pn, ad.swap_last(Qn))
    return R_p, ad.swap_last(R_p)


def fusion_attention(R, W1, W2, tau: float, block: int | None = None) -> Tensor:
    """Fuse each correlation row into one attention value.

    ``R`` is ``[B,] m x k``. The meta-learner turns the mean correlation row
    into a kernel, ``A_i = softmax_i(kernel . r_i / tau)``.

    With ``block`` set, ``k = n * block`` and the kernel is shared across
    the ``n`` blocks: the mean row is averaged over blocks before the
    meta-learner and the resulting ``block``-long kernel is tiled back.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    R = ad.as_tensor(R)
    lead = R.shape[:-2]
    k = R.shape[-1]
    g = ad.global_average_pool(R)
    if block is not None:
        if k % block:
            raise ad.ShapeError(f"row length {k} is not a multiple of block {block}")
        n = k // block
        g = ad.mean(ad.reshape(g, lead + (n, block)), axis=-2)
    kernel = ad.dense(ad.relu(ad.dense(g, W1)), W2)
    if block is not None:
        kernel = ad.reshape(ad.expand(ad.reshape(kernel, lead + (1, block)), lead + (n, block)), lead + (k,))
    if kernel.shape[-1] != k:
        raise ad.ShapeError(f"meta-learner emits {kernel.shape[-1]} values for rows of length {k}")
    logits = ad.matmul(R, ad.reshape(kernel, lead + (k, 1)))
    return ad.softmax_temp(ad.reshape(logits, lead + (R.shape[-2],)), tau)


def fusion_attention_per_block(R_p, W1, W2, tau: float, n: int) -> Tensor:
    """Variant with one softmax over ``w`` positions per support block (sums to ``n``)."""
    R_p = ad.as_tensor(R_p)
    lead = R_p.shape[:-2]
    w = R_p.shape[-1]
    Rb = ad.reshape(R_p, lead + (n, w, w))
    g = ad.global_average_pool(Rb)
    kernel = ad.dense(ad.relu(ad.dense(g, W1)), W2)
    logits = ad.matmul(Rb, ad.reshape(kernel, lead + (n, w, 1)))
    A = ad.softmax_temp(ad.reshape(logits, lead + (n, w)), tau)
    return ad.reshape(A, lead + (n * w,))


def apply_cross_attention(P, Q, A_p, A_q) -> AttentionOutput:
    """Weight ``P`` by ``1 + A_p`` and each of ``n`` copies of ``Q`` by ``1 + A_q``."""
    P, squeeze = _batched(P, 3)
    Q = ad.as_tensor(Q)
    Q = ad.reshape(Q, (1,) + Q.shape) if squeeze else Q
    A_p = ad.as_tensor(A_p)
    A_q = ad.as_tensor(A_q)
    if squeeze:
        A_p = ad.reshape(A_p, (1,) + A_p.shape)
        A_q = ad.reshape(A_q, (1,) + A_q.shape)
    B, n, w, c = P.shape
    if A_p.shape != (B, n * w):
        raise ad.ShapeError(f"A_p must have {n * w} entries, got {A_p.shape[1:]}")
    if A_q.shape != (B, w) or Q.shape != (B, w, c):
        raise ad.ShapeError(f"A_q/Q extents {A_q.shape[1:]}, {Q.shape[1:]} do not match w={w}, c={c}")
    wP = ad.mul(P, ad.reshape(ad.shift(A_p, 1.0), (B, n, w, 1)))
    wQ = ad.mul(Q, ad.reshape(ad.shift(A_q, 1.0), (B, w, 1)))
    wQ = ad.expand(ad.reshape(wQ, (B, 1, w, c)), (B, n, w, c))
    return AttentionOutput(_unbatch(A_p, squeeze), _unbatch(A_q, squeeze),
                           _unbatch(wP, squeeze), _unbatch(wQ, squeeze))


def extract_features(blocks, params: dict) -> Tensor:
    """Shared 1D conv extractor: ``M x w x 2`` LS blocks to ``M x w x c`` features.

    The output layer is linear: a ReLU there can zero a whole feature row,
    where cosine correlation is discontinuous.
    """
    x = ad.transpose(blocks, (0, 2, 1))
    x = ad.relu(ad.conv1d(x, params["cam.ext0.w"], params["cam.ext0.b"]))
    x = ad.conv1d(x, params["cam.ext1.w"], params["cam.ext1.b"])
    return ad.transpose(x, (0, 2, 1))


def cam_attention(P, Q, params: dict, tau: float, mode: str = "joint") -> tuple[Tensor, Tensor]:
    """``A_p`` (``B x nw``) and ``A_q`` (``B x w``) for batched ``P`` (``B x n x w x c``), ``Q``."""
    B, n, w, c = P.shape
    R_p, R_q = correlation_maps(P, Q)
    if mode == "joint":
        A_p = fusion_attention(R_p, params["cam.p.W1"], params["cam.p.W2"], tau)
    elif mode == "per_block":
        A_p = fusion_attention_per_block(R_p, params["cam.p.W1"], params["cam.p.W2"], tau, n)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    A_q = fusion_attention(R_q, params["cam.q.W1"], params["cam.q.W2"], tau, block=w)
    return A_p, A_q


def cam_forward(support, query, params: dict, tau: float = 0.05, mode: str = "joint",
                zero_attention: bool = False, return_attention: bool = False):
    """Feature extraction, cross attention and pair stacking into ``F_initial`` (``[B,] 2n x w x c``)."""
    support, squeeze = _batched(support, 3)
    query = ad.as_tensor(query)
    if squeeze:
        query = ad.reshape(query, (1,) + query.shape)
    B, n, w, _ = support.shape
    if n == 0:
        raise ValueError("cross attention needs at least one support block")
    P = extract_features(ad.reshape(support, (B * n, w, 2)), params)
    c = P.shape[-1]
    P = ad.reshape(P, (B, n, w, c))
    Q = extract_features(query, params)
    if zero_attention:
        A_p, A_q = Tensor(np.zeros((B, n * w))), Tensor(np.zeros((B, w)))
    else:
        A_p, A_q = cam_attention(P, Q, params, tau, mode)
    out = apply_cross_attention(P, Q, A_p, A_q)
    pairs = ad.concat([ad.reshape(out.weighted_P, (B * n, 1, w, c)),
                       ad.reshape(out.weighted_Q_pairs, (B * n, 1, w, c))], axis=1)
    F = ad.reshape(pairs, (B, 2 * n, w, c))
    F = _unbatch(F, squeeze)
    if return_attention:
        if squeeze:
            out = AttentionOutput(*(_unbatch(t, True) for t in (out.A_p, out.A_q, out.weighted_P,
                                                                 out.weighted_Q_pairs)))
        return F, out
    return F


# ---------------------------------------------------------------------------
# task attention
# ---------------------------------------------------------------------------

def tam_features(support, params: dict) -> Tensor:
    """Conv stack over the ``n x w`` plane (real/imag as input channels) plus spatial GAP."""
    support, squeeze = _batched(support, 3)
    B, n, w, k = support.shape
    x = ad.transpose(support, (0, 3, 1, 2))
    x = ad.relu(ad.conv2d(x, params["tam.conv0.w"], params["tam.conv0.b"]))
    x = ad.relu(ad.conv2d(x, params["tam.conv1.w"], params["tam.conv1.b"]))
    d = x.shape[1]
    feat = ad.mean(ad.reshape(x, (B, d, n * w)), axis=-1)
    return _unbatch(feat, squeeze)


def num_tam_heads(params: dict) -> int:
    return sum(1 for k in params if k.startswith("tam.head") and k.endswith(".w"))


def tam_head(feat, params: dict, layer_index: int, printed_form: bool = False) -> Tensor:
    if not 0 <= layer_index < num_tam_heads(params):
        raise IndexError(f"no task-attention head for backbone layer {layer_index}")
    W = params[f"tam.head{layer_index}.w"]
    if printed_form:
        # 1 / (1 + exp(W f)) with no bias
        return ad.sigmoid(ad.scale(ad.dense(feat, W), -1.0))
    return ad.sigmoid(ad.dense(feat, W, params[f"tam.head{layer_index}.b"]))


def tam_forward(support, params: dict, layer_index: int, printed_form: bool = False) -> Tensor:
    """Channel weights in (0, 1) for backbone layer ``layer_index``; depends on support only."""
    return tam_head(tam_features(support, params), params, layer_index, printed_form)
