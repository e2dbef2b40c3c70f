"""Additive attention, hard memory selection (SCMA), context gating."""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, SkipCoordinate, Tensor


def init_additive(rng, key_dim: int, query_dim: int, attn_dim: int, prefix: str) -> dict[str, Tensor]:
    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    return {
        f"{prefix}W_s": ad.parameter(u(key_dim, (key_dim, attn_dim)), f"{prefix}W_s"),
        f"{prefix}W_h": ad.parameter(u(query_dim, (query_dim, attn_dim)), f"{prefix}W_h"),
        f"{prefix}w_a": ad.parameter(u(attn_dim, (attn_dim,)), f"{prefix}w_a"),
    }


def init_context_gate(rng, embed_dim: int, hidden: int, text_dim: int, prefix: str) -> dict[str, Tensor]:
    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    wh = embed_dim + hidden
    return {
        f"{prefix}W_src": ad.parameter(u(text_dim, (text_dim, hidden)), f"{prefix}W_src"),
        f"{prefix}W_t": ad.parameter(u(wh, (wh, hidden)), f"{prefix}W_t"),
        f"{prefix}W_Z": ad.parameter(u(wh + text_dim, (wh + text_dim, hidden)), f"{prefix}W_Z"),
    }


def project_keys(keys, w, prefix: str) -> Tensor:
    """``W_s`` applied to every key; independent of the query so callers cache it."""
    keys = ad.tensor(keys)
    if keys.ndim < 2 or keys.shape[-2] == 0:
        raise ShapeError(f"attention: need at least one key, got keys of shape {keys.shape}")
    return ad.linear(keys, w[f"{prefix}W_s"])


def additive_attention(query, keys, w, prefix: str = "", mask=None, projected=None) -> Tensor:
    """``softmax(w_a . tanh(W_s k_i + W_h q))`` over the key axis.

    ``keys`` is ``[..., n, d]`` and ``query`` ``[..., d_q]``.  ``mask``
    (``[..., n]``, True = valid) excludes padded keys.
    """
    query = ad.tensor(query)
    pk = project_keys(keys, w, prefix) if projected is None else projected
    n = pk.shape[-2]
    if pk.shape[:-2] != query.shape[:-1]:
        raise ShapeError(f"attention: query {query.shape} does not match keys {pk.shape}")
    q = ad.expand(ad.linear(query, w[f"{prefix}W_h"]), -2, n)
    scores = ad.matmul(ad.tanh(pk + q), w[f"{prefix}w_a"])
    return ad.softmax(scores, mask=mask)


def soft_attend(alpha, values) -> Tensor:
    """Attention-weighted sum of ``values`` (``[..., n, h]``)."""
    alpha, values = ad.tensor(alpha), ad.tensor(values)
    if values.ndim != alpha.ndim + 1 or values.shape[:-1] != alpha.shape:
        raise ShapeError(f"soft_attend: weights {alpha.shape} vs values {values.shape}")
    return ad.weighted_sum(alpha, values)


def scma_masks(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask (1 at argmax, lowest index on ties) and shifting mask (1 - max there)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    idx = np.argmax(alpha, axis=-1)
    m_b = np.zeros_like(alpha)
    np.put_along_axis(m_b, idx[..., None], 1.0, axis=-1)
    amax = np.take_along_axis(alpha, idx[..., None], axis=-1)
    m_s = m_b * (1.0 - amax)
    return m_b, m_s


class MaskTape:
    """Freezes SCMA masks across repeated evaluations of the same computation.

    The first evaluation inside :meth:`session` records the masks; later
    sessions replay them.  Used by gradient checking so that finite
    differences see the same straight-through surrogate the backward pass
    differentiates.  A replayed evaluation whose argmax moved raises
    :class:`SkipCoordinate`.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.recorded = False
        self.cursor = 0
        self.flips = 0

    @classmethod
    def current(cls) -> "MaskTape | None":
        return getattr(cls._local, "tape", None)

    @contextmanager
    def session(self):
        prev = MaskTape.current()
        MaskTape._local.tape = self
        self.cursor = 0
        try:
            yield self
            self.recorded = True
        finally:
            MaskTape._local.tape = prev

    def masks(self, alpha: np.ndarray):
        if not self.recorded:
            m_b, m_s = scma_masks(alpha)
            self.records.append((np.argmax(alpha, axis=-1), m_b, m_s))
            return m_b, m_s
        idx, m_b, m_s = self.records[self.cursor]
        self.cursor += 1
        if not np.array_equal(np.argmax(alpha, axis=-1), idx):
            self.flips += 1
            raise SkipCoordinate("argmax moved under perturbation")
        return m_b, m_s


def scma_select(alpha, memories) -> Tensor:
    """Copy the memory at the attention argmax with a straight-through gradient.

    Computes ``sum_i (alpha_i * m_b_i + m_s_i) * c_i`` with both masks held
    constant: the forward value is exactly the selected memory, the selected
    memory receives the upstream gradient unchanged, the winning weight
    receives its dot product with that gradient, and every other weight and
    memory receives zero.
    """
    alpha, memories = ad.tensor(alpha), ad.tensor(memories)
    if memories.ndim != alpha.ndim + 1 or memories.shape[:-1] != alpha.shape:
        raise ShapeError(f"scma_select: weights {alpha.shape} vs memories {memories.shape}")
    tape = MaskTape.current()
    m_b, m_s = scma_masks(alpha.data) if tape is None else tape.masks(alpha.data)
    coeff = alpha * ad.tensor(m_b) + ad.tensor(m_s)
    return ad.weighted_sum(coeff, memories)


def context_gate(word, hidden, context, w, prefix: str = "", gate_override: float | None = None) -> Tensor:
    """Blend the attended text (source) with word + hidden state (target).

    ``z = sigmoid(W_Z [w; h; c])`` and the output is
    ``z * tanh(W_src c) + (1 - z) * tanh(W_t [w; h])``.
    """
    word, hidden, context = ad.tensor(word), ad.tensor(hidden), ad.tensor(context)
    W_Z, W_t, W_src = w[f"{prefix}W_Z"], w[f"{prefix}W_t"], w[f"{prefix}W_src"]
    wh = ad.concat([word, hidden], axis=-1)
    if wh.shape[-1] != W_t.shape[0] or context.shape[-1] != W_src.shape[0]:
        raise ShapeError(
            f"context_gate: word {word.shape} + hidden {hidden.shape} / context {context.shape} "
            f"do not match W_t {W_t.shape} / W_src {W_src.shape}")
    if gate_override is None:
        z = ad.sigmoid(ad.linear(ad.concat([wh, context], axis=-1), W_Z))
    else:
        z = ad.tensor(np.full(wh.shape[:-1] + (W_t.shape[1],), float(gate_override)))
    return z * ad.tanh(ad.linear(context, W_src)) + (1.0 - z) * ad.tanh(ad.linear(wh, W_t))


def visual_attend(query, features, w, prefix: str = "vis.", projected=None) -> Tensor:
    """Additive attention over region features, returning their weighted sum."""
    features = ad.tensor(features)
    if features.ndim < 2 or features.shape[-2] == 0:
        raise ShapeError(f"visual_attend: need at least one feature vector, got {features.shape}")
    alpha = additive_attention(query, features, w, prefix, projected=projected)
    return ad.weighted_sum(alpha, features)
