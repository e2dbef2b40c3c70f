"""LSTM and Copy-LSTM cells.

Both cells accept a single vector or a batch (leading axes are carried
through untouched).  Gate matrices act on ``[h_prev, x]`` and are stored as
``(hidden + input, hidden)`` so they right-multiply row vectors.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GATES = ("f", "i", "C", "o")


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


def zero_state(hidden: int, batch: int | None = None) -> LstmState:
    shape = (hidden,) if batch is None else (batch, hidden)
    return LstmState(ad.tensor(np.zeros(shape)), ad.tensor(np.zeros(shape)))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int, prefix: str = "") -> dict[str, Tensor]:
    """Parameters ``W_f, W_i, W_C, W_o, b_f, b_i, b_C, b_o``; forget bias starts at 1."""
    fan_in = hidden + input_dim
    params = {}
    for g in GATES:
        params[f"{prefix}W_{g}"] = ad.parameter(_uniform(rng, fan_in, (fan_in, hidden)), f"{prefix}W_{g}")
    for g in GATES:
        b = np.ones(hidden) if g == "f" else np.zeros(hidden)
        params[f"{prefix}b_{g}"] = ad.parameter(b, f"{prefix}b_{g}")
    return params


def init_copy_lstm(rng: np.random.Generator, input_dim: int, hidden: int, prefix: str = "") -> dict[str, Tensor]:
    params = init_lstm(rng, input_dim, hidden, prefix)
    params[f"{prefix}W_n"] = ad.parameter(_uniform(rng, 2 * hidden, (2 * hidden, hidden)), f"{prefix}W_n")
    return params


def _get(w, prefix, name):
    return w[f"{prefix}{name}"]


def _check(x: Tensor, prev: LstmState, w, prefix: str):
    W = _get(w, prefix, "W_f")
    hidden = W.shape[1]
    if prev.h.shape[-1] != hidden or prev.c.shape[-1] != hidden:
        raise ShapeError(f"lstm: state dims {prev.h.shape}/{prev.c.shape} != hidden {hidden}")
    if prev.h.shape[-1] + x.shape[-1] != W.shape[0]:
        raise ShapeError(f"lstm: input {x.shape} + hidden {hidden} does not match gate matrix {W.shape}")
    if x.shape[:-1] != prev.h.shape[:-1]:
        raise ShapeError(f"lstm: input {x.shape} and state {prev.h.shape} differ in leading dims")


def _gates(x, prev, w, prefix):
    hx = ad.concat([prev.h, x], axis=-1)
    f = ad.sigmoid(ad.linear(hx, _get(w, prefix, "W_f"), _get(w, prefix, "b_f")))
    i = ad.sigmoid(ad.linear(hx, _get(w, prefix, "W_i"), _get(w, prefix, "b_i")))
    cand = ad.tanh(ad.linear(hx, _get(w, prefix, "W_C"), _get(w, prefix, "b_C")))
    o = ad.sigmoid(ad.linear(hx, _get(w, prefix, "W_o"), _get(w, prefix, "b_o")))
    c = f * prev.c + i * cand
    return c, o


def lstm_step(x, prev: LstmState, w, prefix: str = "") -> LstmState:
    x = ad.tensor(x)
    _check(x, prev, w, prefix)
    c, o = _gates(x, prev, w, prefix)
    return LstmState(o * ad.tanh(c), c)


def copy_lstm_step(x, prev: LstmState, c_copied, w, prefix: str = "",
                   gate_override: float | None = None, trace: dict | None = None) -> LstmState:
    """LSTM step whose memory is interpolated towards a copied memory state.

    The copy gate ``sigmoid(W_n [C_t, C_copied])`` mixes the copied memory
    into the fresh one; the returned state carries the mixed memory, which is
    what the next step sees.  ``gate_override`` pins the gate to a constant
    (0 reduces the cell to :func:`lstm_step`).
    """
    x, c_copied = ad.tensor(x), ad.tensor(c_copied)
    _check(x, prev, w, prefix)
    if c_copied.shape != prev.c.shape:
        raise ShapeError(f"copy_lstm: copied memory {c_copied.shape} != state {prev.c.shape}")
    c, o = _gates(x, prev, w, prefix)
    if gate_override is None:
        gate = ad.sigmoid(ad.linear(ad.concat([c, c_copied], axis=-1), _get(w, prefix, "W_n")))
    else:
        gate = ad.tensor(np.full(c.shape, float(gate_override)))
    mixed = gate * c_copied + (1.0 - gate) * c
    if trace is not None:
        trace["copy_gate"] = gate.data
    return LstmState(o * ad.tanh(mixed), mixed)
