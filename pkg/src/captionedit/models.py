"""EditNet, DCNet, distribution fusion and decoding.

Both models share a small protocol used by the decoders and trainers:

* ``prepare(batch)`` encodes everything that does not change per step,
* ``init_state(ctx)`` returns zero decoder states,
* ``step(ctx, state, prev_ids, trace=None)`` returns ``(logits, state)``.

All tensors carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (additive_attention, context_gate, init_additive, init_context_gate,
                        project_keys, scma_select, soft_attend, visual_attend)
from .autodiff import ShapeError, Tensor
from .cells import LstmState, copy_lstm_step, init_copy_lstm, init_lstm, lstm_step, zero_state
from .data import END, START, Batch


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    attn_dim: int = 32
    k: int = 8
    d_v: int = 64
    dc_embed_dim: int = 64
    dc_enc_dim: int = 32
    dc_hidden_dim: int = 64
    dc_attn_dim: int = 32
    use_visual: bool = True
    use_context_gate: bool = True
    hard_scma: bool = True
    fuse_dcnet: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        return cls(vocab_size=vocab_size, embed_dim=1024, hidden_dim=1024, attn_dim=512, k=36, d_v=2048,
                   dc_embed_dim=1024, dc_enc_dim=512, dc_hidden_dim=1024, dc_attn_dim=512)

    @property
    def target_dim(self) -> int:
        """Size of the DCNet compressed state (both directions)."""
        return 2 * self.dc_enc_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _uniform(rng, fan_in, shape):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def _check_ids(ids: np.ndarray, vocab_size: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ShapeError(f"{what}: empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError(f"{what}: token id out of range [0, {vocab_size})")
    return ids


def _batched(ids, lengths):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if lengths is None:
        lengths = np.full(ids.shape[0], ids.shape[1], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if (lengths < 1).any() or (lengths > ids.shape[1]).any():
        raise ShapeError("sequence lengths must be in 1..width")
    return ids, lengths


def _run_lstm(x: Tensor, params, prefix: str, hidden: int) -> tuple[list[Tensor], list[Tensor]]:
    """Unroll an LSTM over axis 1 of ``x`` from a zero state."""
    B, n = x.shape[0], x.shape[1]
    state = zero_state(hidden, B)
    hs, cs = [], []
    for t in range(n):
        state = lstm_step(x[:, t], state, params, prefix)
        hs.append(state.h)
        cs.append(state.c)
    return hs, cs


class EncodedCaption(NamedTuple):
    h: Tensor          # (B, n, H) per-word hidden states
    c: Tensor          # (B, n, H) per-word memory states
    last: Tensor       # (B, H) hidden state at each caption's final word
    mask: np.ndarray   # (B, n) valid positions
    ids: np.ndarray    # (B, n)

    @property
    def n(self) -> int:
        return self.h.shape[1]


class EditNetState(NamedTuple):
    att: LstmState
    lang: LstmState


class EditContext(NamedTuple):
    enc: EncodedCaption
    keys: Tensor
    V: Tensor | None
    vbar: Tensor | None
    vkeys: Tensor | None


class EditNet:
    """Caption encoder, attention LSTM, SCMA, context gate and Copy-LSTM."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = self.config = config
        E, H, A = c.embed_dim, c.hidden_dim, c.attn_dim
        dv = c.d_v if c.use_visual else 0
        p: dict[str, Tensor] = {"emb": ad.parameter(rng.uniform(-0.1, 0.1, (c.vocab_size, E)), "emb")}
        p.update(init_lstm(rng, E, H, "enc."))
        p.update(init_lstm(rng, E + H + dv + H, H, "att."))
        p.update(init_additive(rng, H, H, A, "txt."))
        if c.use_visual:
            p.update(init_additive(rng, c.d_v, H, A, "vis."))
        if c.use_context_gate:
            p.update(init_context_gate(rng, E, H, H, "gate."))
        p.update(init_copy_lstm(rng, H + dv + H, H, "lang."))
        p["out.W"] = ad.parameter(_uniform(rng, H, (H, c.vocab_size)), "out.W")
        p["out.b"] = ad.parameter(np.zeros(c.vocab_size), "out.b")
        p["mse.W_d"] = ad.parameter(_uniform(rng, H, (H, c.target_dim)), "mse.W_d")
        p["mse.b_d"] = ad.parameter(np.zeros(c.target_dim), "mse.b_d")
        self.params = p

    def encode_caption(self, ids, lengths=None) -> EncodedCaption:
        ids = _check_ids(ids, self.config.vocab_size, "encode_caption")
        ids, lengths = _batched(ids, lengths)
        x = ad.embedding(self.params["emb"], ids)
        hs, cs = _run_lstm(x, self.params, "enc.", self.config.hidden_dim)
        h, c = ad.stack(hs, axis=1), ad.stack(cs, axis=1)
        last = h[np.arange(len(lengths)), lengths - 1]
        mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
        return EncodedCaption(h, c, last, mask, ids)

    def prepare(self, batch: Batch) -> EditContext:
        enc = self.encode_caption(batch.existing, batch.existing_len)
        keys = project_keys(enc.h, self.params, "txt.")
        if not self.config.use_visual:
            return EditContext(enc, keys, None, None, None)
        feats = np.asarray(batch.features, dtype=np.float64)
        if feats.shape[1:] != (self.config.k, self.config.d_v):
            raise ShapeError(f"features {feats.shape[1:]} != (k, d_v) = {(self.config.k, self.config.d_v)}")
        V = ad.tensor(feats)
        return EditContext(enc, keys, V, ad.tensor(feats.mean(axis=1)), project_keys(V, self.params, "vis."))

    def init_state(self, ctx: EditContext) -> EditNetState:
        B, H = ctx.enc.h.shape[0], self.config.hidden_dim
        return EditNetState(zero_state(H, B), zero_state(H, B))

    def step(self, ctx: EditContext, state: EditNetState, prev_ids, trace: dict | None = None):
        p, c = self.params, self.config
        w = ad.embedding(p["emb"], prev_ids)
        parts = [w, ctx.enc.last] + ([ctx.vbar] if c.use_visual else []) + [state.lang.h]
        att = lstm_step(ad.concat(parts), state.att, p, "att.")
        alpha = additive_attention(att.h, ctx.enc.h, p, "txt.", mask=ctx.enc.mask, projected=ctx.keys)
        copied = scma_select(alpha, ctx.enc.c) if c.hard_scma else soft_attend(alpha, ctx.enc.c)
        text = soft_attend(alpha, ctx.enc.h)
        if c.use_context_gate:
            text = context_gate(w, att.h, text, p, "gate.")
        lang_in = [att.h] + ([visual_attend(att.h, ctx.V, p, "vis.", ctx.vkeys)] if c.use_visual else []) + [text]
        lang = copy_lstm_step(ad.concat(lang_in), state.lang, copied, p, "lang.", trace=trace)
        if trace is not None:
            trace["alpha"] = alpha.data
        return ad.linear(lang.h, p["out.W"], p["out.b"]), EditNetState(att, lang)

    def project_hidden(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.params["mse.W_d"], self.params["mse.b_d"])


class DCContext(NamedTuple):
    states: Tensor      # (B, n, 2*He)
    final: Tensor       # (B, 2*He) compressed representation
    mean: Tensor        # (B, 2*He) mean over valid positions
    keys: Tensor
    mask: np.ndarray


class DCNet:
    """Text-only denoising auto-encoder: bi-LSTM encoder, top-down two-LSTM decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = self.config = config
        E, He, H, A = c.dc_embed_dim, c.dc_enc_dim, c.dc_hidden_dim, c.dc_attn_dim
        p: dict[str, Tensor] = {"dc.emb": ad.parameter(rng.uniform(-0.1, 0.1, (c.vocab_size, E)), "dc.emb")}
        p.update(init_lstm(rng, E, He, "dc.fwd."))
        p.update(init_lstm(rng, E, He, "dc.bwd."))
        p.update(init_lstm(rng, E + 2 * He + H, H, "dc.att."))
        p.update(init_additive(rng, 2 * He, H, A, "dc.txt."))
        p.update(init_lstm(rng, H + 2 * He, H, "dc.lang."))
        p["dc.out.W"] = ad.parameter(_uniform(rng, H, (H, c.vocab_size)), "dc.out.W")
        p["dc.out.b"] = ad.parameter(np.zeros(c.vocab_size), "dc.out.b")
        p["dc.mse.W_d"] = ad.parameter(_uniform(rng, H, (H, c.target_dim)), "dc.mse.W_d")
        p["dc.mse.b_d"] = ad.parameter(np.zeros(c.target_dim), "dc.mse.b_d")
        self.params = p

    def encode(self, ids, lengths=None) -> DCContext:
        """Forward and backward passes; per-word states are ``[fwd_i; bwd_i]``."""
        ids = _check_ids(ids, self.config.vocab_size, "dcnet_encode")
        ids, lengths = _batched(ids, lengths)
        B, n = ids.shape
        He = self.config.dc_enc_dim
        pos = np.arange(n)[None, :]
        # reversal within each caption's own length; padding stays in place
        rev_idx = np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
        rows = np.arange(B)[:, None]
        emb = self.params["dc.emb"]
        fh, _ = _run_lstm(ad.embedding(emb, ids), self.params, "dc.fwd.", He)
        bh, _ = _run_lstm(ad.embedding(emb, ids[rows, rev_idx]), self.params, "dc.bwd.", He)
        fwd, bwd_rev = ad.stack(fh, axis=1), ad.stack(bh, axis=1)
        bwd = bwd_rev[rows, rev_idx]
        states = ad.concat([fwd, bwd], axis=-1)
        last = np.arange(B), lengths - 1
        final = ad.concat([fwd[last], bwd_rev[last]], axis=-1)
        mask = pos < lengths[:, None]
        weights = ad.tensor(mask / lengths[:, None])
        mean = ad.weighted_sum(weights, states)
        return DCContext(states, final, mean, project_keys(states, self.params, "dc.txt."), mask)

    def prepare(self, batch: Batch) -> DCContext:
        return self.encode(batch.existing, batch.existing_len)

    def init_state(self, ctx: DCContext) -> EditNetState:
        B, H = ctx.states.shape[0], self.config.dc_hidden_dim
        return EditNetState(zero_state(H, B), zero_state(H, B))

    def step(self, ctx: DCContext, state: EditNetState, prev_ids, trace: dict | None = None):
        p = self.params
        w = ad.embedding(p["dc.emb"], prev_ids)
        att = lstm_step(ad.concat([w, ctx.mean, state.lang.h]), state.att, p, "dc.att.")
        alpha = additive_attention(att.h, ctx.states, p, "dc.txt.", mask=ctx.mask, projected=ctx.keys)
        attended = soft_attend(alpha, ctx.states)
        lang = lstm_step(ad.concat([att.h, attended]), state.lang, p, "dc.lang.")
        return ad.linear(lang.h, p["dc.out.W"], p["dc.out.b"]), EditNetState(att, lang)

    def project_hidden(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.params["dc.mse.W_d"], self.params["dc.mse.b_d"])


# ---------------------------------------------------------------------------
# teacher forcing

class TeacherForced(NamedTuple):
    logits: Tensor   # (B, T, V)
    last_h: Tensor   # (B, H) decoder hidden at each caption's final (END) step


def teacher_forced(model, batch: Batch, ss_prob: float = 0.0, rng: np.random.Generator | None = None,
                   ctx=None) -> TeacherForced:
    """Run the decoder over ``START + truth``; with ``ss_prob`` > 0 inputs after the
    first are replaced, per example, by a token sampled from the previous step's output."""
    ctx = model.prepare(batch) if ctx is None else ctx
    state = model.init_state(ctx)
    T = batch.dec_in.shape[1]
    logits, hs = [], []
    prev = batch.dec_in[:, 0]
    for t in range(T):
        if t > 0:
            prev = batch.dec_in[:, t]
            if ss_prob > 0:
                if rng is None:
                    raise ValueError("scheduled sampling needs an rng")
                swap = rng.random(len(prev)) < ss_prob
                if swap.any():
                    prev = np.where(swap, _sample(_softmax_np(logits[-1].data), rng), prev)
        out, state = model.step(ctx, state, prev)
        logits.append(out)
        hs.append(state.lang.h)
    steps = batch.steps
    last_h = ad.stack(hs, axis=1)[np.arange(len(steps)), steps - 1]
    return TeacherForced(ad.stack(logits, axis=1), last_h)


# ---------------------------------------------------------------------------
# fusion and decoding

def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sample(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(p.shape[0])
    idx = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def fuse_distributions(p_edit, p_dc) -> np.ndarray:
    """Arithmetic mean of two probability vectors."""
    p_edit, p_dc = np.asarray(p_edit, dtype=np.float64), np.asarray(p_dc, dtype=np.float64)
    if p_edit.shape != p_dc.shape:
        raise ShapeError(f"fuse: shapes {p_edit.shape} and {p_dc.shape} differ")
    for p in (p_edit, p_dc):
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9) or (p < 0).any():
            raise ValueError("fuse: inputs must be probability vectors")
    return (p_edit + p_dc) / 2.0


def _fused_step(models, ctxs, states, prev, traces):
    new_states, logits = [], []
    for m, cx, st, tr in zip(models, ctxs, states, traces):
        lg, st = m.step(cx, st, prev, trace=tr)
        logits.append(lg)
        new_states.append(st)
    return logits, new_states


class Decoded(NamedTuple):
    tokens: list[list[int]]
    trace: list[dict]


def greedy_decode(models: Sequence, batch: Batch, max_len: int = 16, trace: bool = False) -> Decoded:
    """Argmax of the (mean-fused) output distributions until END or ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    B = len(batch)
    with ad.no_grad():
        ctxs = [m.prepare(batch) for m in models]
        states = [m.init_state(c) for m, c in zip(models, ctxs)]
        prev = np.full(B, START, dtype=np.int64)
        out = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        steps = []
        for _ in range(max_len):
            traces = [({} if trace else None) for _ in models]
            logits, states = _fused_step(models, ctxs, states, prev, traces)
            p = np.mean([_softmax_np(lg.data) for lg in logits], axis=0)
            tok = p.argmax(axis=-1)
            if trace:
                info = dict(traces[0])
                info["token"] = tok
                info["prob"] = p.max(axis=-1)
                steps.append(info)
            for b in np.flatnonzero(~done):
                if tok[b] == END:
                    done[b] = True
                else:
                    out[b].append(int(tok[b]))
            if done.all():
                break
            prev = tok
    return Decoded(out, steps)


class Sampled(NamedTuple):
    tokens: list[list[int]]
    logprob: Tensor        # (B,) summed log-probability of each sampled caption
    step_logprobs: list[Tensor]


def sample_decode(models: Sequence, batch: Batch, max_len: int, rng: np.random.Generator) -> Sampled:
    """Multinomial sampling from the fused distribution, keeping log-probabilities on the tape."""
    B = len(batch)
    ctxs = [m.prepare(batch) for m in models]
    states = [m.init_state(c) for m, c in zip(models, ctxs)]
    prev = np.full(B, START, dtype=np.int64)
    out = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    step_lps: list[Tensor] = []
    total = None
    for _ in range(max_len):
        logits, states = _fused_step(models, ctxs, states, prev, [None] * len(models))
        if len(models) == 1:
            logp = ad.log_softmax(logits[0])
            p = np.exp(logp.data)
        else:
            probs = [ad.softmax(lg) for lg in logits]
            fused = probs[0]
            for q in probs[1:]:
                fused = fused + q
            fused = fused * (1.0 / len(probs))
            p = fused.data
        tok = _sample(p, rng)
        if len(models) == 1:
            lp = ad.pick(logp, tok)
        else:
            lp = ad.log(ad.pick(fused, tok))
        lp = lp * ad.tensor(alive.astype(np.float64))
        step_lps.append(lp)
        total = lp if total is None else total + lp
        for b in np.flatnonzero(alive):
            if tok[b] == END:
                alive[b] = False
            else:
                out[b].append(int(tok[b]))
        if not alive.any():
            break
        prev = tok
    return Sampled(out, total, step_lps)


def alignment_lines(decoded: Decoded, existing: Sequence[str], itos: Sequence[str], row: int = 0) -> list[str]:
    """``step<TAB>emitted<TAB>argmax input word<TAB>alpha max<TAB>copy gate mean`` per step."""
    lines = []
    for t, info in enumerate(decoded.trace):
        tok = int(info["token"][row])
        word = itos[tok]
        alpha = info.get("alpha")
        if alpha is not None:
            j = int(np.argmax(alpha[row]))
            src = existing[j] if j < len(existing) else "<pad>"
            amax = float(alpha[row, j])
        else:
            src, amax = "-", float("nan")
        gate = info.get("copy_gate")
        gmean = float(np.mean(gate[row])) if gate is not None else float("nan")
        lines.append(f"{t}\t{word}\t{src}\t{amax:.4f}\t{gmean:.4f}")
        if tok == END:
            break
    return lines
