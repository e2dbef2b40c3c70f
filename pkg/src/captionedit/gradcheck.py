"""Finite-difference verification of every primitive and model component."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import (MaskTape, additive_attention, context_gate, init_additive, init_context_gate,
                        scma_select, soft_attend, visual_attend)
from .cells import LstmState, copy_lstm_step, init_copy_lstm, init_lstm, lstm_step
from .data import END, START, Batch
from .models import DCNet, EditNet, ModelConfig, teacher_forced
from .objectives import hidden_mse_loss, xe_loss

THRESHOLD = 1e-4
MODEL_RESOLUTION = 1e-6


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    skipped: int
    worst: tuple[str, int] | None
    unresolved: int = 0

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.max_error < THRESHOLD

    def line(self) -> str:
        worst = f"{self.worst[0]}[{self.worst[1]}]" if self.worst else "-"
        return (f"{'ok  ' if self.ok else 'FAIL'} {self.name:<20} max_rel_err={self.max_error:.3e} "
                f"checked={self.checked} skipped={self.skipped} unresolved={self.unresolved} worst={worst}")


def _leaf(rng, shape, name, low=-1.0, high=1.0):
    return ad.parameter(rng.uniform(low, high, shape), name)


def _probe(rng, out_shape):
    """Random fixed weights so the scalar loss exercises every output element."""
    return ad.tensor(rng.normal(size=out_shape))


def _weighted(op: Callable[[], ad.Tensor], rng) -> Callable[[], ad.Tensor]:
    with ad.no_grad():
        r = _probe(rng, op().shape)
    return lambda: ad.sum(op() * r)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    """``(name, loss_fn, params)`` for each differentiable primitive."""
    a, b = _leaf(rng, (3, 4), "a"), _leaf(rng, (3, 4), "b")
    s = _leaf(rng, (), "s")
    pos = _leaf(rng, (3, 4), "pos", 0.5, 2.0)
    W, bias = _leaf(rng, (4, 5), "W"), _leaf(rng, (5,), "bias")
    v = _leaf(rng, (4,), "v")
    x3 = _leaf(rng, (2, 3, 4), "x3")
    emb = _leaf(rng, (6, 3), "emb")
    alpha = _leaf(rng, (2, 3), "alpha")
    ids = np.array([[0, 5, 2], [2, 2, 1]])
    mask = np.array([[True, True, False, True], [True, False, True, True], [True] * 4])
    picks = np.array([1, 0, 3])
    cases = [
        ("add", lambda: a + b, {"a": a, "b": b}),
        ("add_scalar", lambda: a + s, {"a": a, "s": s}),
        ("sub", lambda: a - b, {"a": a, "b": b}),
        ("mul", lambda: a * b, {"a": a, "b": b}),
        ("mul_scalar", lambda: s * a, {"a": a, "s": s}),
        ("neg", lambda: -a, {"a": a}),
        ("squared_difference", lambda: ad.squared_difference(a, b), {"a": a, "b": b}),
        ("matmul", lambda: ad.matmul(x3, W), {"x3": x3, "W": W}),
        ("matmul_vector", lambda: ad.matmul(a, v), {"a": a, "v": v}),
        ("linear", lambda: ad.linear(x3, W, bias), {"x3": x3, "W": W, "bias": bias}),
        ("concat", lambda: ad.concat([a, b, pos], axis=-1), {"a": a, "b": b, "pos": pos}),
        ("stack", lambda: ad.stack([a, b], axis=1), {"a": a, "b": b}),
        ("index", lambda: x3[np.array([1, 0, 1]), np.array([2, 2, 0])], {"x3": x3}),
        ("embedding", lambda: ad.embedding(emb, ids), {"emb": emb}),
        ("pick", lambda: ad.pick(a, picks), {"a": a}),
        ("expand", lambda: ad.expand(a, 1, 3), {"a": a}),
        ("weighted_sum", lambda: ad.weighted_sum(alpha, x3), {"alpha": alpha, "x3": x3}),
        ("tanh", lambda: ad.tanh(a), {"a": a}),
        ("sigmoid", lambda: ad.sigmoid(a * 4.0), {"a": a}),
        ("exp", lambda: ad.exp(a), {"a": a}),
        ("log", lambda: ad.log(pos), {"pos": pos}),
        ("softmax", lambda: ad.softmax(a), {"a": a}),
        ("softmax_masked", lambda: ad.softmax(a, mask=mask), {"a": a}),
        ("log_softmax", lambda: ad.log_softmax(a), {"a": a}),
        ("sum_axis", lambda: ad.sum(x3, axis=1), {"x3": x3}),
        ("mean", lambda: ad.mean(x3, axis=-1), {"x3": x3}),
    ]
    out = []
    for name, op, params in cases:
        out.append((name, _weighted(op, rng), params))
    out.append(("sum_all", lambda: ad.sum(a * a), {"a": a}))
    out.append(("mean_all", lambda: ad.mean(ad.tanh(x3)), {"x3": x3}))
    return out


def component_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    B, X, H, A, n, k, dv = 2, 5, 4, 3, 4, 3, 5
    cases = []

    w = init_lstm(rng, X, H, "l.")
    x = _leaf(rng, (B, X), "x")
    h0, c0 = _leaf(rng, (B, H), "h0"), _leaf(rng, (B, H), "c0")
    cases.append(("lstm_step", _weighted(lambda: ad.concat(list(lstm_step(x, LstmState(h0, c0), w, "l."))), rng),
                  {**w, "x": x, "h0": h0, "c0": c0}))

    wc = init_copy_lstm(rng, X, H, "cl.")
    cc = _leaf(rng, (B, H), "c_copied")
    cases.append(("copy_lstm_step",
                  _weighted(lambda: ad.concat(list(copy_lstm_step(x, LstmState(h0, c0), cc, wc, "cl."))), rng),
                  {**wc, "x": x, "h0": h0, "c0": c0, "c_copied": cc}))

    wa = init_additive(rng, H, H, A, "a.")
    q, keys = _leaf(rng, (B, H), "query"), _leaf(rng, (B, n, H), "keys")
    mask = np.array([[True] * n, [True, True, True, False]])
    cases.append(("additive_attention", _weighted(lambda: additive_attention(q, keys, wa, "a.", mask=mask), rng),
                  {**wa, "query": q, "keys": keys}))
    al = _leaf(rng, (B, n), "alpha")
    cases.append(("soft_attend", _weighted(lambda: soft_attend(ad.softmax(al), keys), rng),
                  {"alpha": al, "keys": keys}))

    mem = _leaf(rng, (B, n, H), "memories")
    tape = MaskTape()
    r = _probe(rng, (B, H))

    def scma_loss():
        with tape.session():
            return ad.sum(scma_select(additive_attention(q, keys, wa, "a.", mask=mask), mem) * r)
    cases.append(("scma_select", scma_loss, {**wa, "query": q, "keys": keys, "memories": mem}))

    wg = init_context_gate(rng, X, H, H, "g.")
    word, ctx = _leaf(rng, (B, X), "word"), _leaf(rng, (B, H), "context")
    cases.append(("context_gate", _weighted(lambda: context_gate(word, h0, ctx, wg, "g."), rng),
                  {**wg, "word": word, "h0": h0, "context": ctx}))

    wv = init_additive(rng, dv, H, A, "v.")
    feats = _leaf(rng, (B, k, dv), "features")
    cases.append(("visual_attend", _weighted(lambda: visual_attend(q, feats, wv, "v."), rng),
                  {**wv, "query": q, "features": feats}))
    return cases


def tiny_config(**flags) -> ModelConfig:
    return ModelConfig(vocab_size=12, embed_dim=6, hidden_dim=8, attn_dim=4, k=3, d_v=5,
                       dc_embed_dim=6, dc_enc_dim=4, dc_hidden_dim=8, dc_attn_dim=4, **flags)


def tiny_batch(rng: np.random.Generator, config: ModelConfig) -> Batch:
    existing = np.array([[4, 7, 9, 5, 6], [8, 4, 10, 0, 0]])
    truth = np.array([[4, 7, 11, 5], [8, 5, 10, 0]])
    truth_len = np.array([4, 3])
    dec_in = np.array([[START, 4, 7, 11, 5], [START, 8, 5, 10, 0]])
    dec_out = np.array([[4, 7, 11, 5, END], [8, 5, 10, END, 0]])
    feats = rng.normal(size=(2, config.k, config.d_v))
    return Batch(existing, np.array([5, 3]), truth, truth_len, dec_in, dec_out, feats)


def _spread(rng, params):
    """Redraw weights from U(-1, 1).

    At the default initialisation many gradients of the full loss are ~1e-8
    or smaller, below what central differences resolve in float64; wider
    weights give every path a measurable signal.
    """
    for p in params.values():
        p.data = rng.uniform(-1.0, 1.0, p.shape)


def model_cases(rng: np.random.Generator, max_coords: int = 16) -> list[tuple[str, Callable, dict, dict]]:
    """Full teacher-forced XE + MSE losses on tiny models; coordinates are subsampled."""
    cases = []
    variants = [("editnet_hard", dict(hard_scma=True)),
                ("editnet_soft", dict(hard_scma=False)),
                ("editnet_plain", dict(use_visual=False, use_context_gate=False))]
    for name, flags in variants:
        cfg = tiny_config(**flags)
        model = EditNet(cfg, rng)
        _spread(rng, model.params)
        dc = DCNet(cfg, rng)
        batch = tiny_batch(rng, cfg)
        with ad.no_grad():
            target = dc.encode(batch.truth, batch.truth_len).final.data
        tape = MaskTape()

        def loss(model=model, batch=batch, target=target, tape=tape):
            with tape.session():
                tf = teacher_forced(model, batch)
                mse = hidden_mse_loss(tf.last_h, target, model.params["mse.W_d"], model.params["mse.b_d"])
                return xe_loss(tf.logits, batch.dec_out) + mse
        cases.append((name, loss, model.params, _subsample(rng, model.params, max_coords)))

    cfg = tiny_config()
    dc = DCNet(cfg, rng)
    _spread(rng, dc.params)
    batch = tiny_batch(rng, cfg)
    target = rng.normal(size=(2, cfg.target_dim))

    def dc_loss():
        tf = teacher_forced(dc, batch)
        return xe_loss(tf.logits, batch.dec_out) + hidden_mse_loss(
            tf.last_h, target, dc.params["dc.mse.W_d"], dc.params["dc.mse.b_d"])
    cases.append(("dcnet", dc_loss, dc.params, _subsample(rng, dc.params, max_coords)))
    return cases


def _subsample(rng, params, max_coords):
    return {n: rng.choice(p.size, size=min(p.size, max_coords), replace=False)
            for n, p in params.items()}


def run(seed: int = 0, log: Callable[[str], None] | None = print, max_coords: int = 16,
        eps: float = 1e-5) -> tuple[bool, list[CheckResult], float]:
    """Run all checks; returns ``(all_ok, results, seconds)``."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = []
    jobs = [(n, f, p, None) for n, f, p in primitive_cases(rng) + component_cases(rng)]
    jobs += model_cases(rng, max_coords)
    for name, f, params, coords in jobs:
        # whole-model losses are ~10 in size: float64 rounding leaves central
        # differences ~1e-10 absolute accuracy, too coarse to score gradients below 1e-6
        res_floor = 0.0 if coords is None else MODEL_RESOLUTION
        rep = ad.gradient_report(f, params, eps=eps, coords=coords, resolution=res_floor)
        res = CheckResult(name, rep.max_error, rep.checked, rep.skipped, rep.worst, rep.unresolved)
        results.append(res)
        if log:
            log(res.line())
    elapsed = time.perf_counter() - start
    ok = all(r.ok for r in results)
    if log:
        worst = max(results, key=lambda r: r.max_error)
        log(f"{'PASS' if ok else 'FAIL'} {len(results)} checks, max_rel_err={worst.max_error:.3e} "
            f"({worst.name}), {elapsed:.1f}s")
    return ok, results, elapsed
