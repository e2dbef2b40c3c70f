"""Training phases (XE, MSE fine-tuning, SCST), evaluation and the editor bundle."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import NonFiniteError
from .config import RunConfig
from .data import Example, Vocab, batches, build_vocab, generate_corpus, vocab_sentences
from .metrics import IdfTable, cider_d, evaluate
from .models import DCNet, EditNet, ModelConfig, greedy_decode, sample_decode, teacher_forced
from .objectives import (AdamState, ScstAnnealer, adam_step, combined_loss, hidden_mse_loss,
                         schedule_at, scst_loss, token_count, xe_loss, zero_grads)

Log = Callable[[str], None]


class TrainingAborted(RuntimeError):
    pass


class Editor:
    """Vocabulary, EditNet, DCNet and their optimiser states."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.editnet = EditNet(config, rng)
        self.dcnet = DCNet(config, rng)
        self.opt = {"editnet": AdamState(), "dcnet": AdamState()}
        self.epochs = {"editnet": 0, "dcnet": 0}

    def model(self, which: str):
        return {"editnet": self.editnet, "dcnet": self.dcnet}[which]

    def decoders(self, fuse: bool | None = None) -> list:
        fuse = self.config.fuse_dcnet if fuse is None else fuse
        return [self.editnet, self.dcnet] if fuse else [self.editnet]

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: p.data for m in (self.editnet, self.dcnet) for n, p in m.params.items()}

    def mse_target(self, batch) -> np.ndarray:
        with ad.no_grad():
            return self.dcnet.encode(batch.truth, batch.truth_len).final.data

    def save(self, path: str | Path, run: RunConfig | None = None) -> None:
        meta = {"model": self.config.to_dict(), "vocab": self.vocab.itos[4:],
                "min_count": self.vocab.min_count, "epochs": self.epochs,
                "run": asdict(run) if run is not None else None}
        ckpt.save(path, meta, self.tensors(), self.opt, sum(self.epochs.values()))

    @classmethod
    def load(cls, path: str | Path) -> "Editor":
        meta, tensors, opt, _ = ckpt.load(path)
        config = ModelConfig.from_dict(meta["model"])
        vocab = Vocab(meta["vocab"], meta.get("min_count", 3))
        if len(vocab) != config.vocab_size:
            raise ckpt.CheckpointError("vocabulary size does not match model config")
        ed = cls(config, vocab)
        for m in (ed.editnet, ed.dcnet):
            for name, p in m.params.items():
                if name not in tensors:
                    raise ckpt.CheckpointError(f"checkpoint lacks tensor {name!r}")
                if tensors[name].shape != p.shape:
                    raise ckpt.CheckpointError(
                        f"tensor {name!r} has shape {tensors[name].shape}, model expects {p.shape}")
                p.data = tensors[name].copy()
        ed.opt.update(opt)
        ed.epochs = dict(meta.get("epochs", ed.epochs))
        return ed


SPLITS = ("train", "dev", "test")


def generate_splits(cfg: RunConfig) -> dict[str, list[Example]]:
    """Train/dev/test corpora from consecutive seeds with disjoint image ids."""
    sizes = (cfg.train_size, cfg.dev_size, cfg.test_size)
    params = cfg.corpus_params()
    return {name: generate_corpus(cfg.seed + i, size, params, first_id=i * 10**6)
            for i, (name, size) in enumerate(zip(SPLITS, sizes))}


# ---------------------------------------------------------------------------
# evaluation

def decode_split(models: Sequence, examples: Sequence[Example], vocab: Vocab, cfg: RunConfig,
                 batch_size: int = 100) -> list[list[str]]:
    """Greedy captions in the order of ``examples``."""
    by_id = {}
    for b in batches(examples, batch_size, vocab, cfg.d_v, cfg.k):
        for e, toks in zip(b.examples, greedy_decode(models, b, cfg.max_len).tokens):
            by_id[e.image_id] = vocab.decode(toks)
    return [by_id[e.image_id] for e in examples]


def evaluate_split(editor: Editor, examples: Sequence[Example], cfg: RunConfig,
                   models: Sequence | None = None) -> dict:
    """Metrics for the model's greedy edits and for the unedited input captions."""
    models = editor.decoders() if models is None else models
    captions = decode_split(models, examples, editor.vocab, cfg)
    refs = [e.references for e in examples]
    return {
        "model": evaluate(captions, refs),
        "baseline": evaluate([e.existing for e in examples], refs),
        "captions": [" ".join(c) for c in captions],
    }


def dev_cider(models: Sequence, examples: Sequence[Example], vocab: Vocab, cfg: RunConfig) -> float:
    captions = decode_split(models, examples, vocab, cfg)
    return cider_d(captions, [e.references for e in examples])[0]


def dev_mse(editor: Editor, which: str, examples: Sequence[Example], cfg: RunConfig) -> float:
    """Mean hidden-state MSE over ``examples`` (no parameter updates)."""
    model = editor.model(which)
    total, count = 0.0, 0
    with ad.no_grad():
        for b in batches(examples, 100, editor.vocab, cfg.d_v, cfg.k):
            tf = teacher_forced(model, b)
            loss = hidden_mse_loss(tf.last_h, editor.mse_target(b), *_projection(model))
            total += loss.item() * len(b)
            count += len(b)
    return total / count


def _projection(model):
    p = model.params
    return (p["mse.W_d"], p["mse.b_d"]) if "mse.W_d" in p else (p["dc.mse.W_d"], p["dc.mse.b_d"])


# ---------------------------------------------------------------------------
# training phases

def train_xe(editor: Editor, which: str, train: Sequence[Example], cfg: RunConfig, epochs: int,
             log: Log = print, mse: bool = False, dev: Sequence[Example] | None = None,
             checkpoint: Path | None = None, history: list | None = None) -> None:
    """Cross-entropy epochs (plus hidden-state MSE when ``mse``) for one sub-model.

    Logs ``epoch iter loss lr ss_prob`` per iteration.  ``history`` collects
    ``(loss, per_token_xe)`` per iteration when given.
    """
    model = editor.model(which)
    opt = editor.opt[which]
    sched = cfg.schedule()
    bs = cfg.batch_size if which == "editnet" else cfg.dc_batch_size
    rng = np.random.default_rng([cfg.seed, 1 if which == "editnet" else 2, editor.epochs[which]])
    phase = f"{which}-{'mse' if mse else 'xe'}"
    it = 0
    for n in range(epochs):
        epoch = editor.epochs[which]
        lr, ss = schedule_at(epoch, sched)
        opt.lr = lr
        log(f"# {phase} epoch {epoch}")
        for b in batches(train, bs, editor.vocab, cfg.d_v, cfg.k, rng):
            zero_grads(model.params)
            tf = teacher_forced(model, b, ss, rng)
            xe = xe_loss(tf.logits, b.dec_out)
            loss = xe
            if mse:
                loss = combined_loss(xe, hidden_mse_loss(tf.last_h, editor.mse_target(b), *_projection(model)))
            ad.backward(loss)
            adam_step(model.params, opt)
            it += 1
            if history is not None:
                history.append((loss.item(), xe.item() * len(b) / token_count(b.dec_out)))
            if it % cfg.log_every == 0:
                log(f"{epoch} {it} {loss.item():.6f} {lr:.6g} {ss:.3f}")
            if cfg.max_iters and it >= cfg.max_iters:
                break
        editor.epochs[which] += 1
        last = n == epochs - 1 or (cfg.max_iters and it >= cfg.max_iters)
        if dev is not None and cfg.dev_every and (last or editor.epochs[which] % cfg.dev_every == 0):
            models = [model]
            log(f"# dev {phase} epoch {epoch} CIDEr-D {dev_cider(models, dev, editor.vocab, cfg):.6f}"
                + (f" MSE {dev_mse(editor, which, dev, cfg):.6f}" if mse else ""))
        if checkpoint is not None:
            editor.save(checkpoint, cfg)
        if cfg.max_iters and it >= cfg.max_iters:
            break


def train_scst(editor: Editor, train: Sequence[Example], dev: Sequence[Example], cfg: RunConfig,
               epochs: int, log: Log = print, checkpoint: Path | None = None) -> list[float]:
    """Self-critical epochs on EditNet with CIDEr-D reward and greedy baseline.

    The learning rate starts at ``scst_lr`` and is multiplied by
    ``scst_anneal`` after any epoch whose dev CIDEr-D does not improve.
    Returns the dev CIDEr-D after each epoch.
    """
    model, opt = editor.editnet, editor.opt["editnet"]
    table = IdfTable([e.references for e in train])
    annealer = ScstAnnealer(cfg.schedule())
    annealer.best = dev_cider([model], dev, editor.vocab, cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    scores = []
    it = 0
    for ep in range(epochs):
        opt.lr = annealer.lr
        log(f"# editnet-scst epoch {ep}")
        for b in batches(train, cfg.batch_size, editor.vocab, cfg.d_v, cfg.k, rng):
            refs = [e.references for e in b.examples]
            greedy = greedy_decode([model], b, cfg.max_len).tokens
            zero_grads(model.params)
            sampled = sample_decode([model], b, cfg.max_len, rng)
            words = editor.vocab.decode
            r_g = cider_d([words(t) for t in greedy], refs, table)[1]
            r_s = cider_d([words(t) for t in sampled.tokens], refs, table)[1]
            loss = scst_loss(sampled.logprob, r_s, r_g)
            ad.backward(loss)
            adam_step(model.params, opt)
            it += 1
            if it % cfg.log_every == 0:
                log(f"{ep} {it} {loss.item():.6f} {opt.lr:.6g} 0.000")
            if cfg.max_iters and it >= cfg.max_iters:
                break
        score = dev_cider([model], dev, editor.vocab, cfg)
        scores.append(score)
        annealer.update(score)
        log(f"# dev editnet-scst epoch {ep} CIDEr-D {score:.6f} next_lr {annealer.lr:.6g}")
        if checkpoint is not None:
            editor.save(checkpoint, cfg)
    return scores


def build_editor(cfg: RunConfig, train: Sequence[Example]) -> Editor:
    vocab = build_vocab(vocab_sentences(train), cfg.min_count)
    return Editor(cfg.model_config(len(vocab)), vocab, cfg.seed)


def train_pipeline(cfg: RunConfig, train: Sequence[Example], dev: Sequence[Example],
                   out_dir: str | Path | None = None, log: Log = print,
                   after_phase: Callable[[str, Editor], None] | None = None) -> Editor:
    """DCNet XE -> DCNet MSE -> EditNet XE (-> EditNet MSE) -> EditNet SCST.

    ``after_phase(name, editor)`` is called when each phase finishes, with
    ``name`` one of ``"start"``, ``"dcnet-xe"``, ``"dcnet-mse"``,
    ``"editnet-xe"``, ``"editnet-mse"``, ``"editnet-scst"``.
    """
    def done(name):
        if after_phase is not None:
            after_phase(name, editor)

    ckpt_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt_path = Path(out_dir) / "model.ckpt"
    editor = build_editor(cfg, train)
    try:
        done("start")
        train_xe(editor, "dcnet", train, cfg, cfg.dc_xe_epochs, log, dev=dev, checkpoint=ckpt_path)
        done("dcnet-xe")
        train_xe(editor, "dcnet", train, cfg, cfg.dc_mse_epochs, log, mse=True, dev=dev, checkpoint=ckpt_path)
        done("dcnet-mse")
        train_xe(editor, "editnet", train, cfg, cfg.xe_epochs, log, dev=dev, checkpoint=ckpt_path)
        done("editnet-xe")
        train_xe(editor, "editnet", train, cfg, cfg.editnet_mse_epochs, log, mse=True, dev=dev,
                 checkpoint=ckpt_path)
        done("editnet-mse")
        if cfg.scst_epochs:
            train_scst(editor, train, dev, cfg, cfg.scst_epochs, log, checkpoint=ckpt_path)
        done("editnet-scst")
    except (NonFiniteError, FloatingPointError, ValueError) as e:
        if isinstance(e, ValueError) and not isinstance(e, NonFiniteError) and "non-finite" not in str(e):
            raise
        log(f"# aborting: {e}; last good checkpoint kept")
        raise TrainingAborted(str(e)) from e
    if ckpt_path is not None:
        editor.save(ckpt_path, cfg)
    return editor
