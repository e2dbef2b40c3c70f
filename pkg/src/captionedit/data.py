"""Synthetic caption-editing corpus, vocabulary and batching.

Ground-truth captions follow ``a <adj> <noun> <rel> a <noun>``.  The
"existing" caption is a corrupted copy (noun repetition, content-word
substitution or a dropped word), standing in for the output of an upstream
captioner.  Pseudo visual features hold one fixed vector per content word of
the ground truth plus random distractors, so every correction is in
principle recoverable from the features.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

ADJECTIVES = ("red", "blue", "green", "small", "large", "old", "young", "white", "black", "wooden")
NOUNS = ("dog", "cat", "man", "woman", "table", "chair", "car", "bike", "tree", "horse",
         "bird", "boat", "plate", "sandwich", "glass", "bench", "train", "clock", "kite", "bowl")
RELATIONS = ("on", "near", "under", "behind", "beside", "with", "in", "above", "by", "at")
CONTENT = frozenset(ADJECTIVES) | frozenset(NOUNS)

CORRUPTIONS = ("repeat", "substitute", "drop", "clean")
_FEATURE_SALT = "captionedit-feature-v1"
_PUNCT = re.compile(r"[^\w\s<>]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class CorpusParams:
    p_repeat: float = 0.4
    p_substitute: float = 0.3
    p_drop: float = 0.2
    n_refs: int = 5

    def __post_init__(self):
        probs = (self.p_repeat, self.p_substitute, self.p_drop)
        if min(probs) < 0 or sum(probs) > 1 + 1e-12:
            raise ValueError(f"corruption probabilities must be >= 0 and sum to <= 1, got {probs}")
        if not 1 <= self.n_refs <= 5:
            raise ValueError("n_refs must be in 1..5")


@dataclass
class VisualFeatures:
    V: np.ndarray  # (k, d_v)

    @property
    def mean(self) -> np.ndarray:
        return self.V.mean(axis=0)

    @property
    def k(self) -> int:
        return self.V.shape[0]


@dataclass
class Example:
    image_id: int
    truth: list[str]
    existing: list[str]
    references: list[list[str]]
    feature_seed: int
    corruption: str = "clean"

    def features(self, d_v: int, k: int) -> VisualFeatures:
        return make_features(tuple(self.truth), self.feature_seed, d_v, k)

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "truth": " ".join(self.truth),
            "existing": " ".join(self.existing),
            "references": [" ".join(r) for r in self.references],
            "feature_seed": self.feature_seed,
            "corruption": self.corruption,
        })

    @classmethod
    def from_json(cls, line: str) -> "Example":
        d = json.loads(line)
        return cls(
            image_id=int(d["image_id"]),
            truth=tokenize(d["truth"]),
            existing=tokenize(d["existing"]),
            references=[tokenize(r) for r in d["references"]],
            feature_seed=int(d["feature_seed"]),
            corruption=d.get("corruption", "clean"),
        )


# ---------------------------------------------------------------------------
# features

@lru_cache(maxsize=4096)
def token_vector(token: str, d_v: int) -> np.ndarray:
    """Fixed pseudo-visual embedding of a content word (seeded by a hash of the word)."""
    digest = hashlib.sha256(f"{_FEATURE_SALT}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d_v)
    v.setflags(write=False)
    return v


def content_words(tokens: Iterable[str]) -> list[str]:
    return [t for t in tokens if t in CONTENT]


@lru_cache(maxsize=65536)
def make_features(truth: tuple[str, ...], feature_seed: int, d_v: int, k: int) -> VisualFeatures:
    words = content_words(truth)
    if k < len(words):
        raise ValueError(f"k={k} is smaller than the {len(words)} content words of {' '.join(truth)!r}")
    rng = np.random.default_rng(feature_seed)
    rows = [token_vector(w, d_v) for w in words]
    rows += list(rng.standard_normal((k - len(words), d_v)))
    V = np.stack(rows)[rng.permutation(k)]
    V.setflags(write=False)
    return VisualFeatures(V)


# ---------------------------------------------------------------------------
# generation

def _variants(adj, n1, rel, n2) -> list[list[str]]:
    return [
        ["a", adj, n1, rel, "a", n2],
        ["the", adj, n1, rel, "the", n2],
        ["a", n1, rel, "a", n2],
        ["a", adj, n1, "is", rel, "a", n2],
        ["the", n1, "is", rel, "a", n2],
    ]


def _corrupt(truth: list[str], kind: str, rng: np.random.Generator) -> list[str]:
    out = list(truth)
    if kind == "repeat":
        # later noun overwritten by the earlier one: "a sandwich on a sandwich"
        out[5] = out[2]
    elif kind == "substitute":
        slot = int(rng.choice([1, 2, 5]))
        if slot == 1:
            pool = [a for a in ADJECTIVES if a != out[1]]
        else:
            pool = [n for n in NOUNS if n not in (out[2], out[5])]
        out[slot] = str(rng.choice(pool))
    elif kind == "drop":
        del out[int(rng.choice([1, 2, 3, 5]))]
    return out


def generate_corpus(seed: int, size: int, params: CorpusParams | None = None,
                    first_id: int = 0) -> list[Example]:
    """Deterministic list of ``size`` examples; equal seeds give identical corpora."""
    if size < 1:
        raise ValueError("size must be >= 1")
    params = params or CorpusParams()
    rng = np.random.default_rng(seed)
    probs = np.array([params.p_repeat, params.p_substitute, params.p_drop, 0.0])
    probs[3] = max(0.0, 1.0 - probs[:3].sum())
    probs = probs / probs.sum()
    out = []
    for i in range(size):
        adj = str(rng.choice(ADJECTIVES))
        n1, n2 = (str(x) for x in rng.choice(NOUNS, size=2, replace=False))
        rel = str(rng.choice(RELATIONS))
        variants = _variants(adj, n1, rel, n2)
        truth = variants[0]
        kind = CORRUPTIONS[int(rng.choice(4, p=probs))]
        existing = _corrupt(truth, kind, rng)
        fseed = int(rng.integers(0, 2**31 - 1))
        out.append(Example(first_id + i, truth, existing, variants[: params.n_refs], fseed, kind))
    return out


def write_corpus(path: str | Path, examples: Sequence[Example]) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in examples))


def read_corpus(path: str | Path) -> list[Example]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return [Example.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def corpus_stats(examples: Sequence[Example]) -> dict:
    tokens = Counter(t for e in examples for t in e.truth + e.existing)
    kinds = Counter(e.corruption for e in examples)
    return {"tokens": dict(tokens.most_common()), "corruptions": {k: kinds.get(k, 0) for k in CORRUPTIONS}}


# ---------------------------------------------------------------------------
# vocabulary

class Vocab:
    def __init__(self, tokens: Sequence[str], min_count: int = 3):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_count = min_count

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def strip(self, ids: Iterable[int]) -> list[int]:
        """Ids up to (excluding) the first end token, without padding/start."""
        out = []
        for i in ids:
            i = int(i)
            if i == END:
                break
            if i not in (PAD, START):
                out.append(i)
        return out


def build_vocab(sentences: Iterable[Sequence[str]], min_count: int = 3) -> Vocab:
    counts = Counter(t for s in sentences for t in s)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept, min_count)


def vocab_sentences(examples: Sequence[Example]) -> Iterable[list[str]]:
    for e in examples:
        yield e.existing
        yield from e.references


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    existing: np.ndarray       # (B, n) ids, PAD-padded
    existing_len: np.ndarray   # (B,)
    truth: np.ndarray          # (B, m) ground-truth ids without framing
    truth_len: np.ndarray      # (B,)
    dec_in: np.ndarray         # (B, m+1) START + truth
    dec_out: np.ndarray        # (B, m+1) truth + END
    features: np.ndarray       # (B, k, d_v)
    examples: list = field(default_factory=list)

    def __len__(self):
        return self.existing.shape[0]

    @property
    def existing_mask(self) -> np.ndarray:
        return np.arange(self.existing.shape[1])[None, :] < self.existing_len[:, None]

    @property
    def truth_mask(self) -> np.ndarray:
        return np.arange(self.truth.shape[1])[None, :] < self.truth_len[:, None]

    @property
    def steps(self) -> np.ndarray:
        """Decoder steps per example (caption length + end token)."""
        return self.truth_len + 1


def _pad(rows: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = max(len(r) for r in rows) if width is None else width
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(examples: Sequence[Example], vocab: Vocab, d_v: int, k: int) -> Batch:
    examples = sorted(examples, key=lambda e: -len(e.existing))
    ex = [vocab.encode(e.existing) for e in examples]
    tr = [vocab.encode(e.truth) for e in examples]
    if any(len(r) == 0 for r in ex):
        raise ValueError("existing captions must be non-empty")
    return Batch(
        existing=_pad(ex),
        existing_len=np.array([len(r) for r in ex], dtype=np.int64),
        truth=_pad(tr),
        truth_len=np.array([len(r) for r in tr], dtype=np.int64),
        dec_in=_pad([[START] + r for r in tr]),
        dec_out=_pad([r + [END] for r in tr]),
        features=np.stack([e.features(d_v, k).V for e in examples]),
        examples=list(examples),
    )


def batches(examples: Sequence[Example], batch_size: int, vocab: Vocab, d_v: int, k: int,
            rng: np.random.Generator | None = None) -> list[Batch]:
    """Split into batches of ``batch_size`` (last may be smaller); optional shuffle by ``rng``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    return [make_batch([examples[i] for i in order[s: s + batch_size]], vocab, d_v, k)
            for s in range(0, len(examples), batch_size)]


def single_batch(existing: Sequence[str], features: np.ndarray, vocab: Vocab,
                 truth: Sequence[str] | None = None) -> Batch:
    """Batch of one caption with explicit features (for interactive editing)."""
    ex = vocab.encode(existing)
    tr = vocab.encode(truth) if truth is not None else [UNK]
    return Batch(
        existing=_pad([ex]), existing_len=np.array([len(ex)]),
        truth=_pad([tr]), truth_len=np.array([len(tr)]),
        dec_in=_pad([[START] + tr]), dec_out=_pad([tr + [END]]),
        features=np.asarray(features, dtype=np.float64)[None],
        examples=[],
    )
