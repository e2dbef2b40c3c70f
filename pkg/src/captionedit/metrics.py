"""BLEU-1..4, ROUGE-L and CIDEr-D on token lists.

The formulas follow the public COCO caption evaluation code: corpus BLEU with
closest-reference brevity penalty, ROUGE-L with beta = 1.2 using the best
precision and recall over references, and CIDEr-D with clipped tf-idf
vectors, a Gaussian length penalty (sigma = 6) and a factor of 10.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

Tokens = Sequence[str]


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def all_ngrams(tokens: Tokens, max_n: int = 4) -> Counter:
    out = Counter()
    for n in range(1, max_n + 1):
        out.update(ngram_counts(tokens, n))
    return out


def _require_refs(references):
    if not references:
        raise ValueError("at least one reference is required")


# ---------------------------------------------------------------------------
# BLEU

def _bleu_stats(candidate: Tokens, references: Sequence[Tokens], max_n: int):
    _require_refs(references)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    match, total = [], []
    for n in range(1, max_n + 1):
        cand = ngram_counts(candidate, n)
        best = Counter()
        for ref in references:
            best |= ngram_counts(ref, n)
        match.append(sum(min(cnt, best[g]) for g, cnt in cand.items()))
        total.append(max(0, c - n + 1))
    return c, r, match, total


def _bleu_from_stats(c, r, match, total) -> list[float]:
    if c == 0:
        return [0.0] * len(match)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    scores, logs = [], 0.0
    for n, (m, t) in enumerate(zip(match, total), start=1):
        if m == 0 or t == 0:
            scores.extend([0.0] * (len(match) - n + 1))
            break
        logs += math.log(m / t)
        scores.append(bp * math.exp(logs / n))
    return scores


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4) -> list[float]:
    """Sentence BLEU-1..max_n (no smoothing)."""
    return _bleu_from_stats(*_bleu_stats(candidate, references, max_n))


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                max_n: int = 4) -> list[float]:
    """Corpus BLEU: clipped counts and lengths are summed before combining."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    c = r = 0
    match, total = [0] * max_n, [0] * max_n
    for cand, refs in zip(candidates, references):
        ci, ri, mi, ti = _bleu_stats(cand, refs, max_n)
        c, r = c + ci, r + ri
        match = [a + b for a, b in zip(match, mi)]
        total = [a + b for a, b in zip(total, ti)]
    return _bleu_from_stats(c, r, match, total)


# ---------------------------------------------------------------------------
# ROUGE-L

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    _require_refs(references)
    if not candidate:
        return 0.0
    prec, rec = [], []
    for ref in references:
        lcs = lcs_length(candidate, ref)
        prec.append(lcs / len(candidate))
        rec.append(lcs / len(ref) if ref else 0.0)
    p, r = max(prec), max(rec)
    if p == 0 or r == 0:
        return 0.0
    return ((1 + beta ** 2) * p * r) / (r + beta ** 2 * p)


# ---------------------------------------------------------------------------
# CIDEr-D

class IdfTable:
    """Document frequencies of n-grams over a reference corpus (one document per image)."""

    def __init__(self, references: Sequence[Sequence[Tokens]], max_n: int = 4):
        if not references:
            raise ValueError("cannot build an idf table from an empty reference corpus")
        self.max_n = max_n
        self.df: Counter = Counter()
        for refs in references:
            _require_refs(refs)
            grams = set()
            for ref in refs:
                grams.update(all_ngrams(ref, max_n))
            self.df.update(grams)
        self.size = len(references)
        self.log_size = math.log(float(self.size))

    def idf(self, gram: tuple) -> float:
        return self.log_size - math.log(max(1.0, self.df.get(gram, 0)))


def _tfidf(tokens: Tokens, table: IdfTable):
    vec = [dict() for _ in range(table.max_n)]
    norm = [0.0] * table.max_n
    for gram, tf in all_ngrams(tokens, table.max_n).items():
        n = len(gram) - 1
        w = float(tf) * table.idf(gram)
        vec[n][gram] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm], len(tokens)


def _cider_sim(cand, ref, sigma: float) -> np.ndarray:
    vc, nc, lc = cand
    vr, nr, lr = ref
    penalty = math.exp(-((lc - lr) ** 2) / (2 * sigma ** 2))
    val = np.zeros(len(vc))
    for n in range(len(vc)):
        s = 0.0
        for gram, w in vc[n].items():
            wr = vr[n].get(gram)
            if wr is not None:
                s += min(w, wr) * wr
        if nc[n] != 0 and nr[n] != 0:
            s /= nc[n] * nr[n]
        val[n] = s * penalty
    return val


def cider_d(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
            idf: IdfTable | None = None, sigma: float = 6.0, max_n: int = 4) -> tuple[float, np.ndarray]:
    """Mean and per-image CIDEr-D.  ``idf`` defaults to the given references."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    table = IdfTable(references, max_n) if idf is None else idf
    scores = np.zeros(len(candidates))
    for i, (cand, refs) in enumerate(zip(candidates, references)):
        _require_refs(refs)
        cv = _tfidf(cand, table)
        acc = np.zeros(table.max_n)
        for ref in refs:
            acc += _cider_sim(cv, _tfidf(ref, table), sigma)
        scores[i] = float(np.mean(acc)) / len(refs) * 10.0
    return (float(scores.mean()) if len(scores) else 0.0), scores


# ---------------------------------------------------------------------------
# reports

METRICS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D")


def evaluate(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> dict[str, float]:
    b = corpus_bleu(candidates, references)
    out = {f"BLEU-{i + 1}": v for i, v in enumerate(b)}
    out["ROUGE-L"] = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    out["CIDEr-D"] = cider_d(candidates, references)[0]
    return out


def format_report(scores: dict[str, float], prefix: str = "") -> str:
    return "".join(f"{prefix}{k}\t{scores[k]:.6f}\n" for k in METRICS if k in scores)


def write_json_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

