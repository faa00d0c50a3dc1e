"""Caption accuracy and diversity metrics.

All functions accept captions as strings or token lists; strings go through
:func:`seqcvae.corpus.tokenize`, the tokenizer shared with the novelty index.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import normalize, tokenize

Caption = Union[str, Sequence[str]]

BLEU_EPS = 1e-9


def _toks(c: Caption) -> List[str]:
    return tokenize(c) if isinstance(c, str) else list(c)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Caption, references: Sequence[Caption], max_n: int = 4) -> float:
    """Sentence BLEU with clipped precisions, epsilon floor and brevity penalty."""
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("bleu needs at least one reference")
    if not cand:
        raise ValueError("bleu needs a nonempty candidate")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        total = sum(counts.values())
        match = sum(min(k, max_ref[g]) for g, k in counts.items())
        p = match / total if match > 0 else BLEU_EPS / max(total, 1)
        log_p += math.log(p)
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


@dataclass
class NgramStats:
    """Document frequencies of 1..4-grams over reference sets."""

    df: List[Counter] = field(default_factory=lambda: [Counter() for _ in range(4)])
    n_docs: int = 0

    @classmethod
    def from_references(cls, reference_sets: Iterable[Sequence[Caption]], max_n: int = 4) -> "NgramStats":
        stats = cls([Counter() for _ in range(max_n)], 0)
        for refs in reference_sets:
            stats.n_docs += 1
            for n in range(1, max_n + 1):
                seen = set()
                for r in refs:
                    seen.update(ngrams(_toks(r), n))
                stats.df[n - 1].update(seen)
        return stats

    @property
    def max_n(self) -> int:
        return len(self.df)


def _tfidf(tokens: List[str], n: int, stats: NgramStats) -> Tuple[Dict[tuple, float], float]:
    log_n = math.log(stats.n_docs)
    vec = {g: k * (log_n - math.log(max(1.0, stats.df[n - 1].get(g, 0)))) for g, k in ngrams(tokens, n).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider(candidate: Caption, references: Sequence[Caption], stats: NgramStats) -> float:
    """CIDEr: mean over n and references of TF-IDF cosine similarity, times 10."""
    if stats.n_docs == 0:
        raise ValueError("cider needs nonempty corpus statistics")
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs or not cand:
        return 0.0
    score = 0.0
    for n in range(1, stats.max_n + 1):
        cv, cn = _tfidf(cand, n, stats)
        acc = 0.0
        for r in refs:
            rv, rn = _tfidf(r, n, stats)
            if cn == 0 or rn == 0:
                continue
            acc += sum(v * rv.get(g, 0.0) for g, v in cv.items()) / (cn * rn)
        score += acc / len(refs)
    return 10.0 * score / stats.max_n


def all_scores(candidate: Caption, references: Sequence[Caption], stats: NgramStats) -> Dict[str, Optional[float]]:
    """The report fields of one caption; unimplemented metrics are None."""
    out: Dict[str, Optional[float]] = {f"B{n}": bleu(candidate, references, n) for n in (1, 2, 3, 4)}
    out["C"] = cider(candidate, references, stats)
    out["R"] = out["M"] = out["S"] = None
    return out


def oracle_best1(captions: Sequence[Caption], references: Sequence[Caption], metric: str = "C", stats: Optional[NgramStats] = None):
    """Best caption of a sample set against ground truth; returns (caption, score, all_scores).

    ``stats`` should hold document frequencies over the whole evaluation
    corpus; without it every reference is treated as its own document.
    """
    if not captions:
        raise ValueError("oracle_best1 needs at least one caption")
    if stats is None:
        stats = NgramStats.from_references([[r] for r in references])
    best, best_score, best_all = None, -math.inf, None
    for c in captions:
        if not _toks(c):
            continue
        sc = all_scores(c, references, stats)
        s = sc[metric]
        if s > best_score:
            best, best_score, best_all = c, s, sc
    if best is None:
        return captions[0], 0.0, {k: (0.0 if k not in "RMS" else None) for k in ("B1", "B2", "B3", "B4", "C", "R", "M", "S")}
    return best, best_score, best_all


def distinct_fraction(captions: Sequence[Caption]) -> float:
    if not captions:
        raise ValueError("distinct_fraction needs at least one caption")
    return len({" ".join(_toks(c)) for c in captions}) / len(captions)


def novel_count(caption_sets: Iterable[Sequence[Caption]], index: Iterable[str]) -> int:
    """Captions (over all sets) whose normalized form is not in the training index."""
    idx = index if isinstance(index, (set, frozenset)) else set(index)
    return sum(1 for caps in caption_sets for c in caps if " ".join(_toks(c)) not in idx)


def mbleu4(captions: Sequence[Caption]) -> float:
    """Mean BLEU-4 of each caption against the others; lower is more diverse."""
    caps = [_toks(c) for c in captions]
    if len(caps) < 2:
        raise ValueError("mbleu4 needs at least two captions")
    return float(np.mean([bleu(c, caps[:i] + caps[i + 1 :], 4) if c else 0.0 for i, c in enumerate(caps)]))


def div_n(captions: Sequence[Caption], n: int) -> float:
    """Distinct n-grams in the set over the total number of words generated."""
    caps = [_toks(c) for c in captions]
    total = sum(len(c) for c in caps)
    if total == 0:
        return 0.0
    distinct = set()
    for c in caps:
        distinct.update(ngrams(c, n))
    return len(distinct) / total


def unique_ngrams_by_position(sample_sets: Iterable[Sequence[Caption]], n: int) -> Dict[int, int]:
    """Position t (1-based, last word of the n-gram) -> distinct n-grams ending there."""
    seen: Dict[int, set] = {}
    for caps in sample_sets:
        for c in caps:
            toks = _toks(c)
            for end in range(n, len(toks) + 1):
                seen.setdefault(end, set()).add(tuple(toks[end - n : end]))
    return {t: len(s) for t, s in sorted(seen.items())}


__all__ = [
    "ngrams",
    "bleu",
    "NgramStats",
    "cider",
    "all_scores",
    "oracle_best1",
    "distinct_fraction",
    "novel_count",
    "mbleu4",
    "div_n",
    "unique_ngrams_by_position",
    "normalize",
]
