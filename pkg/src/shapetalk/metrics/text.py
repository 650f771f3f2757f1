"""Closed-form caption metrics: BLEU, CIDEr, and exact tuple F1."""

import json
import math
from collections import Counter

from ..shapeworld.grammar import extract_tuples

CIDER_N = 4
CIDER_SIGMA = 6.0


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu(candidate: str, references, k: int = 4) -> float:
    """Sentence BLEU@k: geometric mean of clipped n-gram precisions times the
    brevity penalty (closest reference length), no smoothing."""
    if not 1 <= k <= 4:
        raise ValueError(f"BLEU order k={k} outside 1..4")
    if not references:
        raise ValueError("at least one reference required")
    cand = candidate.lower().split()
    refs = [r.lower().split() for r in references]
    if not cand:
        return 0.0
    log_precisions = 0.0
    for n in range(1, k + 1):
        cand_ngrams = _ngrams(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for ref in refs:
            for gram, cnt in _ngrams(ref, n).items():
                max_ref[gram] = max(max_ref[gram], cnt)
        clipped = sum(min(cnt, max_ref[gram]) for gram, cnt in cand_ngrams.items())
        if clipped == 0:
            return 0.0
        log_precisions += math.log(clipped / total)
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_precisions / k)


class CorpusStats:
    """Document frequencies of 1..4-grams over a reference corpus.

    One document = the reference set of one image.
    """

    def __init__(self, doc_freq: dict, n_docs: int):
        if n_docs < 1:
            raise ValueError("empty corpus")
        self.doc_freq = doc_freq
        self.n_docs = n_docs

    @classmethod
    def from_corpus(cls, reference_sets) -> "CorpusStats":
        df = Counter()
        n_docs = 0
        for refs in reference_sets:
            n_docs += 1
            seen = set()
            for ref in refs:
                words = ref.lower().split()
                for n in range(1, CIDER_N + 1):
                    seen.update(_ngrams(words, n))
            df.update(seen)
        return cls(dict(df), n_docs)

    def idf(self, gram) -> float:
        return math.log(self.n_docs / self.doc_freq.get(gram, 1.0))

    def to_json(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "doc_freq": {json.dumps(list(g)): c for g, c in self.doc_freq.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusStats":
        df = {tuple(json.loads(g)): c for g, c in d["doc_freq"].items()}
        return cls(df, d["n_docs"])


def _tfidf(words, n, stats: CorpusStats):
    vec = {}
    for gram, cnt in _ngrams(words, n).items():
        vec[gram] = cnt * stats.idf(gram)
    return vec


def _cosine(a: dict, b: dict) -> float:
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(candidate: str, references, stats: CorpusStats) -> float:
    """TF-IDF n-gram consensus score, averaged over n=1..4 and references,
    scaled by 10 with a gaussian length penalty (sigma=6)."""
    if not references:
        raise ValueError("at least one reference required")
    cand = candidate.lower().split()
    score = 0.0
    for n in range(1, CIDER_N + 1):
        cand_vec = _tfidf(cand, n, stats)
        per_ref = 0.0
        for ref in references:
            ref_words = ref.lower().split()
            penalty = math.exp(
                -((len(cand) - len(ref_words)) ** 2) / (2.0 * CIDER_SIGMA**2)
            )
            per_ref += penalty * _cosine(cand_vec, _tfidf(ref_words, n, stats))
        score += 10.0 * per_ref / len(references)
    return score / CIDER_N


def tuple_f1(candidate: str, scene_tuple_set) -> float:
    """F1 between the candidate's extracted tuples and the scene's tuples."""
    pred = extract_tuples(candidate)
    gold = set(scene_tuple_set)
    if not pred or not gold:
        return 0.0
    tp = len(pred & gold)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(gold)
    return 2.0 * precision * recall / (precision + recall)
