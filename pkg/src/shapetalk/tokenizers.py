"""Two deliberately mismatched tokenizers plus the vocabulary bridge.

The diffuser's text encoder consumes word-level tokens; the captioner uses a
learned subword vocabulary (greedy pair merges, ``##`` continuation pieces).
A hard one-to-one transform maps every subword id to a word-level id so the
captioner's token distributions can condition the diffuser. The transform is
linear, so gradients pass through it untouched.
"""

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[BOS]", "[EOS]", "[UNK]")

DEFAULT_MIN_LEN = 3
DEFAULT_MAX_LEN = 16


@dataclass
class Vocabulary:
    tokens: list
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:4]) != list(RESERVED):
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)


def _pad_and_wrap(ids: list, max_len: int) -> list:
    ids = ids[: max_len - 2]
    out = [BOS] + ids + [EOS]
    out += [PAD] * (max_len - len(out))
    return out


class WordTokenizer:
    """Whitespace word-level tokenizer over a fixed training corpus."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    @classmethod
    def train(cls, corpus) -> "WordTokenizer":
        words = sorted({w for text in corpus for w in text.lower().split()})
        return cls(Vocabulary(list(RESERVED) + words))

    def encode(self, text: str, min_len: int = DEFAULT_MIN_LEN,
               max_len: int = DEFAULT_MAX_LEN) -> list:
        ids = [self.vocab.index.get(w, UNK) for w in text.lower().split()]
        return _pad_and_wrap(ids, max_len)

    def decode(self, ids) -> str:
        return " ".join(
            self.vocab.tokens[i] for i in ids
            if i not in (PAD, BOS, EOS) and 0 <= i < len(self.vocab)
        )


class SubwordTokenizer:
    """Greedy-merge subword tokenizer with longest-match segmentation."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._max_piece = max(len(_content(t)) for t in vocab.tokens)

    @classmethod
    def train(cls, corpus, vocab_size: int) -> "SubwordTokenizer":
        word_freq = Counter(w for text in corpus for w in text.lower().split())
        alphabet = set()
        for word in word_freq:
            alphabet.add(word[0])
            alphabet.update("##" + ch for ch in word[1:])
        units = list(RESERVED) + sorted(alphabet)
        if vocab_size < len(units):
            raise ValueError(
                f"vocab_size {vocab_size} below alphabet+reserved size {len(units)}"
            )
        splits = {w: tuple([w[0]] + ["##" + ch for ch in w[1:]]) for w in word_freq}
        vocab_set = set(units)
        while len(units) < vocab_size:
            pairs = Counter()
            for word, pieces in splits.items():
                freq = word_freq[word]
                for a, b in zip(pieces, pieces[1:]):
                    pairs[(a, b)] += freq
            if not pairs:
                break
            best_count = max(pairs.values())
            if best_count < 2:
                break
            a, b = min(p for p, c in pairs.items() if c == best_count)
            merged = a + _content(b)
            if merged in vocab_set:
                # same surface string reachable through two merge paths; fuse
                # the pieces without growing the vocabulary
                pass
            else:
                units.append(merged)
                vocab_set.add(merged)
            splits = {w: _apply_merge(p, a, b, merged) for w, p in splits.items()}
        return cls(Vocabulary(units))

    def _segment_word(self, word: str) -> list:
        ids = []
        pos = 0
        while pos < len(word):
            prefix = "" if pos == 0 else "##"
            match = None
            limit = min(len(word), pos + self._max_piece)
            for end in range(limit, pos, -1):
                piece = prefix + word[pos:end]
                if piece in self.vocab.index:
                    match = (self.vocab.index[piece], end)
                    break
            if match is None:
                ids.append(UNK)
                pos += 1
            else:
                ids.append(match[0])
                pos = match[1]
        return ids

    def encode(self, text: str, min_len: int = DEFAULT_MIN_LEN,
               max_len: int = DEFAULT_MAX_LEN) -> list:
        ids = []
        for word in text.lower().split():
            ids.extend(self._segment_word(word))
        return _pad_and_wrap(ids, max_len)

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD, BOS, EOS) or not 0 <= i < len(self.vocab):
                continue
            tok = self.vocab.tokens[i]
            if tok.startswith("##") and words:
                words[-1] += tok[2:]
            else:
                words.append(tok)
        return " ".join(words)


def _content(token: str) -> str:
    return token[2:] if token.startswith("##") else token


def _apply_merge(pieces, a, b, merged):
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == a and pieces[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def _longest_common_substring(a: str, b: str) -> int:
    best = 0
    for i in range(len(a)):
        for j in range(i + best + 1, len(a) + 1):
            if a[i:j] in b:
                best = j - i
            else:
                break
    return best


@dataclass
class TransformMatrix:
    """One target word-level id per source subword id (0/1 row-stochastic)."""

    mapping: np.ndarray
    target_size: int

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if self.mapping.min() < 0 or self.mapping.max() >= self.target_size:
            raise ValueError("mapping targets outside the target vocabulary")


def build_transform(tok_s: SubwordTokenizer, tok_w: WordTokenizer) -> TransformMatrix:
    """Map each subword token to its closest word-level token.

    Identical content strings map directly; otherwise the target sharing the
    longest common substring of length >= 2 wins (ties: lexicographically
    smallest target); otherwise [UNK].
    """
    targets = tok_w.vocab.tokens[4:]
    mapping = np.empty(len(tok_s.vocab), dtype=np.int64)
    mapping[:4] = np.arange(4)
    for sid in range(4, len(tok_s.vocab)):
        content = _content(tok_s.vocab.tokens[sid])
        if content in tok_w.vocab.index:
            mapping[sid] = tok_w.vocab.index[content]
            continue
        best_len, best_target = 0, None
        for t in sorted(targets):
            overlap = _longest_common_substring(content, t)
            if overlap > best_len:
                best_len, best_target = overlap, t
        if best_len >= 2:
            mapping[sid] = tok_w.vocab.index[best_target]
        else:
            mapping[sid] = UNK
    return TransformMatrix(mapping, len(tok_w.vocab))


def apply_transform(transform: TransformMatrix, dists):
    """Re-express row-stochastic token distributions in the target vocabulary.

    Accepts a torch tensor (gradients flow through) or a numpy array, shaped
    (..., L, V_source); returns the same type shaped (..., L, V_target).
    """
    v_source = transform.mapping.shape[0]
    v_target = transform.target_size
    if dists.shape[-1] != v_source:
        raise ValueError(
            f"distribution width {dists.shape[-1]} != source vocab {v_source}"
        )
    if isinstance(dists, torch.Tensor):
        idx = torch.from_numpy(transform.mapping)
        out = dists.new_zeros(dists.shape[:-1] + (v_target,))
        return out.index_add(-1, idx, dists)
    out = np.zeros(dists.shape[:-1] + (v_target,), dtype=dists.dtype)
    np.add.at(out, (..., transform.mapping), dists)
    return out


def _content_ids(ids) -> list:
    return [i for i in ids if i not in (PAD, BOS, EOS)]


def overlap_ratio(corpus, tok_s: SubwordTokenizer, tok_w: WordTokenizer,
                  transform: TransformMatrix, max_len: int = 64) -> float:
    """Fraction of captions whose transformed subword token multiset equals
    their word-level token multiset."""
    if not corpus:
        return 0.0
    hits = 0
    for text in corpus:
        s_ids = _content_ids(tok_s.encode(text, max_len=max_len))
        w_ids = _content_ids(tok_w.encode(text, max_len=max_len))
        mapped = [int(transform.mapping[i]) for i in s_ids]
        hits += Counter(mapped) == Counter(w_ids)
    return hits / len(corpus)
