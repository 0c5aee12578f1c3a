"""Byte-pair-encoding subword vocabularies and word/subword bookkeeping.

Merges never cross word boundaries; every word falls back to characters, so
encoding is total. Ties between equally frequent pairs break on the
lexicographic order of the merged token (then of the pair itself), which
makes training deterministic.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, UNK, BOS, MASK = "<pad>", "<unk>", "<s>", "<mask>"
SPECIALS = (PAD, UNK, BOS, MASK)


class BpeError(ValueError):
    pass


@dataclass(frozen=True)
class SubwordVocab:
    merges: tuple[tuple[str, str], ...]
    alphabet: tuple[str, ...]
    scope: str  # language id, or "shared" for the multilingual vocabulary
    specials: tuple[str, ...] = SPECIALS
    token_to_id: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.token_to_id:
            mapping: dict[str, int] = {}
            for tok in self.specials:
                mapping[tok] = len(mapping)
            for ch in self.alphabet:
                mapping[ch] = len(mapping)
            for a, b in self.merges:
                tok = a + b
                if tok not in mapping:
                    mapping[tok] = len(mapping)
            object.__setattr__(self, "token_to_id", mapping)
        object.__setattr__(self, "_id_to_token",
                           {i: t for t, i in self.token_to_id.items()})
        object.__setattr__(self, "_ranks",
                           {pair: i for i, pair in enumerate(self.merges)})

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    def split_word(self, word: str) -> list[str]:
        """Apply merges to one word, earliest-learned merge first."""
        symbols = list(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best_rank, best_pos = None, -1
            for i in range(len(symbols) - 1):
                rank = ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pos = rank, i
            if best_rank is None:
                break
            merged = symbols[best_pos] + symbols[best_pos + 1]
            pair = (symbols[best_pos], symbols[best_pos + 1])
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return symbols

    def to_json(self) -> str:
        return json.dumps({
            "merges": [list(m) for m in self.merges],
            "alphabet": list(self.alphabet),
            "specials": list(self.specials),
            "scope": self.scope,
        }, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SubwordVocab":
        doc = json.loads(text)
        return cls(merges=tuple((a, b) for a, b in doc["merges"]),
                   alphabet=tuple(doc["alphabet"]),
                   scope=doc["scope"],
                   specials=tuple(doc["specials"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Tokenization:
    """Subword ids for one sentence plus the word/subword boundary maps."""
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]  # half-open subword span of each word
    bos: bool = False

    @property
    def first_subwords(self) -> tuple[int, ...]:
        return tuple(start for start, _ in self.spans)

    @property
    def n_words(self) -> int:
        return len(self.spans)

    def __len__(self) -> int:
        return len(self.ids)


def _word_sequences(corpus) -> Iterable[Sequence[str]]:
    for ex in corpus:
        yield ex.words


def train_bpe(corpus, target_size: int, scope: str,
              alphabet: Iterable[str] = ()) -> SubwordVocab:
    """Learn merges from word frequencies until the vocabulary (characters +
    merged tokens) reaches ``target_size`` or no adjacent pair repeats.

    ``alphabet`` seeds extra characters so the fallback stays total on text
    whose rare characters are missing from the training sample."""
    word_freq: Counter[str] = Counter()
    for words in _word_sequences(corpus):
        word_freq.update(words)
    if not word_freq:
        raise BpeError("train_bpe: empty corpus")

    alphabet = tuple(sorted({ch for w in word_freq for ch in w} | set(alphabet)))
    if target_size < len(alphabet):
        raise BpeError(f"train_bpe: target_size {target_size} below "
                       f"character inventory {len(alphabet)}")

    pieces = {w: tuple(w) for w in word_freq}
    merges: list[tuple[str, str]] = []
    while len(alphabet) + len(merges) < target_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for w, symbols in pieces.items():
            f = word_freq[w]
            for i in range(len(symbols) - 1):
                pair_freq[symbols[i], symbols[i + 1]] += f
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        if best_count < 2:
            break
        best = min((p for p, c in pair_freq.items() if c == best_count),
                   key=lambda p: (p[0] + p[1], p))
        merges.append(best)
        merged = best[0] + best[1]
        new_pieces = {}
        for w, symbols in pieces.items():
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            new_pieces[w] = tuple(out)
        pieces = new_pieces

    return SubwordVocab(merges=tuple(merges), alphabet=alphabet, scope=scope)


def encode(vocab: SubwordVocab, words: Sequence[str], bos: bool = False) -> Tokenization:
    """Segment ``words`` into subword ids with per-word span bookkeeping."""
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    if bos:
        ids.append(vocab.bos_id)
    for word in words:
        start = len(ids)
        for piece in vocab.split_word(word):
            ids.append(vocab.token_to_id.get(piece, vocab.unk_id))
        spans.append((start, len(ids)))
    return Tokenization(ids=tuple(ids), spans=tuple(spans), bos=bos)


def decode(vocab: SubwordVocab, tok: Tokenization) -> tuple[str, ...]:
    """Rebuild the word sequence by joining each word's subword pieces."""
    return tuple("".join(vocab.token(i) for i in tok.ids[lo:hi])
                 for lo, hi in tok.spans)


def align_first_subwords(teacher_tok: Tokenization,
                         student_tok: Tokenization) -> tuple[tuple[int, int], ...]:
    """Pair teacher and student first-subword positions, one pair per word."""
    if teacher_tok.n_words != student_tok.n_words:
        raise BpeError(f"align_first_subwords: word counts differ, "
                       f"{teacher_tok.n_words} vs {student_tok.n_words}")
    return tuple(zip(teacher_tok.first_subwords, student_tok.first_subwords))


def unknown_rate(vocab: SubwordVocab, corpus) -> float:
    total = unk = 0
    for words in _word_sequences(corpus):
        for word in words:
            for piece in vocab.split_word(word):
                total += 1
                unk += piece not in vocab.token_to_id
    return unk / total if total else 0.0
