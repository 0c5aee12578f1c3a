"""Synthetic multilingual intent/slot benchmark with an exact translation oracle.

Sentences are rendered from intent templates whose items are either literal
words or slot fillers. A language is a word-level cipher plus a deterministic
per-template item reorder and a morphological suffix on slot-filler words.
Because every step is bijective at the item level, translation between any
two registered languages is exact and invertible, slot spans stay contiguous,
and word alignments are known — a noise-free stand-in for a real MT system.

Gold labels are attached to every example but sit behind a visibility gate:
unlabeled corpus views raise (and count) any attempted label read, which lets
the transfer pipeline prove it never consumed a label.
"""
from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

SPLITS = ("train_annotated", "train_unannotated", "validation", "test")

PARAPHRASE_SWAP_PROB = 0.5
PARAPHRASE_INSERT_PROB = 0.3


class GrammarError(ValueError):
    pass


class TranslateError(ValueError):
    pass


class LabelAccessError(RuntimeError):
    """A gold label was requested through an unlabeled corpus view."""


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from the given parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# ---- grammar --------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    id: str
    intent: str
    items: tuple[tuple[str, str], ...]  # ("lit", word) or ("slot", slot_name)


@dataclass(frozen=True)
class SlotLexicon:
    name: str
    groups: tuple[tuple[str, ...], ...]  # synonym groups of space-joined phrases
    anchor: bool = False  # anchor fillers are shared verbatim across languages

    def phrases(self) -> tuple[str, ...]:
        return tuple(p for g in self.groups for p in g)

    def group_of(self, phrase: str) -> tuple[str, ...] | None:
        for g in self.groups:
            if phrase in g:
                return g
        return None

    def words(self) -> set[str]:
        return {w for g in self.groups for p in g for w in p.split()}


@dataclass(frozen=True)
class Grammar:
    templates: tuple[Template, ...]
    slots: Mapping[str, SlotLexicon]
    function_words: tuple[str, ...]

    @property
    def intents(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.templates:
            seen.setdefault(t.intent, None)
        return tuple(seen)

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(self.slots)

    def tag_set(self) -> tuple[str, ...]:
        tags = ["O"]
        for name in self.slot_names:
            tags += [f"B-{name}", f"I-{name}"]
        return tuple(tags)

    def templates_for(self, intent: str) -> tuple[Template, ...]:
        return tuple(t for t in self.templates if t.intent == intent)

    def vocabulary(self) -> tuple[str, ...]:
        words: set[str] = set(self.function_words)
        for t in self.templates:
            for kind, value in t.items:
                if kind == "lit":
                    words.add(value)
        for lex in self.slots.values():
            words |= lex.words()
        return tuple(sorted(words))

    def validate(self) -> None:
        for intent in self.intents:
            if len(self.templates_for(intent)) < 2:
                raise GrammarError(f"intent {intent!r} has fewer than 2 templates")
        for name, lex in self.slots.items():
            if len(lex.phrases()) < 4:
                raise GrammarError(f"slot {name!r} has fewer than 4 lexicon entries")
            if name != lex.name:
                raise GrammarError(f"slot key {name!r} does not match lexicon name {lex.name!r}")
        for t in self.templates:
            if not t.items:
                raise GrammarError(f"template {t.id!r} is empty")
            for kind, value in t.items:
                if kind == "slot" and value not in self.slots:
                    raise GrammarError(f"template {t.id!r} uses unknown slot {value!r}")
                if kind not in ("lit", "slot"):
                    raise GrammarError(f"template {t.id!r} has unknown item kind {kind!r}")


# ---- language transforms ---------------------------------------------------

@dataclass(frozen=True)
class LanguageTransform:
    """Bijective word cipher + deterministic item reorder + content-word suffix."""
    lang: str
    cipher: Mapping[str, str]
    reorder: str = "none"  # none | rotate | shuffle
    suffix: str = ""
    reorder_seed: int = 0
    fixed_rotation: int | None = None

    def __post_init__(self):
        inverse = {}
        for src, dst in self.cipher.items():
            if dst in inverse:
                raise GrammarError(f"{self.lang}: cipher is not a bijection "
                                   f"({inverse[dst]!r} and {src!r} both map to {dst!r})")
            inverse[dst] = src
        object.__setattr__(self, "_inverse", inverse)

    def cipher_word(self, word: str) -> str:
        try:
            return self.cipher[word]
        except KeyError:
            raise TranslateError(f"{self.lang}: word {word!r} not in vocabulary") from None

    def decipher_word(self, word: str) -> str:
        try:
            return self._inverse[word]
        except KeyError:
            raise TranslateError(f"{self.lang}: word {word!r} not in vocabulary") from None

    def item_permutation(self, template_id: str, m: int) -> tuple[int, ...]:
        """Output item j takes canonical item perm[j]; keyed by template and size."""
        if m <= 1 or self.reorder == "none":
            return tuple(range(m))
        if self.reorder == "rotate":
            k = self.fixed_rotation if self.fixed_rotation is not None \
                else stable_seed("rotate", self.lang, template_id, m) % m
            return tuple((j + k) % m for j in range(m))
        if self.reorder == "shuffle":
            rng = np.random.default_rng(
                stable_seed("shuffle", self.lang, self.reorder_seed, template_id, m))
            return tuple(int(v) for v in rng.permutation(m))
        raise GrammarError(f"{self.lang}: unknown reorder rule {self.reorder!r}")


class TransformSet:
    """Registered languages; the first one is the source language."""

    def __init__(self, transforms: Sequence[LanguageTransform]):
        if not transforms:
            raise GrammarError("need at least one language transform")
        self._by_lang = {t.lang: t for t in transforms}
        if len(self._by_lang) != len(transforms):
            raise GrammarError("duplicate language ids")
        self.source_lang = transforms[0].lang

    @property
    def langs(self) -> tuple[str, ...]:
        return tuple(self._by_lang)

    @property
    def target_langs(self) -> tuple[str, ...]:
        return tuple(l for l in self._by_lang if l != self.source_lang)

    def __getitem__(self, lang: str) -> LanguageTransform:
        try:
            return self._by_lang[lang]
        except KeyError:
            raise TranslateError(f"no transform registered for language {lang!r}") from None

    def __iter__(self):
        return iter(self._by_lang.values())

    def validate(self, grammar: Grammar) -> None:
        vocab = grammar.vocabulary()
        slot_words = {w for lex in grammar.slots.values() if not lex.anchor
                      for w in lex.words()}
        for t in self:
            missing = [w for w in vocab if w not in t.cipher]
            if missing:
                raise GrammarError(f"{t.lang}: cipher misses {len(missing)} words, "
                                   f"e.g. {missing[:3]}")
            # suffixing must be losslessly strippable for every slot word
            for w in sorted(slot_words):
                surface = t.cipher_word(w) if _suffix_exempt(w) else t.cipher_word(w) + t.suffix
                if _strip_suffix(surface, t) != w:
                    raise GrammarError(f"{t.lang}: suffix rule is ambiguous for {w!r}")


def _suffix_exempt(word: str) -> bool:
    # digit-bearing tokens (codes, clock hours) stay unsuffixed anchors
    return any(ch.isdigit() for ch in word)


def _strip_suffix(surface: str, transform: LanguageTransform) -> str:
    if transform.suffix and surface.endswith(transform.suffix):
        base = surface[:-len(transform.suffix)]
        if base in transform._inverse:
            return transform.decipher_word(base)
    return transform.decipher_word(surface)


# ---- examples and corpora ---------------------------------------------------

@dataclass(frozen=True)
class Item:
    kind: str  # "lit" | "slot"
    slot: str = ""
    n_words: int = 1
    anchor: bool = False


@dataclass(frozen=True)
class ExampleMeta:
    template_id: str
    items: tuple[Item, ...]  # canonical (source-order) item sequence
    alignment: tuple[int, ...] | None = None  # word position -> pre-translation position


@dataclass(frozen=True)
class Example:
    id: str
    lang: str
    words: tuple[str, ...]
    intent: str | None = None
    slots: tuple[str, ...] | None = None
    meta: ExampleMeta | None = None

    def __post_init__(self):
        if self.slots is not None and len(self.slots) != len(self.words):
            raise GrammarError(f"{self.id}: slot tags and words differ in length")


class LabelAccessLog:
    """Counts label reads; shared between a corpus and all of its views."""

    def __init__(self):
        self.granted = 0
        self.denied = 0
        self._lock = threading.Lock()

    def grant(self):
        with self._lock:
            self.granted += 1

    def deny(self):
        with self._lock:
            self.denied += 1


class ExampleHandle:
    """Read access to one example, with gold labels behind the corpus gate."""

    __slots__ = ("_row", "_corpus")

    def __init__(self, row: Example, corpus: "Corpus"):
        self._row = row
        self._corpus = corpus

    @property
    def id(self) -> str:
        return self._row.id

    @property
    def lang(self) -> str:
        return self._row.lang

    @property
    def words(self) -> tuple[str, ...]:
        return self._row.words

    @property
    def alignment(self) -> tuple[int, ...] | None:
        meta = self._row.meta
        return meta.alignment if meta else None

    @property
    def intent(self) -> str | None:
        self._corpus._check_label_read()
        return self._row.intent

    @property
    def slots(self) -> tuple[str, ...] | None:
        self._corpus._check_label_read()
        return self._row.slots


class Corpus:
    """Immutable example store; labels are readable only when ``labeled``."""

    def __init__(self, rows: Iterable[Example], lang: str, split: str = "",
                 labeled: bool = True, log: LabelAccessLog | None = None):
        self._rows = tuple(rows)
        self.lang = lang
        self.split = split
        self.labeled = labeled
        self.log = log if log is not None else LabelAccessLog()

    def _check_label_read(self) -> None:
        if not self.labeled:
            self.log.deny()
            raise LabelAccessError(
                f"label access in label-free pipeline ({self.lang}/{self.split})")
        self.log.grant()

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, i: int) -> ExampleHandle:
        return ExampleHandle(self._rows[i], self)

    def __iter__(self):
        return (ExampleHandle(r, self) for r in self._rows)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self._rows)

    def unlabeled_view(self) -> "Corpus":
        view = Corpus.__new__(Corpus)
        view._rows = self._rows
        view.lang = self.lang
        view.split = self.split
        view.labeled = False
        view.log = self.log
        return view


def unlabeled_view(corpus: Corpus) -> Corpus:
    return corpus.unlabeled_view()


# ---- canonical form / rendering ---------------------------------------------

@dataclass(frozen=True)
class Canonical:
    template_id: str
    intent: str
    items: tuple[Item, ...]
    words: tuple[tuple[str, ...], ...]  # per item, canonical (source) words


def _render(canonical: Canonical, transform: LanguageTransform, ex_id: str,
            alignment_from: tuple[int, ...] | None = None) -> Example:
    m = len(canonical.items)
    perm = transform.item_permutation(canonical.template_id, m)
    words: list[str] = []
    tags: list[str] = []
    canon_word_pos: list[int] = []  # canonical word index of each rendered word
    canon_starts = np.cumsum([0] + [it.n_words for it in canonical.items])
    for j in range(m):
        item = canonical.items[perm[j]]
        source_words = canonical.words[perm[j]]
        for k, w in enumerate(source_words):
            surface = transform.cipher_word(w)
            if item.kind == "slot" and not item.anchor and not _suffix_exempt(w):
                surface += transform.suffix
            words.append(surface)
            canon_word_pos.append(int(canon_starts[perm[j]]) + k)
            if item.kind == "lit":
                tags.append("O")
            else:
                tags.append(f"B-{item.slot}" if k == 0 else f"I-{item.slot}")
    alignment = None
    if alignment_from is not None:
        alignment = tuple(alignment_from[p] for p in canon_word_pos)
    return Example(id=ex_id, lang=transform.lang, words=tuple(words),
                   intent=canonical.intent, slots=tuple(tags),
                   meta=ExampleMeta(template_id=canonical.template_id,
                                    items=canonical.items, alignment=alignment))


def _decanonize(row: Example, transform: LanguageTransform) -> tuple[Canonical, tuple[int, ...]]:
    """Invert cipher, suffix and reorder. Returns the canonical sentence plus a
    map from canonical word index to the row's word position."""
    meta = row.meta
    if meta is None:  # hand-written input: treat each word as a literal item
        meta = ExampleMeta(template_id=f"freeform-{len(row.words)}",
                           items=tuple(Item(kind="lit") for _ in row.words))
    m = len(meta.items)
    perm = transform.item_permutation(meta.template_id, m)
    starts = np.cumsum([0] + [meta.items[p].n_words for p in perm])
    if int(starts[-1]) != len(row.words):
        raise TranslateError(f"{row.id}: item structure does not cover the sentence")
    words_by_item: list[tuple[str, ...] | None] = [None] * m
    canon_pos: list[int | None] = [None] * int(starts[-1])
    canon_starts = np.cumsum([0] + [it.n_words for it in meta.items])
    for j in range(m):
        item = meta.items[perm[j]]
        chunk = row.words[int(starts[j]):int(starts[j + 1])]
        if item.kind == "slot" and not item.anchor:
            sources = tuple(_strip_suffix(w, transform) for w in chunk)
        else:
            sources = tuple(transform.decipher_word(w) for w in chunk)
        words_by_item[perm[j]] = sources
        for k in range(item.n_words):
            canon_pos[int(canon_starts[perm[j]]) + k] = int(starts[j]) + k
    canonical = Canonical(template_id=meta.template_id, intent=row.intent or "",
                          items=meta.items, words=tuple(words_by_item))
    return canonical, tuple(canon_pos)


# ---- operations --------------------------------------------------------------

def translate(corpus: Corpus, transforms: TransformSet, to_lang: str) -> Corpus:
    """Apply the exact oracle: decode to canonical form, re-render in ``to_lang``.

    Ids are preserved (a translation is the same utterance), labels move with
    their words, and each example keeps a word alignment back to its input."""
    src_t = transforms[corpus.lang]
    dst_t = transforms[to_lang]
    out_rows = []
    for row in corpus._rows:
        canonical, canon_pos = _decanonize(row, src_t)
        rendered = _render(canonical, dst_t, row.id, alignment_from=canon_pos)
        if row.intent is None:
            rendered = replace(rendered, intent=None)
        if row.slots is None:
            rendered = replace(rendered, slots=None)
        out_rows.append(rendered)
    return Corpus(out_rows, lang=to_lang, split=corpus.split, labeled=corpus.labeled)


def paraphrase(corpus: Corpus, grammar: Grammar, transforms: TransformSet,
               seed: int) -> Corpus:
    """Rewrite each example by swapping slot fillers inside their synonym group
    (probability 0.5 per eligible filler) and occasionally inserting one
    function word at an item boundary. Intent semantics are preserved by
    construction; examples with no eligible synonyms pass through unchanged."""
    transform = transforms[corpus.lang]
    out_rows = []
    for row in corpus._rows:
        rng = np.random.default_rng(stable_seed("para", seed, row.id))
        canonical, _ = _decanonize(row, transform)
        eligible = []
        for idx, item in enumerate(canonical.items):
            if item.kind != "slot" or item.anchor:
                continue
            phrase = " ".join(canonical.words[idx])
            group = grammar.slots[item.slot].group_of(phrase)
            if group and len(group) > 1:
                eligible.append((idx, phrase, group))
        if not eligible:
            out_rows.append(replace(row, id=row.id + "~p"))
            continue
        items = list(canonical.items)
        words = list(canonical.words)
        for idx, phrase, group in eligible:
            if rng.random() < PARAPHRASE_SWAP_PROB:
                options = [p for p in group if p != phrase]
                chosen = options[int(rng.integers(len(options)))]
                new_words = tuple(chosen.split())
                words[idx] = new_words
                items[idx] = replace(items[idx], n_words=len(new_words))
        if grammar.function_words and rng.random() < PARAPHRASE_INSERT_PROB:
            pos = int(rng.integers(len(items) + 1))
            word = grammar.function_words[int(rng.integers(len(grammar.function_words)))]
            items.insert(pos, Item(kind="lit"))
            words.insert(pos, (word,))
        new_canonical = Canonical(template_id=canonical.template_id,
                                  intent=canonical.intent,
                                  items=tuple(items), words=tuple(words))
        rendered = _render(new_canonical, transform, row.id + "~p")
        out_rows.append(rendered)
    return Corpus(out_rows, lang=corpus.lang, split=corpus.split,
                  labeled=corpus.labeled)


def code_switch(corpus: Corpus, transforms: TransformSet, seed: int,
                matrix_lang: str | None = None) -> Corpus:
    """Mixed-language rendering for pretraining data: keep the matrix
    language's item order but render each item in a uniformly chosen
    registered language. Label-free (text only)."""
    matrix = transforms[matrix_lang or corpus.lang]
    langs = transforms.langs
    src_transform = transforms[corpus.lang]
    out_rows = []
    for row in corpus._rows:
        rng = np.random.default_rng(stable_seed("cs", seed, row.id, matrix.lang))
        canonical, _ = _decanonize(row, src_transform)
        m = len(canonical.items)
        perm = matrix.item_permutation(canonical.template_id, m)
        words: list[str] = []
        for j in range(m):
            item = canonical.items[perm[j]]
            t = transforms[langs[int(rng.integers(len(langs)))]]
            for k, w in enumerate(canonical.words[perm[j]]):
                surface = t.cipher_word(w)
                if item.kind == "slot" and not item.anchor and not _suffix_exempt(w):
                    surface += t.suffix
                words.append(surface)
        out_rows.append(Example(id=f"{row.id}~cs-{matrix.lang}", lang="mixed",
                                words=tuple(words)))
    return Corpus(out_rows, lang="mixed", split=corpus.split, labeled=False)


@dataclass(frozen=True)
class SplitSizes:
    train_annotated: int
    train_unannotated: int
    validation: int
    test: int

    @classmethod
    def balanced(cls, train_total: int, validation: int, test: int) -> "SplitSizes":
        annotated = (train_total + 1) // 2
        return cls(train_annotated=annotated,
                   train_unannotated=train_total - annotated,
                   validation=validation, test=test)

    def items(self):
        yield "train_annotated", self.train_annotated
        yield "train_unannotated", self.train_unannotated
        yield "validation", self.validation
        yield "test", self.test


@dataclass
class Benchmark:
    grammar: Grammar
    transforms: TransformSet
    corpora: dict[str, dict[str, Corpus]]
    seed: int

    @property
    def source_lang(self) -> str:
        return self.transforms.source_lang

    @property
    def target_langs(self) -> tuple[str, ...]:
        return self.transforms.target_langs

    def corpus(self, lang: str, split: str) -> Corpus:
        return self.corpora[lang][split]


def _sample_canonical(grammar: Grammar, rng: np.random.Generator) -> Canonical:
    intents = grammar.intents
    intent = intents[int(rng.integers(len(intents)))]
    templates = grammar.templates_for(intent)
    template = templates[int(rng.integers(len(templates)))]
    items: list[Item] = []
    words: list[tuple[str, ...]] = []
    for kind, value in template.items:
        if kind == "lit":
            items.append(Item(kind="lit"))
            words.append((value,))
        else:
            lex = grammar.slots[value]
            phrases = lex.phrases()
            phrase = phrases[int(rng.integers(len(phrases)))]
            pw = tuple(phrase.split())
            items.append(Item(kind="slot", slot=value, n_words=len(pw),
                              anchor=lex.anchor))
            words.append(pw)
    return Canonical(template_id=template.id, intent=intent,
                     items=tuple(items), words=tuple(words))


def generate(grammar: Grammar, languages: Sequence[LanguageTransform],
             sizes: SplitSizes, seed: int) -> Benchmark:
    """Sample per-language splits. Every language's corpus is rendered from an
    independently sampled batch of canonical sentences, so corpora are
    in-domain but not parallel across languages. All splits carry gold labels
    behind the corpus gate."""
    grammar.validate()
    transforms = languages if isinstance(languages, TransformSet) else TransformSet(languages)
    transforms.validate(grammar)
    for split, n in sizes.items():
        if n < 50:
            raise GrammarError(f"split {split!r} needs at least 50 examples, got {n}")
    corpora: dict[str, dict[str, Corpus]] = {}
    for transform in transforms:
        corpora[transform.lang] = {}
        for split, n in sizes.items():
            rng = np.random.default_rng(stable_seed("gen", seed, transform.lang, split))
            rows = []
            for i in range(n):
                canonical = _sample_canonical(grammar, rng)
                rows.append(_render(canonical, transform,
                                    ex_id=f"{transform.lang}-{split}-{i:05d}"))
            corpora[transform.lang][split] = Corpus(rows, lang=transform.lang,
                                                    split=split)
    return Benchmark(grammar=grammar, transforms=transforms, corpora=corpora,
                     seed=seed)


def surface_alphabet(grammar: Grammar, transform: LanguageTransform) -> tuple[str, ...]:
    """Characters of every surface form the language can produce."""
    chars = set(transform.suffix)
    for word in grammar.vocabulary():
        chars.update(transform.cipher_word(word))
    return tuple(sorted(chars))


def bio_is_wellformed(tags: Sequence[str]) -> bool:
    prev = "O"
    for tag in tags:
        if tag.startswith("I-"):
            if not (prev == f"B-{tag[2:]}" or prev == tag):
                return False
        prev = tag
    return True


# ---- serialization -----------------------------------------------------------

def _meta_to_doc(meta: ExampleMeta | None):
    if meta is None:
        return None
    return {
        "template_id": meta.template_id,
        "items": [[it.kind, it.slot, it.n_words, it.anchor] for it in meta.items],
        "alignment": list(meta.alignment) if meta.alignment is not None else None,
    }


def _meta_from_doc(doc) -> ExampleMeta | None:
    if doc is None:
        return None
    return ExampleMeta(
        template_id=doc["template_id"],
        items=tuple(Item(kind=k, slot=s, n_words=n, anchor=a)
                    for k, s, n, a in doc["items"]),
        alignment=tuple(doc["alignment"]) if doc.get("alignment") is not None else None,
    )


def write_jsonl(corpus: Corpus, path) -> None:
    """One example per line; labels are written only from labeled corpora."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in corpus._rows:
            doc = {"id": row.id, "lang": row.lang, "words": list(row.words)}
            if corpus.labeled and row.intent is not None:
                doc["intent"] = row.intent
            if corpus.labeled and row.slots is not None:
                doc["slots"] = list(row.slots)
            if row.meta is not None:
                doc["meta"] = _meta_to_doc(row.meta)
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path, split: str = "") -> Corpus:
    rows = []
    lang = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            lang = doc["lang"]
            rows.append(Example(
                id=doc["id"], lang=lang, words=tuple(doc["words"]),
                intent=doc.get("intent"),
                slots=tuple(doc["slots"]) if doc.get("slots") is not None else None,
                meta=_meta_from_doc(doc.get("meta"))))
    labeled = bool(rows) and all(r.intent is not None for r in rows)
    return Corpus(rows, lang=lang, split=split, labeled=labeled)


def config_to_doc(grammar: Grammar, transforms: TransformSet) -> dict:
    return {
        "grammar": {
            "templates": [{"id": t.id, "intent": t.intent,
                           "items": [list(it) for it in t.items]}
                          for t in grammar.templates],
            "slots": [{"name": lex.name, "anchor": lex.anchor,
                       "groups": [list(g) for g in lex.groups]}
                      for lex in grammar.slots.values()],
            "function_words": list(grammar.function_words),
        },
        "languages": [{"lang": t.lang, "cipher": dict(sorted(t.cipher.items())),
                       "reorder": t.reorder, "suffix": t.suffix,
                       "reorder_seed": t.reorder_seed,
                       "fixed_rotation": t.fixed_rotation}
                      for t in transforms],
    }


def config_from_doc(doc: dict) -> tuple[Grammar, TransformSet]:
    g = doc["grammar"]
    grammar = Grammar(
        templates=tuple(Template(id=t["id"], intent=t["intent"],
                                 items=tuple((k, v) for k, v in t["items"]))
                        for t in g["templates"]),
        slots={s["name"]: SlotLexicon(name=s["name"],
                                      groups=tuple(tuple(grp) for grp in s["groups"]),
                                      anchor=s["anchor"])
               for s in g["slots"]},
        function_words=tuple(g["function_words"]),
    )
    transforms = TransformSet([
        LanguageTransform(lang=t["lang"], cipher=t["cipher"], reorder=t["reorder"],
                          suffix=t["suffix"], reorder_seed=t.get("reorder_seed", 0),
                          fixed_rotation=t.get("fixed_rotation"))
        for t in doc["languages"]])
    return grammar, transforms


def save_config(grammar: Grammar, transforms: TransformSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_doc(grammar, transforms), fh, ensure_ascii=False,
                  sort_keys=True, indent=1)
        fh.write("\n")


def load_config(path) -> tuple[Grammar, TransformSet]:
    with open(path, encoding="utf-8") as fh:
        return config_from_doc(json.load(fh))


# ---- default benchmark configuration ------------------------------------------

_SYLLABLES = ("ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne",
              "po", "ra", "se", "ti", "vu", "wa", "xe", "yo", "zi", "ku")

LOANWORD_RATE = 4  # one slot word in this many keeps its source form

# light per-language sound shifts applied to cognate stems
_SOUND_SHIFTS = {
    "zil": {"c": "k", "y": "i"},
    "qof": {"k": "q", "w": "v", "y": "j"},
    "vex": {"b": "p", "d": "t", "g": "k"},
}
_ENDINGS = {
    "zil": ("o", "a", "el", "un"),
    "qof": ("im", "esh", "ur", "ai"),
    "vex": ("ak", "oz", "ette", "u"),
}


def _pseudo_cipher(lang: str, vocabulary: Sequence[str], seed: int,
                   loan_candidates: frozenset[str] = frozenset(),
                   opacity: float = 0.3) -> dict[str, str]:
    """Deterministic bijective cipher with realistic texture: digit-bearing
    tokens map to themselves, a hash-picked quarter of the slot vocabulary is
    borrowed unchanged (loanwords), most words become cognates (sound-shifted
    stem plus a language ending, the way related languages share Latin roots),
    and an ``opacity`` fraction becomes fully opaque pseudowords (the
    unrelated-language case)."""
    rng = np.random.default_rng(stable_seed("cipher", lang, seed))
    used = set(vocabulary)
    shifts = _SOUND_SHIFTS.get(lang, {})
    endings = _ENDINGS.get(lang, ("o", "a"))
    cipher: dict[str, str] = {}
    for word in sorted(vocabulary):
        if _suffix_exempt(word) or (word in loan_candidates
                                    and stable_seed("loan", word) % LOANWORD_RATE == 0):
            cipher[word] = word
            continue
        opaque = (stable_seed("opaque", lang, word) % 1000) < opacity * 1000
        candidate = None
        if not opaque:
            stem = "".join(shifts.get(ch, ch) for ch in word[:5])
            for k in range(len(endings)):
                ending = endings[(stable_seed("end", lang, word) + k) % len(endings)]
                attempt = stem + ending
                if attempt not in used:
                    candidate = attempt
                    break
        while candidate is None or candidate in used:
            n = 2 + int(rng.integers(2))
            candidate = "".join(_SYLLABLES[int(rng.integers(len(_SYLLABLES)))]
                                for _ in range(n))
        used.add(candidate)
        cipher[word] = candidate
    return cipher


def _t(template_id: str, intent: str, pattern: str) -> Template:
    """Build a template from a pattern where {name} marks a slot."""
    items = []
    for token in pattern.split():
        if token.startswith("{") and token.endswith("}"):
            items.append(("slot", token[1:-1]))
        else:
            items.append(("lit", token))
    return Template(id=template_id, intent=intent, items=tuple(items))


_CITIES = ("boston", "denver", "chicago", "seattle", "oakland", "atlanta",
           "memphis", "tucson", "omaha", "fresno", "laredo", "lubbock",
           "miami", "dallas", "portland", "newark", "tampa", "reno",
           "durham", "spokane", "akron", "boise", "augusta", "mobile",
           "provo", "yuma", "waco", "salem", "toledo", "flint",
           "saint paul", "long beach", "new york", "salt lake city",
           "el paso", "santa fe")


def default_grammar() -> Grammar:
    """Eight intents over a travel-assistant domain. Templates deliberately
    share carrier phrases across intents (minimal pairs like "send {thing}"
    vs "send a note") so intent identity hinges on fine-grained cues rather
    than disjoint keyword sets."""
    slots = {
        "from_place": SlotLexicon("from_place", tuple(
            (c,) for c in _CITIES[:18]) + (("saint paul", "st paul"),
                                           ("el paso",), ("santa fe",))),
        "to_place": SlotLexicon("to_place", tuple(
            (c,) for c in _CITIES[14:30]) + (("new york", "nyc"),
                                             ("long beach",),
                                             ("salt lake city",))),
        "when": SlotLexicon("when", (
            ("7 am", "seven"), ("9 pm", "nine"), ("11 am",), ("at 5",),
            ("noon", "midday"), ("tonight",), ("tomorrow morning", "tomorrow"),
            ("next friday", "friday"), ("early morning",), ("late evening",),
            ("this weekend",), ("at 8",), ("after lunch",), ("on monday",),
            ("in an hour",), ("around 2",), ("by 10",), ("at dawn",),
            ("next tuesday",), ("late night",),
        )),
        "person": SlotLexicon("person", (
            ("alex",), ("sam",), ("maria",), ("viktor",), ("rosa",), ("deng",),
            ("the manager", "my boss"), ("grandma", "my grandmother"),
            ("the team",), ("doctor kim",), ("my neighbor",), ("the driver",),
            ("my sister",), ("the vendor",), ("coach lee",), ("aunt rita",),
            ("my roommate",), ("officer roy",), ("the council",), ("the crew",),
        )),
        "thing": SlotLexicon("thing", (
            ("pizza",), ("sushi",), ("noodles",), ("dumplings",), ("lemonade",),
            ("coffee", "a coffee"), ("jazz", "jazz music"), ("rock music", "rock"),
            ("a podcast",), ("the news",), ("the forecast",), ("my schedule",),
            ("groceries",), ("flowers",), ("salsa music", "salsa"), ("tapas",),
            ("an audiobook",), ("the playlist",), ("iced tea",), ("a burrito",),
            ("soup",), ("candles",), ("the minutes",), ("a report",),
        )),
        "ref_code": SlotLexicon("ref_code", (
            ("kj23",), ("m7",), ("qx91",), ("t400",), ("zz8",), ("a112",),
            ("b55",), ("cd77",), ("e9",), ("fw31",), ("p60",), ("hh12",),
            ("v3",), ("ln88",), ("q21",), ("rd45",),
        ), anchor=True),
    }
    templates = (
        _t("book_trip/0", "book_trip", "book a trip from {from_place} to {to_place}"),
        _t("book_trip/1", "book_trip", "i need a ticket from {from_place} to {to_place} {when}"),
        _t("book_trip/2", "book_trip", "reserve a seat to {to_place} leaving {when}"),
        _t("book_trip/3", "book_trip", "can you get me a trip to {to_place}"),
        _t("book_trip/4", "book_trip", "set up travel from {from_place} {when}"),
        _t("book_trip/5", "book_trip", "i want to go from {from_place} to {to_place}"),
        _t("cancel_trip/0", "cancel_trip", "cancel my booking {ref_code}"),
        _t("cancel_trip/1", "cancel_trip", "drop the trip to {to_place}"),
        _t("cancel_trip/2", "cancel_trip", "cancel the ticket to {to_place} {when}"),
        _t("cancel_trip/3", "cancel_trip", "i want to cancel reservation {ref_code}"),
        _t("cancel_trip/4", "cancel_trip", "call off my travel to {to_place} for {person}"),
        _t("trip_status/0", "trip_status", "status of booking {ref_code}"),
        _t("trip_status/1", "trip_status", "is the trip {ref_code} on schedule"),
        _t("trip_status/2", "trip_status", "when does the trip from {from_place} arrive"),
        _t("trip_status/3", "trip_status", "check booking {ref_code} for {person}"),
        _t("trip_status/4", "trip_status", "is my ticket to {to_place} confirmed"),
        _t("order_food/0", "order_food", "order {thing} for {person}"),
        _t("order_food/1", "order_food", "get me {thing} {when}"),
        _t("order_food/2", "order_food", "i want {thing} delivered to {person}"),
        _t("order_food/3", "order_food", "can you order {thing} from {from_place}"),
        _t("order_food/4", "order_food", "i need {thing} for {person} {when}"),
        _t("order_food/5", "order_food", "send {thing} to {person}"),
        _t("play_media/0", "play_media", "play {thing}"),
        _t("play_media/1", "play_media", "put on {thing} for {person}"),
        _t("play_media/2", "play_media", "start {thing} {when}"),
        _t("play_media/3", "play_media", "i want to hear {thing}"),
        _t("play_media/4", "play_media", "play {thing} for {person} {when}"),
        _t("set_reminder/0", "set_reminder", "remind {person} about {thing} {when}"),
        _t("set_reminder/1", "set_reminder", "set a reminder for {when}"),
        _t("set_reminder/2", "set_reminder", "wake me up {when}"),
        _t("set_reminder/3", "set_reminder", "i need a reminder about {thing}"),
        _t("set_reminder/4", "set_reminder", "remind me to check booking {ref_code} {when}"),
        _t("send_note/0", "send_note", "send a note to {person}"),
        _t("send_note/1", "send_note", "tell {person} about {thing}"),
        _t("send_note/2", "send_note", "message {person} that the trip is {when}"),
        _t("send_note/3", "send_note", "can you text {person} {when}"),
        _t("send_note/4", "send_note", "i want to write to {person} about {thing}"),
        _t("find_place/0", "find_place", "find a cafe near {to_place}"),
        _t("find_place/1", "find_place", "where is {from_place}"),
        _t("find_place/2", "find_place", "show places around {to_place} open {when}"),
        _t("find_place/3", "find_place", "show me the way to {to_place}"),
        _t("find_place/4", "find_place", "is there a spot near {from_place} for {person}"),
    )
    return Grammar(templates=templates, slots=slots,
                   function_words=("please", "now", "today", "kindly"))


_TARGET_STYLE = {
    # opacity grows with "language distance", mirroring how transfer degrades
    # from cognate-rich to unrelated languages
    "zil": {"reorder": "rotate", "suffix": "eth", "reorder_seed": 0, "opacity": 0.10},
    "qof": {"reorder": "shuffle", "suffix": "ix", "reorder_seed": 1, "opacity": 0.25},
    "vex": {"reorder": "shuffle", "suffix": "ua", "reorder_seed": 2, "opacity": 0.45},
}


def default_transforms(grammar: Grammar, seed: int = 11,
                       reorder: bool = True) -> TransformSet:
    vocab = grammar.vocabulary()
    identity = {w: w for w in vocab}
    loan_candidates = frozenset(
        w for lex in grammar.slots.values() if not lex.anchor for w in lex.words())
    transforms = [LanguageTransform(lang="eng", cipher=identity)]
    for lang, style in _TARGET_STYLE.items():
        transforms.append(LanguageTransform(
            lang=lang,
            cipher=_pseudo_cipher(lang, vocab, seed, loan_candidates,
                                  opacity=style["opacity"]),
            reorder=style["reorder"] if reorder else "none",
            suffix=style["suffix"],
            reorder_seed=style["reorder_seed"]))
    return TransformSet(transforms)


def default_config(seed: int = 11, reorder: bool = True) -> tuple[Grammar, TransformSet]:
    grammar = default_grammar()
    return grammar, default_transforms(grammar, seed=seed, reorder=reorder)
