import json

import numpy as np
import pytest

from xlkd import synthlang as sl


@pytest.fixture(scope="module")
def config():
    return sl.default_config(seed=11)


@pytest.fixture(scope="module")
def small_benchmark(config):
    grammar, transforms = config
    sizes = sl.SplitSizes(train_annotated=60, train_unannotated=60,
                          validation=50, test=50)
    return sl.generate(grammar, transforms, sizes, seed=7)


def _rows(corpus):
    return [(h.id, h.words) for h in corpus]


def test_generation_is_deterministic(config):
    grammar, transforms = config
    sizes = sl.SplitSizes(60, 60, 50, 50)
    a = sl.generate(grammar, transforms, sizes, seed=7)
    b = sl.generate(grammar, transforms, sizes, seed=7)
    for lang in a.corpora:
        for split in sl.SPLITS:
            assert _rows(a.corpus(lang, split)) == _rows(b.corpus(lang, split))


def test_split_sizes_exact(small_benchmark):
    for lang in small_benchmark.corpora:
        assert len(small_benchmark.corpus(lang, "train_annotated")) == 60
        assert len(small_benchmark.corpus(lang, "train_unannotated")) == 60
        assert len(small_benchmark.corpus(lang, "validation")) == 50
        assert len(small_benchmark.corpus(lang, "test")) == 50


def test_balanced_split_halves_within_one():
    sizes = sl.SplitSizes.balanced(1001, 100, 200)
    assert abs(sizes.train_annotated - sizes.train_unannotated) <= 1
    assert sizes.train_annotated + sizes.train_unannotated == 1001
    even = sl.SplitSizes.balanced(1000, 100, 200)
    assert even.train_annotated == even.train_unannotated == 500


def test_minimum_split_size_enforced(config):
    grammar, transforms = config
    with pytest.raises(sl.GrammarError, match="at least 50"):
        sl.generate(grammar, transforms, sl.SplitSizes(49, 60, 50, 50), seed=1)


def test_target_corpora_not_parallel_to_source(small_benchmark):
    # target corpora are rendered from independently sampled sentences
    src = small_benchmark.corpus("eng", "train_unannotated")
    tgt = small_benchmark.corpus("zil", "train_unannotated")
    src_templates = [h._row.meta.template_id for h in src]
    tgt_templates = [h._row.meta.template_id for h in tgt]
    assert src_templates != tgt_templates


def test_roundtrip_translation_identity(small_benchmark):
    transforms = small_benchmark.transforms
    langs = transforms.langs
    for lang in langs:
        corpus = small_benchmark.corpus(lang, "test")
        for other in langs:
            if other == lang:
                continue
            back = sl.translate(sl.translate(corpus, transforms, other),
                                transforms, lang)
            for a, b in zip(corpus._rows, back._rows):
                assert (b.id, b.lang, b.words, b.intent, b.slots) == \
                    (a.id, a.lang, a.words, a.intent, a.slots)


def test_translation_example_from_contract():
    # one template, three single-word items, rotation by 2
    grammar = sl.Grammar(
        templates=(
            sl.Template(id="t/0", intent="x",
                        items=(("lit", "book"), ("lit", "a"), ("slot", "dest"))),
            sl.Template(id="t/1", intent="x",
                        items=(("lit", "a"), ("slot", "dest"))),
        ),
        slots={"dest": sl.SlotLexicon("dest", (("flight",), ("boat",), ("bus",), ("train",)))},
        function_words=("please",),
    )
    cipher = {"book": "puko", "a": "ek", "flight": "vlugo", "boat": "bo",
              "bus": "bu", "train": "tr", "please": "pl"}
    eng = sl.LanguageTransform(lang="src", cipher={w: w for w in cipher})
    tgt = sl.LanguageTransform(lang="tgt", cipher=cipher, reorder="rotate",
                               fixed_rotation=2, suffix="")
    transforms = sl.TransformSet([eng, tgt])
    transforms.validate(grammar)
    row = sl.Example(
        id="x-0", lang="src", words=("book", "a", "flight"), intent="x",
        slots=("O", "O", "B-dest"),
        meta=sl.ExampleMeta(template_id="t/0",
                            items=(sl.Item("lit"), sl.Item("lit"),
                                   sl.Item("slot", "dest", 1))))
    corpus = sl.Corpus([row], lang="src", split="test")
    out = sl.translate(corpus, transforms, "tgt")
    assert out._rows[0].words == ("vlugo", "puko", "ek")
    assert out._rows[0].slots == ("B-dest", "O", "O")
    back = sl.translate(out, transforms, "src")
    assert back._rows[0].words == row.words
    assert back._rows[0].slots == row.slots


def test_translate_unknown_word_is_named(config):
    grammar, transforms = config
    row = sl.Example(id="h-0", lang="eng", words=("book", "a", "zeppelin"))
    corpus = sl.Corpus([row], lang="eng", split="adhoc")
    with pytest.raises(sl.TranslateError, match="zeppelin"):
        sl.translate(corpus, transforms, "zil")


def test_bio_wellformed_for_generated_and_translated(small_benchmark):
    transforms = small_benchmark.transforms
    for lang in small_benchmark.corpora:
        corpus = small_benchmark.corpus(lang, "test")
        for row in corpus._rows:
            assert sl.bio_is_wellformed(row.slots), row
        for other in transforms.langs:
            if other == lang:
                continue
            for row in sl.translate(corpus, transforms, other)._rows:
                assert sl.bio_is_wellformed(row.slots), row


def test_label_gate_blocks_and_counts(small_benchmark):
    corpus = small_benchmark.corpus("eng", "train_unannotated")
    view = sl.unlabeled_view(corpus)
    handle = view[0]
    assert handle.words  # text reads succeed
    with pytest.raises(sl.LabelAccessError, match="label access"):
        _ = handle.intent
    with pytest.raises(sl.LabelAccessError):
        _ = handle.slots
    assert view.log.denied == 2
    assert view.log.granted == 0
    # the labeled root shares the counter and records granted reads
    _ = corpus[0].intent
    assert corpus.log.granted == 1


def test_unlabeled_view_shares_rows(small_benchmark):
    corpus = small_benchmark.corpus("zil", "test")
    view = corpus.unlabeled_view()
    assert len(view) == len(corpus)
    assert view[3].words == corpus[3].words
    assert view.labeled is False and corpus.labeled is True


def test_paraphrase_contract(small_benchmark):
    grammar = small_benchmark.grammar
    transforms = small_benchmark.transforms
    corpus = small_benchmark.corpus("qof", "train_unannotated")
    para1 = sl.paraphrase(corpus, grammar, transforms, seed=5)
    para2 = sl.paraphrase(corpus, grammar, transforms, seed=5)
    assert _rows(para1) == _rows(para2)  # deterministic
    assert len(para1) == len(corpus)  # size preserved

    def intent_counts(c):
        counts = {}
        for row in c._rows:
            counts[row.intent] = counts.get(row.intent, 0) + 1
        return counts

    assert intent_counts(para1) == intent_counts(corpus)
    changed = sum(a.words != b.words for a, b in zip(corpus._rows, para1._rows))
    assert changed > 0
    for row in para1._rows:
        assert sl.bio_is_wellformed(row.slots)


def test_paraphrase_without_synonyms_is_identity():
    grammar = sl.Grammar(
        templates=(
            sl.Template(id="a/0", intent="a", items=(("lit", "ping"), ("slot", "code"))),
            sl.Template(id="a/1", intent="a", items=(("lit", "check"), ("slot", "code"))),
        ),
        slots={"code": sl.SlotLexicon("code", (("k1",), ("k2",), ("k3",), ("k4",)),
                                      anchor=True)},
        function_words=(),
    )
    transforms = sl.TransformSet([sl.LanguageTransform(
        lang="src", cipher={w: w for w in grammar.vocabulary()})])
    bench_rng = np.random.default_rng(0)
    rows = [sl._render(sl._sample_canonical(grammar, bench_rng),
                       transforms["src"], f"src-x-{i}") for i in range(10)]
    corpus = sl.Corpus(rows, lang="src", split="x")
    out = sl.paraphrase(corpus, grammar, transforms, seed=3)
    for a, b in zip(corpus._rows, out._rows):
        assert a.words == b.words
        assert b.id == a.id + "~p"


def test_jsonl_roundtrip(tmp_path, small_benchmark):
    corpus = small_benchmark.corpus("vex", "test")
    path = tmp_path / "vex.test.jsonl"
    sl.write_jsonl(corpus, path)
    loaded = sl.read_jsonl(path, split="test")
    assert loaded.lang == "vex"
    assert loaded.labeled
    assert [r.words for r in loaded._rows] == [r.words for r in corpus._rows]
    assert [r.slots for r in loaded._rows] == [r.slots for r in corpus._rows]
    assert [r.meta for r in loaded._rows] == [r.meta for r in corpus._rows]

    view = corpus.unlabeled_view()
    upath = tmp_path / "vex.unlabeled.jsonl"
    sl.write_jsonl(view, upath)
    first = json.loads(upath.read_text().splitlines()[0])
    assert "intent" not in first and "slots" not in first


def test_config_roundtrip(tmp_path, config):
    grammar, transforms = config
    path = tmp_path / "benchmark.json"
    sl.save_config(grammar, transforms, path)
    g2, t2 = sl.load_config(path)
    assert g2 == grammar
    assert [t.lang for t in t2] == [t.lang for t in transforms]
    assert t2["zil"].cipher == transforms["zil"].cipher
    # reloaded transforms translate identically
    sizes = sl.SplitSizes(50, 50, 50, 50)
    a = sl.generate(grammar, transforms, sizes, seed=3)
    b = sl.generate(g2, t2, sizes, seed=3)
    assert _rows(a.corpus("vex", "test")) == _rows(b.corpus("vex", "test"))


def test_translated_corpus_keeps_alignment(small_benchmark):
    transforms = small_benchmark.transforms
    corpus = small_benchmark.corpus("eng", "test")
    out = sl.translate(corpus, transforms, "qof")
    for src_row, out_row in zip(corpus._rows, out._rows):
        alignment = out_row.meta.alignment
        assert alignment is not None
        assert sorted(alignment) == list(range(len(src_row.words)))
        assert out_row.id == src_row.id


def test_slot_words_move_with_labels_under_translation(small_benchmark):
    transforms = small_benchmark.transforms
    corpus = small_benchmark.corpus("eng", "test")
    out = sl.translate(corpus, transforms, "vex")
    for src_row, out_row in zip(corpus._rows, out._rows):
        for j, tag in enumerate(out_row.slots):
            src_tag = src_row.slots[out_row.meta.alignment[j]]
            assert tag.split("-")[-1] == src_tag.split("-")[-1]


def test_anchor_tokens_shared_across_languages(small_benchmark):
    transforms = small_benchmark.transforms
    zil = transforms["zil"]
    assert zil.cipher["kj23"] == "kj23"
    assert zil.cipher["7"] == "7"
    assert zil.cipher["boston"] != "boston"


def test_grammar_validation_errors():
    bad = sl.Grammar(
        templates=(sl.Template(id="a/0", intent="a", items=(("lit", "hi"),)),),
        slots={}, function_words=())
    with pytest.raises(sl.GrammarError, match="fewer than 2 templates"):
        bad.validate()
