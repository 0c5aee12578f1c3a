import math

import numpy as np
import pytest

from xlkd import bpe, distill as ds, models, numeric as nm, synthlang as sl, train as tr
from xlkd.models import PredictionSet
from xlkd.numeric import Tensor

INTENTS = ("a", "b", "c", "d")
TAGS = ("O", "B-x", "I-x")


def test_kl_identity_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        assert ds.kl_divergence(p, p) == pytest.approx(0.0, abs=1e-9)


def test_kl_hand_value():
    # 0.5*ln(0.5/0.25) + 0.5*ln(0.5/0.75) = 0.143841...
    value = ds.kl_divergence([0.5, 0.5], [0.25, 0.75])
    assert value == pytest.approx(0.1438410362258904, abs=1e-6)


def test_kl_zero_teacher_term_drops():
    value = ds.kl_divergence([1.0, 0.0], [0.5, 0.5])
    assert value == pytest.approx(math.log(2.0), abs=1e-6)


def test_kl_length_mismatch():
    with pytest.raises(ds.DistillError, match="length"):
        ds.kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


def test_kl_rejects_non_distribution():
    with pytest.raises(ds.DistillError, match="distribution"):
        ds.kl_divergence([0.7, 0.7], [0.5, 0.5])


def test_kl_gibbs_property_on_random_pairs():
    """Non-negativity and identity-of-indiscernibles over 10,000 pairs."""
    rng = np.random.default_rng(123)
    for i in range(10_000):
        k = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        value = ds.kl_divergence(p, q)
        assert value >= 0.0
        if np.abs(p - q).max() > 1e-6:
            assert value > 0.0
        assert ds.kl_divergence(p, p) <= 1e-9


def _sent_preds(ids, rows):
    return PredictionSet(task="sentence", ids=tuple(ids), labels=("x", "y"),
                         probs=[np.asarray(r) for r in rows])


def test_kd_loss_sentence_mean():
    teacher = _sent_preds(["a", "b"], [[0.5, 0.5], [0.3, 0.7]])
    student = _sent_preds(["a", "b"], [[0.25, 0.75], [0.3, 0.7]])
    value = ds.kd_loss(teacher, student)
    assert value == pytest.approx(0.5 * 0.1438410362258904, abs=1e-6)


def test_kd_loss_identical_outputs_zero():
    teacher = _sent_preds(["a"], [[0.2, 0.8]])
    assert ds.kd_loss(teacher, teacher) == pytest.approx(0.0, abs=1e-9)


def test_kd_loss_word_mean_over_words():
    rng = np.random.default_rng(1)
    t_rows = rng.dirichlet(np.ones(3), size=3)
    s_rows = rng.dirichlet(np.ones(3), size=3)
    teacher = PredictionSet("word", ("e",), ("a", "b", "c"), [t_rows])
    student = PredictionSet("word", ("e",), ("a", "b", "c"), [s_rows])
    alignment = [tuple((i, i) for i in range(3))]
    expected = np.mean([ds.kl_divergence(t, s) for t, s in zip(t_rows, s_rows)])
    assert ds.kd_loss(teacher, student, alignment) == pytest.approx(expected)


def test_kd_loss_word_requires_alignment():
    teacher = PredictionSet("word", ("e",), ("a", "b"), [np.array([[0.5, 0.5]])])
    with pytest.raises(ds.DistillError, match="alignment"):
        ds.kd_loss(teacher, teacher)


def test_kd_graph_loss_matches_scalar_and_gradient():
    rng = np.random.default_rng(5)
    teacher = rng.dirichlet(np.ones(4), size=3)

    logits0 = rng.normal(size=(3, 4))

    def fn(logits):
        return ds.kd_graph_sentence_loss(logits, teacher)

    # value agrees with the scalar definition
    with nm.float64_mode():
        value = fn(Tensor(logits0)).item()
    student_probs = np.exp(logits0 - logits0.max(-1, keepdims=True))
    student_probs /= student_probs.sum(-1, keepdims=True)
    expected = np.mean([ds.kl_divergence(t, s) for t, s in zip(teacher, student_probs)])
    assert value == pytest.approx(expected, abs=1e-8)
    # gradient against finite differences
    assert nm.gradient_check(fn, Tensor(logits0)) < 1e-4


def test_kd_graph_word_loss_gradient():
    rng = np.random.default_rng(9)
    teacher = rng.dirichlet(np.ones(3), size=(2, 4))
    mask = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
    teacher *= mask[:, :, None]

    def fn(logits):
        return ds.kd_graph_word_loss(logits, teacher, mask)

    assert nm.gradient_check(fn, Tensor(rng.normal(size=(2, 4, 3)))) < 1e-4


# ---- end-to-end distillation fixtures ------------------------------------------

def _mini_benchmark():
    grammar, transforms = sl.default_config(seed=11)
    sizes = sl.SplitSizes(60, 60, 50, 50)
    return sl.generate(grammar, transforms, sizes, seed=31)


@pytest.fixture(scope="module")
def setup():
    bench = _mini_benchmark()
    grammar = bench.grammar
    intents = grammar.intents
    tags = grammar.tag_set()
    vocabs = {}
    for lang in bench.corpora:
        alphabet = sl.surface_alphabet(grammar, bench.transforms[lang])
        vocabs[lang] = bpe.train_bpe(
            bench.corpus(lang, "train_unannotated").unlabeled_view(),
            target_size=300, scope=lang, alphabet=alphabet)

    class Multi:
        def __iter__(self):
            for lang in bench.corpora:
                yield from bench.corpus(lang, "train_unannotated").unlabeled_view()

    shared_alphabet = sorted({c for lang in bench.corpora
                              for c in sl.surface_alphabet(grammar, bench.transforms[lang])})
    shared = bpe.train_bpe(Multi(), target_size=500, scope="shared",
                           alphabet=shared_alphabet)
    source_cfg = models.edge_config("transformer", len(vocabs["eng"]),
                                    sentence_labels=intents, word_labels=tags,
                                    dropout=0.0)
    source = models.build(source_cfg, seed=1, vocab_hash=vocabs["eng"].content_hash())
    ann = bench.corpus("eng", "train_annotated")
    rows = [(h.id, h.words, h.intent) for h in ann]
    items = ds.supervised_items(vocabs["eng"], rows, intents, True, "sentence")
    val_rows = [(h.id, h.words, h.intent) for h in bench.corpus("eng", "validation")]
    val_items = ds.supervised_items(vocabs["eng"], val_rows, intents, True, "sentence")
    settings = tr.TrainSettings(epochs=10, batch_size=16, lr=3e-3, seed=0,
                                early_stop=5)
    ds.supervised_fit(source, vocabs["eng"], items, val_items, "sentence", settings)
    return bench, vocabs, shared, source


def test_supervised_source_model_learns(setup):
    bench, vocabs, _, source = setup
    test = bench.corpus("eng", "test")
    preds = models.predict(source, vocabs["eng"], test.unlabeled_view(), "sentence")
    hits = sum(p == h.intent for p, h in zip(preds.argmax(), test))
    assert hits / len(test) > 0.5  # far above the 1/8 uniform floor


def test_teacher_cache_matches_fresh_forward(setup):
    bench, vocabs, _, source = setup
    view = bench.corpus("eng", "validation").unlabeled_view()
    cache = ds.TeacherCache.build(source, vocabs["eng"], view, "sentence")
    fresh = models.predict(source, vocabs["eng"], view, "sentence")
    for ex_id, probs in zip(fresh.ids, fresh.probs):
        np.testing.assert_allclose(cache.lookup(ex_id), probs, atol=1e-6)


def test_teacher_cache_jsonl_roundtrip(tmp_path, setup):
    bench, vocabs, _, source = setup
    view = bench.corpus("eng", "validation").unlabeled_view()
    cache = ds.TeacherCache.build(source, vocabs["eng"], view, "sentence")
    path = tmp_path / "cache.jsonl"
    cache.save(path)
    loaded = ds.TeacherCache.load(path, "sentence", cache.labels)
    for ex_id in cache.vectors:
        np.testing.assert_array_equal(loaded.lookup(ex_id), cache.lookup(ex_id))


def _kd_settings(epochs=6):
    return tr.TrainSettings(epochs=epochs, batch_size=16, lr=3e-3, seed=1,
                            early_stop=0, weight_decay=0.01)


def test_distill_freezes_teacher_and_reads_no_labels(setup):
    bench, vocabs, shared, source = setup
    pivot_cfg = models.pivot_config(len(shared), sentence_labels=bench.grammar.intents,
                                    word_labels=bench.grammar.tag_set(),
                                    size="small", dropout=0.0)
    pivot = models.build(pivot_cfg, seed=3, vocab_hash=shared.content_hash())
    corpus = bench.corpus("eng", "train_unannotated").unlabeled_view()
    val = bench.corpus("eng", "validation").unlabeled_view()
    before = source.param_hash()
    grants_before = (corpus.log.granted, val.log.granted)
    job = ds.DistillJob(teacher=source, teacher_vocab=vocabs["eng"],
                        student=pivot, student_vocab=shared,
                        corpus=corpus, val_corpus=val, task="sentence",
                        settings=_kd_settings())
    result = ds.distill(job)
    assert source.param_hash() == before
    assert (corpus.log.granted, val.log.granted) == grants_before
    # distillation actually moved the student toward the teacher
    assert result.fit.best_score > 0.5


def test_distill_rejects_labeled_corpus(setup):
    bench, vocabs, shared, source = setup
    pivot_cfg = models.pivot_config(len(shared), sentence_labels=bench.grammar.intents,
                                    size="small")
    pivot = models.build(pivot_cfg, seed=3)
    with pytest.raises(ds.DistillError, match="unlabeled"):
        ds.distill(ds.DistillJob(
            teacher=source, teacher_vocab=vocabs["eng"], student=pivot,
            student_vocab=shared, corpus=bench.corpus("eng", "train_unannotated"),
            val_corpus=bench.corpus("eng", "validation").unlabeled_view(),
            task="sentence", settings=_kd_settings()))


def test_distill_rejects_category_mismatch(setup):
    bench, vocabs, shared, source = setup
    other_cfg = models.pivot_config(len(shared), sentence_labels=("p", "q"),
                                    size="small")
    pivot = models.build(other_cfg, seed=3)
    with pytest.raises(ds.DistillError, match="category"):
        ds.distill(ds.DistillJob(
            teacher=source, teacher_vocab=vocabs["eng"], student=pivot,
            student_vocab=shared,
            corpus=bench.corpus("eng", "train_unannotated").unlabeled_view(),
            val_corpus=bench.corpus("eng", "validation").unlabeled_view(),
            task="sentence", settings=_kd_settings()))


def test_uniform_teacher_pulls_student_to_uniform(setup):
    bench, vocabs, shared, _ = setup
    intents = bench.grammar.intents
    cfg = models.edge_config("cnn", len(vocabs["eng"]), sentence_labels=intents,
                             dropout=0.0)
    teacher = models.build(cfg, seed=5, vocab_hash=vocabs["eng"].content_hash())
    for name in ("head.sent.w", "head.sent.b"):
        teacher.params[name].values[:] = 0.0  # exactly uniform outputs
    student = models.build(cfg, seed=6, vocab_hash=vocabs["eng"].content_hash())
    corpus = bench.corpus("eng", "train_unannotated").unlabeled_view()
    val = bench.corpus("eng", "validation").unlabeled_view()
    job = ds.DistillJob(teacher=teacher, teacher_vocab=vocabs["eng"],
                        student=student, student_vocab=vocabs["eng"],
                        corpus=corpus, val_corpus=val, task="sentence",
                        settings=_kd_settings(epochs=8))
    result = ds.distill(job)
    preds = models.predict(result.student, vocabs["eng"], val, "sentence")
    worst_gap = max(float(np.abs(p - 1.0 / len(intents)).max()) for p in preds.probs)
    assert worst_gap < 0.05


def test_word_loss_ignores_continuation_subwords():
    """Only first-subword positions enter the loss: two student tokenizations
    differing in continuation splits give the same loss value."""
    vocab_a = bpe.SubwordVocab(merges=(("a", "b"), ("c", "d")),
                               alphabet=tuple("abcd"), scope="x")
    vocab_b = bpe.SubwordVocab(merges=(), alphabet=tuple("abcd"), scope="y")
    words = ("ab", "cd")
    rng = np.random.default_rng(0)
    teacher_rows = rng.dirichlet(np.ones(3), size=2)

    def loss_with(vocab, seed):
        cfg = models.ArchConfig(family="cnn", vocab_size=len(vocab),
                                word_labels=("O", "B-x", "I-x"), head="word",
                                embed=8, hidden=8, layers=1, dropout=0.0)
        model = models.build(cfg, seed=seed)
        # identical per-position behaviour regardless of splits: zero encoder,
        # constant head bias
        for name, p in model.params.items():
            p.values[:] = 0.0
        model.params["head.word.b"].values[:] = np.array([0.3, -0.2, 0.1])
        tok = bpe.encode(vocab, words)
        batch = models.make_batch([tok], vocab.pad_id)
        probs = teacher_rows[None, :, :]
        return ds.kd_graph_word_loss(models.word_logits(model, batch), probs,
                                     batch.word_mask).item()

    assert loss_with(vocab_a, 1) == pytest.approx(loss_with(vocab_b, 2), abs=1e-7)


def test_balanced_distillation_reuses_source_distributions(setup):
    bench, vocabs, shared, source = setup
    transforms = bench.transforms
    d_src = bench.corpus("eng", "train_unannotated").unlabeled_view()
    cache = ds.TeacherCache.build(source, vocabs["eng"], d_src, "sentence")
    translated = sl.translate(d_src, transforms, "zil")
    for handle in translated:
        entry = cache.lookup(handle.id)  # same utterance id, same vector
        np.testing.assert_array_equal(entry, cache.vectors[handle.id])
    assert translated.log.granted == 0


def test_pipeline_rejects_balanced_word_task(setup):
    bench, vocabs, shared, source = setup
    with pytest.raises(ds.DistillError, match="balanced"):
        ds.two_step_pipeline(
            source_model=source, source_vocab=vocabs["eng"],
            pivot_base=models.build(models.pivot_config(
                len(shared), word_labels=bench.grammar.tag_set(), size="small"), 1),
            shared_vocab=shared, target_configs={}, target_vocabs={},
            data=ds.PipelineData(
                src_train=bench.corpus("eng", "train_unannotated").unlabeled_view(),
                src_val=bench.corpus("eng", "validation").unlabeled_view(),
                tgt_train={}, tgt_val={}),
            task="word", grammar=bench.grammar, transforms=bench.transforms,
            settings_kd1=_kd_settings(), settings_kd2=_kd_settings(), seed=0,
            balanced=True)


def test_translate_test_baseline_equals_isomorphic_source_accuracy(setup):
    bench, vocabs, _, source = setup
    from xlkd import evaluate as ev

    gold = bench.corpus("zil", "test")
    result = ds.baseline_translate_test(source, vocabs["eng"],
                                        gold.unlabeled_view(), bench.transforms,
                                        "sentence")
    assert result.inference_passes_per_example == 2
    acc_via_baseline = ev.accuracy(result.predictions, gold)
    # isomorphic source-language rendering of the same test set
    iso = sl.translate(gold, bench.transforms, "eng")
    iso_preds = models.predict(source, vocabs["eng"], iso.unlabeled_view(), "sentence")
    hits = sum(p == r.intent for p, r in zip(iso_preds.argmax(), iso._rows))
    assert acc_via_baseline == pytest.approx(hits / len(iso._rows), abs=1e-12)


def test_translate_train_pseudo_labels_match_argmax(setup):
    bench, vocabs, _, source = setup
    d_src = bench.corpus("eng", "train_unannotated").unlabeled_view()
    preds = models.predict(source, vocabs["eng"], d_src, "sentence")
    expected = dict(zip(preds.ids, preds.argmax()))
    cfg = models.edge_config("cnn", len(vocabs["zil"]),
                             sentence_labels=bench.grammar.intents, dropout=0.0)
    model, _ = ds.baseline_translate_train_pseudo(
        source, vocabs["eng"], d_src, "zil", cfg, vocabs["zil"],
        bench.transforms, "sentence",
        tr.TrainSettings(epochs=2, batch_size=16, lr=3e-3, seed=0), seed=0)
    assert d_src.log.granted == 0
    # the pseudo targets are exactly the teacher argmax by construction;
    # re-derive them the same way and compare
    again = models.predict(source, vocabs["eng"], d_src, "sentence")
    assert dict(zip(again.ids, again.argmax())) == expected
