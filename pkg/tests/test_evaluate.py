import numpy as np
import pytest

from xlkd import evaluate as ev, synthlang as sl
from xlkd.models import PredictionSet

LABELS = ("a", "b", "c", "d", "e", "f", "g", "h")


def _corpus(intents, lang="eng"):
    rows = [sl.Example(id=f"{lang}-t-{i:03d}", lang=lang, words=("w",), intent=it)
            for i, it in enumerate(intents)]
    return sl.Corpus(rows, lang=lang, split="test")


def _preds(corpus, rows):
    return PredictionSet(task="sentence", ids=corpus.ids, labels=LABELS,
                         probs=[np.asarray(r) for r in rows])


def _one_hot(label):
    v = np.zeros(len(LABELS))
    v[LABELS.index(label)] = 1.0
    return v


def test_accuracy_all_correct():
    corpus = _corpus(["a", "b", "c", "d"])
    preds = _preds(corpus, [_one_hot(x) for x in "abcd"])
    assert ev.accuracy(preds, corpus) == 1.0


def test_accuracy_three_of_four():
    corpus = _corpus(["a", "b", "c", "d"])
    preds = _preds(corpus, [_one_hot(x) for x in "abcg"])
    assert ev.accuracy(preds, corpus) == 0.75


def test_accuracy_uniform_predictor_matches_bruteforce_tiebreak():
    grammar, transforms = sl.default_config(seed=11)
    bench = sl.generate(grammar, transforms,
                        sl.SplitSizes(50, 50, 50, 400), seed=5)
    test = bench.corpus("eng", "test")
    labels = grammar.intents
    uniform = PredictionSet(
        task="sentence", ids=test.ids, labels=labels,
        probs=[np.full(len(labels), 1.0 / len(labels)) for _ in range(len(test))])
    got = ev.accuracy(uniform, test)
    # brute-force expectation: the lowest-index tie-break always picks labels[0]
    expected = sum(h.intent == labels[0] for h in test) / len(test)
    assert got == pytest.approx(expected, abs=1e-12)
    assert 0.05 < got < 0.22  # near 1/8 on the roughly balanced test split


def test_accuracy_id_mismatch_rejected():
    corpus = _corpus(["a", "b"])
    preds = PredictionSet(task="sentence", ids=("zzz", "yyy"), labels=LABELS,
                          probs=[_one_hot("a"), _one_hot("b")])
    with pytest.raises(ev.EvalError, match="ids"):
        ev.accuracy(preds, corpus)


def test_accuracy_invariant_under_reordering():
    intents = ["a", "b", "c", "d", "a", "h"]
    corpus = _corpus(intents)
    rows = [_one_hot(x) for x in "abcgah"]
    base = ev.accuracy(_preds(corpus, rows), corpus)
    order = [3, 1, 4, 0, 5, 2]
    reordered_corpus = sl.Corpus([corpus._rows[i] for i in order], "eng", "test")
    reordered = PredictionSet(task="sentence", ids=reordered_corpus.ids,
                              labels=LABELS, probs=[rows[i] for i in order])
    assert ev.accuracy(reordered, reordered_corpus) == base


def test_span_f1_hand_case():
    gold = [["O", "B-FROM", "I-FROM", "O"]]
    pred = [["O", "B-FROM", "I-FROM", "B-TO"]]
    p, r, f1 = ev.span_f1(pred, gold)
    assert p == pytest.approx(0.5)
    assert r == pytest.approx(1.0)
    assert f1 == pytest.approx(2.0 / 3.0)


def test_span_f1_exact_match():
    tags = [["B-x", "I-x", "O", "B-y"]]
    assert ev.span_f1(tags, tags) == (1.0, 1.0, 1.0)


def test_span_f1_all_outside_prediction():
    gold = [["B-x", "I-x", "O"]]
    pred = [["O", "O", "O"]]
    p, r, f1 = ev.span_f1(pred, gold)
    assert r == 0.0 and f1 == 0.0


def test_span_f1_length_mismatch():
    with pytest.raises(ev.EvalError, match="length"):
        ev.span_f1([["O", "O"]], [["O"]])


def test_bio_repair_rule():
    assert ev.repair_bio(["I-x", "I-x", "O", "I-y"]) == ["B-x", "I-x", "O", "B-y"]
    assert ev.repair_bio(["B-x", "I-y"]) == ["B-x", "B-y"]


def _bruteforce_spans(tags):
    """Independent span scan: repair pass first, then linear grouping."""
    fixed = []
    for i, tag in enumerate(tags):
        if tag.startswith("I-"):
            prev = fixed[i - 1] if i else "O"
            if prev != "B-" + tag[2:] and prev != "I-" + tag[2:]:
                tag = "B-" + tag[2:]
        fixed.append(tag)
    spans = set()
    i = 0
    while i < len(fixed):
        if fixed[i].startswith("B-"):
            kind = fixed[i][2:]
            j = i + 1
            while j < len(fixed) and fixed[j] == "I-" + kind:
                j += 1
            spans.add((i, j - 1, kind))
            i = j
        else:
            i += 1
    return spans


def test_span_f1_matches_bruteforce_oracle_on_random_sequences():
    rng = np.random.default_rng(77)
    tags = ["O", "B-x", "I-x", "B-y", "I-y", "B-z", "I-z"]
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        pred = [tags[int(rng.integers(len(tags)))] for _ in range(n)]
        gold = [tags[int(rng.integers(len(tags)))] for _ in range(n)]
        assert ev.extract_spans(pred) == _bruteforce_spans(pred)
        assert ev.extract_spans(gold) == _bruteforce_spans(gold)
        p_spans, g_spans = _bruteforce_spans(pred), _bruteforce_spans(gold)
        tp = len(p_spans & g_spans)
        p_ref = tp / len(p_spans) if p_spans else 0.0
        r_ref = tp / len(g_spans) if g_spans else 0.0
        f_ref = 2 * p_ref * r_ref / (p_ref + r_ref) if (p_ref + r_ref) else 0.0
        assert ev.span_f1([pred], [gold]) == pytest.approx((p_ref, r_ref, f_ref))


def _row(model_id, scores, category="ours", task="sentence"):
    return ev.MetricsRow(model_id=model_id, task=task, scores=scores,
                         source_lang="eng", category=category)


def test_metrics_row_average_excludes_source():
    row = _row("m", {"eng": 0.9, "zil": 0.8, "qof": 0.6})
    assert row.target_average == pytest.approx(0.7)
    assert row.source_score == pytest.approx(0.9)


def test_dissipation_identical_rows_zero():
    a = _row("s1", {"eng": 0.9, "zil": 0.8})
    deltas = ev.dissipation_delta(a, a)
    assert all(v == 0.0 for v in deltas.values())


def test_dissipation_paper_shaped_delta():
    # stage-1 average 92.8, stage-2 average 87.7 -> delta -5.1
    stage1 = _row("s1", {"eng": 94.0, "zil": 92.8, "qof": 92.8, "vex": 92.8})
    stage2 = _row("s2", {"eng": 94.0, "zil": 87.7, "qof": 87.7, "vex": 87.7})
    deltas = ev.dissipation_delta(stage1, stage2)
    assert deltas["avg"] == pytest.approx(-5.1, abs=1e-9)


def test_dissipation_language_set_mismatch():
    with pytest.raises(ev.EvalError, match="language"):
        ev.dissipation_delta(_row("a", {"eng": 1.0}), _row("b", {"zil": 1.0}))


def test_transfer_grid_cells_and_csv():
    grid = ev.TransferGrid(task="sentence")
    for i, src in enumerate(ev.GRID_ARCHS):
        for j, tgt in enumerate(ev.GRID_ARCHS):
            grid.set_cell(src, tgt, 0.5 + 0.01 * (i * 3 + j), 0.9)
    assert grid.complete()
    assert grid.cell("transformer", "bilstm") == pytest.approx(0.51)
    csv_text = grid.to_csv()
    assert csv_text.splitlines()[0] == "source\\target,transformer,bilstm,cnn"
    assert "0.5000" in csv_text


def test_report_rendering_and_hash_stability():
    rows = [
        _row("2-step-kd-transformer", {"eng": 0.9, "zil": 0.8}, "ours"),
        _row("source-transformer", {"eng": 0.93}, "reference"),
        _row("translate-test-transformer", {"zil": 0.75, "eng": 0.9}, "baseline"),
    ]
    grid = ev.TransferGrid(task="sentence")
    report = ev.build_report(rows, grids=[grid],
                             dissipation=[{"name": "base-vs-small",
                                           "deltas": {"zil": -0.1, "avg": -0.1}}],
                             header={"seed": 1})
    a = report.to_json()
    b = ev.build_report(rows, grids=[grid],
                        dissipation=[{"name": "base-vs-small",
                                      "deltas": {"zil": -0.1, "avg": -0.1}}],
                        header={"seed": 1}).to_json()
    assert a == b
    assert report.content_hash() == ev.build_report(
        rows, grids=[grid],
        dissipation=[{"name": "base-vs-small", "deltas": {"zil": -0.1, "avg": -0.1}}],
        header={"seed": 1}).content_hash()
    md = report.to_markdown()
    # fixed row order: reference, then baselines, then ours
    assert md.index("source-transformer") < md.index("translate-test-transformer")
    assert md.index("translate-test-transformer") < md.index("2-step-kd-transformer")
    # an all-empty grid section is omitted from the rendering
    assert "Cross-architecture" not in md
    assert "dissipation" in md


def test_report_json_and_markdown_share_one_source():
    rows = [_row("m", {"eng": 0.9, "zil": 0.8})]
    report = ev.build_report(rows)
    doc = report.to_doc()
    assert doc["rows"][0]["scores"]["zil"] == 0.8
    assert "| 0.800 |" in report.to_markdown().replace("0.800 | 0.800", "0.800")
