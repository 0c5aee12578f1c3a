"""Knowledge-distillation losses, the two-step transfer pipeline, and the
machine-translation baselines.

Step one distills a frozen source-language task model into the multilingual
pivot on unlabeled source text (optionally adding oracle translations that
reuse the teacher's source-side distributions — language-balanced
distillation). Step two distills the pivot into a fresh target-language model
on unlabeled target text (optionally mixed 1:1 with rule-based paraphrases).
No stage reads a gold label; checkpoints are selected by argmax agreement
with the stage teacher on a held-out unlabeled slice.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import bpe, models, numeric as nm, synthlang as sl, train as tr
from .models import EncoderModel, PredictionSet
from .numeric import Tensor

EPS = nm.EPS_FLOOR


class DistillError(ValueError):
    pass


# ---- losses -------------------------------------------------------------------

def kl_divergence(p_teacher, p_student) -> float:
    """Σ p_T log(p_T / p_S) in nats; 0·log0 terms drop, p_S is floored."""
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise DistillError(f"kl_divergence: length mismatch {p_t.shape} vs {p_s.shape}")
    for name, vec in (("teacher", p_t), ("student", p_s)):
        if abs(vec.sum() - 1.0) > 1e-5 or (vec < 0).any():
            raise DistillError(f"kl_divergence: {name} vector is not a distribution")
    mask = p_t > 0
    return float((p_t[mask] * (np.log(p_t[mask]) - np.log(np.maximum(p_s[mask], EPS)))).sum())


def kd_loss(teacher_out: PredictionSet, student_out: PredictionSet,
            alignment: Sequence[Sequence[tuple[int, int]]] | None = None) -> float:
    """Mean KL over the batch (sentence task) or over all words (word task)."""
    if teacher_out.labels != student_out.labels:
        raise DistillError("kd_loss: teacher and student category sets differ")
    if teacher_out.ids != student_out.ids:
        raise DistillError("kd_loss: example ids differ")
    if teacher_out.task == "sentence":
        values = [kl_divergence(t, s) for t, s in
                  zip(teacher_out.probs, student_out.probs)]
        return float(np.mean(values))
    if alignment is None:
        raise DistillError("kd_loss: word task requires first-subword alignment")
    values = []
    for pairs, t_rows, s_rows in zip(alignment, teacher_out.probs, student_out.probs):
        if not (len(pairs) == len(t_rows) == len(s_rows)):
            raise DistillError("kd_loss: alignment does not cover every word")
        values.extend(kl_divergence(t, s) for t, s in zip(t_rows, s_rows))
    return float(np.mean(values))


def _teacher_entropy_terms(probs: np.ndarray) -> np.ndarray:
    """Σ p log p per row, with the 0·log0 convention."""
    safe = np.where(probs > 0, probs, 1.0)
    return (probs * np.log(safe)).sum(axis=-1)


def kd_graph_sentence_loss(student_logits: Tensor, teacher_probs: np.ndarray) -> Tensor:
    """Differentiable mean KL(teacher ‖ softmax(student_logits)) over a batch."""
    ls = nm.log_softmax(student_logits, axis=-1)
    cross = (Tensor(teacher_probs) * ls).sum(axis=-1)
    return (Tensor(_teacher_entropy_terms(teacher_probs)) - cross).mean()


def kd_graph_word_loss(student_logits: Tensor, teacher_probs: np.ndarray,
                       word_mask: np.ndarray) -> Tensor:
    """Mean KL over all real (example, word) pairs in the batch."""
    ls = nm.log_softmax(student_logits, axis=-1)
    cross = (Tensor(teacher_probs) * ls).sum(axis=-1)
    terms = (Tensor(_teacher_entropy_terms(teacher_probs)) - cross) * Tensor(word_mask)
    return terms.sum() / Tensor(word_mask).sum()


# ---- teacher cache --------------------------------------------------------------

@dataclass
class TeacherCache:
    """Frozen-teacher distributions keyed by example id."""
    task: str
    labels: tuple[str, ...]
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, teacher: EncoderModel, vocab: bpe.SubwordVocab, corpus,
              task: str, batch_size: int = 64) -> "TeacherCache":
        preds = models.predict(teacher, vocab, corpus, task, batch_size=batch_size)
        return cls(task=task, labels=preds.labels,
                   vectors={i: p for i, p in zip(preds.ids, preds.probs)})

    def lookup(self, ex_id: str) -> np.ndarray:
        try:
            return self.vectors[ex_id]
        except KeyError:
            raise DistillError(f"teacher cache has no entry for {ex_id!r}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ex_id in self.vectors:
                fh.write(json.dumps(
                    {"id": ex_id, "probs": self.vectors[ex_id].tolist()},
                    sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, task: str, labels: tuple[str, ...]) -> "TeacherCache":
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                doc = json.loads(line)
                vectors[doc["id"]] = np.asarray(doc["probs"])
        return cls(task=task, labels=labels, vectors=vectors)


# ---- distillation jobs -----------------------------------------------------------

@dataclass
class TrainItem:
    ex_id: str
    tok: bpe.Tokenization
    target: np.ndarray  # teacher distribution (K,) or (W, K); or class index array


@dataclass
class DistillJob:
    teacher: EncoderModel
    teacher_vocab: bpe.SubwordVocab
    student: EncoderModel
    student_vocab: bpe.SubwordVocab
    corpus: sl.Corpus  # unlabeled view
    val_corpus: sl.Corpus  # unlabeled view, scores argmax agreement
    task: str
    settings: tr.TrainSettings
    aux_corpus: sl.Corpus | None = None
    aux_cache: TeacherCache | None = None  # reuse these distributions for aux ids
    name: str = "distill"


@dataclass
class DistillResult:
    student: EncoderModel
    fit: tr.FitResult
    teacher_cache: TeacherCache


def agreement(a: PredictionSet, b: PredictionSet) -> float:
    """Fraction of identical argmax decisions (micro over words for tagging)."""
    if a.ids != b.ids:
        raise DistillError("agreement: example ids differ")
    if a.task == "sentence":
        return float(np.mean([x == y for x, y in zip(a.argmax(), b.argmax())]))
    hits = total = 0
    for x_tags, y_tags in zip(a.argmax(), b.argmax()):
        hits += sum(x == y for x, y in zip(x_tags, y_tags))
        total += len(x_tags)
    return hits / total


def _labels_for(model: EncoderModel, task: str) -> tuple[str, ...]:
    return model.config.sentence_labels if task == "sentence" else model.config.word_labels


def _items_from_cache(corpus, vocab, cache: TeacherCache, needs_bos: bool,
                      task: str) -> list[TrainItem]:
    items = []
    for h in corpus:
        tok = bpe.encode(vocab, h.words, bos=needs_bos)
        target = cache.lookup(h.id)
        if task == "word" and len(target) != tok.n_words:
            raise DistillError(f"{h.id}: teacher rows do not align with words")
        items.append(TrainItem(ex_id=h.id, tok=tok, target=target))
    return items


def _kd_batch_loss(model: EncoderModel, chunk: Sequence[TrainItem], task: str,
                   pad_id: int) -> Tensor:
    batch = models.make_batch([c.tok for c in chunk], pad_id)
    if task == "sentence":
        probs = np.stack([c.target for c in chunk])
        return kd_graph_sentence_loss(models.sentence_logits(model, batch), probs)
    w_max = batch.word_idx.shape[1]
    k = len(chunk[0].target[0])
    probs = np.zeros((len(chunk), w_max, k))
    for i, c in enumerate(chunk):
        probs[i, :len(c.target)] = c.target
    return kd_graph_word_loss(models.word_logits(model, batch), probs,
                              batch.word_mask)


def distill(job: DistillJob) -> DistillResult:
    """Train the student to match the frozen teacher's output distributions."""
    if _labels_for(job.teacher, job.task) != _labels_for(job.student, job.task):
        raise DistillError("teacher and student category sets differ")
    for corpus in (job.corpus, job.val_corpus) + ((job.aux_corpus,) if job.aux_corpus else ()):
        if corpus.labeled:
            raise DistillError("distillation corpora must be unlabeled views")
    teacher_hash = job.teacher.param_hash()

    cache = TeacherCache.build(job.teacher, job.teacher_vocab, job.corpus, job.task)
    needs_bos = job.student.config.needs_bos
    items = _items_from_cache(job.corpus, job.student_vocab, cache, needs_bos, job.task)
    if job.aux_corpus is not None:
        aux_cache = job.aux_cache or TeacherCache.build(
            job.teacher, job.teacher_vocab, job.aux_corpus, job.task)
        items += _items_from_cache(job.aux_corpus, job.student_vocab, aux_cache,
                                   needs_bos, job.task)

    teacher_val = models.predict(job.teacher, job.teacher_vocab, job.val_corpus, job.task)
    pad_id = job.student_vocab.pad_id

    def build_loss(model, chunk, _rng):
        return _kd_batch_loss(model, chunk, job.task, pad_id)

    def validate(model):
        student_val = models.predict(model, job.student_vocab, job.val_corpus, job.task)
        return agreement(teacher_val, student_val)

    result = tr.fit(job.student, items, build_loss, validate, job.settings)
    if job.teacher.param_hash() != teacher_hash:
        raise DistillError("teacher parameters changed during distillation")
    return DistillResult(student=job.student, fit=result, teacher_cache=cache)


# ---- supervised training (source model, pseudo baseline, gold reference) ---------

def supervised_items(vocab, rows: Sequence[tuple[str, Sequence[str], object]],
                     labels: tuple[str, ...], needs_bos: bool, task: str) -> list[TrainItem]:
    index = {label: i for i, label in enumerate(labels)}
    items = []
    for ex_id, words, target in rows:
        tok = bpe.encode(vocab, words, bos=needs_bos)
        if task == "sentence":
            arr = np.array(index[target], dtype=np.int64)
        else:
            arr = np.array([index[t] for t in target], dtype=np.int64)
        items.append(TrainItem(ex_id=ex_id, tok=tok, target=arr))
    return items


def _supervised_batch_loss(model, chunk, task, pad_id) -> Tensor:
    batch = models.make_batch([c.tok for c in chunk], pad_id)
    if task == "sentence":
        targets = np.stack([c.target for c in chunk])
        ls = nm.log_softmax(models.sentence_logits(model, batch), axis=-1)
        return -nm.gather_classes(ls, targets).mean()
    w_max = batch.word_idx.shape[1]
    targets = np.zeros((len(chunk), w_max), dtype=np.int64)
    for i, c in enumerate(chunk):
        targets[i, :len(c.target)] = c.target
    ls = nm.log_softmax(models.word_logits(model, batch), axis=-1)
    nll = -nm.gather_classes(ls, targets) * Tensor(batch.word_mask)
    return nll.sum() / Tensor(batch.word_mask).sum()


def supervised_accuracy(model, vocab, items: Sequence[TrainItem], task: str,
                        batch_size: int = 64) -> float:
    model.eval()
    hits = total = 0
    pad_id = vocab.pad_id
    for lo in range(0, len(items), batch_size):
        chunk = items[lo:lo + batch_size]
        batch = models.make_batch([c.tok for c in chunk], pad_id)
        if task == "sentence":
            out = models.sentence_logits(model, batch).values.argmax(axis=-1)
            for pred, c in zip(out, chunk):
                hits += int(pred == int(c.target))
                total += 1
        else:
            out = models.word_logits(model, batch).values.argmax(axis=-1)
            for i, c in enumerate(chunk):
                n = len(c.target)
                hits += int((out[i, :n] == c.target).sum())
                total += n
    return hits / total if total else 0.0


def supervised_fit(model: EncoderModel, vocab, items: Sequence[TrainItem],
                   val_items: Sequence[TrainItem], task: str,
                   settings: tr.TrainSettings) -> tr.FitResult:
    pad_id = vocab.pad_id

    def build_loss(m, chunk, _rng):
        return _supervised_batch_loss(m, chunk, task, pad_id)

    def validate(m):
        return supervised_accuracy(m, vocab, val_items, task)

    return tr.fit(model, items, build_loss, validate, settings)


# ---- pipeline -----------------------------------------------------------------

@dataclass
class PipelineData:
    """Unlabeled views feeding the transfer pipeline."""
    src_train: sl.Corpus
    src_val: sl.Corpus
    tgt_train: Mapping[str, sl.Corpus]
    tgt_val: Mapping[str, sl.Corpus]


@dataclass
class PipelineResult:
    pivot: EncoderModel
    targets: dict[str, EncoderModel]
    kd1_log: tr.FitResult
    kd2_logs: dict[str, tr.FitResult]


def two_step_pipeline(source_model: EncoderModel, source_vocab,
                      pivot_base: EncoderModel, shared_vocab,
                      target_configs: Mapping[str, models.ArchConfig],
                      target_vocabs: Mapping[str, bpe.SubwordVocab],
                      data: PipelineData, task: str,
                      grammar: sl.Grammar, transforms: sl.TransformSet,
                      settings_kd1: tr.TrainSettings, settings_kd2: tr.TrainSettings,
                      seed: int, balanced: bool = False,
                      augment: bool = False) -> PipelineResult:
    """Two distillation steps: source model -> pivot on source text, then
    pivot -> per-language target models on target text."""
    if balanced and task == "word":
        raise DistillError("balanced distillation is not applied to the word task")

    aux_corpus = aux_cache = None
    if balanced:
        src_cache = TeacherCache.build(source_model, source_vocab, data.src_train, task)
        translated = [sl.translate(data.src_train, transforms, lang)
                      for lang in target_configs]
        rows = [row for corpus in translated for row in corpus._rows]
        aux_corpus = sl.Corpus(rows, lang="multi", split=data.src_train.split,
                               labeled=False)
        aux_cache = TeacherCache(task=task, labels=src_cache.labels,
                                 vectors=dict(src_cache.vectors))

    pivot = pivot_base.clone()
    kd1 = distill(DistillJob(
        teacher=source_model, teacher_vocab=source_vocab,
        student=pivot, student_vocab=shared_vocab,
        corpus=data.src_train, val_corpus=data.src_val, task=task,
        settings=settings_kd1, aux_corpus=aux_corpus, aux_cache=aux_cache,
        name="kd1"))

    targets: dict[str, EncoderModel] = {}
    kd2_logs: dict[str, tr.FitResult] = {}
    for lang, config in target_configs.items():
        student = models.build(config, seed=models.stable_int(seed, "kd2", lang),
                               vocab_hash=target_vocabs[lang].content_hash())
        aux = None
        if augment:
            aux = sl.paraphrase(data.tgt_train[lang], grammar, transforms,
                                seed=models.stable_int(seed, "para", lang))
        kd2_settings = tr.TrainSettings(**{**settings_kd2.__dict__,
                                           "seed": models.stable_int(seed, "fit2", lang) % (2 ** 31)})
        kd2 = distill(DistillJob(
            teacher=kd1.student, teacher_vocab=shared_vocab,
            student=student, student_vocab=target_vocabs[lang],
            corpus=data.tgt_train[lang], val_corpus=data.tgt_val[lang], task=task,
            settings=kd2_settings, aux_corpus=aux, name=f"kd2-{lang}"))
        targets[lang] = kd2.student
        kd2_logs[lang] = kd2.fit
    return PipelineResult(pivot=kd1.student, targets=targets, kd1_log=kd1.fit,
                          kd2_logs=kd2_logs)


# ---- baselines -----------------------------------------------------------------

@dataclass
class TranslateTestResult:
    predictions: PredictionSet
    inference_passes_per_example: int = 2  # oracle translation pass + model pass


def baseline_translate_test(source_model: EncoderModel, source_vocab,
                            target_test: sl.Corpus, transforms: sl.TransformSet,
                            task: str) -> TranslateTestResult:
    """Translate the target test set into the source language, run the source
    model, and (for tagging) map predictions back through the alignment."""
    translated = sl.translate(target_test, transforms, transforms.source_lang)
    preds = models.predict(source_model, source_vocab, translated, task)
    if task == "sentence":
        out = preds
    else:
        mapped: list[np.ndarray] = []
        for handle, probs in zip(translated, preds.probs):
            alignment = handle.alignment
            back = np.empty_like(probs)
            for j, src_pos in enumerate(alignment):
                back[src_pos] = probs[j]
            mapped.append(back)
        out = PredictionSet(task=task, ids=preds.ids, labels=preds.labels,
                            probs=mapped)
        out.validate()
    return TranslateTestResult(predictions=out)


def baseline_translate_train_pseudo(source_model: EncoderModel, source_vocab,
                                    src_train: sl.Corpus, target_lang: str,
                                    target_config: models.ArchConfig,
                                    target_vocab, transforms: sl.TransformSet,
                                    task: str, settings: tr.TrainSettings,
                                    seed: int) -> tuple[EncoderModel, tr.FitResult]:
    """Translate the unlabeled source corpus, hard-label it with the source
    model's argmax predictions, and train a target model with cross-entropy."""
    if src_train.labeled:
        raise DistillError("translate-train-pseudo expects an unlabeled view")
    src_preds = models.predict(source_model, source_vocab, src_train, task)
    hard = dict(zip(src_preds.ids, src_preds.argmax()))
    translated = sl.translate(src_train, transforms, target_lang)
    labels = _labels_for(source_model, task)
    rows = []
    for handle in translated:
        if task == "sentence":
            rows.append((handle.id, handle.words, hard[handle.id]))
        else:
            src_tags = hard[handle.id]
            tags = [src_tags[src_pos] for src_pos in handle.alignment]
            rows.append((handle.id, handle.words, tags))
    student = models.build(target_config,
                           seed=models.stable_int(seed, "ttp", target_lang),
                           vocab_hash=target_vocab.content_hash())
    items = supervised_items(target_vocab, rows, labels,
                             student.config.needs_bos, task)
    order = np.random.default_rng(models.stable_int(seed, "ttp-split", target_lang))\
        .permutation(len(items))
    n_val = max(1, len(items) // 10)
    val_items = [items[i] for i in order[:n_val]]
    fit_items = [items[i] for i in order[n_val:]]
    fit_settings = tr.TrainSettings(**{**settings.__dict__,
                                       "seed": models.stable_int(seed, "ttp-fit", target_lang) % (2 ** 31)})
    result = supervised_fit(student, target_vocab, fit_items, val_items, task,
                            fit_settings)
    return student, result


def reference_gold_supervised(pivot_base: EncoderModel, shared_vocab,
                              src_annotated: sl.Corpus, src_val: sl.Corpus,
                              target_configs: Mapping[str, models.ArchConfig],
                              target_vocabs: Mapping[str, bpe.SubwordVocab],
                              data: PipelineData, task: str,
                              settings_stage1: tr.TrainSettings,
                              settings_kd2: tr.TrainSettings,
                              seed: int) -> PipelineResult:
    """Reference upper bound: stage one trains the pivot on gold labels (the
    only stage exempt from the label gate); stage two is the usual KD."""
    if not (src_annotated.labeled and src_val.labeled):
        raise DistillError("gold-supervised stage 1 needs labeled views")
    pivot = pivot_base.clone()
    labels = _labels_for(pivot, task)

    def gold_rows(corpus):
        if task == "sentence":
            return [(h.id, h.words, h.intent) for h in corpus]
        return [(h.id, h.words, h.slots) for h in corpus]

    items = supervised_items(shared_vocab, gold_rows(src_annotated), labels,
                             pivot.config.needs_bos, task)
    val_items = supervised_items(shared_vocab, gold_rows(src_val), labels,
                                 pivot.config.needs_bos, task)
    stage1 = supervised_fit(pivot, shared_vocab, items, val_items, task,
                            settings_stage1)

    targets: dict[str, EncoderModel] = {}
    kd2_logs: dict[str, tr.FitResult] = {}
    for lang, config in target_configs.items():
        student = models.build(config, seed=models.stable_int(seed, "kd2", lang),
                               vocab_hash=target_vocabs[lang].content_hash())
        kd2_settings = tr.TrainSettings(**{**settings_kd2.__dict__,
                                           "seed": models.stable_int(seed, "fit2", lang) % (2 ** 31)})
        kd2 = distill(DistillJob(
            teacher=pivot, teacher_vocab=shared_vocab,
            student=student, student_vocab=target_vocabs[lang],
            corpus=data.tgt_train[lang], val_corpus=data.tgt_val[lang], task=task,
            settings=kd2_settings, name=f"gold-kd2-{lang}"))
        targets[lang] = kd2.student
        kd2_logs[lang] = kd2.fit
    return PipelineResult(pivot=pivot, targets=targets, kd1_log=stage1,
                          kd2_logs=kd2_logs)
