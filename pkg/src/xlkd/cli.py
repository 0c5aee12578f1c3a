"""Command-line orchestration: data generation, source training, pipeline and
baseline runs, evaluation, and reporting.

Every command is driven by one RunConfig (JSON file plus flag overrides) and
a master seed, writes its artifacts under ``--out``, and is idempotent: a
rerun with the same config either reuses the cached artifacts or rewrites
byte-identical files. Commands print the label-gate counters on completion
and exit nonzero if a gold label was read outside the allowed stages.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpe, distill as ds, evaluate as ev, models, synthlang as sl, train as tr

log = logging.getLogger("xlkd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LABEL_GATE = 3
EXIT_TRAINING = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    out: str = "runs/default"
    data_config: str | None = None  # path to a grammar/language JSON document
    reorder: bool = True  # built-in benchmark variant when data_config is None
    task: str = "sentence"
    arch: str = "transformer"
    target_arch: str | None = None  # defaults to the source architecture
    balanced: bool = False
    augment: bool = False
    grid: bool = False
    pivot_size: str = "base"
    pivot_steps: int = 1200
    pivot_lr: float = 2e-3
    train_annotated: int = 500
    train_unannotated: int = 500
    validation: int = 120
    test: int = 400
    epochs: int = 20
    kd_epochs: int = 15
    batch_size: int = 32
    lr: str | float = "auto"
    dropout: float = 0.1
    vocab_size: int = 400
    shared_vocab_size: int = 800

    def __post_init__(self):
        if self.task not in ("sentence", "word"):
            raise ConfigError(f"config field 'task' must be sentence|word, got {self.task!r}")
        if self.arch not in models.FAMILIES:
            raise ConfigError(f"config field 'arch' must be one of {models.FAMILIES}, "
                              f"got {self.arch!r}")
        if self.target_arch is not None and self.target_arch not in models.FAMILIES:
            raise ConfigError(f"config field 'target_arch' invalid: {self.target_arch!r}")
        if self.pivot_size not in ("small", "base", "large"):
            raise ConfigError(f"config field 'pivot_size' must be small|base|large, "
                              f"got {self.pivot_size!r}")
        for name in ("train_annotated", "train_unannotated", "validation", "test",
                     "epochs", "kd_epochs", "batch_size", "pivot_steps", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"config field {name!r} must be a positive integer")

    def to_doc(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def resolved_target_arch(self) -> str:
        return self.target_arch or self.arch

    def sizes(self) -> sl.SplitSizes:
        return sl.SplitSizes(self.train_annotated, self.train_unannotated,
                             self.validation, self.test)

    def data_hash(self) -> str:
        doc = {"data_config": self.data_config, "reorder": self.reorder,
               "seed": self.seed, "sizes": dataclasses.astuple(self.sizes()),
               "vocab_size": self.vocab_size,
               "shared_vocab_size": self.shared_vocab_size}
        return _hash_doc(doc)

    def config_hash(self) -> str:
        return _hash_doc(self.to_doc())


def _hash_doc(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _seed32(*parts) -> int:
    return models.stable_int(*parts) % (2 ** 31)


# ---- run context -----------------------------------------------------------------

SPLIT_FILES = sl.SPLITS


class RunContext:
    """Paths and lazily loaded artifacts for one output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.data_dir = self.out / "data"
        self.model_dir = self.out / "models"
        self.log_dir = self.out / "logs"
        self._benchmark: sl.Benchmark | None = None
        self._vocabs: dict[str, bpe.SubwordVocab] = {}

    # -- data ------------------------------------------------------------------

    def data_ready(self) -> bool:
        manifest = self.data_dir / "dataset.manifest.json"
        if not manifest.exists():
            return False
        doc = json.loads(manifest.read_text())
        return doc.get("data_hash") == self.data_hash()

    def grammar_and_transforms(self) -> tuple[sl.Grammar, sl.TransformSet]:
        if self.config.data_config:
            return sl.load_config(self.config.data_config)
        return sl.default_config(reorder=self.config.reorder)

    def data_hash(self) -> str:
        """Config-level hash plus the actual benchmark document, so stale data
        from an older grammar or cipher recipe is regenerated."""
        grammar, transforms = self.grammar_and_transforms()
        return _hash_doc({"config": self.config.data_hash(),
                          "benchmark": sl.config_to_doc(grammar, transforms)})

    def generate_data(self) -> sl.Benchmark:
        grammar, transforms = self.grammar_and_transforms()
        bench = sl.generate(grammar, transforms, self.config.sizes(),
                            seed=self.config.seed)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        sl.save_config(grammar, transforms, self.data_dir / "benchmark.config.json")
        counts = {}
        for lang in bench.corpora:
            for split in SPLIT_FILES:
                path = self.data_dir / f"{lang}.{split}.jsonl"
                sl.write_jsonl(bench.corpus(lang, split), path)
                counts[f"{lang}.{split}"] = len(bench.corpus(lang, split))
        self._train_vocabs(bench)
        files = {p.name: _file_hash(p) for p in sorted(self.data_dir.iterdir())
                 if p.name != "dataset.manifest.json"}
        manifest = {"data_hash": self.data_hash(), "counts": counts,
                    "files": files}
        _write_json(self.data_dir / "dataset.manifest.json", manifest)
        self._benchmark = bench
        return bench

    def _train_vocabs(self, bench: sl.Benchmark) -> None:
        grammar = bench.grammar

        def text(lang):
            class Splits:
                def __iter__(s):
                    for split in ("train_annotated", "train_unannotated"):
                        yield from bench.corpus(lang, split).unlabeled_view()
            return Splits()

        shared_alphabet: set[str] = set()
        for lang in bench.corpora:
            alphabet = sl.surface_alphabet(grammar, bench.transforms[lang])
            shared_alphabet.update(alphabet)
            vocab = bpe.train_bpe(text(lang), self.config.vocab_size, scope=lang,
                                  alphabet=alphabet)
            vocab.save(self.data_dir / f"vocab.{lang}.json")

        class Multi:
            def __iter__(s):
                for lang in bench.corpora:
                    yield from text(lang)

        shared = bpe.train_bpe(Multi(), self.config.shared_vocab_size,
                               scope="shared", alphabet=sorted(shared_alphabet))
        shared.save(self.data_dir / "vocab.shared.json")

    def benchmark(self) -> sl.Benchmark:
        if self._benchmark is not None:
            return self._benchmark
        if not self.data_ready():
            raise ConfigError("no generated data in the output directory; "
                              "run gen-data first")
        grammar, transforms = sl.load_config(self.data_dir / "benchmark.config.json")
        corpora: dict[str, dict[str, sl.Corpus]] = {}
        for transform in transforms:
            corpora[transform.lang] = {}
            for split in SPLIT_FILES:
                path = self.data_dir / f"{transform.lang}.{split}.jsonl"
                corpora[transform.lang][split] = sl.read_jsonl(path, split=split)
        self._benchmark = sl.Benchmark(grammar=grammar, transforms=transforms,
                                       corpora=corpora, seed=self.config.seed)
        return self._benchmark

    def vocab(self, scope: str) -> bpe.SubwordVocab:
        if scope not in self._vocabs:
            self._vocabs[scope] = bpe.SubwordVocab.load(
                self.data_dir / f"vocab.{scope}.json")
        return self._vocabs[scope]

    # -- rows / grids / dissipation ----------------------------------------------

    def load_rows(self) -> dict[str, dict]:
        path = self.out / "rows.json"
        return json.loads(path.read_text())["rows"] if path.exists() else {}

    def save_rows(self, rows: dict[str, dict]) -> None:
        _write_json(self.out / "rows.json", {"rows": dict(sorted(rows.items()))})

    def add_row(self, row: ev.MetricsRow) -> None:
        rows = self.load_rows()
        rows[f"{row.model_id}|{row.task}"] = row.to_doc()
        self.save_rows(rows)

    def load_grid(self, task: str) -> ev.TransferGrid:
        path = self.out / "grids.json"
        if path.exists():
            doc = json.loads(path.read_text())
            if task in doc:
                return ev.TransferGrid.from_doc(doc[task])
        return ev.TransferGrid(task=task)

    def save_grid(self, grid: ev.TransferGrid) -> None:
        path = self.out / "grids.json"
        doc = json.loads(path.read_text()) if path.exists() else {}
        doc[grid.task] = grid.to_doc()
        _write_json(path, doc)

    def add_dissipation(self, entry: dict) -> None:
        path = self.out / "dissipation.json"
        doc = json.loads(path.read_text()) if path.exists() else []
        doc = [d for d in doc if d["name"] != entry["name"]] + [entry]
        _write_json(path, sorted(doc, key=lambda d: d["name"]))

    def write_manifest(self) -> None:
        artifacts = {}
        for path in sorted(self.out.rglob("*")):
            if path.is_file() and path.name != "manifest.json":
                artifacts[str(path.relative_to(self.out))] = _file_hash(path)
        _write_json(self.out / "manifest.json", {
            "config": self.config.to_doc(),
            "config_hash": self.config.config_hash(),
            "data_hash": self.data_hash(),
            "artifacts": artifacts,
        })

    # -- label gate ----------------------------------------------------------------

    def gate_counters(self) -> dict[str, tuple[int, int]]:
        bench = self._benchmark
        if bench is None:
            return {}
        return {f"{lang}.{split}": (c.log.granted, c.log.denied)
                for lang, splits in bench.corpora.items()
                for split, c in splits.items()}

    def check_gate(self, allowed_grants: set[str]) -> int:
        """Print counters; nonzero exit if labels leaked outside allowed splits."""
        violations = []
        for key, (granted, denied) in sorted(self.gate_counters().items()):
            print(f"label-gate {key}: granted={granted} denied={denied}")
            if granted and key not in allowed_grants:
                violations.append(key)
        if violations:
            print(f"label-gate VIOLATION on: {', '.join(violations)}")
            return EXIT_LABEL_GATE
        return EXIT_OK


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")


# ---- shared builders -----------------------------------------------------------

def _edge_config(ctx: RunContext, family: str, lang_scope: str) -> models.ArchConfig:
    bench = ctx.benchmark()
    vocab = ctx.vocab(lang_scope)
    return models.edge_config(
        family, vocab_size=len(vocab), sentence_labels=bench.grammar.intents,
        word_labels=bench.grammar.tag_set(),
        head=ctx.config.task, dropout=ctx.config.dropout)


def _pivot_config(ctx: RunContext, size: str) -> models.ArchConfig:
    bench = ctx.benchmark()
    shared = ctx.vocab("shared")
    return models.pivot_config(
        vocab_size=len(shared), sentence_labels=bench.grammar.intents,
        word_labels=bench.grammar.tag_set(), size=size, dropout=ctx.config.dropout)


def _supervised_settings(cfg: RunConfig, name: str) -> tr.TrainSettings:
    return tr.TrainSettings(epochs=cfg.epochs, batch_size=cfg.batch_size,
                            lr=cfg.lr, seed=_seed32(cfg.seed, name),
                            early_stop=6)


def _kd_settings(cfg: RunConfig, name: str) -> tr.TrainSettings:
    return tr.TrainSettings(epochs=cfg.kd_epochs, batch_size=cfg.batch_size,
                            lr=cfg.lr, seed=_seed32(cfg.seed, name),
                            early_stop=5)


def _eval_scores(ctx: RunContext, model: models.EncoderModel,
                 vocab_by_lang, langs) -> dict[str, float]:
    bench = ctx.benchmark()
    scores = {}
    for lang in langs:
        gold = bench.corpus(lang, "test")
        vocab = vocab_by_lang(lang)
        preds = models.predict(model, vocab, gold.unlabeled_view(), ctx.config.task)
        scores[lang] = ev.score(preds, gold)
    return scores


def _source_model_path(ctx: RunContext, arch: str) -> Path:
    return ctx.model_dir / f"source-{arch}-{ctx.config.task}.json"


def _pivot_base_path(ctx: RunContext, size: str) -> Path:
    return ctx.model_dir / f"pivot-{size}-pretrained.json"


def _kd1_path(ctx: RunContext, arch: str, size: str, balanced: bool) -> Path:
    tag = "-balanced" if balanced else ""
    return ctx.model_dir / f"pivot-{size}-kd1-{arch}-{ctx.config.task}{tag}.json"


def _pretrain_corpora(ctx: RunContext) -> list[sl.Corpus]:
    """Masked-token pretraining pool: monolingual text from every language,
    bilingual pair documents (a sentence concatenated with its translation),
    and code-switched renderings. The mixed documents force the masked-token
    objective to read cross-language context, which is what gives the small
    pivot the cross-lingual alignment a web-scale multilingual encoder brings
    off the shelf. All of it is unlabeled text."""
    bench = ctx.benchmark()
    corpora = [bench.corpus(lang, split).unlabeled_view()
               for lang in bench.corpora
               for split in ("train_annotated", "train_unannotated", "validation")]
    src = bench.source_lang
    for split in ("train_annotated", "train_unannotated"):
        src_view = bench.corpus(src, split).unlabeled_view()
        for lang in bench.target_langs:
            translated = sl.translate(src_view, bench.transforms, lang)
            rows = [sl.Example(id=f"{a.id}+{lang}", lang="pair",
                               words=a.words + b.words)
                    for a, b in zip(src_view._rows, translated._rows)]
            corpora.append(sl.Corpus(rows, lang="pair", split=split,
                                     labeled=False))
        for matrix in bench.transforms.langs:
            corpora.append(sl.code_switch(src_view, bench.transforms,
                                          seed=_seed32(ctx.config.seed, "cs", split),
                                          matrix_lang=matrix))
    return corpora


def _ensure_pivot_base(ctx: RunContext, size: str) -> models.EncoderModel:
    path = _pivot_base_path(ctx, size)
    if path.exists():
        return models.load_model(path)
    shared = ctx.vocab("shared")
    corpora = _pretrain_corpora(ctx)
    config = _pivot_config(ctx, size)
    log.info("pretraining pivot (%s, %d steps)", size, ctx.config.pivot_steps)
    model, losses = models.pivot_pretrain(
        config, corpora, steps=ctx.config.pivot_steps,
        seed=_seed32(ctx.config.seed, "pivot", size), vocab=shared,
        batch_size=ctx.config.batch_size, lr=ctx.config.pivot_lr)
    ctx.model_dir.mkdir(parents=True, exist_ok=True)
    models.save_model(model, path)
    _write_json(ctx.log_dir / f"pivot-{size}-pretrain.json",
                {"losses": [round(v, 6) for v in losses]})
    return models.load_model(path)


def _pipeline_data(ctx: RunContext) -> ds.PipelineData:
    bench = ctx.benchmark()
    return ds.PipelineData(
        src_train=bench.corpus(bench.source_lang, "train_unannotated").unlabeled_view(),
        src_val=bench.corpus(bench.source_lang, "validation").unlabeled_view(),
        tgt_train={lang: bench.corpus(lang, "train_unannotated").unlabeled_view()
                   for lang in bench.target_langs},
        tgt_val={lang: bench.corpus(lang, "validation").unlabeled_view()
                 for lang in bench.target_langs})


def _run_kd1(ctx: RunContext, arch: str, size: str, balanced: bool) -> models.EncoderModel:
    path = _kd1_path(ctx, arch, size, balanced)
    if path.exists():
        return models.load_model(path)
    cfg = ctx.config
    bench = ctx.benchmark()
    source = models.load_model(_source_model_path(ctx, arch))
    pivot_base = _ensure_pivot_base(ctx, size)
    data = _pipeline_data(ctx)
    aux_corpus = aux_cache = None
    if balanced:
        src_vocab = ctx.vocab(bench.source_lang)
        src_cache = ds.TeacherCache.build(source, src_vocab, data.src_train, cfg.task)
        translated = [sl.translate(data.src_train, bench.transforms, lang)
                      for lang in bench.target_langs]
        rows = [row for corpus in translated for row in corpus._rows]
        aux_corpus = sl.Corpus(rows, lang="multi", split="train_unannotated",
                               labeled=False)
        aux_cache = src_cache
    pivot = pivot_base.clone()
    result = ds.distill(ds.DistillJob(
        teacher=source, teacher_vocab=ctx.vocab(bench.source_lang),
        student=pivot, student_vocab=ctx.vocab("shared"),
        corpus=data.src_train, val_corpus=data.src_val, task=cfg.task,
        settings=_kd_settings(cfg, f"kd1-{arch}-{size}-{balanced}"),
        aux_corpus=aux_corpus, aux_cache=aux_cache, name=f"kd1-{arch}"))
    models.save_model(result.student, path)
    tr.write_log(result.fit.log, ctx.log_dir / (path.stem + ".log.jsonl"))
    return models.load_model(path)


def _run_kd2(ctx: RunContext, pivot: models.EncoderModel, lang: str,
             target_arch: str, method: str, size: str) -> models.EncoderModel:
    cfg = ctx.config
    name = f"target-{method}-{cfg.arch}-to-{target_arch}-{lang}-{cfg.task}-{size}"
    path = ctx.model_dir / f"{name}.json"
    if path.exists():
        return models.load_model(path)
    bench = ctx.benchmark()
    data = _pipeline_data(ctx)
    target_cfg = _edge_config(ctx, target_arch, lang)
    student = models.build(
        target_cfg, seed=_seed32(cfg.seed, "kd2", method, cfg.arch, target_arch, lang),
        vocab_hash=ctx.vocab(lang).content_hash())
    aux = None
    if method == "augmented":
        aux = sl.paraphrase(data.tgt_train[lang], bench.grammar, bench.transforms,
                            seed=_seed32(cfg.seed, "para", lang))
    result = ds.distill(ds.DistillJob(
        teacher=pivot, teacher_vocab=ctx.vocab("shared"),
        student=student, student_vocab=ctx.vocab(lang),
        corpus=data.tgt_train[lang], val_corpus=data.tgt_val[lang], task=cfg.task,
        settings=_kd_settings(cfg, f"kd2-{method}-{cfg.arch}-{target_arch}-{lang}"),
        aux_corpus=aux, name=name))
    models.save_model(result.student, path)
    tr.write_log(result.fit.log, ctx.log_dir / (name + ".log.jsonl"))
    return models.load_model(path)


def _tests_allowed(ctx: RunContext) -> set[str]:
    bench = ctx.benchmark()
    return {f"{lang}.test" for lang in bench.corpora}


# ---- commands ---------------------------------------------------------------------

def cmd_gen_data(config: RunConfig) -> int:
    ctx = RunContext(config)
    if ctx.data_ready():
        print(f"data already generated under {ctx.data_dir} (matching hash)")
        ctx.benchmark()
    else:
        bench = ctx.generate_data()
        counts = {f"{lang}.{split}": len(bench.corpus(lang, split))
                  for lang in bench.corpora for split in SPLIT_FILES}
        print(f"generated {sum(counts.values())} examples across "
              f"{len(bench.corpora)} languages into {ctx.data_dir}")
    ctx.write_manifest()
    return ctx.check_gate(set())


def cmd_train_source(config: RunConfig) -> int:
    ctx = RunContext(config)
    bench = ctx.benchmark()
    cfg = ctx.config
    src = bench.source_lang
    path = _source_model_path(ctx, cfg.arch)
    vocab = ctx.vocab(src)
    if not path.exists():
        annotated = bench.corpus(src, "train_annotated")
        if len(annotated) == 0:
            raise ConfigError("annotated source split is missing or empty")
        arch_cfg = _edge_config(ctx, cfg.arch, src)
        model = models.build(arch_cfg, seed=_seed32(cfg.seed, "source", cfg.arch),
                             vocab_hash=vocab.content_hash())
        labels = (bench.grammar.intents if cfg.task == "sentence"
                  else bench.grammar.tag_set())

        def gold_rows(corpus):
            if cfg.task == "sentence":
                return [(h.id, h.words, h.intent) for h in corpus]
            return [(h.id, h.words, h.slots) for h in corpus]

        items = ds.supervised_items(vocab, gold_rows(annotated), labels,
                                    arch_cfg.needs_bos, cfg.task)
        val_items = ds.supervised_items(vocab, gold_rows(bench.corpus(src, "validation")),
                                        labels, arch_cfg.needs_bos, cfg.task)
        result = ds.supervised_fit(model, vocab, items, val_items, cfg.task,
                                   _supervised_settings(cfg, f"source-{cfg.arch}"))
        ctx.model_dir.mkdir(parents=True, exist_ok=True)
        models.save_model(model, path)
        tr.write_log(result.log,
                     ctx.log_dir / f"source-{cfg.arch}-{cfg.task}.log.jsonl")
    model = models.load_model(path)
    scores = _eval_scores(ctx, model, lambda lang: vocab, [src])
    ctx.add_row(ev.MetricsRow(model_id=f"source-{cfg.arch}", task=cfg.task,
                              scores=scores, source_lang=src,
                              category="reference", extra={"method": "source"}))
    print(f"source model ({cfg.arch}, {cfg.task}) {src} test score: "
          f"{scores[src]:.4f}")
    ctx.write_manifest()
    allowed = {f"{src}.train_annotated", f"{src}.validation"} | _tests_allowed(ctx)
    return ctx.check_gate(allowed)


def _pipeline_method(config: RunConfig) -> str:
    if config.augment:
        return "augmented"
    if config.balanced:
        return "balanced"
    return "2-step-kd"


def cmd_pipeline(config: RunConfig) -> int:
    ctx = RunContext(config)
    bench = ctx.benchmark()
    cfg = ctx.config
    if cfg.grid:
        return _run_grid(ctx)
    if not _source_model_path(ctx, cfg.arch).exists():
        raise ConfigError(f"source model for {cfg.arch} not found; "
                          "run train-source first")
    method = _pipeline_method(cfg)
    balanced = cfg.balanced or cfg.augment  # augmentation row stacks on balanced
    if cfg.task == "word":
        balanced = False
        if cfg.balanced:
            raise ds.DistillError("balanced distillation is not applied to the word task")
    pivot = _run_kd1(ctx, cfg.arch, cfg.pivot_size, balanced)
    shared = ctx.vocab("shared")

    stage1_scores = _eval_scores(ctx, pivot, lambda lang: shared,
                                 (bench.source_lang,) + bench.target_langs)
    stage1_id = f"pivot-{cfg.pivot_size}-kd1-{cfg.arch}" + ("-balanced" if balanced else "")
    stage1_row = ev.MetricsRow(model_id=stage1_id, task=cfg.task,
                               scores=stage1_scores, source_lang=bench.source_lang,
                               category="stage1", extra={"method": method})
    ctx.add_row(stage1_row)

    target_arch = cfg.resolved_target_arch
    scores: dict[str, float] = {}
    for lang in bench.target_langs:
        target = _run_kd2(ctx, pivot, lang, target_arch, method, cfg.pivot_size)
        scores[lang] = _eval_scores(ctx, target, lambda l: ctx.vocab(l), [lang])[lang]
    row_id = f"{method}-{cfg.arch}"
    if target_arch != cfg.arch:
        row_id += f"-to-{target_arch}"
    if cfg.pivot_size != "base":
        row_id += f"-pivot-{cfg.pivot_size}"
    row = ev.MetricsRow(model_id=row_id, task=cfg.task, scores=scores,
                        source_lang=bench.source_lang, category="ours",
                        extra={"method": method, "pivot_size": cfg.pivot_size,
                               "target_arch": target_arch})
    ctx.add_row(row)
    ctx.add_dissipation({
        "name": f"{cfg.arch}-pivot-{cfg.pivot_size}" + ("-balanced" if balanced else ""),
        "stage1": stage1_id, "stage2": row_id,
        "deltas": {k: round(v, 6) for k, v in
                   ev.dissipation_delta(stage1_row, _with_source(row, stage1_scores,
                                                                 bench.source_lang)).items()}})
    print(f"{row_id}: target avg = {row.target_average:.4f}")
    ctx.write_manifest()
    return ctx.check_gate(_tests_allowed(ctx))


def _with_source(row: ev.MetricsRow, stage1_scores: dict, src: str) -> ev.MetricsRow:
    # stage-2 models exist per target language; carry the stage-1 source score
    # so per-language deltas line up on the same language set
    scores = dict(row.scores)
    scores[src] = stage1_scores[src]
    return ev.MetricsRow(model_id=row.model_id, task=row.task, scores=scores,
                         source_lang=row.source_lang, category=row.category,
                         extra=row.extra)


def _run_grid(ctx: RunContext) -> int:
    cfg = ctx.config
    bench = ctx.benchmark()
    grid = ctx.load_grid(cfg.task)
    for src_arch in ev.GRID_ARCHS:
        if not _source_model_path(ctx, src_arch).exists():
            raise ConfigError(f"source model for {src_arch} not found; "
                              "run train-source for every architecture first")
    for src_arch in ev.GRID_ARCHS:
        source = models.load_model(_source_model_path(ctx, src_arch))
        src_vocab = ctx.vocab(bench.source_lang)
        own = _eval_scores(ctx, source, lambda lang: src_vocab,
                           [bench.source_lang])[bench.source_lang]
        pivot = _run_kd1(ctx, src_arch, cfg.pivot_size, balanced=False)
        for tgt_arch in ev.GRID_ARCHS:
            per_lang = {}
            for lang in bench.target_langs:
                grid_cfg = dataclasses.replace(cfg, arch=src_arch, target_arch=tgt_arch,
                                               balanced=False, augment=False)
                sub_ctx = RunContext(grid_cfg)
                sub_ctx._benchmark = bench
                sub_ctx._vocabs = ctx._vocabs
                target = _run_kd2(sub_ctx, pivot, lang, tgt_arch, "2-step-kd",
                                  cfg.pivot_size)
                per_lang[lang] = _eval_scores(sub_ctx, target,
                                              lambda l: ctx.vocab(l), [lang])[lang]
            value = float(np.mean(list(per_lang.values())))
            grid.set_cell(src_arch, tgt_arch, value, own)
            print(f"grid {src_arch} -> {tgt_arch}: {value:.4f}")
    ctx.save_grid(grid)
    ctx.write_manifest()
    return ctx.check_gate(_tests_allowed(ctx))


def cmd_baseline(config: RunConfig, which: str) -> int:
    ctx = RunContext(config)
    bench = ctx.benchmark()
    cfg = ctx.config
    if not _source_model_path(ctx, cfg.arch).exists():
        raise ConfigError(f"source model for {cfg.arch} not found; "
                          "run train-source first")
    source = models.load_model(_source_model_path(ctx, cfg.arch))
    src_vocab = ctx.vocab(bench.source_lang)
    scores: dict[str, float] = {}
    extra = {"method": which}
    if which == "translate-test":
        for lang in bench.target_langs:
            gold = bench.corpus(lang, "test")
            result = ds.baseline_translate_test(source, src_vocab,
                                                gold.unlabeled_view(),
                                                bench.transforms, cfg.task)
            scores[lang] = ev.score(result.predictions, gold)
        extra["inference_passes_per_example"] = 2
    elif which == "translate-train-pseudo":
        data = _pipeline_data(ctx)
        for lang in bench.target_langs:
            name = f"ttp-{cfg.arch}-{lang}-{cfg.task}"
            path = ctx.model_dir / f"{name}.json"
            if path.exists():
                model = models.load_model(path)
            else:
                target_cfg = _edge_config(ctx, cfg.arch, lang)
                model, result = ds.baseline_translate_train_pseudo(
                    source, src_vocab, data.src_train, lang, target_cfg,
                    ctx.vocab(lang), bench.transforms, cfg.task,
                    _supervised_settings(cfg, f"ttp-{lang}"), seed=cfg.seed)
                models.save_model(model, path)
                tr.write_log(result.log, ctx.log_dir / (name + ".log.jsonl"))
            scores[lang] = _eval_scores(ctx, model, lambda l: ctx.vocab(l), [lang])[lang]
    else:
        raise ConfigError(f"unknown baseline {which!r}")
    row = ev.MetricsRow(model_id=f"{which}-{cfg.arch}", task=cfg.task,
                        scores=scores, source_lang=bench.source_lang,
                        category="baseline", extra=extra)
    ctx.add_row(row)
    print(f"{which}-{cfg.arch}: target avg = {row.target_average:.4f}")
    ctx.write_manifest()
    return ctx.check_gate(_tests_allowed(ctx))


def cmd_reference(config: RunConfig) -> int:
    ctx = RunContext(config)
    bench = ctx.benchmark()
    cfg = ctx.config
    src = bench.source_lang
    pivot_base = _ensure_pivot_base(ctx, cfg.pivot_size)
    data = _pipeline_data(ctx)
    target_arch = cfg.resolved_target_arch
    target_configs = {lang: _edge_config(ctx, target_arch, lang)
                      for lang in bench.target_langs}
    target_vocabs = {lang: ctx.vocab(lang) for lang in bench.target_langs}
    gold_paths = {lang: ctx.model_dir /
                  f"gold-{target_arch}-{lang}-{cfg.task}-{cfg.pivot_size}.json"
                  for lang in bench.target_langs}
    if not all(p.exists() for p in gold_paths.values()):
        result = ds.reference_gold_supervised(
            pivot_base, ctx.vocab("shared"),
            src_annotated=bench.corpus(src, "train_annotated"),
            src_val=bench.corpus(src, "validation"),
            target_configs=target_configs, target_vocabs=target_vocabs,
            data=data, task=cfg.task,
            settings_stage1=_supervised_settings(cfg, "gold-stage1"),
            settings_kd2=_kd_settings(cfg, "gold-kd2"), seed=cfg.seed)
        for lang, model in result.targets.items():
            models.save_model(model, gold_paths[lang])
    scores = {}
    for lang in bench.target_langs:
        model = models.load_model(gold_paths[lang])
        scores[lang] = _eval_scores(ctx, model, lambda l: ctx.vocab(l), [lang])[lang]
    row = ev.MetricsRow(model_id=f"gold-supervised-{target_arch}", task=cfg.task,
                        scores=scores, source_lang=src, category="reference",
                        extra={"method": "gold-supervised"})
    ctx.add_row(row)
    print(f"gold-supervised-{target_arch}: target avg = {row.target_average:.4f}")
    ctx.write_manifest()
    allowed = {f"{src}.train_annotated", f"{src}.validation"} | _tests_allowed(ctx)
    return ctx.check_gate(allowed)


def cmd_eval(config: RunConfig, model_path: str) -> int:
    ctx = RunContext(config)
    bench = ctx.benchmark()
    model = models.load_model(model_path)
    shared = ctx.vocab("shared")
    scope = None
    for candidate in list(bench.corpora) + ["shared"]:
        if ctx.vocab(candidate).content_hash() == model.vocab_hash:
            scope = candidate
            break
    if scope is None:
        raise ConfigError("model vocabulary does not match any benchmark vocabulary")
    vocab = ctx.vocab(scope)
    langs = list(bench.corpora) if scope == "shared" else [scope]
    scores = _eval_scores(ctx, model, lambda lang: vocab, langs)
    name = Path(model_path).stem
    ctx.add_row(ev.MetricsRow(model_id=f"eval-{name}", task=ctx.config.task,
                              scores=scores, source_lang=bench.source_lang,
                              category="stage1", extra={"method": "eval"}))
    for lang, value in sorted(scores.items()):
        print(f"{name} {lang}: {value:.4f}")
    ctx.write_manifest()
    return ctx.check_gate(_tests_allowed(ctx))


def cmd_report(config: RunConfig) -> int:
    ctx = RunContext(config)
    rows_doc = ctx.load_rows()
    if not rows_doc:
        raise ConfigError("no metrics rows in the run directory; nothing to report")
    rows = [ev.MetricsRow.from_doc(doc) for doc in rows_doc.values()]
    grids = []
    grids_path = ctx.out / "grids.json"
    if grids_path.exists():
        doc = json.loads(grids_path.read_text())
        grids = [ev.TransferGrid.from_doc(g) for _, g in sorted(doc.items())]
    dissipation = []
    diss_path = ctx.out / "dissipation.json"
    if diss_path.exists():
        dissipation = json.loads(diss_path.read_text())
    report = ev.build_report(rows, grids=grids, dissipation=dissipation,
                             header={"config_hash": ctx.config.config_hash(),
                                     "data_hash": ctx.data_hash(),
                                     "seed": ctx.config.seed,
                                     "task": ctx.config.task})
    (ctx.out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (ctx.out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    for grid in grids:
        (ctx.out / f"grid-{grid.task}.csv").write_text(grid.to_csv(), encoding="utf-8")
    print(f"report written to {ctx.out / 'report.md'} "
          f"(hash {report.content_hash()[:12]})")
    ctx.write_manifest()
    return EXIT_OK


# ---- argument parsing ----------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a RunConfig JSON document")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--task", choices=["sentence", "word"])
    parser.add_argument("--arch", choices=list(models.FAMILIES))
    parser.add_argument("--target-arch", dest="target_arch",
                        choices=list(models.FAMILIES))
    parser.add_argument("--balanced", action="store_true", default=None)
    parser.add_argument("--augment", action="store_true", default=None)
    parser.add_argument("--grid", action="store_true", default=None)
    parser.add_argument("--pivot-size", dest="pivot_size",
                        choices=["small", "base", "large"])
    parser.add_argument("--pivot-steps", dest="pivot_steps", type=int)
    parser.add_argument("--data-config", dest="data_config")
    parser.add_argument("--no-reorder", dest="reorder", action="store_false",
                        default=None)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--kd-epochs", dest="kd_epochs", type=int)
    parser.add_argument("--lr")


def build_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    for key in ("out", "seed", "task", "arch", "target_arch", "balanced",
                "augment", "grid", "pivot_size", "pivot_steps", "data_config",
                "reorder", "epochs", "kd_epochs", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if "lr" in doc and doc["lr"] != "auto":
        try:
            doc["lr"] = float(doc["lr"])
        except (TypeError, ValueError):
            raise ConfigError(f"config field 'lr' must be a number or 'auto', "
                              f"got {doc['lr']!r}") from None
    return RunConfig.from_doc(doc)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(
        prog="xlkd",
        description="Label-free cross-lingual transfer via two-step "
                    "knowledge distillation on a synthetic benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-source", "pipeline", "reference", "report"):
        p = sub.add_parser(name)
        _add_common(p)
    p = sub.add_parser("baseline")
    p.add_argument("which", choices=["translate-test", "translate-train-pseudo"])
    _add_common(p)
    p = sub.add_parser("eval")
    p.add_argument("model_path")
    _add_common(p)
    args = parser.parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(config)
        if args.command == "train-source":
            return cmd_train_source(config)
        if args.command == "pipeline":
            return cmd_pipeline(config)
        if args.command == "baseline":
            return cmd_baseline(config, args.which)
        if args.command == "reference":
            return cmd_reference(config)
        if args.command == "eval":
            return cmd_eval(config, args.model_path)
        if args.command == "report":
            return cmd_report(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, sl.GrammarError, ds.DistillError, ev.EvalError,
            models.ModelError, bpe.BpeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tr.TrainingDivergedError, tr.NonFiniteGradientError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except sl.LabelAccessError as exc:
        print(f"label-gate error: {exc}", file=sys.stderr)
        return EXIT_LABEL_GATE


if __name__ == "__main__":
    sys.exit(main())
