"""Metrics (intent accuracy, span-level slot F1), per-language rows, transfer
grids, dissipation deltas, and report rendering.

F1 is micro-averaged over exact-match spans; BIO violations are repaired
before span extraction (an I- tag without a matching B- becomes B-). Row
averages cover target languages only.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import synthlang as sl
from .models import PredictionSet

REPORT_DECISIONS = {
    "slot_f1": "micro-averaged over exact-match spans",
    "bio_repair": "I- without a matching B- is repaired to B- before span extraction",
}


class EvalError(ValueError):
    pass


# ---- core metrics -----------------------------------------------------------

def accuracy(predictions: PredictionSet, gold: sl.Corpus) -> float:
    """Fraction of examples whose argmax label (lowest index on ties) matches
    the gold intent; evaluation reads labels through the labeled view."""
    if predictions.ids != gold.ids:
        raise EvalError("accuracy: prediction ids do not match the corpus")
    decisions = predictions.argmax()
    hits = 0
    for handle, decided in zip(gold, decisions):
        hits += int(decided == handle.intent)
    return hits / len(decisions) if decisions else 0.0


def repair_bio(tags: Sequence[str]) -> list[str]:
    fixed = []
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and prev not in (f"B-{tag[2:]}", tag):
            tag = "B-" + tag[2:]
        fixed.append(tag)
        prev = tag
    return fixed


def extract_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Maximal (start, end, type) units, ends inclusive, after BIO repair."""
    spans = set()
    start = None
    kind = None
    for i, tag in enumerate(repair_bio(tags)):
        if tag.startswith("B-"):
            if start is not None:
                spans.add((start, i - 1, kind))
            start, kind = i, tag[2:]
        elif tag.startswith("I-"):
            continue
        else:
            if start is not None:
                spans.add((start, i - 1, kind))
            start, kind = None, None
    if start is not None:
        spans.add((start, len(tags) - 1, kind))
    return spans


def span_f1(predicted: Sequence[Sequence[str]],
            gold: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro precision/recall/F1 over exact-match spans across the corpus."""
    if len(predicted) != len(gold):
        raise EvalError("span_f1: corpus sizes differ")
    tp = n_pred = n_gold = 0
    for p_tags, g_tags in zip(predicted, gold):
        if len(p_tags) != len(g_tags):
            raise EvalError("span_f1: tag sequences differ in length")
        p_spans = extract_spans(p_tags)
        g_spans = extract_spans(g_tags)
        tp += len(p_spans & g_spans)
        n_pred += len(p_spans)
        n_gold += len(g_spans)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return precision, recall, f1


def tagging_f1(predictions: PredictionSet, gold: sl.Corpus) -> float:
    if predictions.ids != gold.ids:
        raise EvalError("tagging_f1: prediction ids do not match the corpus")
    predicted = predictions.argmax()
    gold_tags = [list(handle.slots) for handle in gold]
    return span_f1(predicted, gold_tags)[2]


def score(predictions: PredictionSet, gold: sl.Corpus) -> float:
    return accuracy(predictions, gold) if predictions.task == "sentence" \
        else tagging_f1(predictions, gold)


# ---- rows, grids, deltas -------------------------------------------------------

@dataclass
class MetricsRow:
    model_id: str
    task: str
    scores: dict[str, float]  # per-language
    source_lang: str
    category: str = "ours"  # reference | baseline | ours | stage1
    extra: dict = field(default_factory=dict)

    @property
    def source_score(self) -> float | None:
        return self.scores.get(self.source_lang)

    @property
    def target_average(self) -> float | None:
        targets = [v for lang, v in self.scores.items() if lang != self.source_lang]
        return float(np.mean(targets)) if targets else None

    def to_doc(self) -> dict:
        return {"model_id": self.model_id, "task": self.task,
                "scores": {k: round(v, 6) for k, v in sorted(self.scores.items())},
                "source_lang": self.source_lang, "category": self.category,
                "target_average": None if self.target_average is None
                else round(self.target_average, 6),
                "extra": self.extra}

    @classmethod
    def from_doc(cls, doc: dict) -> "MetricsRow":
        return cls(model_id=doc["model_id"], task=doc["task"],
                   scores=dict(doc["scores"]), source_lang=doc["source_lang"],
                   category=doc.get("category", "ours"),
                   extra=doc.get("extra", {}))


def dissipation_delta(stage1: MetricsRow, stage2: MetricsRow) -> dict[str, float]:
    """Stage-2 minus stage-1, per language and on the target-language average."""
    if set(stage1.scores) != set(stage2.scores):
        raise EvalError("dissipation_delta: language sets differ")
    deltas = {lang: stage2.scores[lang] - stage1.scores[lang]
              for lang in stage1.scores}
    deltas["avg"] = stage2.target_average - stage1.target_average
    return deltas


GRID_ARCHS = ("transformer", "bilstm", "cnn")


@dataclass
class TransferGrid:
    task: str
    archs: tuple[str, ...] = GRID_ARCHS
    scores: list[list[float | None]] = field(default_factory=lambda: [[None] * 3 for _ in range(3)])
    drops: list[list[float | None]] = field(default_factory=lambda: [[None] * 3 for _ in range(3)])

    def set_cell(self, source_arch: str, target_arch: str, value: float,
                 source_own_score: float) -> None:
        i = self.archs.index(source_arch)
        j = self.archs.index(target_arch)
        self.scores[i][j] = value
        self.drops[i][j] = value - source_own_score

    def cell(self, source_arch: str, target_arch: str) -> float | None:
        return self.scores[self.archs.index(source_arch)][self.archs.index(target_arch)]

    def complete(self) -> bool:
        return all(v is not None for row in self.scores for v in row)

    def to_doc(self) -> dict:
        return {"task": self.task, "archs": list(self.archs),
                "scores": self.scores, "drops": self.drops}

    @classmethod
    def from_doc(cls, doc) -> "TransferGrid":
        return cls(task=doc["task"], archs=tuple(doc["archs"]),
                   scores=doc["scores"], drops=doc["drops"])

    def to_csv(self, matrix: str = "scores") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source\\target"] + list(self.archs))
        grid = self.scores if matrix == "scores" else self.drops
        for arch, row in zip(self.archs, grid):
            writer.writerow([arch] + [("" if v is None else f"{v:.4f}") for v in row])
        return buf.getvalue()


# ---- report -----------------------------------------------------------------------

_CATEGORY_ORDER = {"reference": 0, "baseline": 1, "ours": 2, "stage1": 3}
_ROW_ORDER = {  # fixed rendering order inside a category
    "source": 0, "gold-supervised": 1,
    "translate-test": 0, "translate-train-pseudo": 1,
    "2-step-kd": 0, "balanced": 1, "augmented": 2,
}


def _row_sort_key(row: MetricsRow):
    base = row.extra.get("method", row.model_id)
    return (_CATEGORY_ORDER.get(row.category, 9),
            _ROW_ORDER.get(base, 9), row.model_id)


@dataclass
class ExperimentReport:
    rows: list[MetricsRow]
    grids: list[TransferGrid] = field(default_factory=list)
    dissipation: list[dict] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[MetricsRow]:
        return sorted(self.rows, key=_row_sort_key)

    def to_doc(self) -> dict:
        return {"header": {**self.header, "decisions": REPORT_DECISIONS},
                "rows": [r.to_doc() for r in self.sorted_rows()],
                "grids": [g.to_doc() for g in self.grids],
                "dissipation": self.dissipation}

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, indent=1) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_markdown(self) -> str:
        out = ["# Experiment report", ""]
        for key, value in sorted(self.header.items()):
            out.append(f"- {key}: {value}")
        for key, value in REPORT_DECISIONS.items():
            out.append(f"- {key}: {value}")
        out.append("")
        rows = self.sorted_rows()
        if rows:
            langs = sorted({lang for r in rows for lang in r.scores})
            src = rows[0].source_lang
            langs = [src] + [l for l in langs if l != src]
            out.append("| category | model | " + " | ".join(langs) + " | tgt avg |")
            out.append("|" + "---|" * (len(langs) + 3))
            for r in rows:
                cells = [f"{r.scores[l]:.3f}" if l in r.scores else "-" for l in langs]
                avg = "-" if r.target_average is None else f"{r.target_average:.3f}"
                out.append(f"| {r.category} | {r.model_id} | " + " | ".join(cells)
                           + f" | {avg} |")
            out.append("")
        for grid in self.grids:
            if not any(v is not None for row in grid.scores for v in row):
                continue
            out.append(f"## Cross-architecture transfer ({grid.task})")
            out.append("")
            out.append("| source \\ target | " + " | ".join(grid.archs) + " |")
            out.append("|" + "---|" * (len(grid.archs) + 1))
            for arch, row in zip(grid.archs, grid.scores):
                cells = ["-" if v is None else f"{v:.3f}" for v in row]
                out.append(f"| {arch} | " + " | ".join(cells) + " |")
            out.append("")
            out.append("Drop from the source model's own score:")
            out.append("")
            out.append("| source \\ target | " + " | ".join(grid.archs) + " |")
            out.append("|" + "---|" * (len(grid.archs) + 1))
            for arch, row in zip(grid.archs, grid.drops):
                cells = ["-" if v is None else f"{v:+.3f}" for v in row]
                out.append(f"| {arch} | " + " | ".join(cells) + " |")
            out.append("")
        if self.dissipation:
            out.append("## Stage-2 minus stage-1 (dissipation)")
            out.append("")
            langs = sorted({k for d in self.dissipation for k in d["deltas"]
                            if k != "avg"})
            out.append("| pair | " + " | ".join(langs) + " | avg Δ |")
            out.append("|" + "---|" * (len(langs) + 2))
            for d in self.dissipation:
                cells = [f"{d['deltas'][l]:+.3f}" if l in d["deltas"] else "-"
                         for l in langs]
                out.append(f"| {d['name']} | " + " | ".join(cells)
                           + f" | {d['deltas']['avg']:+.3f} |")
            out.append("")
        return "\n".join(out) + "\n"


def build_report(rows: Sequence[MetricsRow], grids: Sequence[TransferGrid] = (),
                 dissipation: Sequence[Mapping] = (),
                 header: Mapping | None = None) -> ExperimentReport:
    return ExperimentReport(rows=list(rows), grids=list(grids),
                            dissipation=[dict(d) for d in dissipation],
                            header=dict(header or {}))
