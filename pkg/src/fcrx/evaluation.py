"""Report-quality evaluation: BLEU, FC-score concordance, before/after
improvement, and seeded dataset splits.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import numpy as np

from .atlas import RegionMap
from .config import ScoringConfig
from .lexicon import Lexicon
from .model import ModelCheckpoint
from .pipeline import (
    OfflineReformer, Rewriter, check_report, correct_report, fc_score_against_ground_truth,
    located_patterns,
)

T = TypeVar("T")

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercased words and single punctuation marks."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Sentence-level BLEU: clipped n-gram precisions, geometric mean, brevity penalty.

    For n >= 2 a zero match count is smoothed to (0 + 1) / (total + 1).
    """
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c.values())
        matches = sum(min(k, r[g]) for g, k in c.items())
        if matches == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matches / total
        log_sum += math.log(p)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_sum / max_n)


class ExternalMetricUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class ExternalMetric:
    """Placeholder for scorers that need an external pretrained model."""

    name: str

    def __call__(self, candidate: str, reference: str) -> float:
        raise ExternalMetricUnavailable(f"{self.name}: external model not configured")


METRICS: dict[str, Callable[[str, str], float]] = {
    "bleu": bleu,
    "chexbert": ExternalMetric("chexbert"),
    "radgraph_f1": ExternalMetric("radgraph_f1"),
}


# --- splits ------------------------------------------------------------------------

@dataclass
class Split:
    train: list
    val: list
    test: list


def split_dataset(items: Sequence[T], ratios: Sequence[float] = (0.7, 0.1, 0.2),
                  folds: Optional[int] = None, fold: int = 0, seed: int = 0) -> Split:
    """Seeded partition into train/val/test.

    With ``folds`` = K, the test set is chunk ``fold`` of K near-equal chunks
    of the shuffled items, so test sets of different folds are disjoint; the
    rest is divided between train and val in the train:val ratio.
    """
    items = list(items)
    n = len(items)
    order = np.random.default_rng([seed, 5]).permutation(n)
    r_train, r_val, r_test = ratios
    if folds is None:
        n_test = int(round(n * r_test))
        n_val = int(round(n * r_val))
        test_idx = order[:n_test]
        val_idx = order[n_test:n_test + n_val]
        train_idx = order[n_test + n_val:]
    else:
        if not 0 <= fold < folds:
            raise ValueError(f"fold must lie in [0, {folds})")
        chunks = np.array_split(order, folds)
        test_idx = chunks[fold]
        rest = np.concatenate([c for i, c in enumerate(chunks) if i != fold])
        n_val = int(round(len(rest) * r_val / (r_train + r_val))) if r_train + r_val else 0
        val_idx, train_idx = rest[:n_val], rest[n_val:]
    pick = lambda idx: [items[i] for i in sorted(idx)]
    return Split(pick(train_idx), pick(val_idx), pick(test_idx))


# --- assessment ------------------------------------------------------------------------

@dataclass
class CorpusRecord:
    image_id: str
    automated: str
    ground_truth: str


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(CorpusRecord(str(rec["image_id"]), rec["automated_report"],
                                    rec["ground_truth_report"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
    return out


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class EvalRun:
    corpus_id: str
    rows: list[dict] = field(default_factory=list)
    metrics: tuple[str, ...] = ("bleu",)

    def mean(self, column: str) -> float:
        return _mean(r[column] for r in self.rows)

    @property
    def concordance(self) -> float:
        """Mean |FC(A,P) - FC(A,G)| over reports where both are defined."""
        return _mean(abs(r["fc_ap"] - r["fc_ag"]) for r in self.rows
                     if r["fc_ap"] is not None and r["fc_ag"] is not None)

    @property
    def improvement(self) -> float:
        """Mean over metrics of (mean m(C,G) - mean m(A,G)) / mean m(A,G)."""
        gains = []
        for m in self.metrics:
            a, c = self.mean(f"{m}_ag"), self.mean(f"{m}_cg")
            if a > 0:
                gains.append((c - a) / a)
        return float(np.mean(gains)) if gains else float("nan")

    def summary(self) -> dict:
        out = {"corpus": self.corpus_id, "reports": len(self.rows)}
        for m in self.metrics:
            out[f"{m}_ag"] = self.mean(f"{m}_ag")
            out[f"{m}_cg"] = self.mean(f"{m}_cg")
        for col in ("fc_ap", "fc_ag", "fc_cp"):
            out[col] = self.mean(col)
        out["fc_undefined_ap"] = sum(r["fc_ap"] is None for r in self.rows)
        out["fc_undefined_ag"] = sum(r["fc_ag"] is None for r in self.rows)
        out["concordance"] = self.concordance
        out["improvement"] = self.improvement
        return out

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"reports_csv": out / "assessment.csv", "summary_json": out / "summary.json"}
        columns = list(self.rows[0]) if self.rows else ["image_id"]
        with open(paths["reports_csv"], "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: _fmt(v) for k, v in r.items()})
        paths["summary_json"].write_text(json.dumps(_rounded(self.summary()), indent=2,
                                                    sort_keys=True) + "\n")
        return paths


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _rounded(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else round(v, 6))
            if isinstance(v, float) else v for k, v in d.items()}


def assess_report(rec: CorpusRecord, checkpoint: ModelCheckpoint, featurizer, lexicon: Lexicon,
                  rm: RegionMap, rewriter: Rewriter, scoring: ScoringConfig,
                  metrics: Sequence[str]) -> dict:
    report = check_report(rec.automated, rec.image_id, checkpoint, featurizer, lexicon, rm, scoring)
    corrected, diag = correct_report(rec.automated, report, rewriter)
    gt, _ = located_patterns(rec.ground_truth, rec.image_id, lexicon, rm)
    after = check_report(corrected, rec.image_id, checkpoint, featurizer, lexicon, rm, scoring)
    row = {"image_id": rec.image_id, "n_findings": len(report.records),
           "n_flagged": len(report.flagged), "fc_ap": report.fc_score,
           "fc_ag": fc_score_against_ground_truth(report.records, gt, scoring.literal_denominator),
           "fc_cp": after.fc_score}
    for m in metrics:
        fn = METRICS[m]
        row[f"{m}_ag"] = fn(rec.automated, rec.ground_truth)
        row[f"{m}_cg"] = fn(corrected, rec.ground_truth)
    row["rewriter_failures"] = diag["rewriter_failures"]
    row["corrected"] = corrected
    return row


def run_assessment(corpus: Sequence[CorpusRecord], checkpoint: ModelCheckpoint, featurizer,
                   lexicon: Lexicon, rm: RegionMap, rewriter: Optional[Rewriter] = None,
                   scoring: ScoringConfig = ScoringConfig(), metrics: Sequence[str] = ("bleu",),
                   corpus_id: str = "corpus") -> EvalRun:
    """FC(A,P), FC(A,G), FC(C,P) and metric(A,G)/metric(C,G) for every report."""
    for m in metrics:
        if m not in METRICS:
            raise ValueError(f"unknown metric {m!r}; choose from {sorted(METRICS)}")
    rewriter = rewriter or OfflineReformer()
    rows = [assess_report(r, checkpoint, featurizer, lexicon, rm, rewriter, scoring, metrics)
            for r in corpus]
    return EvalRun(corpus_id, rows, tuple(metrics))
