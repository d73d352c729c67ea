"""Report-level metrics: BLEU-n, ROUGE-L, CIDEr-D, abnormality precision/FPR, templates."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import AbnormalityPatternSet, Report, ReportRecord, clean_tokens, extract_abnormality_terms
from .errors import DataError
from .reward import _flatten, corpus_bleu, strip_markers

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


def bleu_n(candidates: Sequence, references: Sequence, n: int) -> float:
    """Corpus BLEU-n; each item is one report given as a list of sentences (token lists)."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    if len(candidates) != len(references):
        raise DataError("candidate and reference corpora differ in length")
    return corpus_bleu([(_flatten(c), _flatten(r)) for c, r in zip(candidates, references)], n)


def _lcs(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure of two token sequences (coco-caption convention, beta = 1.2)."""
    cand, ref = strip_markers(candidate), strip_markers(reference)
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(cand), lcs / len(ref)
    return ((1 + beta ** 2) * prec * rec) / (rec + beta ** 2 * prec)


def _counts(tokens: list, n_max: int = 4) -> list[Counter]:
    return [Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)) for n in range(1, n_max + 1)]


@dataclass
class CiderStats:
    """Document frequencies of n-grams over the reference corpus."""

    df: Counter
    log_n_docs: float

    @classmethod
    def from_references(cls, references: Sequence[Sequence[Sequence]]) -> "CiderStats":
        if not references:
            raise DataError("CIDEr needs a non-empty reference corpus")
        df = Counter()
        for refs in references:
            df.update({g for r in refs for order in _counts(strip_markers(r)) for g in order})
        return cls(df, math.log(float(len(references))))


def _tfidf(counts: list[Counter], stats: CiderStats):
    vecs, norms = [], []
    for order in counts:
        vec = {g: tf * (stats.log_n_docs - math.log(max(1.0, stats.df[g]))) for g, tf in order.items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def _cider_pair(cand: list, refs: list[list], stats: CiderStats) -> float:
    vc, nc = _tfidf(_counts(cand), stats)
    score = np.zeros(4)
    for ref in refs:
        vr, nr = _tfidf(_counts(ref), stats)
        delta = len(cand) - len(ref)
        for k in range(4):
            dot = sum(min(v, vr[k][g]) * vr[k][g] for g, v in vc[k].items() if g in vr[k])
            if nc[k] != 0 and nr[k] != 0:
                dot /= nc[k] * nr[k]
            else:
                dot = 0.0
            score[k] += dot * math.exp(-(delta ** 2) / (2 * CIDER_SIGMA ** 2))
    return float(np.mean(score) / len(refs) * 10.0)


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
          corpus_stats: CiderStats | None = None) -> float:
    """CIDEr-D averaged over the corpus.

    ``candidates[i]`` is one token sequence; ``references[i]`` a list of reference sequences.
    """
    stats = corpus_stats or CiderStats.from_references(references)
    if len(candidates) != len(references):
        raise DataError("candidate and reference corpora differ in length")
    scores = [_cider_pair(strip_markers(c), [strip_markers(r) for r in refs], stats)
              for c, refs in zip(candidates, references)]
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class TermCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class MetricReport:
    bleu: list[float] = field(default_factory=lambda: [0.0] * 4)
    rouge_l: float = 0.0
    cider: float = 0.0
    precision: float | None = None  # None when nothing abnormal was generated
    avg_fpr: float | None = None
    per_term: dict[str, TermCounts] = field(default_factory=dict)

    @property
    def bleu4(self) -> float:
        return self.bleu[3]

    def to_json(self) -> dict:
        return {
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "precision": self.precision,
            "avg_fpr": self.avg_fpr,
            "per_term": {k: v.to_json() for k, v in sorted(self.per_term.items())},
        }


def abnormality_scores(generated: Sequence, truth: Sequence, patterns: AbnormalityPatternSet,
                       section: str = "findings"):
    """Micro-averaged precision, macro-averaged FPR and per-term confusion counts.

    Both lists hold (image_id, sentence texts) pairs, records or reports.
    """
    gen = dict(_id_texts(generated, section))
    ref = dict(_id_texts(truth, section))
    if set(gen) != set(ref):
        missing = sorted(set(gen) ^ set(ref))[:5]
        raise DataError(f"generated and truth reports are not aligned; e.g. {missing}")
    counts = {t: TermCounts() for t in patterns.terms}
    for image_id in sorted(gen):
        g = extract_abnormality_terms(gen[image_id], patterns)
        r = extract_abnormality_terms(ref[image_id], patterns)
        for term, c in counts.items():
            if term in g and term in r:
                c.tp += 1
            elif term in g:
                c.fp += 1
            elif term in r:
                c.fn += 1
            else:
                c.tn += 1
    tp = sum(c.tp for c in counts.values())
    fp = sum(c.fp for c in counts.values())
    precision = tp / (tp + fp) if tp + fp > 0 else None
    rates = [c.fp / (c.fp + c.tn) for c in counts.values() if c.fp + c.tn > 0]
    avg_fpr = float(np.mean(rates)) if rates else None
    return precision, avg_fpr, counts


def _id_texts(reports, section):
    for r in reports:
        if isinstance(r, tuple):
            yield r
        elif isinstance(r, ReportRecord):
            yield r.image_id, list(r.findings if section == "findings" else r.impression)
        elif isinstance(r, Report):
            yield r.image_id, [s.raw_text for s in r.section(section)]
        else:
            raise TypeError(f"cannot read report texts from {type(r).__name__}")


def top_templates(generated: Sequence[Sequence[str]], k: int) -> list[tuple[str, int]]:
    """Most frequent exact sentence strings across generated reports."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tally = Counter(s for report in generated for s in report)
    return sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def evaluate_reports(generated: Sequence, truth: Sequence, patterns: AbnormalityPatternSet,
                     section: str = "findings") -> MetricReport:
    """Full metric report over id-aligned generated and ground-truth reports."""
    gen = dict(_id_texts(generated, section))
    ref = dict(_id_texts(truth, section))
    ids = sorted(gen)
    if set(ids) != set(ref):
        raise DataError("generated and truth reports are not aligned by image_id")
    cand_sents = [[clean_tokens(s) for s in gen[i]] for i in ids]
    ref_sents = [[clean_tokens(s) for s in ref[i]] for i in ids]
    cand_flat = [_flatten(c) for c in cand_sents]
    ref_flat = [_flatten(r) for r in ref_sents]
    report = MetricReport()
    report.bleu = [bleu_n(cand_sents, ref_sents, n) for n in range(1, 5)]
    report.rouge_l = float(np.mean([rouge_l(c, r) for c, r in zip(cand_flat, ref_flat)])) if ids else 0.0
    report.cider = cider(cand_flat, [[r] for r in ref_flat]) if ids else 0.0
    report.precision, report.avg_fpr, report.per_term = abnormality_scores(
        [(i, gen[i]) for i in ids], [(i, ref[i]) for i in ids], patterns, section)
    return report
