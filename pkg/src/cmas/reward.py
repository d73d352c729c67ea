"""BLEU-4 based rewards, split by sentence type."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

from .corpus import BOS, EOS, PAD, RESERVED, Label, Sentence

SMOOTH_EPS = 1e-9
_SPECIAL = {PAD, BOS, EOS, RESERVED[PAD], RESERVED[BOS], RESERVED[EOS]}


def strip_markers(tokens: Sequence[Hashable]) -> list:
    return [t for t in tokens if t not in _SPECIAL]


def _flatten(sentences) -> list:
    out = []
    for s in sentences:
        out.extend(strip_markers(s.tokens if isinstance(s, Sentence) else s))
    return out


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: Sequence[tuple[list, list]], max_n: int = 4) -> float:
    """Corpus BLEU over (candidate, reference) token-stream pairs.

    Clipped n-gram counts are pooled over pairs; an order with zero matches
    scores eps / (max(count, 1) + eps), so a stream shorter than n tokens gets
    the floor too.  Brevity penalty uses pooled lengths.
    """
    matches = [0] * max_n
    counts = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in pairs:
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, r[g]) for g, k in c.items())
            counts[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, c in zip(matches, counts):
        p = m / c if m > 0 else SMOOTH_EPS / (max(c, 1) + SMOOTH_EPS)
        log_p += math.log(p)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)


def bleu4(candidate_sentences, reference_sentences) -> float:
    """BLEU-4 of a candidate sentence list against a reference sentence list."""
    return corpus_bleu([(_flatten(candidate_sentences), _flatten(reference_sentences))], 4)


@dataclass
class RewardTrace:
    writers: list[str] = field(default_factory=list)
    f: list[float] = field(default_factory=list)
    r: list[float] = field(default_factory=list)
    R: list[float] = field(default_factory=list)
    gamma: float = 0.9
    stop_r: float = 0.0
    stop_R: float = 0.0

    def to_json(self) -> dict:
        return {"writers": self.writers, "f": self.f, "r": self.r, "R": self.R, "gamma": self.gamma}


def discount(r: Sequence[float], gamma: float) -> list[float]:
    """R[n] = r[n] + gamma * R[n+1], with R after the last entry equal to 0."""
    out = [0.0] * len(r)
    acc = 0.0
    for n in range(len(r) - 1, -1, -1):
        acc = r[n] + gamma * acc
        out[n] = acc
    return out


def _type_of(writer: str) -> Label | None:
    return {"NW": Label.NORMAL, "AW": Label.ABNORMAL}.get(writer)


def compute_rewards(episode, ground_truth: Sequence[Sentence], gamma: float = 0.9,
                    scale: float = 1.0) -> RewardTrace:
    """Incremental BLEU-4 rewards per generated sentence, discounted in generation order.

    A writer without a type (single-writer variants) is scored against the whole
    reference section.  A type absent from the reference has f = 0 throughout.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    trace = RewardTrace(gamma=gamma)
    so_far: dict[object, list] = {}
    prev_f: dict[object, float] = {}
    for writer, sent in zip(episode.writer_types(), episode.generated):
        kind = _type_of(writer)
        refs = [s for s in ground_truth if kind is None or s.label == kind]
        so_far.setdefault(kind, []).append(sent)
        f = bleu4(so_far[kind], refs) if refs else 0.0
        trace.writers.append(writer)
        trace.f.append(f)
        trace.r.append(scale * (f - prev_f.get(kind, 0.0)))
        prev_f[kind] = f
    trace.R = discount(trace.r, gamma)
    episode.rewards = trace
    return trace
