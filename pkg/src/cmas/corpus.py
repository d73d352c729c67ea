"""Reports, tokenization, vocabularies, abnormality patterns and feature files."""
from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

T_MAX = 25
N_MAX = 12
MIN_COUNT = 2

FEATURE_MAGIC = b"CMASFEAT"

NEGATION_WINDOW = 3
_CUES = ("no", "without")
_TRANSPARENT = {"or", "and", "nor"}


class EmptyReportError(DataError):
    pass


class FeatureFormatError(DataError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class Label(str, Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[int, ...]
    label: Label = Label.NORMAL
    raw_text: str = ""

    def __post_init__(self):
        if not self.tokens or self.tokens[-1] != EOS:
            raise ValueError(f"sentence tokens must be non-empty and end with EOS: {self.tokens}")

    @property
    def words(self) -> tuple[int, ...]:
        return tuple(t for t in self.tokens if t not in (PAD, BOS, EOS))


@dataclass
class Report:
    findings: list[Sentence]
    impression: list[Sentence]
    image_id: str = ""
    feature_ref: str = ""

    def section(self, name: str) -> list[Sentence]:
        if name not in ("findings", "impression"):
            raise ValueError(f"unknown section {name!r}")
        return self.findings if name == "findings" else self.impression


@dataclass
class ReportRecord:
    """One JSONL line: sentence texts as stored on disk, unlabeled."""

    image_id: str
    features: str
    findings: list[str]
    impression: list[str]

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "features": self.features,
            "findings": [{"text": t} for t in self.findings],
            "impression": [{"text": t} for t in self.impression],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReportRecord":
        try:
            return cls(
                image_id=str(obj["image_id"]),
                features=str(obj.get("features", "")),
                findings=[str(s["text"]) for s in obj["findings"]],
                impression=[str(s["text"]) for s in obj["impression"]],
            )
        except (KeyError, TypeError) as err:
            raise DataError(f"bad report record: {err}") from err

    def text(self, section: str) -> str:
        parts = self.findings if section == "findings" else self.impression
        return " ".join(p if p.rstrip().endswith((".", "!", "?")) else p + "." for p in parts)


# ---------------------------------------------------------------- text


def clean_tokens(text: str) -> list[str]:
    """Lower-case, split on non-alphanumerics, keep alpha-only tokens."""
    return [t for t in re.split(r"[^a-z0-9]+", text.lower()) if t.isalpha()]


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"[.!?]", text) if s.strip()]


class Vocabulary:
    def __init__(self, words: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(RESERVED)}
        for w in words:
            if w in self.stoi:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            self.stoi[w] = len(self.itos)
            self.itos.append(w)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def decode(self, idx: int) -> str:
        return self.itos[idx]

    def decode_words(self, tokens: Iterable[int]) -> list[str]:
        return [self.itos[t] for t in tokens if t not in (PAD, BOS, EOS)]

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_list(cls, words: Sequence[str]) -> "Vocabulary":
        return cls(words)


def _texts_of(reports, section: str) -> Iterable[str]:
    for r in reports:
        if isinstance(r, str):
            yield r
        elif isinstance(r, ReportRecord):
            yield r.text(section)
        else:
            for s in r.section(section):
                yield s.raw_text


def build_vocab(reports, min_count: int = MIN_COUNT, section: str = "findings") -> Vocabulary:
    """Frequency-ordered vocabulary (ties lexicographic) over tokens seen ``min_count`` times.

    ``reports`` may hold raw strings, :class:`ReportRecord` or :class:`Report`.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("cannot build a vocabulary from no reports")
    counts = Counter()
    for text in _texts_of(reports, section):
        counts.update(clean_tokens(text))
    kept = [w for w, c in counts.items() if c >= min_count and w not in RESERVED]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


def tokenize_report(raw: str, vocab: Vocabulary, t_max: int = T_MAX, n_max: int = N_MAX,
                    patterns: "AbnormalityPatternSet | None" = None) -> list[Sentence]:
    """Split, clean, truncate and encode a report section; labels come from ``patterns``."""
    out = []
    for text in split_sentences(raw):
        words = clean_tokens(text)
        if not words:
            continue
        ids = tuple(vocab.encode(w) for w in words[: t_max - 1]) + (EOS,)
        label = Label.NORMAL if patterns is None else label_text(text, patterns)
        out.append(Sentence(ids, label, text))
        if len(out) == n_max:
            break
    if not out:
        raise EmptyReportError(f"no alphabetic sentence in report text {raw!r}")
    return out


# ---------------------------------------------------------------- patterns


@dataclass
class AbnormalityPatternSet:
    terms: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for term, pats in self.terms.items():
            if not pats or any(not isinstance(p, str) or not p.strip() for p in pats):
                raise DataError(f"term {term!r} needs at least one non-empty pattern")

    def alternatives(self, term: str) -> list[str]:
        alts = []
        for p in self.terms[term]:
            alts.extend(a.strip().lower() for a in p.split("|") if a.strip())
        return alts

    @classmethod
    def load(cls, path) -> "AbnormalityPatternSet":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise DataError(f"cannot read pattern file {path}: {err}") from err
        if not isinstance(obj, dict):
            raise DataError("pattern file must hold a JSON object term -> [patterns]")
        return cls({str(k): list(v) for k, v in obj.items()})

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.terms, indent=2, sort_keys=True) + "\n")


def _matches(words: list[str], patterns: AbnormalityPatternSet) -> list[tuple[str, int, int]]:
    """All (term, first_token, last_token) substring hits on the cleaned text."""
    text = " ".join(words)
    starts = []
    pos = 0
    for w in words:
        starts.append(pos)
        pos += len(w) + 1
    tok_at = np.searchsorted(starts, np.arange(len(text) + 1), side="right") - 1
    hits = []
    for term in patterns.terms:
        for alt in patterns.alternatives(term):
            alt = " ".join(clean_tokens(alt))
            if not alt:
                continue
            i = text.find(alt)
            while i >= 0:
                hits.append((term, int(tok_at[i]), int(tok_at[i + len(alt) - 1])))
                i = text.find(alt, i + 1)
    return hits


def _negated(words: list[str], first: int, covered: set[int]) -> bool:
    """Negation cue within the window before ``first``.

    Conjunctions and tokens of other matched terms do not count toward the
    window, so a cue scopes over a coordinated list ("no A or B").
    """
    seen = 0
    j = first - 1
    while j >= 0 and seen < NEGATION_WINDOW:
        w = words[j]
        if w in _TRANSPARENT or j in covered:
            j -= 1
            continue
        if w in _CUES or (w == "of" and j > 0 and words[j - 1] == "clear"):
            return True
        seen += 1
        j -= 1
    return False


def unguarded_terms(text: str, patterns: AbnormalityPatternSet) -> set[str]:
    words = clean_tokens(text)
    hits = _matches(words, patterns)
    covered = {k for _, a, b in hits for k in range(a, b + 1)}
    return {term for term, a, _ in hits if not _negated(words, a, covered)}


def label_text(text: str, patterns: AbnormalityPatternSet) -> Label:
    return Label.ABNORMAL if unguarded_terms(text, patterns) else Label.NORMAL


def label_sentence(s: Sentence, patterns: AbnormalityPatternSet) -> Label:
    return label_text(s.raw_text, patterns)


def extract_abnormality_terms(report, patterns: AbnormalityPatternSet, section: str = "findings") -> set[str]:
    """Terms with an unguarded hit in any sentence.

    ``report`` is a :class:`Report`, a :class:`ReportRecord`, or a list of sentence strings.
    """
    if isinstance(report, Report):
        texts = [s.raw_text for s in report.section(section)]
    elif isinstance(report, ReportRecord):
        texts = report.findings if section == "findings" else report.impression
    else:
        texts = list(report)
    found = set()
    for t in texts:
        for s in split_sentences(t) or [t]:
            found |= unguarded_terms(s, patterns)
    return found


# ---------------------------------------------------------------- features


@dataclass
class FeatureGrid:
    values: np.ndarray  # (P, C)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"feature grid must be P x C with P, C >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature grid holds non-finite values")

    @property
    def P(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


def save_feature_grid(path, grid: FeatureGrid) -> None:
    header = FEATURE_MAGIC + struct.pack("<II", grid.P, grid.C)
    Path(path).write_bytes(header + grid.values.astype("<f4").tobytes())


def load_feature_grid(path) -> FeatureGrid:
    blob = Path(path).read_bytes()
    if blob[:8] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic, expected CMASFEAT", 0)
    if len(blob) < 16:
        raise FeatureFormatError("truncated header", len(blob))
    P, C = struct.unpack_from("<II", blob, 8)
    need = 16 + 4 * P * C
    if len(blob) < need:
        raise FeatureFormatError(f"truncated payload: need {need} bytes for P={P}, C={C}", len(blob))
    if len(blob) > need:
        raise FeatureFormatError("trailing bytes after payload", need)
    values = np.frombuffer(blob, dtype="<f4", count=P * C, offset=16).reshape(P, C)
    return FeatureGrid(values.astype(np.float64))


# ---------------------------------------------------------------- corpus files


def load_corpus(path) -> list[ReportRecord]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise DataError(f"cannot read corpus {path}: {err}") from err
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{n}: {err}") from err
        records.append(ReportRecord.from_json(obj))
    return records


def write_corpus(path, records: Iterable[ReportRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def encode_record(record: ReportRecord, vocab_f: Vocabulary, vocab_i: Vocabulary,
                  patterns_f: AbnormalityPatternSet, patterns_i: AbnormalityPatternSet,
                  t_max: int = T_MAX, n_max: int = N_MAX) -> Report:
    return Report(
        findings=tokenize_report(record.text("findings"), vocab_f, t_max, n_max, patterns_f),
        impression=tokenize_report(record.text("impression"), vocab_i, t_max, n_max, patterns_i),
        image_id=record.image_id,
        feature_ref=record.features,
    )
