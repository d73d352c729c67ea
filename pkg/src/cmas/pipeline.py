"""Corpus directory <-> encoded examples, and decoding of generated episodes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (MIN_COUNT, N_MAX, T_MAX, AbnormalityPatternSet, FeatureGrid, ReportRecord, Sentence,
                     Vocabulary, build_vocab, encode_record, load_corpus, load_feature_grid, save_feature_grid,
                     write_corpus)
from .errors import DataError

CORPUS_FILE = "corpus.jsonl"
FINDINGS_PATTERNS = "patterns_findings.json"
IMPRESSION_PATTERNS = "patterns_impression.json"
MANIFEST = "manifest.json"


@dataclass
class Example:
    image_id: str
    features: np.ndarray
    findings: list[Sentence]
    impression: list[Sentence]


@dataclass
class Dataset:
    train: list[Example]
    val: list[Example]
    vocab_f: Vocabulary
    vocab_i: Vocabulary
    patterns_f: AbnormalityPatternSet
    patterns_i: AbnormalityPatternSet
    records: dict[str, ReportRecord]

    def vocab(self, stage: str) -> Vocabulary:
        return self.vocab_f if stage == "findings" else self.vocab_i

    def patterns(self, stage: str) -> AbnormalityPatternSet:
        return self.patterns_f if stage == "findings" else self.patterns_i

    def split(self, name: str) -> list[Example]:
        if name not in ("train", "val", "all"):
            raise DataError(f"unknown split {name!r}")
        return self.train + self.val if name == "all" else getattr(self, name)


def split_ids(ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def build_dataset(records: Sequence[ReportRecord], grids: dict[str, FeatureGrid],
                  patterns_f: AbnormalityPatternSet, patterns_i: AbnormalityPatternSet, *,
                  val_fraction: float = 0.2, split_seed: int = 0, min_count: int = MIN_COUNT,
                  t_max: int = T_MAX, n_max: int = N_MAX,
                  vocab_f: Vocabulary | None = None, vocab_i: Vocabulary | None = None) -> Dataset:
    """Encode records; vocabularies are built on the train split unless supplied."""
    by_id = {r.image_id: r for r in records}
    if len(by_id) != len(records):
        raise DataError("duplicate image_id in corpus")
    train_ids, val_ids = split_ids(list(by_id), val_fraction, split_seed)
    train_recs = [by_id[i] for i in train_ids]
    if vocab_f is None:
        vocab_f = build_vocab(train_recs or list(by_id.values()), min_count, "findings")
    if vocab_i is None:
        vocab_i = build_vocab(train_recs or list(by_id.values()), min_count, "impression")

    def encode(ids):
        out = []
        for i in ids:
            rep = encode_record(by_id[i], vocab_f, vocab_i, patterns_f, patterns_i, t_max, n_max)
            out.append(Example(i, grids[i].values, rep.findings, rep.impression))
        return out

    return Dataset(encode(train_ids), encode(val_ids), vocab_f, vocab_i, patterns_f, patterns_i, by_id)


def load_dataset(corpus_dir, **kw) -> Dataset:
    root = Path(corpus_dir)
    records = load_corpus(root / CORPUS_FILE)
    grids = {}
    for r in records:
        path = root / r.features
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        grids[r.image_id] = load_feature_grid(path)
    patterns_f = AbnormalityPatternSet.load(root / FINDINGS_PATTERNS)
    patterns_i = AbnormalityPatternSet.load(root / IMPRESSION_PATTERNS)
    return build_dataset(records, grids, patterns_f, patterns_i, **kw)


def write_corpus_dir(out_dir, examples, patterns_f: AbnormalityPatternSet, patterns_i: AbnormalityPatternSet,
                     manifest: dict) -> None:
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    write_corpus(root / CORPUS_FILE, [e.record for e in examples])
    for e in examples:
        save_feature_grid(root / e.record.features, e.grid)
    patterns_f.dump(root / FINDINGS_PATTERNS)
    patterns_i.dump(root / IMPRESSION_PATTERNS)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def decode_sentence(sentence: Sentence, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode_words(sentence.tokens))


def episode_texts(episode, vocab: Vocabulary) -> list[dict]:
    return [{"text": decode_sentence(s, vocab), "writer": w}
            for s, w in zip(episode.generated, episode.writer_types())]


def synthetic_dataset(synth_cfg, seed: int, n: int, **kw) -> Dataset:
    """Generate a synthetic corpus in memory and encode it."""
    from .synthetic import generate_synthetic_corpus

    examples = generate_synthetic_corpus(synth_cfg, seed, n)
    grids = {e.record.image_id: e.grid for e in examples}
    return build_dataset([e.record for e in examples], grids, synth_cfg.findings_patterns(),
                         synth_cfg.impression_patterns(), **kw)
