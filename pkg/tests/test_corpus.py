import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmas.corpus import (EOS, UNK, AbnormalityPatternSet, EmptyReportError, FeatureFormatError, FeatureGrid,
                         Label, Sentence, Vocabulary, build_vocab, clean_tokens, extract_abnormality_terms,
                         label_sentence, label_text, load_corpus, load_feature_grid, save_feature_grid,
                         tokenize_report, write_corpus)
from cmas.errors import ConfigError, DataError
from cmas.synthetic import SynthConfig, generate_synthetic_corpus

CARDIO = AbnormalityPatternSet({"cardiomegaly": ["enlarged heart|heart is enlarged|cardiomegaly"],
                                "effusion": ["pleural effusion"], "pneumothorax": ["pneumothorax"],
                                "nodule": ["nodule"]})


def test_tokenize_lungs_clear():
    vocab = Vocabulary(["the", "lungs", "are", "clear"])
    (s,) = tokenize_report("The lungs are clear.", vocab)
    assert vocab.decode_words(s.tokens) == ["the", "lungs", "are", "clear"] and s.tokens[-1] == EOS


def test_tokenize_empty_report():
    with pytest.raises(EmptyReportError):
        tokenize_report("A1b2!!", Vocabulary(["a"]))


def test_tokenize_truncates_to_t_max():
    (s,) = tokenize_report(" ".join(["word"] * 100) + ".", Vocabulary(["word"]), t_max=25)
    assert len(s.tokens) == 25 and s.tokens[-1] == EOS and len(s.words) == 24


def test_tokenize_caps_sentence_count_and_maps_unk():
    sents = tokenize_report("a b. a c. a. b. a.", Vocabulary(["a"]), n_max=3)
    assert len(sents) == 3 and sents[0].tokens == (4, UNK, EOS)


def test_sentence_must_end_with_eos():
    with pytest.raises(ValueError):
        Sentence((4, 5), Label.NORMAL)


def test_label_examples():
    assert label_text("the heart is enlarged", CARDIO) == Label.ABNORMAL
    assert label_text("No pleural effusion or pneumothorax.", CARDIO) == Label.NORMAL
    assert label_text("the heart is enlarged", AbnormalityPatternSet({})) == Label.NORMAL
    assert label_text("the lungs are clear of nodule", CARDIO) == Label.NORMAL
    assert label_text("there is a small pleural effusion without pneumothorax", CARDIO) == Label.ABNORMAL
    s = tokenize_report("There is cardiomegaly.", Vocabulary(["there"]), patterns=CARDIO)[0]
    assert s.label == Label.ABNORMAL and label_sentence(s, CARDIO) == Label.ABNORMAL


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from(["no", "the", "heart", "is", "enlarged", "pleural", "effusion", "or",
                                 "without", "clear", "of", "nodule", "x"]), min_size=1, max_size=12))
def test_labeling_is_total_and_deterministic(words):
    text = " ".join(words)
    a, b = label_text(text, CARDIO), label_text(text, CARDIO)
    assert a == b and a in (Label.NORMAL, Label.ABNORMAL)


def test_build_vocab_examples():
    v = build_vocab(["a b", "a"], min_count=1)
    assert v.to_list() == ["a", "b"] and len(v) == 6
    v2 = build_vocab(["a b", "a"], min_count=2)
    assert v2.to_list() == ["a"] and v2.encode("b") == UNK


def test_build_vocab_order_matches_brute_force():
    rng = random.Random(3)
    words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"]
    reports = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 9))) for _ in range(50)]
    counts = Counter(w for r in reports for w in r.split())
    expected = sorted((w for w, c in counts.items() if c >= 2), key=lambda w: (-counts[w], w))
    vocab = build_vocab(reports, min_count=2)
    assert vocab.to_list() == expected
    for w in expected:
        assert vocab.decode(vocab.encode(w)) == w


def test_feature_grid_round_trip_and_header(tmp_path):
    g = FeatureGrid(np.random.default_rng(0).normal(size=(49, 2048)).astype(np.float32))
    save_feature_grid(tmp_path / "g.bin", g)
    back = load_feature_grid(tmp_path / "g.bin")
    assert (back.P, back.C) == (49, 2048) and np.array_equal(back.values, g.values)
    save_feature_grid(tmp_path / "one.bin", FeatureGrid([[0.5]]))
    assert load_feature_grid(tmp_path / "one.bin").values.tolist() == [[0.5]]


def test_feature_grid_format_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(FeatureFormatError) as e:
        load_feature_grid(p)
    assert e.value.offset == 0
    save_feature_grid(p, FeatureGrid(np.ones((2, 3))))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FeatureFormatError) as e:
        load_feature_grid(p)
    assert e.value.offset == 16 + 4 * 5
    with pytest.raises(DataError):
        FeatureGrid([[np.nan]])


def test_extract_terms():
    assert extract_abnormality_terms(["There is cardiomegaly."], CARDIO) == {"cardiomegaly"}
    assert extract_abnormality_terms(["The lungs are clear.", "No pneumothorax."], CARDIO) == set()
    planted = ["The heart is enlarged.", "Small pleural effusion.", "A nodule is seen.", "No pneumothorax."]
    assert extract_abnormality_terms(planted, CARDIO) == {"cardiomegaly", "effusion", "nodule"}


def test_pattern_set_validation():
    with pytest.raises(DataError):
        AbnormalityPatternSet({"x": []})
    with pytest.raises(DataError):
        AbnormalityPatternSet({"x": [" "]})


def test_corpus_jsonl_round_trip(tmp_path):
    exs = generate_synthetic_corpus(SynthConfig(), 1, 5)
    write_corpus(tmp_path / "c.jsonl", [e.record for e in exs])
    assert load_corpus(tmp_path / "c.jsonl") == [e.record for e in exs]


# ------------------------------------------------------------------ synthetic


def test_synth_zero_probability_all_normal():
    cfg = SynthConfig(abnormal_prob=0.0)
    pats = cfg.findings_patterns()
    for e in generate_synthetic_corpus(cfg, 4, 40):
        assert all(label_text(s, pats) == Label.NORMAL for s in e.record.findings)
        assert e.record.impression == ["no acute disease."]


def test_synth_probability_one_single_type():
    cfg = SynthConfig(n_types=1, abnormal_prob=1.0)
    pats = cfg.findings_patterns()
    for e in generate_synthetic_corpus(cfg, 4, 30):
        assert sum(label_text(s, pats) == Label.ABNORMAL for s in e.record.findings) == 1


def test_synth_ratio_within_one():
    cfg = SynthConfig(ratio=6)
    pats = cfg.findings_patterns()
    labels = [label_text(s, pats) for e in generate_synthetic_corpus(cfg, 9, 500) for s in e.record.findings]
    ratio = labels.count(Label.NORMAL) / labels.count(Label.ABNORMAL)
    assert abs(ratio - 6) <= 1


def test_synth_config_errors():
    with pytest.raises(ConfigError):
        SynthConfig(n_types=4, positions=3).validate()
    with pytest.raises(ConfigError):
        SynthConfig(ratio=2).validate()


def test_synth_seed_reproducible_bytes(tmp_path):
    a = generate_synthetic_corpus(SynthConfig(), 11, 20)
    b = generate_synthetic_corpus(SynthConfig(), 11, 20)
    assert [x.record for x in a] == [y.record for y in b]
    assert all(np.array_equal(x.grid.values, y.grid.values) for x, y in zip(a, b))


def test_synth_labels_consistent_with_patterns():
    cfg = SynthConfig(n_types=6, abnormal_prob=0.5, ratio=4, n_max=20)
    pats = cfg.findings_patterns()
    for e in generate_synthetic_corpus(cfg, 2, 100):
        terms = extract_abnormality_terms(e.record.findings, pats)
        assert terms == set(e.present)


def test_synth_signatures_recoverable():
    cfg = SynthConfig()
    sig = cfg.signatures()
    names = [t.name for t in cfg.active_types()]
    planted, base = [], []
    for e in generate_synthetic_corpus(cfg, 5, 300):
        for k, name in enumerate(names):
            block = sig[k] > 0
            if name in e.positions:
                planted.append(e.grid.values[e.positions[name], block].mean())
            others = [p for p in range(cfg.positions) if p not in e.positions.values()]
            base.append(e.grid.values[others][:, block].mean())
    assert np.mean(planted) - np.mean(base) >= 3 * cfg.sigma
