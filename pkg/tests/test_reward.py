from dataclasses import dataclass

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmas.corpus import BOS, EOS, PAD, Label, Sentence
from cmas.reward import bleu4, compute_rewards, corpus_bleu, discount

from conftest import make_sentence


@dataclass
class FakeEpisode:
    writers: list
    generated: list
    rewards: object = None

    def writer_types(self):
        return self.writers


def test_gamma_zero_returns_equal_rewards():
    assert discount([0.3, -0.1, 0.5], 0.0) == [0.3, -0.1, 0.5]


def test_worked_discount_example():
    assert discount([0.4, 0.2, 0.1], 0.5) == pytest.approx([0.525, 0.25, 0.1], abs=1e-12)


def test_identical_abnormal_sentence_scores_one():
    s = make_sentence([4, 5, 6, 7], Label.ABNORMAL)
    tr = compute_rewards(FakeEpisode(["AW"], [s]), [s])
    assert tr.f == [1.0] and tr.r == [1.0] and tr.R == [1.0]


def test_gamma_range_checked():
    with pytest.raises(ValueError):
        compute_rewards(FakeEpisode([], []), [], gamma=1.5)


def test_absent_type_scores_zero():
    tr = compute_rewards(FakeEpisode(["AW"], [make_sentence([4, 5, 6, 7], Label.ABNORMAL)]),
                         [make_sentence([4, 5, 6, 7])])
    assert tr.f == [0.0] and tr.R == [0.0]


def test_single_writer_uses_whole_reference():
    ref = [make_sentence([4, 5]), make_sentence([6, 7], Label.ABNORMAL)]
    tr = compute_rewards(FakeEpisode(["W", "W"], list(ref)), ref)
    assert tr.f[-1] == pytest.approx(1.0)


def test_bleu_brevity_example():
    assert bleu4([[4, 5, 6, 7]], [[4, 5, 6, 7, 8]]) == pytest.approx(0.7788007830714049, abs=1e-12)


def test_bleu_no_overlap_is_tiny():
    for n in (1, 2, 5, 9):
        assert 0 <= bleu4([list(range(10, 10 + n))], [[4, 5, 6, 7]]) < 1e-6


def test_bleu_ignores_markers():
    ref = [[4, 5, 6, 7, 8]]
    plain = bleu4([[4, 5, 6, 8]], ref)
    assert bleu4([[BOS, 4, 5, PAD, 6, 8, EOS]], ref) == plain
    assert bleu4([Sentence((4, 5, 6, 8, EOS), Label.NORMAL)], ref) == plain


def test_empty_candidate_scores_zero():
    assert corpus_bleu([([], [4, 5])]) == 0.0


sentences = st.lists(st.integers(4, 9), min_size=1, max_size=6)
episodes = st.lists(st.tuples(st.sampled_from(["NW", "AW"]), sentences), max_size=8)
refs = st.lists(st.tuples(st.sampled_from([Label.NORMAL, Label.ABNORMAL]), sentences), max_size=6)


def build(ep, ref):
    lab = {"NW": Label.NORMAL, "AW": Label.ABNORMAL}
    gen = [make_sentence(w, lab[k]) for k, w in ep]
    return FakeEpisode([k for k, _ in ep], gen), [make_sentence(w, l) for l, w in ref]


@settings(max_examples=150, deadline=None)
@given(episodes, refs)
def test_telescoping_sum(ep, ref):
    episode, truth = build(ep, ref)
    tr = compute_rewards(episode, truth, gamma=1.0)
    final = {}
    for w, f in zip(tr.writers, tr.f):
        final[w] = f
    assert abs(sum(tr.r) - sum(final.values())) <= 1e-12
    if tr.R:
        assert abs(tr.R[0] - sum(tr.r)) <= 1e-12
    assert all(0.0 <= f <= 1.0 for f in tr.f)


@settings(max_examples=150, deadline=None)
@given(episodes, refs, st.floats(0, 1))
def test_return_recurrence(ep, ref, gamma):
    episode, truth = build(ep, ref)
    tr = compute_rewards(episode, truth, gamma=gamma)
    nxt = 0.0
    for n in range(len(tr.r) - 1, -1, -1):
        assert abs(tr.R[n] - (tr.r[n] + gamma * nxt)) <= 1e-12
        nxt = tr.R[n]
    assert episode.rewards is tr


@settings(max_examples=60, deadline=None)
@given(episodes, refs, st.floats(0.1, 10))
def test_reward_scale_is_linear(ep, ref, k):
    episode, truth = build(ep, ref)
    a = compute_rewards(episode, truth, gamma=0.9)
    b = compute_rewards(episode, truth, gamma=0.9, scale=k)
    assert b.R == pytest.approx([k * x for x in a.R], abs=1e-12)
