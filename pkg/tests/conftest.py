import os

# tiny matrices: BLAS threading only adds overhead and contention
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from cmas.corpus import EOS, Label, Sentence
from cmas.model import CMASModel, ModelConfig
from cmas.pipeline import Example


def make_sentence(words, label=Label.NORMAL):
    return Sentence(tuple(words) + (EOS,), label)


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=12, hidden=6, embed=6, channels=4, positions=3, n_max=4, t_max=5)


@pytest.fixture
def small_model(small_cfg):
    return CMASModel(small_cfg, seed=1)


@pytest.fixture
def small_example():
    rng = np.random.default_rng(5)
    return Example("ex0", rng.normal(size=(3, 4)),
                   [make_sentence([4, 5, 6]), make_sentence([7, 8], Label.ABNORMAL)],
                   [make_sentence([9, 4], Label.ABNORMAL)])


TINY_TARGET = [(1, (4, 5)), (1, (6, 4)), (None, None)]  # two NW sentences, STOP forced at N_max


def tiny_instance(pretrain_steps=100, lr=0.01, seed=3):
    """Enumerable instance: 3 words, T_max = 2, N_max = 2, pretrained by likelihood of one trajectory."""
    from cmas import diffcore as dc
    from cmas.agents import run_episode

    cfg = ModelConfig(vocab_size=7, hidden=8, embed=8, channels=3, positions=2, n_max=2, t_max=2, init_scale=0.3)
    model = CMASModel(cfg, seed)
    feats = np.random.default_rng(0).normal(size=(2, 3))
    truth = [make_sentence([4, 5]), make_sentence([6, 4])]
    for _ in range(pretrain_steps):
        model.params.zero_grad()
        with dc.Tape() as tape:
            ep = run_episode(model, feats, force=TINY_TARGET)
            nll = dc.add_n([d.nll for d in ep.decisions if not d.forced] +
                           [s.nll for _, steps in ep.sentences for s in steps])
        dc.backward(nll, tape)
        for t in model.params.entries.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        dc.adam_step(model.params, lr)
    model.params.moments, model.params.step = {}, 0
    return model, Example("tiny", feats, truth, [])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
