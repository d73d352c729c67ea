import math
import re

import numpy as np
import pytest

from cmas import diffcore as dc
from cmas.agents import run_episode
from cmas.corpus import Label
from cmas.diffcore import DimensionError, Tape
from cmas.errors import ConfigError, DataError, NumericError
from cmas.model import CMASModel, ModelConfig
from cmas.pipeline import Example, synthetic_dataset
from cmas.synthetic import SynthConfig
from cmas.training import (Checkpoint, ILConfig, PreprocessError, RLConfig, concatenate_reports,
                           exact_policy_gradient, expected_return, greedy_episode, il_loss, load_checkpoint,
                           reinforce_surrogate, rl_update, save_checkpoint, teacher_forced_loglik, train)

from conftest import make_sentence, tiny_instance


@pytest.fixture(scope="module")
def synth():
    return synthetic_dataset(SynthConfig(channels=8), 3, 20, min_count=1)


def synth_model(ds, seed=0, **kw):
    cfg = ModelConfig(vocab_size=len(ds.vocab_f), hidden=8, embed=8, channels=8, positions=9, **kw)
    return CMASModel(cfg, seed)


def grads(model):
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in model.params.items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        ILConfig(lambda_pl=0, lambda_nw=0, lambda_aw=0)
    with pytest.raises(ConfigError):
        ILConfig(lambda_pl=-1)
    with pytest.raises(ConfigError):
        RLConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        RLConfig(samples_per_update=0)


def test_planner_only_loss(small_model, small_example):
    loss = float(il_loss(small_model, small_example, ILConfig(lambda_nw=0, lambda_aw=0)).data)
    ep = run_episode(small_model, small_example.features, force=[(1, (4, 5, 6, 2)), (2, (7, 8, 2)), (0, None)])
    assert loss == pytest.approx(-sum(d.log_prob for d in ep.decisions), abs=1e-12)


def test_weighted_loss_decomposes(small_model, small_example):
    full = float(il_loss(small_model, small_example, ILConfig()).data)
    parts = [float(il_loss(small_model, small_example, ILConfig(lambda_pl=a, lambda_nw=b, lambda_aw=c)).data)
             for a, b, c in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]]
    assert full == pytest.approx(sum(parts), abs=1e-12)
    assert full == pytest.approx(-teacher_forced_loglik(small_model, small_example), abs=1e-12)


def test_confident_model_loss_near_zero():
    cfg = ModelConfig(vocab_size=6, hidden=4, embed=4, channels=2, positions=1, init_scale=0.5)
    m = CMASModel(cfg, 0)
    ex = Example("one", np.ones((1, 2)), [make_sentence([4])], [])
    for _ in range(400):
        m.params.zero_grad()
        with Tape() as tape:
            loss = il_loss(m, ex, ILConfig())
        dc.backward(loss, tape)
        dc.adam_step(m.params, 0.05)
    assert float(il_loss(m, ex, ILConfig()).data) < 1e-2


def test_random_init_loss_matches_uniform_estimate(small_model, small_example):
    V = small_model.cfg.vocab_size
    N = len(small_example.findings)
    T = sum(len(s.tokens) for s in small_example.findings)
    expected = N * math.log(3) + T * math.log(V)
    assert abs(float(il_loss(small_model, small_example, ILConfig()).data) - expected) <= 0.2 * expected


def test_oversized_report_is_rejected(small_model):
    long = Example("long", np.zeros((3, 4)), [make_sentence([4])] * 5, [])
    with pytest.raises(PreprocessError, match="long"):
        il_loss(small_model, long, ILConfig())
    wide = Example("wide", np.zeros((3, 4)), [make_sentence([4] * 6)], [])
    with pytest.raises(PreprocessError):
        il_loss(small_model, wide, ILConfig())


def test_zero_returns_give_zero_gradient(small_model, small_example):
    ep = run_episode(small_model, small_example.features, sample=True, rng=np.random.default_rng(0))
    assert reinforce_surrogate(ep, [0.0] * len(ep.sentences)) is None
    empty_truth = Example("e", small_example.features, [], [])
    small_model.params.zero_grad()
    rl_update(small_model, empty_truth, RLConfig(), np.random.default_rng(1))
    assert all(not np.any(g) for g in grads(small_model).values())


def test_gradient_linear_in_reward_scale():
    model, ex = tiny_instance(20)
    out = []
    for c in (1.0, 3.0):
        model.params.zero_grad()
        for seed in range(5):
            rl_update(model, ex, RLConfig(gamma=0.9, reward_scale=c), np.random.default_rng(seed))
        out.append(grads(model))
    for k in out[0]:
        assert np.allclose(out[1][k], 3.0 * out[0][k], rtol=1e-12, atol=1e-15)


def test_estimator_raises_positive_trajectory():
    model, ex = tiny_instance()
    rng = np.random.default_rng(4)
    for _ in range(20):
        model.params.zero_grad()
        step = rl_update(model, ex, RLConfig(gamma=1.0), rng)
        if step.reward > 0:
            break
    assert step.reward > 0
    ascent = {k: -g for k, g in grads(model).items()}
    ep = step.episodes[0]
    force = [(d.idx, [s.token for s in st]) for d, (_, st) in zip(ep.decisions, ep.sentences)]
    force.append((None, None) if ep.decisions[-1].forced else (0, None))
    model.params.zero_grad()
    with Tape() as tape:
        rep = run_episode(model, ex.features, force=force, n_max=len(ep.sentences) if force[-1][0] is None else None)
        logp = dc.scale(dc.add_n([d.nll for d in rep.decisions if not d.forced] +
                                 [s.nll for _, st in rep.sentences for s in st]), -1.0)
    dc.backward(logp, tape)
    dot = sum(float(np.sum(ascent[k] * g)) for k, g in grads(model).items())
    assert dot > 0


def test_exact_gradient_matches_finite_differences():
    model, ex = tiny_instance(30)
    g = exact_policy_gradient(model, ex)
    for name, idx in [("planner.W3", (1, 0)), ("writer.NW.W_out", (5, 2)), ("gse.W_gs", (0, 1))]:
        p = model[name].data
        orig = p[idx]
        p[idx] = orig + 1e-6
        up = float(expected_return(model, ex).data)
        p[idx] = orig - 1e-6
        down = float(expected_return(model, ex).data)
        p[idx] = orig
        assert (up - down) / 2e-6 == pytest.approx(g[name][idx], rel=1e-5, abs=1e-9)


def test_monte_carlo_estimator_is_unbiased():
    model, ex = tiny_instance(30)
    exact = exact_policy_gradient(model, ex)
    n = 3000
    s1 = {k: np.zeros_like(v) for k, v in exact.items()}
    s2 = {k: np.zeros_like(v) for k, v in exact.items()}
    rng = np.random.default_rng(11)
    for _ in range(n):
        model.params.zero_grad()
        rl_update(model, ex, RLConfig(gamma=1.0), rng)
        for k, g in grads(model).items():
            s1[k] -= g
            s2[k] += g * g
    worst = 0.0
    for k in exact:
        mean = s1[k] / n
        se = np.sqrt(np.maximum(s2[k] / n - mean ** 2, 0) / n)
        mask = se > 0
        worst = max(worst, float(np.max(np.abs(mean - exact[k])[mask] / se[mask], initial=0.0)))
        assert np.all(np.abs(mean - exact[k])[~mask] < 1e-12)
    assert worst < 5.0


def test_zero_epochs_changes_nothing(synth):
    m = synth_model(synth)
    before = m.params.snapshot()
    res = train(m, synth.train, synth.val, "il", ILConfig(epochs=0))
    assert res.history == [] and res.checkpoints == []
    assert all(np.array_equal(before[k], t.data) for k, t in m.params.items())


def test_nan_loss_names_example(synth):
    m = synth_model(synth)
    m["writer.NW.W_out"].data[:] = np.nan
    with pytest.raises(NumericError, match=re.escape(synth.train[0].image_id)):
        train(m, synth.train[:1], [], "il", ILConfig(epochs=1))


def test_phase_config_mismatch(synth):
    with pytest.raises(ConfigError):
        train(synth_model(synth), synth.train, synth.val, "rl", ILConfig())


def test_checkpoint_round_trip(tmp_path, synth):
    m = synth_model(synth, seed=2)
    res = train(m, synth.train[:4], synth.val, "il", ILConfig(epochs=1, lr=0.01), meta={"stage": "findings"})
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, res.checkpoints[-1])
    back = load_checkpoint(path)
    assert set(back.params) == set(m.params)
    assert all(back.params[k].tobytes() == t.data.tobytes() for k, t in m.params.items())
    assert all(back.moments[k][0].tobytes() == m.params.moments[k][0].tobytes() for k in m.params)
    assert back.step == m.params.step and back.meta == {"stage": "findings"} and back.history == res.history
    clone = back.build_model()
    for ex in (synth.train + synth.val)[:10]:
        assert greedy_episode(clone, ex).generated == greedy_episode(m, ex).generated
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, synth):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, Checkpoint.capture(synth_model(synth), 0, []))
    data = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(data[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensors(synth):
    ck = Checkpoint.capture(synth_model(synth), 0, [])
    other = CMASModel(ModelConfig(vocab_size=len(synth.vocab_f), hidden=6, embed=6, channels=8), 0)
    with pytest.raises(DimensionError, match="gse.W_h"):
        ck.restore(other)


def test_resume_matches_uninterrupted(synth):
    full = synth_model(synth, seed=5)
    cfg = ILConfig(epochs=3, lr=0.01, seed=1)
    res = train(full, synth.train[:6], synth.val[:2], "il", cfg)
    part = synth_model(synth, seed=5)
    first = train(part, synth.train[:6], synth.val[:2], "il", ILConfig(epochs=1, lr=0.01, seed=1))
    resumed = synth_model(synth, seed=99)
    res2 = train(resumed, synth.train[:6], synth.val[:2], "il", cfg, resume=first.checkpoints[-1])
    assert res2.history == res.history
    assert all(np.array_equal(t.data, full[k].data) for k, t in resumed.params.items())


def test_rl_resume_matches_uninterrupted(synth):
    base = synth_model(synth, seed=6)
    cfg = RLConfig(epochs=2, lr=1e-3, seed=2, baseline=True)
    a = synth_model(synth, seed=6)
    res = train(a, synth.train[:4], [], "rl", cfg)
    b = synth_model(synth, seed=6)
    one = train(b, synth.train[:4], [], "rl", RLConfig(epochs=1, lr=1e-3, seed=2, baseline=True))
    c = CMASModel(base.cfg, 0)
    res2 = train(c, synth.train[:4], [], "rl", cfg, resume=one.checkpoints[-1])
    assert res2.history == res.history
    assert all(np.array_equal(t.data, a[k].data) for k, t in c.params.items())


def test_loglik_rises_over_first_epochs(synth):
    m = synth_model(synth, seed=7)
    track = []

    def record(_):
        track.append(sum(teacher_forced_loglik(m, ex) for ex in synth.train))

    train(m, synth.train, [], "il", ILConfig(epochs=5, lr=5e-3), on_epoch=record)
    drops = sum(b < a for a, b in zip(track, track[1:]))
    assert len(track) == 5 and drops <= 1 and track[-1] > track[0]


def test_early_stopping_uses_patience(synth):
    m = synth_model(synth)
    res = train(m, synth.train[:2], synth.val[:2], "il", ILConfig(epochs=6, lr=1e-9, patience=1))
    assert len(res.history) == 2 and res.best_epoch == 1


def test_single_writer_planner_is_binary(synth):
    single = synth_model(synth, writers=("W",))
    assert single["planner.W3"].shape[0] == 2 and synth_model(synth)["planner.W3"].shape[0] == 3
    ex = synth.train[0]
    ep = run_episode(single, ex.features, force=[(1, s.tokens) for s in ex.findings] + [(0, None)])
    assert ep.writer_types() == ["W"] * len(ex.findings)
    assert il_loss(single, ex, ILConfig()).data > 0


def test_single_type_writers_see_their_sentences(synth):
    from cmas.training import target_sentences
    ex = next(e for e in synth.train if any(s.label == Label.ABNORMAL for s in e.findings))
    nw = target_sentences(synth_model(synth, writers=("NW",)), ex)
    aw = target_sentences(synth_model(synth, writers=("AW",)), ex)
    assert all(s.label == Label.NORMAL for s in nw) and all(s.label == Label.ABNORMAL for s in aw)
    assert len(nw) + len(aw) == len(ex.findings)


def test_concatenation_order():
    out = concatenate_reports({"1": ["n1", "n2"], "2": []}, {"1": ["a1"], "2": ["a2"]})
    assert out == {"1": ["n1", "n2", "a1"], "2": ["a2"]}
