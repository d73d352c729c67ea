"""Planner, Normality/Abnormality Writers and the cooperative episode loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import BOS, EOS, PAD, Label, Sentence
from .diffcore import Tensor
from .gse import (GlobalState, LocalState, attend_text, attend_visual, encode_findings_sentences,
                  init_global_state, make_context, step_global_state, zero_local_state)
from .model import CMASModel

STOP = 0
FINDINGS, IMPRESSION = "findings", "impression"

WRITER_LABEL = {"NW": Label.NORMAL, "AW": Label.ABNORMAL}


def _probs(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))


@dataclass
class PlannerDecision:
    idx: int
    logits: np.ndarray
    log_prob: float
    forced: bool = False  # appended at N_max, not chosen by the policy
    nll: Tensor | None = field(default=None, repr=False)


@dataclass
class WriterStep:
    token: int
    log_prob: float
    hidden: np.ndarray
    nll: Tensor | None = field(default=None, repr=False)


@dataclass
class Episode:
    mode: str
    decisions: list[PlannerDecision] = field(default_factory=list)
    sentences: list[tuple[str, list[WriterStep]]] = field(default_factory=list)
    generated: list[Sentence] = field(default_factory=list)
    local_states: list[LocalState] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    text_attention: list[np.ndarray] = field(default_factory=list)
    rewards: object = None

    @property
    def log_prob(self) -> float:
        """log pi(episode): every policy-chosen action, forced STOP excluded."""
        total = sum(d.log_prob for d in self.decisions if not d.forced)
        return total + sum(s.log_prob for _, steps in self.sentences for s in steps)

    def writer_types(self) -> list[str]:
        return [w for w, _ in self.sentences]

    def to_trace(self, vocab=None) -> dict:
        sents = []
        for (writer, steps), sent in zip(self.sentences, self.generated):
            entry = {
                "writer": writer,
                "tokens": [s.token for s in steps],
                "log_probs": [s.log_prob for s in steps],
            }
            if vocab is not None:
                entry["text"] = " ".join(vocab.decode_words(sent.tokens))
            sents.append(entry)
        return {
            "mode": self.mode,
            "decisions": [
                {"idx": d.idx, "log_prob": d.log_prob, "logits": d.logits.tolist(), "forced": d.forced}
                for d in self.decisions
            ],
            "sentences": sents,
            "attention": [a.tolist() for a in self.attention],
            "text_attention": [b.tolist() for b in self.text_attention],
        }


def planner_logits(model: CMASModel, gs: GlobalState) -> Tensor:
    h = dc.tanh_op(dc.matmul(model["planner.W2"], dc.tanh_op(dc.matmul(model["planner.W1"], gs.gs))))
    return dc.matmul(model["planner.W3"], h)


def planner_decide(model: CMASModel, gs: GlobalState, sample: bool = False, rng=None,
                   force: int | None = None) -> PlannerDecision:
    logits = planner_logits(model, gs)
    if force is not None:
        idx = force
    elif sample:
        idx = _draw(_probs(logits.data), rng)
    else:
        idx = int(np.argmax(logits.data))
    nll = dc.cross_entropy(logits, idx)
    return PlannerDecision(idx, logits.data.copy(), -float(nll.data), nll=nll)


def writer_generate_sentence(model: CMASModel, writer: str, gs: GlobalState, t_max: int,
                             sample: bool = False, rng=None, force_tokens: Sequence[int] | None = None):
    """Run one writer from a fresh memory; returns (Sentence, steps, LocalState)."""
    H = model.cfg.hidden
    W, b = model[f"writer.{writer}.lstm.W"], model[f"writer.{writer}.lstm.b"]
    W_out, table = model[f"writer.{writer}.W_out"], model["writer.embed"]
    h = Tensor(np.zeros(H))
    c = Tensor(np.zeros(H))
    h, c = dc.lstm_cell_step(gs.gs, h, c, W, b)
    x = dc.embedding_lookup(table, BOS)
    steps: list[WriterStep] = []
    limit = len(force_tokens) if force_tokens is not None else t_max
    for t in range(limit):
        h, c = dc.lstm_cell_step(x, h, c, W, b)
        logits = dc.matmul(W_out, h)
        if force_tokens is not None:
            tok = int(force_tokens[t])
        elif sample:
            tok = _draw(_probs(logits.data), rng)
        else:
            tok = int(np.argmax(logits.data))
        nll = dc.cross_entropy(logits, tok)
        steps.append(WriterStep(tok, -float(nll.data), h.data, nll))
        if tok == EOS:
            break
        x = dc.embedding_lookup(table, tok)
    tokens = tuple(s.token for s in steps)
    if not tokens or tokens[-1] != EOS:
        tokens = tokens + (EOS,)
    label = WRITER_LABEL.get(writer, Label.NORMAL)
    return Sentence(tokens, label), steps, LocalState(h)


def run_episode(model: CMASModel, features, *, findings: Sequence[Sentence] | None = None,
                sample: bool = False, rng=None, n_max: int | None = None, t_max: int | None = None,
                force: Sequence[tuple[int, Sequence[int] | None]] | None = None) -> Episode:
    """One cooperative generation loop.

    ``force`` is a teacher sequence of (indicator, tokens) pairs ending in STOP;
    when given, actions are not chosen but their log-probs are still recorded.
    """
    cfg = model.cfg
    n_max = cfg.n_max if n_max is None else n_max
    t_max = cfg.t_max if t_max is None else t_max
    mode = IMPRESSION if cfg.impression else FINDINGS
    if (findings is not None) != cfg.impression:
        raise ValueError("findings input is required in Impression mode and only there")
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))

    sent_vecs = None
    if cfg.impression:
        sent_vecs = encode_findings_sentences(model, findings or [Sentence((PAD, EOS))])

    ep = Episode(mode)
    state = init_global_state(model, feats)
    ls = zero_local_state(model)
    for n in range(n_max + 1):
        v_att, alpha = attend_visual(model, feats, ls, state)
        ep.attention.append(alpha.data.copy())
        f_att = None
        if sent_vecs is not None:
            f_att, beta = attend_text(model, sent_vecs, ls, state)
            ep.text_attention.append(beta.data.copy())
        ctx = make_context(model, v_att, ls, f_att)
        state = step_global_state(model, state, ctx)

        forced_idx = force[n][0] if force is not None else None
        if n == n_max and forced_idx is None:
            decision = planner_decide(model, state, force=STOP)
            decision.forced = True
            ep.decisions.append(decision)
            break
        decision = planner_decide(model, state, sample, rng, force=forced_idx)
        ep.decisions.append(decision)
        if decision.idx == STOP:
            break
        writer = model.writer_for_idx(decision.idx)
        tokens = force[n][1] if force is not None else None
        sentence, steps, ls = writer_generate_sentence(model, writer, state, t_max, sample, rng, tokens)
        ep.sentences.append((writer, steps))
        ep.generated.append(sentence)
        ep.local_states.append(ls)
    return ep


def teacher_sequence(model: CMASModel, sentences: Sequence[Sentence]) -> list[tuple[int, Sequence[int] | None]]:
    """Ground-truth (indicator, tokens) pairs plus the final STOP."""
    writers = model.cfg.writers
    seq = []
    for s in sentences:
        wanted = "AW" if s.label == Label.ABNORMAL else "NW"
        writer = wanted if wanted in writers else writers[0]
        seq.append((model.idx_for_writer(writer), s.tokens))
    seq.append((STOP, None))
    return seq


def replay_log_prob(model: CMASModel, features, episode: Episode, findings=None) -> float:
    """log pi of an existing episode, recomputed by a fresh teacher-forced pass."""
    force = [(d.idx, [s.token for s in steps]) for d, (_, steps) in zip(episode.decisions, episode.sentences)]
    n_max = None
    if episode.decisions[-1].forced:
        force.append((None, None))
        n_max = len(episode.sentences)
    else:
        force.append((STOP, None))
    return run_episode(model, features, findings=findings, force=force, n_max=n_max).log_prob


def run_two_stage(findings_model: CMASModel, impression_model: CMASModel, features, *,
                  sample: bool = False, rng=None) -> tuple[Episode, Episode]:
    """Findings first; its generated sentences become the Impression stage's text input."""
    f_ep = run_episode(findings_model, features, sample=sample, rng=rng)
    i_ep = run_episode(impression_model, features, findings=list(f_ep.generated), sample=sample, rng=rng)
    return f_ep, i_ep
