"""Imitation-learning pretraining, REINFORCE fine-tuning, checkpoints and ablations."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .agents import WRITER_LABEL, Episode, planner_logits, run_episode, teacher_sequence
from .corpus import BOS, EOS, PAD, Label, Sentence
from .diffcore import DimensionError, Tape, Tensor
from .errors import ConfigError, DataError, NumericError
from .evaluation import bleu_n, evaluate_reports
from .gse import (LocalState, attend_text, attend_visual, encode_findings_sentences, init_global_state,
                  make_context, step_global_state, zero_local_state)
from .model import CMASModel, ModelConfig
from .pipeline import Dataset, Example, decode_sentence
from .reward import compute_rewards

CKPT_MAGIC = b"CMASCKPT"
CKPT_VERSION = 1


class PreprocessError(DataError):
    """A report does not fit N_max / T_max and must be truncated upstream."""


@dataclass
class ILConfig:
    lambda_pl: float = 1.0
    lambda_nw: float = 1.0
    lambda_aw: float = 1.0
    lr: float = 5e-4
    epochs: int = 30
    seed: int = 0
    clip: float = 5.0
    patience: int = 5  # 0 disables early stopping

    def __post_init__(self):
        lams = (self.lambda_pl, self.lambda_nw, self.lambda_aw)
        if min(lams) < 0 or max(lams) <= 0:
            raise ConfigError(f"IL weights must be nonnegative with one positive, got {lams}")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("IL needs epochs >= 0 and lr > 0")

    def writer_weight(self, writer: str) -> float:
        # the single-writer variant "W" uses the normal-writer weight
        return self.lambda_aw if writer == "AW" else self.lambda_nw


@dataclass
class RLConfig:
    lr: float = 1e-6
    gamma: float = 0.9
    samples_per_update: int = 1
    epochs: int = 10
    seed: int = 0
    baseline: bool = False
    baseline_decay: float = 0.9
    reward_scale: float = 1.0
    clip: float = 5.0
    patience: int = 5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.samples_per_update < 1:
            raise ConfigError("samples_per_update must be >= 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("RL needs epochs >= 0 and lr > 0")


# ------------------------------------------------------------------ targets


def stage_of(model: CMASModel) -> str:
    return "impression" if model.cfg.impression else "findings"


def target_sentences(model: CMASModel, example: Example) -> list[Sentence]:
    """Ground-truth sentences this model is trained to write.

    Single-writer NW / AW systems only see sentences of their own type.
    """
    sents = example.impression if model.cfg.impression else example.findings
    writers = model.cfg.writers
    if writers == ("NW",):
        return [s for s in sents if s.label == Label.NORMAL]
    if writers == ("AW",):
        return [s for s in sents if s.label == Label.ABNORMAL]
    return list(sents)


def findings_input(model: CMASModel, example: Example):
    return list(example.findings) if model.cfg.impression else None


def _check_fits(model: CMASModel, example: Example, sentences: Sequence[Sentence]) -> None:
    cfg = model.cfg
    if len(sentences) > cfg.n_max:
        raise PreprocessError(f"{example.image_id}: {len(sentences)} sentences exceed N_max={cfg.n_max}")
    for s in sentences:
        if len(s.tokens) > cfg.t_max:
            raise PreprocessError(f"{example.image_id}: sentence of {len(s.tokens)} tokens exceeds T_max={cfg.t_max}")


# ----------------------------------------------------------------------- IL


def il_loss(model: CMASModel, example: Example, cfg: ILConfig) -> Tensor:
    """Weighted teacher-forced cross-entropy of planner and writers; STOP is supervised last."""
    sentences = target_sentences(model, example)
    _check_fits(model, example, sentences)
    ep = run_episode(model, example.features, findings=findings_input(model, example),
                     force=teacher_sequence(model, sentences))
    terms = []
    if cfg.lambda_pl > 0:
        terms += [dc.scale(d.nll, cfg.lambda_pl) for d in ep.decisions]
    for writer, steps in ep.sentences:
        lam = cfg.writer_weight(writer)
        if lam > 0:
            terms += [dc.scale(s.nll, lam) for s in steps]
    return dc.add_n(terms) if terms else Tensor(np.array(0.0))


def teacher_forced_loglik(model: CMASModel, example: Example) -> float:
    ep = run_episode(model, example.features, findings=findings_input(model, example),
                     force=teacher_sequence(model, target_sentences(model, example)))
    return ep.log_prob


# ----------------------------------------------------------------------- RL


@dataclass
class RLStep:
    loss: float
    reward: float  # mean over episodes of the summed immediate rewards
    episodes: list[Episode] = field(default_factory=list)


class MovingBaseline:
    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.value = 0.0
        self.count = 0

    def update(self, returns: Sequence[float]) -> None:
        if not returns:
            return
        m = float(np.mean(returns))
        self.value = m if self.count == 0 else self.decay * self.value + (1 - self.decay) * m
        self.count += 1


def reinforce_surrogate(episode: Episode, returns: Sequence[float], weight: float = 1.0) -> Tensor | None:
    """Sum_n R_n * (planner NLL_n + writer NLL of sentence n); its gradient is -R grad log pi."""
    terms = []
    for n, (_, steps) in enumerate(episode.sentences):
        w = weight * returns[n]
        if w == 0.0:
            continue
        nll = dc.add_n([episode.decisions[n].nll] + [s.nll for s in steps])
        terms.append(dc.scale(nll, w))
    return dc.add_n(terms) if terms else None


def rl_update(model: CMASModel, example: Example, cfg: RLConfig, rng: np.random.Generator,
              baseline: MovingBaseline | None = None) -> RLStep:
    """Sample episodes and add the REINFORCE surrogate gradient into the parameter grads.

    The STOP decision carries R = 0; a forced STOP at N_max carries no gradient.
    """
    truth = target_sentences(model, example)
    out = RLStep(0.0, 0.0)
    S = cfg.samples_per_update
    for _ in range(S):
        with Tape() as tape:
            ep = run_episode(model, example.features, findings=findings_input(model, example),
                             sample=True, rng=rng)
            trace = compute_rewards(ep, truth, cfg.gamma, cfg.reward_scale)
            returns = list(trace.R)
            if baseline is not None:
                returns = [R - baseline.value for R in returns]
            loss = reinforce_surrogate(ep, returns, 1.0 / S)
        if loss is not None:
            dc.backward(loss, tape)
            out.loss += float(loss.data)
        if baseline is not None:
            baseline.update(trace.R)
        out.reward += sum(trace.r) / S
        out.episodes.append(ep)
    return out


# ------------------------------------------------------- enumeration oracle


def _enumerate_sentences(model: CMASModel, writer: str, gs: Tensor, t_max: int):
    """Yield (tokens, probability node, final hidden) for every sentence a writer can emit."""
    H = model.cfg.hidden
    W, b = model[f"writer.{writer}.lstm.W"], model[f"writer.{writer}.lstm.b"]
    W_out, table = model[f"writer.{writer}.W_out"], model["writer.embed"]
    h, c = dc.lstm_cell_step(gs, Tensor(np.zeros(H)), Tensor(np.zeros(H)), W, b)

    def walk(x, h, c, prefix, prob):
        h, c = dc.lstm_cell_step(x, h, c, W, b)
        probs = dc.softmax_op(dc.matmul(W_out, h))
        for tok in range(model.cfg.vocab_size):
            p = dc.pick(probs, tok) if prob is None else dc.mul(prob, dc.pick(probs, tok))
            tokens = prefix + (tok,)
            if tok == EOS or len(tokens) == t_max:
                yield tokens, p, h
            else:
                yield from walk(dc.embedding_lookup(table, tok), h, c, tokens, p)

    yield from walk(dc.embedding_lookup(table, BOS), h, c, (), None)


def expected_return(model: CMASModel, example: Example) -> Tensor:
    """Exact E[sum_n r_n] over every trajectory, as a differentiable node.

    Builds the full trajectory tree, so only tiny vocabularies, T_max and N_max
    are tractable.  With gamma = 1 the REINFORCE estimator is unbiased for its gradient.
    """
    cfg = model.cfg
    truth = target_sentences(model, example)
    feats = Tensor(np.asarray(example.features, dtype=np.float64))
    sent_vecs = None
    if cfg.impression:
        sent_vecs = encode_findings_sentences(model, example.findings or [Sentence((PAD, EOS))])

    def prefix_return(history):
        ep = Episode("oracle", sentences=[(w, []) for w, _ in history], generated=[s for _, s in history])
        return float(sum(compute_rewards(ep, truth, 1.0).r)) if history else 0.0

    def expand(state, ls, n, history, banked):
        v_att, _ = attend_visual(model, feats, ls, state)
        f_att = attend_text(model, sent_vecs, ls, state)[0] if sent_vecs is not None else None
        state = step_global_state(model, state, make_context(model, v_att, ls, f_att))
        if n == cfg.n_max:
            return None  # forced STOP, nothing more to earn
        probs = dc.softmax_op(planner_logits(model, state))
        terms = []
        for idx in range(1, cfg.n_actions):
            writer = model.writer_for_idx(idx)
            p_a = dc.pick(probs, idx)
            for tokens, p_s, h in _enumerate_sentences(model, writer, state.gs, cfg.t_max):
                if tokens[-1] != EOS:
                    tokens = tokens + (EOS,)
                label = WRITER_LABEL.get(writer, Label.NORMAL)
                hist = history + [(writer, Sentence(tokens, label))]
                total = prefix_return(hist)
                value = Tensor(np.array(total - banked))
                rest = expand(state, LocalState(h), n + 1, hist, total)
                if rest is not None:
                    value = dc.add(value, rest)
                terms.append(dc.mul(dc.mul(p_a, p_s), value))
        return dc.add_n(terms)

    out = expand(init_global_state(model, feats), zero_local_state(model), 0, [], 0.0)
    return out if out is not None else Tensor(np.array(0.0))


def exact_policy_gradient(model: CMASModel, example: Example) -> dict[str, np.ndarray]:
    """Gradient of the enumerated expected return with respect to every parameter."""
    model.params.zero_grad()
    with Tape() as tape:
        J = expected_return(model, example)
    dc.backward(J, tape)
    grads = {k: t.grad.copy() for k, t in model.params.items()}
    model.params.zero_grad()
    return grads


# ------------------------------------------------------------------ decoding


def greedy_episode(model: CMASModel, example: Example, findings=None) -> Episode:
    if findings is None:
        findings = findings_input(model, example)
    return run_episode(model, example.features, findings=findings)


def validation_bleu4(model: CMASModel, examples: Sequence[Example]) -> float | None:
    if not examples:
        return None
    cands = [[s.tokens for s in greedy_episode(model, ex).generated] for ex in examples]
    refs = [[s.tokens for s in target_sentences(model, ex)] for ex in examples]
    return bleu_n(cands, refs, 4)


def planner_sequence_accuracy(model: CMASModel, examples: Sequence[Example]) -> float:
    """Fraction of examples whose greedy indicator sequence equals the ground truth's."""
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        want = [idx for idx, _ in teacher_sequence(model, target_sentences(model, ex))]
        got = [d.idx for d in greedy_episode(model, ex).decisions]
        hits += want == got
    return hits / len(examples)


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int
    config: dict
    epoch: int
    history: list[dict]
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: CMASModel, epoch: int, history: list[dict], meta: dict | None = None) -> "Checkpoint":
        store = model.params
        moments = {k: (m.copy(), v.copy()) for k, (m, v) in store.moments.items()}
        return cls(store.snapshot(), moments, store.step, model.cfg.to_json(), epoch,
                   copy.deepcopy(history), copy.deepcopy(meta or {}))

    def restore(self, model: CMASModel) -> None:
        if ModelConfig.from_json(self.config) != model.cfg:
            mismatched = [n for n in model.params if n not in self.params or
                          self.params[n].shape != model.params[n].shape]
            raise DimensionError(f"checkpoint does not match model config; tensors: {', '.join(mismatched) or 'none'}")
        model.params.load(self.params)
        model.params.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        model.params.step = self.step

    def build_model(self) -> CMASModel:
        model = CMASModel(ModelConfig.from_json(self.config))
        self.restore(model)
        return model


def _write_tensor(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<I", len(raw)) + raw
    buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records = [(k, v) for k, v in ckpt.params.items()]
    for k, (m, v) in ckpt.moments.items():
        records += [(f"adam.m:{k}", m), (f"adam.v:{k}", v)]
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(records))
    for name, arr in records:
        _write_tensor(buf, name, arr)
    trailer = json.dumps({"config": ckpt.config, "epoch": ckpt.epoch, "history": ckpt.history,
                          "step": ckpt.step, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(trailer)) + trailer
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    params, m_parts, v_parts = {}, {}, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("adam.m:"):
            m_parts[name[7:]] = arr
        elif name.startswith("adam.v:"):
            v_parts[name[7:]] = arr
        else:
            params[name] = arr
    (n,) = struct.unpack("<I", take(4))
    trailer = json.loads(take(n).decode("utf-8"))
    moments = {k: (m_parts[k], v_parts[k]) for k in m_parts}
    return Checkpoint(params, moments, trailer["step"], trailer["config"], trailer["epoch"],
                      trailer["history"], trailer.get("meta", {}))


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    history: list[dict]
    best_epoch: int | None

    @property
    def best(self) -> Checkpoint | None:
        for c in self.checkpoints:
            if c.epoch == self.best_epoch:
                return c
        return None


def _fill_missing_grads(model: CMASModel) -> None:
    for t in model.params.entries.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def train(model: CMASModel, train_set: Sequence[Example], val_set: Sequence[Example], phase: str,
          cfg: ILConfig | RLConfig, *, resume: Checkpoint | None = None, meta: dict | None = None,
          on_epoch: Callable[[Checkpoint], None] | None = None) -> TrainResult:
    """Epoch loop with per-example Adam steps and per-epoch validation BLEU-4.

    Each epoch draws its shuffling and sampling stream from (seed, epoch), so a run
    resumed from an epoch checkpoint continues exactly as the uninterrupted run.
    """
    if phase not in ("il", "rl"):
        raise ConfigError(f"phase must be 'il' or 'rl', got {phase!r}")
    if (phase == "il") != isinstance(cfg, ILConfig):
        raise ConfigError(f"phase {phase!r} does not match config type {type(cfg).__name__}")
    history: list[dict] = []
    start = 0
    baseline = MovingBaseline(cfg.baseline_decay) if phase == "rl" and cfg.baseline else None
    if resume is not None:
        resume.restore(model)
        history = copy.deepcopy(resume.history)
        start = resume.epoch
        if baseline is not None and "baseline" in resume.meta:
            baseline.value, baseline.count = resume.meta["baseline"]
    checkpoints: list[Checkpoint] = []
    best_epoch, best_score, stale = None, -np.inf, 0
    for h in history:
        if h["val_bleu4"] is None:
            continue
        if h["val_bleu4"] > best_score:
            best_epoch, best_score, stale = h["epoch"], h["val_bleu4"], 0
        else:
            stale += 1

    for epoch in range(start + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        losses, rewards = [], []
        for i in order:
            ex = train_set[i]
            model.params.zero_grad()
            if phase == "il":
                with Tape() as tape:
                    loss = il_loss(model, ex, cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite IL loss {value} at epoch {epoch} on example {ex.image_id}")
                if tape.ops:
                    dc.backward(loss, tape)
            else:
                step = rl_update(model, ex, cfg, rng, baseline)
                value = step.loss
                if not np.isfinite(value):
                    raise NumericError(f"non-finite RL loss {value} at epoch {epoch} on example {ex.image_id}")
                rewards.append(step.reward)
            _fill_missing_grads(model)
            model.params.clip_grad_norm(cfg.clip)
            dc.adam_step(model.params, cfg.lr)
            losses.append(value)
        val = validation_bleu4(model, val_set)
        row = {"epoch": epoch, "phase": phase, "loss": float(np.mean(losses)) if losses else 0.0,
               "val_bleu4": val}
        if phase == "rl":
            row["reward"] = float(np.mean(rewards)) if rewards else 0.0
        history.append(row)
        ck_meta = dict(meta or {})
        if baseline is not None:
            ck_meta["baseline"] = [baseline.value, baseline.count]
        ckpt = Checkpoint.capture(model, epoch, history, ck_meta)
        checkpoints.append(ckpt)
        if on_epoch is not None:
            on_epoch(ckpt)
        if val is not None:
            if val > best_score:
                best_epoch, best_score, stale = epoch, val, 0
            else:
                stale += 1
        if cfg.patience and stale >= cfg.patience:
            break
    if best_epoch is None and checkpoints:
        best_epoch = checkpoints[-1].epoch
    return TrainResult(checkpoints, history, best_epoch)


# ------------------------------------------------------------------- ablation


def _texts(sentences, vocab) -> list[str]:
    return [decode_sentence(s, vocab) for s in sentences]


def _score(dataset: Dataset, gens: dict[str, list[str]], examples: Sequence[Example]) -> dict:
    truth = [(ex.image_id, _texts(ex.findings, dataset.vocab_f)) for ex in examples]
    rep = evaluate_reports([(i, gens[i]) for i, _ in truth], truth, dataset.patterns_f, "findings")
    row = rep.to_json()
    row.pop("per_term")
    return row


def concatenate_reports(normal: dict[str, list[str]], abnormal: dict[str, list[str]]) -> dict[str, list[str]]:
    """Per image: the NW paragraph followed verbatim by the AW paragraph."""
    return {i: list(normal[i]) + list(abnormal[i]) for i in normal}


def ablation_variants(dataset: Dataset, base: ModelConfig, il_cfg: ILConfig, rl_cfg: RLConfig,
                      seed: int = 0, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train and score CMAS_W, CMAS_NW,AW, CMAS-IL and CMAS-RL on the Findings section.

    Single-agent systems are trained by imitation only.  Rows are scored on the
    validation split.
    """
    log = log or (lambda msg: None)
    val = dataset.val
    vocab = dataset.vocab_f

    def fit(writers, phase_cfgs, init=None):
        cfg = ModelConfig(**{**base.to_json(), "writers": list(writers), "impression": False})
        model = CMASModel(cfg, seed)
        if init is not None:
            model.params.load(init.params.snapshot())
        for phase, pcfg in phase_cfgs:
            res = train(model, dataset.train, val, phase, pcfg)
            if res.best is not None:
                res.best.restore(model)
            model.params.moments, model.params.step = {}, 0
        return model

    def generate(model):
        return {ex.image_id: _texts(greedy_episode(model, ex).generated, vocab) for ex in val}

    rows = []
    log("training CMAS_W")
    single = fit(("W",), [("il", il_cfg)])
    rows.append({"variant": "CMAS_W", **_score(dataset, generate(single), val)})

    log("training CMAS_NW and CMAS_AW")
    nw = generate(fit(("NW",), [("il", il_cfg)]))
    aw = generate(fit(("AW",), [("il", il_cfg)]))
    rows.append({"variant": "CMAS_NW,AW", **_score(dataset, concatenate_reports(nw, aw), val)})

    log("training CMAS-IL")
    il_model = fit(("NW", "AW"), [("il", il_cfg)])
    rows.append({"variant": "CMAS-IL", **_score(dataset, generate(il_model), val)})

    log("training CMAS-RL")
    rl_model = fit(("NW", "AW"), [("rl", rl_cfg)], init=il_model)
    rows.append({"variant": "CMAS-RL", **_score(dataset, generate(rl_model), val)})
    return rows
