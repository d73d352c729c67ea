"""Global State Encoder: soft attention, context vector and the loop-level LSTM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import Sentence
from .diffcore import DimensionError, Tensor
from .errors import ConfigError
from .model import CMASModel


@dataclass
class GlobalState:
    gs: Tensor
    cell: Tensor
    n: int = 0


@dataclass
class LocalState:
    ls: Tensor


@dataclass
class ContextVector:
    ctx: Tensor
    alpha: np.ndarray
    beta: np.ndarray | None = None


def zero_local_state(model: CMASModel) -> LocalState:
    return LocalState(Tensor(np.zeros(model.cfg.hidden)))


def _soft_attention(W_h: Tensor, W_att: Tensor, items: Tensor, ls: Tensor, gs: Tensor, mode: str):
    """Attend over the rows of ``items``; returns (weighted sum, weights node)."""
    n = items.shape[0]
    state = dc.concat([ls, gs])
    if mode == "verbatim":
        # h_p = tanh(W_h [ls; gs]) has no position index, so every score is equal
        h = dc.tanh_op(dc.matmul(W_h, state))
        score = dc.matmul(W_att, h)
        scores = dc.reshape(dc.tile(score, n), (n,))
    else:
        rows = dc.concat([items, dc.tile(state, n)], axis=1)
        h = dc.tanh_op(dc.matmul(rows, dc.transpose(W_h)))
        scores = dc.reshape(dc.matmul(h, dc.transpose(W_att)), (n,))
    weights = dc.softmax_op(scores)
    return dc.matmul(weights, items), weights


def attend_visual(model: CMASModel, features: Tensor, ls_prev: LocalState, gs_prev: GlobalState):
    cfg = model.cfg
    if features.shape[1] != cfg.channels:
        raise DimensionError(f"feature grid has {features.shape[1]} channels, model expects {cfg.channels}")
    return _soft_attention(model["gse.W_h"], model["gse.W_att"], features, ls_prev.ls, gs_prev.gs, cfg.attention)


def attend_text(model: CMASModel, sent_vecs: Tensor, ls_prev: LocalState, gs_prev: GlobalState):
    if sent_vecs.shape[0] < 1:
        raise ValueError("text attention needs at least one findings sentence")
    return _soft_attention(model["gse.W_fh"], model["gse.W_fatt"], sent_vecs, ls_prev.ls, gs_prev.gs,
                           model.cfg.attention)


def make_context(model: CMASModel, v_att: Tensor, ls_prev: LocalState, f_att: Tensor | None = None) -> Tensor:
    if (f_att is not None) != model.cfg.impression:
        mode = "Impression" if model.cfg.impression else "Findings"
        raise ConfigError(f"{mode}-mode context {'needs' if model.cfg.impression else 'takes no'} text attention")
    parts = [v_att, f_att, ls_prev.ls] if f_att is not None else [v_att, ls_prev.ls]
    return dc.tanh_op(dc.matmul(model["gse.W_ctx"], dc.concat(parts)))


def init_global_state(model: CMASModel, features: Tensor) -> GlobalState:
    v_bar = Tensor(features.data.mean(axis=0))
    gs = dc.tanh_op(dc.matmul(model["gse.W_gs"], v_bar))
    cell = dc.tanh_op(dc.matmul(model["gse.W_c"], v_bar))
    return GlobalState(gs, cell, 1)


def step_global_state(model: CMASModel, state: GlobalState, ctx: Tensor) -> GlobalState:
    h, c = dc.lstm_cell_step(ctx, state.gs, state.cell, model["gse.lstm.W"], model["gse.lstm.b"])
    return GlobalState(h, c, state.n + 1)


def encode_sentence(model: CMASModel, tokens: Sequence[int]) -> Tensor:
    Hf = model.cfg.sent_hidden
    h = Tensor(np.zeros(Hf))
    c = Tensor(np.zeros(Hf))
    table, W, b = model["gse.enc.embed"], model["gse.enc.lstm.W"], model["gse.enc.lstm.b"]
    for tok in tokens:
        h, c = dc.lstm_cell_step(dc.embedding_lookup(table, tok), h, c, W, b)
    return h


def encode_findings_sentences(model: CMASModel, findings: Sequence[Sentence]) -> Tensor:
    """(N_f, H_f) matrix of final hidden states, one row per findings sentence."""
    if not findings:
        raise ValueError("no findings sentences to encode")
    return dc.stack([encode_sentence(model, s.tokens) for s in findings])
