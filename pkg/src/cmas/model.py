"""Parameter layout of one CMAS stage (Findings or Impression)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import ParamStore
from .errors import ConfigError

ATTENTION_MODES = ("per_position", "verbatim")


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 32
    embed: int = 32
    channels: int = 32
    positions: int = 9
    writers: tuple[str, ...] = ("NW", "AW")
    impression: bool = False
    findings_vocab_size: int = 0
    sent_hidden: int = 32
    attention: str = "per_position"
    n_max: int = 12
    t_max: int = 25
    init_scale: float = 0.08

    def __post_init__(self):
        self.writers = tuple(self.writers)
        if self.embed != self.hidden:
            # gs_n is the writer's first input, so it must fit the embedding slot
            raise ConfigError(f"embedding dim {self.embed} must equal hidden dim {self.hidden}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.impression and self.findings_vocab_size < 4:
            raise ConfigError("impression stage needs the findings vocabulary size")
        if not self.writers or len(set(self.writers)) != len(self.writers):
            raise ConfigError(f"bad writer list {self.writers}")
        if self.vocab_size < 3:
            raise ConfigError("vocabulary must hold at least PAD, BOS, EOS")

    @property
    def n_actions(self) -> int:
        return 1 + len(self.writers)

    def to_json(self) -> dict:
        d = asdict(self)
        d["writers"] = list(self.writers)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CMASModel:
    """Shared GSE, Planner and Writers for one report section.

    All three agents read the single ``gse.*`` parameter group; each writer owns
    ``writer.<name>.*`` and the writers share the embedding ``writer.embed``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        H, C, E, V = cfg.hidden, cfg.channels, cfg.embed, cfg.vocab_size
        s = cfg.init_scale

        def u(*shape):
            return rng.uniform(-s, s, size=shape)

        def lstm(prefix, d_in, h):
            self.params.add(prefix + ".W", u(4 * h, d_in + h))
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0  # forget gate
            self.params.add(prefix + ".b", b)

        att_in = 2 * H if cfg.attention == "verbatim" else C + 2 * H
        self.params.add("gse.W_h", u(H, att_in))
        self.params.add("gse.W_att", u(1, H))
        ctx_in = C + H + (cfg.sent_hidden if cfg.impression else 0)
        self.params.add("gse.W_ctx", u(H, ctx_in))
        self.params.add("gse.W_gs", u(H, C))
        self.params.add("gse.W_c", u(H, C))
        lstm("gse.lstm", H, H)
        if cfg.impression:
            Hf = cfg.sent_hidden
            text_in = 2 * H if cfg.attention == "verbatim" else Hf + 2 * H
            self.params.add("gse.W_fh", u(H, text_in))
            self.params.add("gse.W_fatt", u(1, H))
            self.params.add("gse.enc.embed", u(cfg.findings_vocab_size, E))
            lstm("gse.enc.lstm", E, Hf)

        self.params.add("planner.W1", u(H, H))
        self.params.add("planner.W2", u(H, H))
        self.params.add("planner.W3", u(cfg.n_actions, H))

        self.params.add("writer.embed", u(V, E))
        for w in cfg.writers:
            lstm(f"writer.{w}.lstm", E, H)
            self.params.add(f"writer.{w}.W_out", u(V, H))

    def __getitem__(self, name: str):
        return self.params[name]

    def writer_for_idx(self, idx: int) -> str:
        return self.cfg.writers[idx - 1]

    def idx_for_writer(self, writer: str) -> int:
        return 1 + self.cfg.writers.index(writer)

    def agent_parameters(self, agent: str) -> list[str]:
        """Names owned by one agent (``GSE``, ``PL``, ``embed`` or a writer name)."""
        prefix = {"GSE": "gse.", "PL": "planner.", "embed": "writer.embed"}.get(agent, f"writer.{agent}.")
        return [n for n in self.params if n.startswith(prefix)]
