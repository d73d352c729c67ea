"""Synthetic feature-grid / report corpora standing in for real chest X-rays.

Every report has a fixed slot layout.  Each abnormality type owns one slot,
which holds either its abnormal finding (type present) or its normal
counterpart (type absent); the remaining slots are fixed normal templates.
Present types also plant their channel signature at a distinct grid position.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .corpus import N_MAX, AbnormalityPatternSet, FeatureGrid, ReportRecord


@dataclass
class AbnormalityType:
    name: str
    finding: str
    impression: str
    normal: str
    findings_patterns: list[str]
    impression_patterns: list[str]
    signature: list[float] | None = None


DEFAULT_TYPES = [
    AbnormalityType("cardiomegaly", "the heart is enlarged", "cardiomegaly",
                    "the heart is normal in size", ["heart is enlarged|enlarged heart|cardiomegaly"], ["cardiomegaly"]),
    AbnormalityType("effusion", "there is a small right pleural effusion", "small right pleural effusion",
                    "there is no pleural effusion", ["pleural effusion"], ["pleural effusion"]),
    AbnormalityType("pneumothorax", "there is a large left pneumothorax", "large left pneumothorax",
                    "there is no pneumothorax", ["pneumothorax"], ["pneumothorax"]),
    AbnormalityType("granuloma", "there is a calcified granuloma in the right upper lobe", "old granulomatous disease",
                    "no calcified granulomas are seen", ["granuloma"], ["granulomatous"]),
    AbnormalityType("low_volumes", "the lung volumes are low", "low lung volumes",
                    "the lung volumes are normal", ["volumes are low|low lung volumes"], ["low lung volumes"]),
    AbnormalityType("consolidation", "there is focal consolidation in the left lower lobe", "left lower lobe pneumonia",
                    "there is no focal consolidation", ["focal consolidation"], ["pneumonia"]),
]

DEFAULT_NORMALS = [
    "the lungs are clear",
    "the mediastinal contours are within normal limits",
    "there is no acute bony abnormality",
    "the trachea is midline",
    "the visualized osseous structures are intact",
    "the cardiomediastinal silhouette is unremarkable",
    "the upper abdomen is unremarkable",
    "the pulmonary vasculature is normal",
]


@dataclass
class SynthConfig:
    n_types: int = 4
    abnormal_prob: float = 0.25
    ratio: float = 6.0  # target normal:abnormal sentence ratio
    positions: int = 9
    channels: int = 32
    sigma: float = 0.1
    signature_scale: float = 1.0
    n_max: int = N_MAX
    normal_templates: list[str] = field(default_factory=lambda: list(DEFAULT_NORMALS))
    no_findings_impression: str = "no acute disease"
    types: list[AbnormalityType] = field(default_factory=lambda: [AbnormalityType(**asdict(t)) for t in DEFAULT_TYPES])

    def __post_init__(self):
        self.types = [t if isinstance(t, AbnormalityType) else AbnormalityType(**t) for t in self.types]

    def active_types(self) -> list[AbnormalityType]:
        return self.types[: self.n_types]

    def n_slots(self) -> int:
        k = self.n_types
        expected_ab = k * self.abnormal_prob if self.abnormal_prob > 0 else 1.0
        return max(k, int(round((self.ratio + 1.0) * expected_ab)))

    def validate(self) -> None:
        k = self.n_types
        if not 1 <= k <= len(self.types):
            raise ConfigError(f"n_types={k} but only {len(self.types)} types are defined")
        if k > self.positions:
            raise ConfigError(f"{k} abnormality types cannot occupy disjoint positions of a {self.positions}-position grid")
        if not 4.0 <= self.ratio <= 12.0:
            raise ConfigError(f"normal:abnormal ratio must lie in [4, 12], got {self.ratio}")
        if not 0.0 <= self.abnormal_prob <= 1.0:
            raise ConfigError("abnormal_prob must lie in [0, 1]")
        if not self.normal_templates:
            raise ConfigError("normal template pool is empty")
        if self.n_slots() > self.n_max:
            raise ConfigError(f"layout needs {self.n_slots()} sentences, above n_max={self.n_max}")
        for t in self.active_types():
            if t.signature is not None and len(t.signature) != self.channels:
                raise ConfigError(f"signature of {t.name} has {len(t.signature)} channels, expected {self.channels}")

    def signatures(self) -> np.ndarray:
        """(K, C) signature matrix; default is a disjoint channel block per type."""
        k, c = self.n_types, self.channels
        sig = np.zeros((k, c))
        width = max(1, c // k)
        for i, t in enumerate(self.active_types()):
            if t.signature is not None:
                sig[i] = t.signature
            else:
                lo = (i * width) % c
                sig[i, lo:lo + width] = self.signature_scale
        return sig

    def layout(self) -> list[int | None]:
        """Slot list: type index for type-owned slots, None for fixed normals."""
        n, k = self.n_slots(), self.n_types
        owned = {min(n - 1, int((i + 0.5) * n / k)): i for i in range(k)}
        return [owned.get(s) for s in range(n)]

    def findings_patterns(self) -> AbnormalityPatternSet:
        return AbnormalityPatternSet({t.name: list(t.findings_patterns) for t in self.active_types()})

    def impression_patterns(self) -> AbnormalityPatternSet:
        return AbnormalityPatternSet({t.name: list(t.impression_patterns) for t in self.active_types()})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SynthExample:
    record: ReportRecord
    grid: FeatureGrid
    present: list[str]
    positions: dict[str, int]


def generate_synthetic_corpus(cfg: SynthConfig, seed: int, n: int) -> list[SynthExample]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    types = cfg.active_types()
    sig = cfg.signatures()
    layout = cfg.layout()
    out = []
    for idx in range(n):
        chosen = [i for i in range(len(types)) if rng.random() < cfg.abnormal_prob]
        grid = rng.normal(0.0, cfg.sigma, size=(cfg.positions, cfg.channels))
        pos = rng.choice(cfg.positions, size=len(chosen), replace=False) if chosen else []
        for i, p in zip(chosen, pos):
            grid[p] += sig[i] + rng.normal(0.0, cfg.sigma, size=cfg.channels)
        grid = grid.astype(np.float32).astype(np.float64)

        findings = []
        fixed = 0
        for slot in layout:
            if slot is None:
                findings.append(cfg.normal_templates[fixed % len(cfg.normal_templates)])
                fixed += 1
            elif slot in chosen:
                findings.append(types[slot].finding)
            else:
                findings.append(types[slot].normal)
        impression = [types[i].impression for i in chosen] or [cfg.no_findings_impression]

        image_id = f"synth{idx:05d}"
        record = ReportRecord(image_id, f"features/{image_id}.bin",
                              [s + "." for s in findings], [s + "." for s in impression])
        out.append(SynthExample(record, FeatureGrid(grid), [types[i].name for i in chosen],
                                {types[i].name: int(p) for i, p in zip(chosen, pos)}))
    return out


def load_synth_config(path) -> SynthConfig:
    obj = json.loads(Path(path).read_text())
    return SynthConfig(**obj)
