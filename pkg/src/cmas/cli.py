"""Command-line entry point: synth-data, train, generate, evaluate, gradcheck, ablate."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .corpus import Label, Sentence, Vocabulary, load_corpus
from .diffcore import DimensionError
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_reports
from .model import CMASModel, ModelConfig
from .pipeline import Example, episode_texts, load_dataset, write_corpus_dir
from .synthetic import SynthConfig, generate_synthetic_corpus
from .training import (Checkpoint, ILConfig, RLConfig, ablation_variants, il_loss, load_checkpoint,
                       save_checkpoint, train)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FORMATS = """\
output formats (all machine-readable):
  synth-data  OUT/corpus.jsonl      one {"image_id", "features", "findings": [{"text"}], "impression": [{"text"}]} per line
              OUT/features/<id>.bin "CMASFEAT", u32 P, u32 C, then P*C little-endian f32
              OUT/patterns_*.json   abnormality term -> ["alt1|alt2", ...] literal patterns
              OUT/manifest.json     seed, counts and generator settings
  train       OUT/epoch_NNN.ckpt    binary checkpoint ("CMASCKPT", u32 version, tensor records, JSON trailer)
              OUT/metrics.jsonl     one {"epoch", "phase", "loss", "val_bleu4"[, "reward"]} per epoch
              OUT/best.json         {"epoch", "path", "val_bleu4"} of the best validation epoch
  generate    FILE (JSONL)          {"image_id", "findings": [{"text", "writer"}], "impression": [...]}
              --traces FILE (JSONL) planner logits, word log-probs and attention weights per report
  evaluate    stdout / --out        {"bleu": [b1..b4], "rouge_l", "cider", "precision", "avg_fpr", "per_term"}
  gradcheck   stdout                one "<tensor> <max rel err> PASS|FAIL" line per trainable tensor
  ablate      stdout / --out        JSON list of metric rows, one per variant

two-stage note: training always feeds ground-truth findings to the Impression
stage; `generate --two-stage` feeds it the generated findings instead.

exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
config precedence: command-line flag > --config JSON file > CMAS_SEED (seed only) > default.
"""


@dataclass
class RunConfig:
    stage: str = "findings"
    phase: str = "il"
    hidden: int = 48
    sent_hidden: int = 48
    embed: int = 48
    positions: int = 9
    channels: int = 32
    attention: str = "per_position"
    t_max: int = 25
    n_max: int = 12
    min_count: int = 2
    gamma: float = 0.9
    lambda_pl: float = 1.0
    lambda_nw: float = 1.0
    lambda_aw: float = 1.0
    lr_il: float = 5e-4
    lr_rl: float = 1e-6
    epochs: int = 30
    samples_per_update: int = 1
    baseline: bool = False
    clip: float = 5.0
    patience: int = 5
    seed: int = 0
    val_fraction: float = 0.2
    n_reports: int = 200
    n_types: int = 4
    abnormal_prob: float = 0.25
    ratio: int = 6
    sigma: float = 0.1
    signature_scale: float = 1.0

    def __post_init__(self):
        if self.stage not in ("findings", "impression"):
            raise ConfigError(f"stage must be findings or impression, got {self.stage!r}")
        if self.phase not in ("il", "rl"):
            raise ConfigError(f"phase must be il or rl, got {self.phase!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def canonical(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def model_config(self, vocab_size: int, findings_vocab_size: int = 0, **over) -> ModelConfig:
        kw = dict(vocab_size=vocab_size, hidden=self.hidden, embed=self.embed, channels=self.channels,
                  positions=self.positions, impression=self.stage == "impression",
                  findings_vocab_size=findings_vocab_size if self.stage == "impression" else 0,
                  sent_hidden=self.sent_hidden, attention=self.attention, n_max=self.n_max, t_max=self.t_max)
        kw.update(over)
        return ModelConfig(**kw)

    def il_config(self) -> ILConfig:
        return ILConfig(self.lambda_pl, self.lambda_nw, self.lambda_aw, self.lr_il, self.epochs, self.seed,
                        self.clip, self.patience)

    def rl_config(self) -> RLConfig:
        return RLConfig(lr=self.lr_rl, gamma=self.gamma, samples_per_update=self.samples_per_update,
                        epochs=self.epochs, seed=self.seed, baseline=self.baseline, clip=self.clip,
                        patience=self.patience)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_types=self.n_types, abnormal_prob=self.abnormal_prob, ratio=self.ratio,
                           positions=self.positions, channels=self.channels, sigma=self.sigma,
                           signature_scale=self.signature_scale, n_max=self.n_max)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (override --config)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--print-config", action="store_true", help="print the resolved config as JSON and exit")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float, "str": str, "bool": _parse_bool}[f.type]
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=argparse.SUPPRESS,
                       help=f"default {f.default!r}")


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Merge defaults, CMAS_SEED, the JSON file and flags, in increasing priority."""
    environ = os.environ if environ is None else environ
    values = asdict(RunConfig())
    if "CMAS_SEED" in environ:
        try:
            values["seed"] = int(environ["CMAS_SEED"])
        except ValueError:
            raise ConfigError(f"CMAS_SEED must be an integer, got {environ['CMAS_SEED']!r}") from None
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    for f in fields(RunConfig):
        if hasattr(args, f.name):
            values[f.name] = getattr(args, f.name)
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------- commands


def cmd_synth_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    scfg = cfg.synth_config()
    scfg.validate()
    examples = generate_synthetic_corpus(scfg, cfg.seed, cfg.n_reports)
    counts = {t.name: sum(t.name in e.present for e in examples) for t in scfg.active_types()}
    manifest = {"seed": cfg.seed, "reports": len(examples), "abnormal_counts": counts,
                "findings_sentences": sum(len(e.record.findings) for e in examples),
                "impression_sentences": sum(len(e.record.impression) for e in examples),
                "generator": scfg.to_json()}
    write_corpus_dir(out, examples, scfg.findings_patterns(), scfg.impression_patterns(), manifest)
    print(json.dumps({"out": str(out), "reports": len(examples)}))
    return EXIT_OK


def _dataset(cfg: RunConfig, corpus, vocab_f=None, vocab_i=None):
    return load_dataset(corpus, val_fraction=cfg.val_fraction, split_seed=cfg.seed, min_count=cfg.min_count,
                        t_max=cfg.t_max, n_max=cfg.n_max, vocab_f=vocab_f, vocab_i=vocab_i)


def _stage_model(cfg: RunConfig, ds) -> CMASModel:
    vocab = ds.vocab(cfg.stage)
    return CMASModel(cfg.model_config(len(vocab), len(ds.vocab_f)), cfg.seed)


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    init = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    source = resume or init
    vocab_f = Vocabulary.from_list(source.meta["vocab_f"]) if source else None
    vocab_i = Vocabulary.from_list(source.meta["vocab_i"]) if source else None
    ds = _dataset(cfg, args.corpus, vocab_f, vocab_i)
    model = _stage_model(cfg, ds)
    if cfg.phase == "rl" and source is None:
        _log("warning: RL without --init-checkpoint; REINFORCE usually needs a pretrained policy")
    if init is not None and resume is None:
        if ModelConfig.from_json(init.config) != model.cfg:
            bad = [n for n in model.params if n not in init.params or init.params[n].shape != model.params[n].shape]
            raise DimensionError(f"init checkpoint dims do not match; tensors: {', '.join(bad) or 'config only'}")
        model.params.load(init.params)
    meta = {"stage": cfg.stage, "vocab_f": ds.vocab_f.to_list(), "vocab_i": ds.vocab_i.to_list(),
            "run_config": asdict(cfg)}
    phase_cfg = cfg.il_config() if cfg.phase == "il" else cfg.rl_config()
    metrics = out / "metrics.jsonl"
    if resume is None:
        metrics.write_text("")

    def on_epoch(ckpt: Checkpoint) -> None:
        path = out / f"epoch_{ckpt.epoch:03d}.ckpt"
        save_checkpoint(path, ckpt)
        with metrics.open("a") as fh:
            fh.write(json.dumps(ckpt.history[-1], sort_keys=True) + "\n")
        _log(json.dumps(ckpt.history[-1], sort_keys=True))

    result = train(model, ds.train, ds.val, cfg.phase, phase_cfg, resume=resume, meta=meta, on_epoch=on_epoch)
    if result.best_epoch is not None:
        best = next(h for h in result.history if h["epoch"] == result.best_epoch)
        (out / "best.json").write_text(json.dumps(
            {"epoch": result.best_epoch, "path": f"epoch_{result.best_epoch:03d}.ckpt",
             "val_bleu4": best["val_bleu4"]}, sort_keys=True) + "\n")
    return EXIT_OK


def _resolve_ckpt(path) -> Path:
    p = Path(path)
    if p.is_dir():
        pointer = p / "best.json"
        if not pointer.exists():
            raise DataError(f"{p} has no best.json")
        p = p / json.loads(pointer.read_text())["path"]
    if not p.exists():
        raise DataError(f"checkpoint {p} not found")
    return p


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.two_stage:
        if not (args.findings_checkpoint and args.impression_checkpoint):
            raise DataError("--two-stage needs --findings-checkpoint and --impression-checkpoint")
        f_ck = load_checkpoint(_resolve_ckpt(args.findings_checkpoint))
        i_ck = load_checkpoint(_resolve_ckpt(args.impression_checkpoint))
    else:
        path = args.checkpoint or args.findings_checkpoint or args.impression_checkpoint
        if not path:
            raise DataError("generate needs a stage checkpoint")
        ck = load_checkpoint(_resolve_ckpt(path))
        f_ck, i_ck = (ck, None) if ck.meta.get("stage", "findings") == "findings" else (None, ck)
    ref = f_ck or i_ck
    vocab_f = Vocabulary.from_list(ref.meta["vocab_f"])
    vocab_i = Vocabulary.from_list(ref.meta["vocab_i"])
    # the split must be the one the checkpoint was trained with
    trained = RunConfig(**ref.meta["run_config"]) if "run_config" in ref.meta else cfg
    ds = _dataset(trained, args.corpus, vocab_f, vocab_i)
    f_model = f_ck.build_model() if f_ck else None
    i_model = i_ck.build_model() if i_ck else None
    lines, traces = [], []
    for ex in ds.split(args.split):
        row = {"image_id": ex.image_id, "findings": [], "impression": []}
        trace = {"image_id": ex.image_id}
        generated_findings = None
        if f_model is not None:
            ep = _run(f_model, ex.features)
            row["findings"] = episode_texts(ep, vocab_f)
            trace["findings"] = ep.to_trace(vocab_f)
            generated_findings = list(ep.generated)
        if i_model is not None:
            findings = generated_findings if generated_findings is not None else list(ex.findings)
            ep = _run(i_model, ex.features, findings)
            row["impression"] = episode_texts(ep, vocab_i)
            trace["impression"] = ep.to_trace(vocab_i)
        lines.append(json.dumps(row, sort_keys=True))
        traces.append(json.dumps(trace, sort_keys=True))
    Path(args.out).write_text("".join(l + "\n" for l in lines))
    if args.traces:
        Path(args.traces).write_text("".join(t + "\n" for t in traces))
    _log(f"wrote {len(lines)} reports to {args.out}")
    return EXIT_OK


def _run(model, features, findings=None):
    from .agents import run_episode

    return run_episode(model, features, findings=findings)


def _read_generated(path) -> list[tuple[str, dict]]:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append((obj["image_id"], obj))
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"{path}:{n}: bad generated-report line ({e})") from None
    return rows


def _section_texts(obj: dict, section: str) -> list[str]:
    return [s["text"] if isinstance(s, dict) else s for s in obj.get(section, [])]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    corpus_dir = Path(args.corpus)
    truth_records = {r.image_id: r for r in load_corpus(corpus_dir / "corpus.jsonl")}
    from .corpus import AbnormalityPatternSet

    patterns = AbnormalityPatternSet.load(args.patterns or corpus_dir / f"patterns_{args.section}.json")
    gen = _read_generated(args.generated)
    missing = [i for i, _ in gen if i not in truth_records]
    if missing:
        raise DataError(f"generated ids not in truth corpus, e.g. {missing[:5]}")
    generated = [(i, _section_texts(obj, args.section)) for i, obj in gen]
    truth = [(i, list(getattr(truth_records[i], args.section))) for i, _ in gen]
    report = evaluate_reports(generated, truth, patterns, args.section)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ------------------------------------------------------------------ gradcheck


GRADCHECK_DIMS = dict(hidden=16, embed=16, sent_hidden=16, positions=9, channels=8, vocab_size=30, n_max=3, t_max=6,
                      init_scale=0.5)  # large enough that every path carries a well-conditioned gradient


def gradcheck_example(rng: np.random.Generator, cfg: ModelConfig, findings_vocab: int) -> Example:
    """Random features plus one normal and one abnormal sentence per section."""
    def sentence(label, vocab, length):
        words = tuple(int(w) for w in rng.integers(4, vocab, size=length))
        return Sentence(words + (2,), label)

    feats = rng.normal(size=(cfg.positions, cfg.channels))
    findings = [sentence(Label.NORMAL, findings_vocab, 3), sentence(Label.ABNORMAL, findings_vocab, 2)]
    impression = [sentence(Label.ABNORMAL, cfg.vocab_size, 2), sentence(Label.NORMAL, cfg.vocab_size, 1)]
    return Example("gradcheck", feats, findings, impression)


def run_gradcheck(seed: int = 0, tol: float = 1e-4, stages=("findings", "impression"), dims=None,
                  step: float = 1e-5) -> list[tuple[str, float, bool]]:
    dims = dict(GRADCHECK_DIMS, **(dims or {}))
    rows = []
    for stage in stages:
        rng = np.random.default_rng([seed, stages.index(stage)])
        impression = stage == "impression"
        mcfg = ModelConfig(**dims, impression=impression, findings_vocab_size=dims["vocab_size"] if impression else 0)
        model = CMASModel(mcfg, seed)
        ex = gradcheck_example(rng, mcfg, dims["vocab_size"])
        il = ILConfig()
        report = dc.gradcheck(lambda: il_loss(model, ex, il), [t for _, t in model.params.items()], step)
        for name in model.params:
            err = report[name]
            rows.append((f"{stage}:{name}", err, err <= tol))
    return rows


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    if args.inject_fault:
        dc.FAULTS.add(args.inject_fault)
    try:
        t0 = time.time()
        rows = run_gradcheck(cfg.seed, args.tol)
    finally:
        dc.FAULTS.discard(args.inject_fault)
    width = max(len(r[0]) for r in rows)
    for name, err, ok in rows:
        print(f"{name:<{width}}  {err:.3e}  {'PASS' if ok else 'FAIL'}")
    bad = sum(not ok for _, _, ok in rows)
    print(f"{len(rows)} tensors, {bad} failed, max rel err {max(r[1] for r in rows):.3e}, "
          f"{time.time() - t0:.1f}s")
    return EXIT_OK if bad == 0 else EXIT_NUMERIC


def cmd_ablate(args, cfg: RunConfig) -> int:
    ds = _dataset(cfg, args.corpus)
    base = cfg.model_config(len(ds.vocab_f), impression=False, findings_vocab_size=0)
    rl_cfg = cfg.rl_config()
    rl_cfg.epochs = args.rl_epochs if args.rl_epochs is not None else cfg.epochs
    rows = ablation_variants(ds, base, cfg.il_config(), rl_cfg, cfg.seed, log=_log)
    text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmas", description="Cooperative multi-agent chest X-ray report generation.",
        epilog=FORMATS, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_config_flags(p)
        return p

    p = command("synth-data", "write a synthetic corpus with planted abnormality signatures")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = command("train", "imitation-learning or REINFORCE training of one stage")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.jsonl")
    p.add_argument("--init-checkpoint", help="start from these parameters (fresh optimizer)")
    p.add_argument("--resume", help="continue an interrupted run from an epoch checkpoint")

    p = command("generate", "greedy report generation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", help="single-stage checkpoint file or run directory")
    p.add_argument("--findings-checkpoint")
    p.add_argument("--impression-checkpoint")
    p.add_argument("--two-stage", action="store_true",
                   help="feed generated findings into the Impression stage")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--out", required=True)
    p.add_argument("--traces", help="optional JSONL file for per-report traces")

    p = command("evaluate", "score generated reports against the corpus")
    p.add_argument("--generated", required=True, help="generate output, or a corpus JSONL")
    p.add_argument("--corpus", required=True, help="corpus directory holding the ground truth")
    p.add_argument("--section", default="findings", choices=("findings", "impression"))
    p.add_argument("--patterns", help="pattern file (default: the corpus's)")
    p.add_argument("--out")

    p = command("gradcheck", "finite-difference check of every trainable tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", choices=sorted(dc.FAULT_NAMES),
                   help="corrupt one backward rule (test hook)")

    p = command("ablate", "train and score CMAS_W, CMAS_NW,AW, CMAS-IL and CMAS-RL")
    p.add_argument("--corpus", required=True)
    p.add_argument("--rl-epochs", type=int)
    p.add_argument("--out")
    return parser


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.canonical())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DimensionError) as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        _log(f"numeric error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
