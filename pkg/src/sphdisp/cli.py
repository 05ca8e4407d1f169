"""Command-line entry point.

Subcommands: gen-data | train | eval | analyze | quantize | sweep-gamma.
One JSON config document (strict: unknown keys are rejected) supplies the
run parameters; a handful of flags override the file.  Every output file
embeds the effective config hash and the root seed, and every consumer of
randomness draws from a purpose-labelled substream of that seed, so
rerunning any command with the same config reproduces its outputs byte for
byte.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .autodiff import RngStream
from .data import build_task, gen_corpus, load_data_dir, write_corpus
from .errors import ConfigError, TrainingAbortError
from .evaluation import BucketSpec, collapse_sweep, score_split
from .geometry import write_metric_log
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .quant import QUANT_MODES, apply_quant, size_report
from .training import GAMMA_GRID, TrainConfig, train_loop

SWEEP_CSV_HEADER = "gamma,target,bleu"


@dataclass
class DataSection:
    vocab_size: int = 2000
    n_pairs: int = 20000
    len_lo: int = 8
    len_hi: int = 16
    zipf_s: float = 1.2
    mode: str = "map+reverse"
    dir: str = ""


@dataclass
class ModelSection:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    dropout: float = 0.1
    positional: str = "sinusoidal"


@dataclass
class TrainSection:
    objective: str = "nmt"
    reg_target: str = "none"
    gamma: float = 0.0
    num_slices: int = 64
    rare_k: int = 512
    steps: int = 3000
    warmup: int = 300
    peak_lr: float = 3e-4
    batch_tokens: int = 1024
    probe_every: int = 50
    embed_trainable: bool = True
    init_from: str | None = None
    init_scope: str = "embeddings"
    label_smoothing: float = 0.0


@dataclass
class EvalSection:
    split: str = "test"
    decoder: str = "auto"  # auto | greedy | nn
    max_steps: int = 64


@dataclass
class QuantSection:
    mode: str = "float16"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    quant: QuantSection = field(default_factory=QuantSection)


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "quant": QuantSection,
}


def _build_section(cls, given: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(given) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config section {path!r}")
    return cls(**given)


def parse_run_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    top_known = {"seed", "out"} | set(_SECTIONS)
    unknown = set(obj) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        given = obj.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        sections[name] = _build_section(cls, given, name)
    return RunConfig(
        seed=int(obj.get("seed", 0)), out=str(obj.get("out", "runs/out")), **sections
    )


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _load_config(args) -> RunConfig:
    obj = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    cfg = parse_run_config(obj)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "gamma", None) is not None:
        cfg.train.gamma = args.gamma
    if getattr(args, "target", None) is not None:
        cfg.train.reg_target = args.target
    if getattr(args, "objective", None) is not None:
        cfg.train.objective = args.objective
    if getattr(args, "freeze_embeddings", None) is not None:
        cfg.train.embed_trainable = not args.freeze_embeddings
    if getattr(args, "init_from", None) is not None:
        cfg.train.init_from = args.init_from
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "mode", None) is not None:
        cfg.quant.mode = args.mode
    return cfg


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data.dir) if cfg.data.dir else Path(cfg.out) / "data"


def _require_data(cfg: RunConfig) -> Path:
    d = _data_dir(cfg)
    for name in ("vocab.json", "corpus.train.txt", "corpus.dev.txt", "corpus.test.txt"):
        if not (d / name).exists():
            raise ConfigError(f"missing {name} under {d}; run gen-data first")
    return d


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(seed=cfg.seed, **asdict(cfg.train))


def _model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **asdict(cfg.model))


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    d = _data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    data_seed = RngStream(cfg.seed).split("data").seed
    task = build_task(cfg.data.vocab_size, data_seed, cfg.data.mode)
    corpus, vocab = gen_corpus(
        vocab_size=cfg.data.vocab_size,
        n_pairs=cfg.data.n_pairs,
        len_range=(cfg.data.len_lo, cfg.data.len_hi),
        zipf_s=cfg.data.zipf_s,
        seed=data_seed,
        task=task,
    )
    for split in ("train", "dev", "test"):
        write_corpus(d / f"corpus.{split}.txt", corpus.split(split))
    (d / "vocab.json").write_text(vocab.to_json(extra=_meta(cfg)))
    (d / "meta.json").write_text(
        json.dumps({**_meta(cfg), "data": asdict(cfg.data)}, sort_keys=True)
    )
    print(f"wrote corpus + vocab to {d}", file=sys.stderr)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    d = _require_data(cfg)
    corpus, vocab = load_data_dir(d)
    tcfg = _train_config(cfg)
    model_cfg = _model_config(cfg, vocab.size)
    out = Path(cfg.out)
    final, metric_log = train_loop(tcfg, model_cfg, corpus, vocab, out, meta=_meta(cfg))
    print(f"final checkpoint {final}; metrics {metric_log}", file=sys.stderr)
    return 0


def _pick_decoder(cfg: RunConfig, ckpt_meta: dict) -> str:
    if cfg.eval.decoder != "auto":
        return cfg.eval.decoder
    return "greedy" if ckpt_meta.get("objective", "nmt") == "nmt" else "nn"


def cmd_eval(cfg: RunConfig, ckpt: str) -> int:
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    d = _require_data(cfg)
    corpus, vocab = load_data_dir(d)
    state, meta = load_checkpoint(ckpt)
    decoder = _pick_decoder(cfg, meta)
    pairs = corpus.split(cfg.eval.split)
    scores = score_split(state, pairs, vocab, decoder, BucketSpec())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        **_meta(cfg),
        "ckpt": str(ckpt),
        "split": cfg.eval.split,
        "decoder": decoder,
        **scores,
    }
    path = out / "scores.json"
    path.write_text(json.dumps(payload, sort_keys=True))
    print(f"bleu={scores['bleu']:.2f} -> {path}", file=sys.stderr)
    return 0


def cmd_analyze(cfg: RunConfig, ckpt_dir: str) -> int:
    ckpt_dir = Path(ckpt_dir)
    ckpts = sorted(ckpt_dir.glob("ckpt_*.sphd"))
    ckpts = [p for p in ckpts if not p.name.endswith("final.sphd")]
    if not ckpts:
        raise ConfigError(f"no step checkpoints under {ckpt_dir}")
    d = _require_data(cfg)
    corpus, _ = load_data_dir(d)
    sidecar = json.loads(Path(str(ckpts[0]) + ".json").read_text())
    probe_seed = int(sidecar.get("seed", cfg.seed))
    records = collapse_sweep(ckpts, corpus.dev, seed=probe_seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics_sweep.jsonl"
    write_metric_log(path, records, meta={**_meta(cfg), "probe_seed": probe_seed})
    print(f"{len(records)} records -> {path}", file=sys.stderr)
    return 0


def cmd_quantize(cfg: RunConfig, ckpt: str) -> int:
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if cfg.quant.mode not in QUANT_MODES:
        raise ConfigError(f"quant mode must be one of {QUANT_MODES}")
    state, meta = load_checkpoint(ckpt)
    qstate, spec = apply_quant(state, cfg.quant.mode)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ckpt_{cfg.quant.mode}.sphd"
    extra = {
        k: v
        for k, v in meta.items()
        if k in ("objective", "reg_target", "gamma", "metric_log")
    }
    extra.update(_meta(cfg))
    extra["quant"] = {"mode": spec.mode, "scales": spec.scales}
    save_checkpoint(qstate, path, extra)
    report = size_report(state)
    (out / "size_report.json").write_text(
        json.dumps({**_meta(cfg), **report}, sort_keys=True)
    )
    print(
        f"quantized ({cfg.quant.mode}) -> {path}; "
        f"payload {report['percent'][cfg.quant.mode]:.1f}% of float32",
        file=sys.stderr,
    )
    return 0


def _sweep_point(args: dict):
    """Train + dev-eval one sweep grid point (runs in a worker process)."""
    corpus, vocab = load_data_dir(args["data_dir"])
    tcfg = TrainConfig(**args["train"])
    model_cfg = ModelConfig(vocab_size=vocab.size, **args["model"])
    final, _ = train_loop(tcfg, model_cfg, corpus, vocab, args["run_dir"], meta=args["meta"])
    state, _ = load_checkpoint(final)
    decoder = "greedy" if tcfg.objective == "nmt" else "nn"
    scores = score_split(state, corpus.dev, vocab, decoder)
    return args["key"], scores["bleu"]


def cmd_sweep_gamma(cfg: RunConfig, targets: list[str], jobs: int) -> int:
    d = _require_data(cfg)
    for t in targets:
        if t not in ("H", "E", "F"):
            raise ConfigError(f"sweep target must be H, E or F (got {t!r})")
    root = RngStream(cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    base_train = asdict(cfg.train)
    jobs_args = []

    def point(target: str, gamma: float, label: str, key):
        train = dict(base_train)
        train["gamma"] = gamma
        train["reg_target"] = target
        train["seed"] = root.split(f"sweep:{label}").seed
        return {
            "data_dir": str(d),
            "train": train,
            "model": asdict(cfg.model),
            "run_dir": str(out / "sweep_runs" / label),
            "meta": _meta(cfg),
            "key": key,
        }

    jobs_args.append(point("none", 0.0, "baseline", ("baseline",)))
    for target in targets:
        for gamma in GAMMA_GRID:
            label = f"{target}_g{gamma:g}"
            jobs_args.append(point(target, gamma, label, (target, gamma)))
    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, bleu in pool.map(_sweep_point, jobs_args):
                results[key] = bleu
    else:
        for args in jobs_args:
            key, bleu = _sweep_point(args)
            results[key] = bleu
    lines = [f"# config_hash={config_hash(cfg)} seed={cfg.seed}", SWEEP_CSV_HEADER]
    for target in targets:
        lines.append(f"0.0,{target},{results[('baseline',)]:.4f}")
        for gamma in GAMMA_GRID:
            lines.append(f"{gamma:g},{target},{results[(target, gamma)]:.4f}")
    path = out / "sweep.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"{len(lines) - 2} sweep rows -> {path}", file=sys.stderr)
    return 0


# -- argument parsing -----------------------------------------------------------


def _bool_flag(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphdisp",
        description="Representation-collapse experiments with sliced dispersion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus + vocabulary")
    common(p)

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--target", choices=("none", "H", "E", "F"), default=None)
    p.add_argument("--objective", choices=("nmt", "conmt"), default=None)
    p.add_argument("--freeze-embeddings", type=_bool_flag, default=None)
    p.add_argument("--init-from", default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="decode a split and score BLEU + bucket F1")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default=None)

    p = sub.add_parser("analyze", help="collapse metrics across saved checkpoints")
    common(p)
    p.add_argument("--ckpt-dir", required=True)

    p = sub.add_parser("quantize", help="post-training quantization of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=QUANT_MODES, default=None)

    p = sub.add_parser("sweep-gamma", help="train/eval across the gamma grid")
    common(p)
    p.add_argument("--targets", default="H,E,F", help="comma-separated subset of H,E,F")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = _load_config(args)
        if getattr(args, "split", None) is not None:
            cfg.eval.split = args.split
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.ckpt_dir)
        if args.command == "quantize":
            return cmd_quantize(cfg, args.ckpt)
        if args.command == "sweep-gamma":
            targets = [t.strip() for t in args.targets.split(",") if t.strip()]
            return cmd_sweep_gamma(cfg, targets, args.jobs)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAbortError, FloatingPointError) as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
