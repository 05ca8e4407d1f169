"""Training loop: base objective plus gamma-weighted sliced dispersion.

One regularization target per run: the decoder output H or encoder output F
of the current batch, or a rare-token subsample of the target embedding
table E.  The cosine-regression objective only supports target E (or none).
Every consumer of randomness (batch order, dropout, slices, subsampling,
probes) draws from its own substream of the run seed, so an inactive
regularizer leaves the rest of the trajectory bit-for-bit unchanged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .data import Corpus, Vocabulary
from .dispersion import dispersion_node, sample_great_circles, subsample_rare_rows
from .errors import ConfigError, TrainingAbortError, UnsupportedCombinationError
from .geometry import MetricRecord, metrics_for
from .model import (
    Batch,
    ModelConfig,
    ModelState,
    conmt_head,
    forward_graph,
    init_model,
    load_checkpoint,
    make_batch,
    masked_rows,
    nmt_head,
    save_checkpoint,
)

OBJECTIVES = ("nmt", "conmt")
REG_TARGETS = ("none", "H", "E", "F")
INIT_SCOPES = ("embeddings", "full")
GAMMA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
PROBE_TOKENS = 2048


@dataclass
class TrainConfig:
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
    seed: int = 0
    embed_trainable: bool = True
    init_from: str | None = None
    init_scope: str = "embeddings"
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.reg_target not in REG_TARGETS:
            raise ConfigError(f"reg_target must be one of {REG_TARGETS}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.objective == "conmt" and self.reg_target in ("H", "F"):
            raise UnsupportedCombinationError(
                "the cosine objective only regularizes the embedding table (E)"
            )
        if self.reg_target == "E" and self.rare_k < 2:
            raise ConfigError("reg_target=E requires rare_k >= 2")
        for name in ("num_slices", "steps", "warmup", "probe_every", "batch_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup > self.steps:
            raise ConfigError("warmup must not exceed steps")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.init_scope not in INIT_SCOPES:
            raise ConfigError(f"init_scope must be one of {INIT_SCOPES}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @property
    def reg_active(self) -> bool:
        return self.gamma > 0.0 and self.reg_target != "none"


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Inverse-square-root schedule with linear warmup (1-based step)."""
    s = step + 1
    return cfg.peak_lr * min(s / cfg.warmup, np.sqrt(cfg.warmup / s))


class Adam:
    """Adam with bias correction; beta = (0.9, 0.98), eps = 1e-9."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def total_loss(
    state: ModelState,
    batch: Batch,
    cfg: TrainConfig,
    vocab: Vocabulary | None = None,
    slices: tuple[np.ndarray, np.ndarray] | None = None,
    rare_ids: np.ndarray | None = None,
    rng_slices: RngStream | None = None,
    rng_subsample: RngStream | None = None,
    train: bool = False,
    rng_dropout: RngStream | None = None,
    want_grads: bool = True,
):
    """Base loss plus gamma * sliced dispersion of the selected representation.

    With gamma = 0 or no target this is exactly the base loss and consumes
    no regularizer randomness.  ``slices`` / ``rare_ids`` pin the Monte
    Carlo draws (used by gradient checking); otherwise fresh draws come
    from the dedicated streams.  Returns (value, grads or None, parts).
    """
    for name, p in state.params.items():
        p.zero_grad()
        p.requires_grad = want_grads and (state.embed_trainable or name != "tgt_emb")
    enc_out, dec_out = forward_graph(state, batch, train, rng_dropout)
    if cfg.objective == "nmt":
        base = nmt_head(state, dec_out, batch, cfg.label_smoothing)
    else:
        base = conmt_head(state, dec_out, batch)
    parts = {"base": float(base.data), "reg": 0.0}
    total = base
    if cfg.reg_active:
        if cfg.reg_target == "H":
            rows = masked_rows(dec_out, batch.tgt_mask)
        elif cfg.reg_target == "F":
            rows = masked_rows(enc_out, batch.src_mask)
        else:  # E
            if rare_ids is None:
                if vocab is None:
                    raise ConfigError("reg_target=E needs a vocabulary")
                _, rare_ids = subsample_rare_rows(
                    state.params["tgt_emb"].data, vocab, cfg.rare_k, rng_subsample
                )
            rows = ad.take_rows(state.params["tgt_emb"], np.asarray(rare_ids))
        if slices is None:
            slices = sample_great_circles(
                state.config.d_model, cfg.num_slices, rng_slices
            )
        reg = dispersion_node(rows, slices[0], slices[1])
        parts["reg"] = float(reg.data)
        total = ad.add(base, ad.mul(reg, cfg.gamma))
    value = float(total.data)
    if not want_grads:
        return value, None, parts
    total.backward()
    grads = {
        n: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for n, p in state.params.items()
        if p.requires_grad
    }
    return value, grads, parts


@dataclass
class Rngs:
    """Per-purpose substreams of one run seed."""

    root: RngStream
    slices: RngStream
    subsample: RngStream
    dropout: RngStream
    probe: RngStream

    @classmethod
    def for_seed(cls, seed: int) -> "Rngs":
        root = RngStream(seed)
        return cls(
            root=root,
            slices=root.split("slices"),
            subsample=root.split("subsample"),
            dropout=root.split("dropout"),
            probe=root.split("probe"),
        )


def train_step(
    state: ModelState,
    opt: Adam,
    batch: Batch,
    cfg: TrainConfig,
    step: int,
    rngs: Rngs,
    vocab: Vocabulary | None = None,
    dump_dir=None,
):
    """One Adam update; returns the scalar log for this step."""
    if step >= cfg.steps:
        raise ConfigError("step index past the configured horizon")
    try:
        value, grads, parts = total_loss(
            state,
            batch,
            cfg,
            vocab=vocab,
            rng_slices=rngs.slices,
            rng_subsample=rngs.subsample,
            train=True,
            rng_dropout=rngs.dropout,
        )
    except FloatingPointError as exc:
        dump = _dump_batch(batch, step, dump_dir)
        raise TrainingAbortError(
            f"non-finite loss at step {step} (batch dumped to {dump})", dump
        ) from exc
    if not np.isfinite(value):
        dump = _dump_batch(batch, step, dump_dir)
        raise TrainingAbortError(
            f"non-finite loss {value} at step {step} (batch dumped to {dump})", dump
        )
    lr = lr_at(cfg, step)
    opt.step(grads, lr)
    state.step = step + 1
    return {"step": step, "loss": value, "lr": lr, **parts}


def _dump_batch(batch: Batch, step: int, dump_dir) -> str:
    dump_dir = Path(dump_dir) if dump_dir else Path.cwd()
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"abort_batch_step{step}.npz"
    np.savez(path, src=batch.src, tgt_in=batch.tgt_in, tgt_out=batch.tgt_out)
    return str(path)


def probe_metrics(state: ModelState, probe_batch: Batch, step: int) -> list[MetricRecord]:
    """Collapse metrics for decoder output H, embeddings E (pad row excluded),
    and encoder output F, on a fixed probe batch in eval mode."""
    for p in state.params.values():
        p.requires_grad = False
    enc_out, dec_out = forward_graph(state, probe_batch, train=False, rng=None)
    h_rows = masked_rows(dec_out, probe_batch.tgt_mask).data
    f_rows = masked_rows(enc_out, probe_batch.src_mask).data
    e_rows = state.params["tgt_emb"].data[1:]
    return [
        metrics_for(h_rows, step, "H"),
        metrics_for(e_rows, step, "E"),
        metrics_for(f_rows, step, "F"),
    ]


def pack_probe_batch(pairs, model_cfg: ModelConfig, rng: RngStream, tokens: int = PROBE_TOKENS) -> Batch:
    """A fixed held-out slice of about ``tokens`` target tokens, sampled once."""
    order = rng.permutation(len(pairs))
    chosen = []
    count = 0
    for idx in order:
        chosen.append(pairs[int(idx)])
        count += len(pairs[int(idx)][1]) + 1
        if count >= tokens:
            break
    return make_batch(chosen, model_cfg)


def iter_batches(pairs, cfg: TrainConfig, model_cfg: ModelConfig, root: RngStream):
    """Endless stream of shuffled, token-packed batches (fresh order per epoch)."""
    epoch = 0
    while True:
        order = root.split(f"batches:{epoch}").permutation(len(pairs))
        cur: list = []
        count = 0
        for idx in order:
            pair = pairs[int(idx)]
            cost = len(pair[1]) + 1
            if cur and count + cost > cfg.batch_tokens:
                yield make_batch(cur, model_cfg)
                cur, count = [], 0
            cur.append(pair)
            count += cost
        if cur:
            yield make_batch(cur, model_cfg)
        epoch += 1


def init_state(cfg: TrainConfig, model_cfg: ModelConfig, rngs: Rngs) -> ModelState:
    state = init_model(model_cfg, rngs.root.split("init"))
    state.embed_trainable = cfg.embed_trainable
    if cfg.init_from:
        donor, _ = load_checkpoint(cfg.init_from)
        if donor.config != model_cfg:
            raise ConfigError("init_from checkpoint has a different architecture")
        names = donor.params if cfg.init_scope == "full" else ("tgt_emb",)
        for name in names:
            state.params[name].data = donor.params[name].data.copy()
    return state


def train_loop(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    corpus: Corpus,
    vocab: Vocabulary,
    out_dir,
    meta: dict | None = None,
):
    """Run the configured optimization; probes and checkpoints every
    ``probe_every`` steps.  Returns (final checkpoint path, metric log path)."""
    if not corpus.train:
        raise ConfigError("empty training corpus")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rngs = Rngs.for_seed(cfg.seed)
    state = init_state(cfg, model_cfg, rngs)
    opt = Adam(state.params)
    probe_batch = pack_probe_batch(corpus.dev or corpus.train, model_cfg, rngs.probe)
    metric_path = out_dir / "metrics.jsonl"
    scalar_path = out_dir / "train_scalars.jsonl"
    meta = dict(meta or {})
    meta.setdefault("seed", cfg.seed)
    ckpt_meta = {
        "objective": cfg.objective,
        "reg_target": cfg.reg_target,
        "gamma": cfg.gamma,
        "metric_log": str(metric_path),
        **meta,
    }
    batches = iter_batches(corpus.train, cfg, model_cfg, rngs.root)
    final_path = out_dir / "ckpt_final.sphd"
    with open(metric_path, "w", encoding="utf-8") as mlog, open(
        scalar_path, "w", encoding="utf-8"
    ) as slog:
        mlog.write(json.dumps(meta, sort_keys=True) + "\n")
        slog.write(json.dumps(meta, sort_keys=True) + "\n")
        for rec in probe_metrics(state, probe_batch, 0):
            mlog.write(rec.to_json_line() + "\n")
        for step in range(cfg.steps):
            batch = next(batches)
            log = train_step(state, opt, batch, cfg, step, rngs, vocab, out_dir)
            slog.write(json.dumps(log) + "\n")
            done = step + 1
            if done % cfg.probe_every == 0 or done == cfg.steps:
                for rec in probe_metrics(state, probe_batch, done):
                    mlog.write(rec.to_json_line() + "\n")
                save_checkpoint(state, out_dir / f"ckpt_{done:06d}.sphd", ckpt_meta)
    save_checkpoint(state, final_path, ckpt_meta)
    return final_path, metric_path
