"""Tiny encoder-decoder transformer with discrete and continuous output heads.

Pre-norm residual blocks, sinusoidal positions, a shared target embedding
table used both as decoder input and as the output scorer.  The discrete
head scores tokens by plain dot products <E_t, H> (no bias) and trains
with mean NLL; the continuous head regresses decoder states onto target
embeddings with a cosine loss and decodes by nearest neighbor in cosine
similarity.

A ModelState is read-shared during evaluation; training mutates it from a
single writer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import RngStream, Tensor
from .data import BOS_ID, EOS_ID, PAD_ID
from .errors import ArityError, CheckpointError, DegenerateInputError, VocabularyError

NEG_INF = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    dropout: float = 0.1
    positional: str = "sinusoidal"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "layers", "heads", "ffn_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.positional != "sinusoidal":
            raise ValueError("only sinusoidal positions are supported")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    embed_trainable: bool = True
    step: int = 0
    _pos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._pos = sinusoidal_positions(self.config.max_len, self.config.d_model)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / d_model)
    out = np.zeros((max_len, d_model))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.vocab_size, d),
        "tgt_emb": (cfg.vocab_size, d),
    }

    def self_attn(prefix):
        shapes[f"{prefix}.wqkv"] = (d, 3 * d)
        shapes[f"{prefix}.bqkv"] = (3 * d,)
        shapes[f"{prefix}.wo"] = (d, d)
        shapes[f"{prefix}.bo"] = (d,)

    def cross_attn(prefix):
        shapes[f"{prefix}.wq"] = (d, d)
        shapes[f"{prefix}.bq"] = (d,)
        shapes[f"{prefix}.wkv"] = (d, 2 * d)
        shapes[f"{prefix}.bkv"] = (2 * d,)
        shapes[f"{prefix}.wo"] = (d, d)
        shapes[f"{prefix}.bo"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.layers):
        norm(f"enc{i}.ln1")
        self_attn(f"enc{i}.sa")
        norm(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    for i in range(cfg.layers):
        norm(f"dec{i}.ln1")
        self_attn(f"dec{i}.sa")
        norm(f"dec{i}.ln2")
        cross_attn(f"dec{i}.ca")
        norm(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    norm("enc.ln")
    norm("dec.ln")
    return shapes


def init_model(cfg: ModelConfig, rng: RngStream) -> ModelState:
    """Weight matrices ~ Normal(0, 0.02^2); norm gains 1; all biases 0."""
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = INIT_STD * rng.normal(shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config=cfg, params=params)


# -- batches -----------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray  # (B, Ls) source ids + EOS, PAD-padded
    tgt_in: np.ndarray  # (B, Lt) BOS + target ids
    tgt_out: np.ndarray  # (B, Lt) target ids + EOS
    n_pairs: int

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD_ID

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD_ID

    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def make_batch(pairs, cfg: ModelConfig) -> Batch:
    """Pad raw (src, tgt) id sequences into arrays, appending EOS/BOS."""
    if not pairs:
        raise ArityError("empty batch")
    for src, tgt in pairs:
        for t in list(src) + list(tgt):
            if not 0 <= t < cfg.vocab_size:
                raise VocabularyError(f"token id {t} outside vocabulary")
        if len(src) + 1 > cfg.max_len or len(tgt) + 1 > cfg.max_len:
            raise ValueError("sequence longer than max_len-1")
    b = len(pairs)
    ls = max(len(src) for src, _ in pairs) + 1
    lt = max(len(tgt) for _, tgt in pairs) + 1
    src_arr = np.full((b, ls), PAD_ID, dtype=np.int64)
    tin = np.full((b, lt), PAD_ID, dtype=np.int64)
    tout = np.full((b, lt), PAD_ID, dtype=np.int64)
    for i, (src, tgt) in enumerate(pairs):
        src_arr[i, : len(src)] = src
        src_arr[i, len(src)] = EOS_ID
        tin[i, 0] = BOS_ID
        tin[i, 1 : len(tgt) + 1] = tgt
        tout[i, : len(tgt)] = tgt
        tout[i, len(tgt)] = EOS_ID
    return Batch(src=src_arr, tgt_in=tin, tgt_out=tout, n_pairs=b)


# -- graph building ------------------------------------------------------------


def _dropout(x: Tensor, rate: float, train: bool, rng: RngStream | None) -> Tensor:
    if not train or rate <= 0.0 or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)


def _layer_norm(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(
        x, state.params[f"{prefix}.g"], state.params[f"{prefix}.b"], LN_EPS
    )


def _linear(state: ModelState, w: str, b: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, state.params[w]), state.params[b])


def _heads(t: Tensor, b: int, ln: int, h: int, dh: int) -> Tensor:
    return ad.transpose(ad.reshape(t, (b, ln, h, dh)), (0, 2, 1, 3))


def _attention_core(state, prefix, q, k, v, add_mask, b, lq, d) -> Tensor:
    dh = d // state.config.heads
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = ad.add(scores, add_mask)  # (B,H,Lq,Lk) + (B,1,Lq,Lk)
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, lq, d))
    return _linear(state, f"{prefix}.wo", f"{prefix}.bo", ctx)


def _self_attention(state, prefix, x, add_mask) -> Tensor:
    cfg = state.config
    b, lq, d = x.shape
    h, dh = cfg.heads, d // cfg.heads
    qkv = _linear(state, f"{prefix}.wqkv", f"{prefix}.bqkv", x)
    q = _heads(ad.slice_cols(qkv, 0, d), b, lq, h, dh)
    k = _heads(ad.slice_cols(qkv, d, 2 * d), b, lq, h, dh)
    v = _heads(ad.slice_cols(qkv, 2 * d, 3 * d), b, lq, h, dh)
    return _attention_core(state, prefix, q, k, v, add_mask, b, lq, d)


def _cross_attention(state, prefix, x_q, x_kv, add_mask) -> Tensor:
    cfg = state.config
    b, lq, d = x_q.shape
    lk = x_kv.shape[1]
    h, dh = cfg.heads, d // cfg.heads
    q = _heads(_linear(state, f"{prefix}.wq", f"{prefix}.bq", x_q), b, lq, h, dh)
    kv = _linear(state, f"{prefix}.wkv", f"{prefix}.bkv", x_kv)
    k = _heads(ad.slice_cols(kv, 0, d), b, lk, h, dh)
    v = _heads(ad.slice_cols(kv, d, 2 * d), b, lk, h, dh)
    return _attention_core(state, prefix, q, k, v, add_mask, b, lq, d)


def _ffn(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    hidden = ad.relu(_linear(state, f"{prefix}.w1", f"{prefix}.b1", x))
    return _linear(state, f"{prefix}.w2", f"{prefix}.b2", hidden)


def _embed(state: ModelState, table: str, ids: np.ndarray, train, rng) -> Tensor:
    cfg = state.config
    b, ln = ids.shape
    emb = ad.reshape(
        ad.take_rows(state.params[table], ids.ravel()), (b, ln, cfg.d_model)
    )
    x = ad.add(ad.mul(emb, np.sqrt(cfg.d_model)), state._pos[:ln])
    return _dropout(x, cfg.dropout, train, rng)


def _key_pad_mask(ids: np.ndarray) -> np.ndarray:
    # (B,1,1,Lk): NEG_INF at PAD keys
    return np.where(ids[:, None, None, :] == PAD_ID, NEG_INF, 0.0)


def _causal_mask(ln: int) -> np.ndarray:
    return np.where(np.triu(np.ones((ln, ln), dtype=bool), 1), NEG_INF, 0.0)


def _encoder(state, src, train, rng) -> Tensor:
    cfg = state.config
    x = _embed(state, "src_emb", src, train, rng)
    mask = _key_pad_mask(src)
    for i in range(cfg.layers):
        sa = _self_attention(state, f"enc{i}.sa", _layer_norm(state, f"enc{i}.ln1", x), mask)
        x = ad.add(x, _dropout(sa, cfg.dropout, train, rng))
        ff = _ffn(state, f"enc{i}.ffn", _layer_norm(state, f"enc{i}.ln2", x))
        x = ad.add(x, _dropout(ff, cfg.dropout, train, rng))
    return _layer_norm(state, "enc.ln", x)


def _decoder(state, enc_out: Tensor, src: np.ndarray, tgt_in: np.ndarray, train, rng) -> Tensor:
    cfg = state.config
    x = _embed(state, "tgt_emb", tgt_in, train, rng)
    lt = tgt_in.shape[1]
    self_mask = _key_pad_mask(tgt_in) + _causal_mask(lt)[None, None, :, :]
    cross_mask = _key_pad_mask(src)
    for i in range(cfg.layers):
        sa = _self_attention(state, f"dec{i}.sa", _layer_norm(state, f"dec{i}.ln1", x), self_mask)
        x = ad.add(x, _dropout(sa, cfg.dropout, train, rng))
        ca = _cross_attention(state, f"dec{i}.ca", _layer_norm(state, f"dec{i}.ln2", x), enc_out, cross_mask)
        x = ad.add(x, _dropout(ca, cfg.dropout, train, rng))
        ff = _ffn(state, f"dec{i}.ffn", _layer_norm(state, f"dec{i}.ln3", x))
        x = ad.add(x, _dropout(ff, cfg.dropout, train, rng))
    return _layer_norm(state, "dec.ln", x)


def forward_graph(state: ModelState, batch: Batch, train: bool = False, rng: RngStream | None = None):
    """Full encoder + decoder pass; returns (enc_out, dec_out) tensors."""
    enc_out = _encoder(state, batch.src, train, rng)
    dec_out = _decoder(state, enc_out, batch.src, batch.tgt_in, train, rng)
    return enc_out, dec_out


def masked_rows(t: Tensor, mask: np.ndarray) -> Tensor:
    """Gather the non-masked (B, L, D) rows into an (N, D) tensor."""
    b, ln, d = t.shape
    flat = ad.reshape(t, (b * ln, d))
    idx = np.nonzero(mask.ravel())[0]
    return ad.take_rows(flat, idx, unique=True)


# -- public ops ----------------------------------------------------------------


def _prepare(state: ModelState, grads: bool):
    for name, p in state.params.items():
        p.zero_grad()
        p.requires_grad = grads and (state.embed_trainable or name != "tgt_emb")


def encode(state: ModelState, src_ids) -> np.ndarray:
    """Encoder output rows for a batch of raw source sequences, flattened to
    (sum of lengths, d_model); deterministic (dropout off)."""
    batch = _src_only_batch(src_ids, state.config)
    _prepare(state, grads=False)
    enc = _encoder(state, batch, False, None)
    return masked_rows(enc, batch != PAD_ID).data


def _src_only_batch(src_ids, cfg: ModelConfig) -> np.ndarray:
    if not src_ids:
        raise ArityError("empty batch")
    for s in src_ids:
        for t in s:
            if not 0 <= t < cfg.vocab_size:
                raise VocabularyError(f"token id {t} outside vocabulary")
        if len(s) + 1 > cfg.max_len:
            raise ValueError("sequence longer than max_len-1")
    b = len(src_ids)
    ls = max(len(s) for s in src_ids) + 1
    arr = np.full((b, ls), PAD_ID, dtype=np.int64)
    for i, s in enumerate(src_ids):
        arr[i, : len(s)] = s
        arr[i, len(s)] = EOS_ID
    return arr


def decode_hidden(state: ModelState, src_ids, tgt_prefix_ids) -> np.ndarray:
    """Decoder hidden rows (one per consumed prefix position, BOS included)
    for each sentence, flattened; causal: row i depends only on prefix < i."""
    if len(src_ids) != len(tgt_prefix_ids):
        raise ArityError("source/prefix batch size mismatch")
    src = _src_only_batch(src_ids, state.config)
    b = len(src_ids)
    lt = max(len(p) for p in tgt_prefix_ids) + 1
    tin = np.full((b, lt), PAD_ID, dtype=np.int64)
    keep = np.zeros((b, lt), dtype=bool)
    for i, pref in enumerate(tgt_prefix_ids):
        for t in pref:
            if not 0 <= t < state.config.vocab_size:
                raise VocabularyError(f"token id {t} outside vocabulary")
        tin[i, 0] = BOS_ID
        tin[i, 1 : len(pref) + 1] = pref
        keep[i, : len(pref) + 1] = True
    _prepare(state, grads=False)
    enc = _encoder(state, src, False, None)
    dec = _decoder(state, enc, src, tin, False, None)
    return masked_rows(dec, keep).data


def token_logprob(state: ModelState, h_row: np.ndarray, t: int) -> float:
    """log p(t | h) = <E_t, h> - log sum_t' exp <E_t', h> (max-shifted)."""
    if not 0 <= t < state.config.vocab_size:
        raise VocabularyError(f"token id {t} outside vocabulary")
    scores = state.params["tgt_emb"].data @ np.asarray(h_row, dtype=np.float64)
    m = scores.max()
    return float(scores[t] - (m + np.log(np.exp(scores - m).sum())))


def nmt_head(state: ModelState, dec_out: Tensor, batch: Batch, label_smoothing: float = 0.0) -> Tensor:
    """Mean NLL over non-pad target tokens, scored by <E, H> dot products."""
    mask = batch.tgt_mask
    if not mask.any():
        raise ArityError("batch has no target tokens")
    rows = masked_rows(dec_out, mask)
    logits = ad.matmul(rows, ad.transpose(state.params["tgt_emb"]))
    targets = batch.tgt_out[mask]
    return ad.nll_from_logits(logits, targets, np.ones(targets.size), label_smoothing)


def conmt_head(state: ModelState, dec_out: Tensor, batch: Batch) -> Tensor:
    """Mean over target positions of 1 - cos(E_y, H)."""
    mask = batch.tgt_mask
    if not mask.any():
        raise ArityError("batch has no target tokens")
    h = masked_rows(dec_out, mask)
    e = ad.take_rows(state.params["tgt_emb"], batch.tgt_out[mask])
    hn = np.linalg.norm(h.data, axis=1)
    en = np.linalg.norm(e.data, axis=1)
    if np.any(hn == 0.0) or np.any(en == 0.0):
        raise DegenerateInputError("zero-norm row in cosine loss")
    dot = ad.sum_(ad.mul(h, e), axis=1)
    norm_h = ad.sqrt(ad.sum_(ad.mul(h, h), axis=1))
    norm_e = ad.sqrt(ad.sum_(ad.mul(e, e), axis=1))
    cos = ad.div(dot, ad.mul(norm_h, norm_e))
    return ad.mean_(ad.sub(1.0, cos))


def _collect_grads(state: ModelState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in state.params.items():
        if p.requires_grad:
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def nmt_loss(
    state: ModelState,
    batch: Batch,
    label_smoothing: float = 0.0,
    train: bool = False,
    rng: RngStream | None = None,
    want_grads: bool = True,
):
    """Next-token prediction loss; returns (value, grads-by-name or None)."""
    _prepare(state, grads=want_grads)
    _, dec_out = forward_graph(state, batch, train, rng)
    loss = nmt_head(state, dec_out, batch, label_smoothing)
    if not want_grads:
        return float(loss.data), None
    loss.backward()
    return float(loss.data), _collect_grads(state)


def conmt_loss(
    state: ModelState,
    batch: Batch,
    train: bool = False,
    rng: RngStream | None = None,
    want_grads: bool = True,
):
    """Cosine regression loss onto target embeddings; gradient reaches the
    embedding table only when it is trainable."""
    _prepare(state, grads=want_grads)
    _, dec_out = forward_graph(state, batch, train, rng)
    loss = conmt_head(state, dec_out, batch)
    if not want_grads:
        return float(loss.data), None
    loss.backward()
    return float(loss.data), _collect_grads(state)


# -- decoding -------------------------------------------------------------------


def _decode(state: ModelState, src_ids, max_steps: int, scorer) -> list[list[int]]:
    if not src_ids:
        raise ArityError("empty batch")
    cfg = state.config
    _prepare(state, grads=False)
    src = _src_only_batch(src_ids, cfg)
    enc = _encoder(state, src, False, None)
    b = len(src_ids)
    out: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    limit = min(max_steps, cfg.max_len - 1)
    for step in range(limit):
        lt = step + 1
        tin = np.full((b, lt), PAD_ID, dtype=np.int64)
        tin[:, 0] = BOS_ID
        for i in range(b):
            tin[i, 1 : len(out[i]) + 1] = out[i]
        dec = _decoder(state, enc, src, tin, False, None)
        h_last = dec.data[:, -1, :]
        scores = scorer(h_last)
        picks = np.argmax(scores, axis=1)  # ties -> lowest id
        for i in range(b):
            if done[i]:
                continue
            t = int(picks[i])
            if t == EOS_ID:
                done[i] = True
            else:
                out[i].append(t)
        if done.all():
            break
    return out


def greedy_decode(state: ModelState, src_ids, max_steps: int = 64) -> list[list[int]]:
    """Stepwise argmax of token log-probability until EOS or max_steps."""
    emb = state.params["tgt_emb"].data

    def scorer(h):
        return h @ emb.T

    return _decode(state, src_ids, max_steps, scorer)


def nn_decode(state: ModelState, src_ids, max_steps: int = 64) -> list[list[int]]:
    """Stepwise nearest target embedding by cosine; ties pick the lowest id."""
    emb = state.params["tgt_emb"].data
    en = np.linalg.norm(emb, axis=1)
    emb_unit = emb / np.maximum(en, 1e-30)[:, None]

    def scorer(h):
        hn = np.linalg.norm(h, axis=1)
        return (h / np.maximum(hn, 1e-30)[:, None]) @ emb_unit.T

    return _decode(state, src_ids, max_steps, scorer)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(state: ModelState, path, extra_meta: dict | None = None) -> None:
    path = Path(path)
    tensorio.save_tensors(path, state.param_arrays())
    meta = {
        "model_config": asdict(state.config),
        "step": state.step,
        "embed_trainable": state.embed_trainable,
    }
    if extra_meta:
        meta.update(extra_meta)
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    cfg = ModelConfig(**meta["model_config"])
    arrays = tensorio.load_tensors(path)
    expected = _param_shapes(cfg)
    if set(arrays) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    params = {}
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has wrong shape")
        params[name] = Tensor(arrays[name], requires_grad=True)
    state = ModelState(
        config=cfg,
        params=params,
        embed_trainable=bool(meta.get("embed_trainable", True)),
        step=int(meta.get("step", 0)),
    )
    return state, meta
