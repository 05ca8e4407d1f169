"""Translation scoring and checkpoint analyses.

Corpus BLEU is the classic 4-gram variant: clipped n-gram precisions
pooled over the corpus, uniform weights, brevity penalty, no smoothing
(any zero precision zeroes the score).  Token-level quality is summarized
as F1 pooled per token-frequency bucket, with frequencies taken from the
training split.  Both operate directly on token ids.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import RngStream
from .errors import ArityError, IncompatibleCheckpointsError
from .geometry import MetricRecord
from .model import greedy_decode, load_checkpoint, nn_decode
from .training import pack_probe_batch, probe_metrics


@dataclass(frozen=True)
class BucketSpec:
    """Token-frequency bucket edges; bucket i is [edges[i], edges[i+1])
    with the last bucket open-ended.  Edges must start at 1 and increase."""

    edges: tuple[int, ...] = (1, 100, 1000, 10000)

    def __post_init__(self):
        if len(self.edges) < 1 or self.edges[0] != 1:
            raise ValueError("bucket edges must start at 1")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bucket edges must be strictly increasing")

    def bucket_of(self, freq: int) -> int:
        """Index of the bucket holding ``freq``; counts below 1 fold into
        the lowest bucket."""
        idx = int(np.searchsorted(self.edges, freq, side="right")) - 1
        return max(0, idx)

    def ranges(self) -> list[tuple[int, int | None]]:
        out = []
        for i, lo in enumerate(self.edges):
            hi = self.edges[i + 1] if i + 1 < len(self.edges) else None
            out.append((lo, hi))
        return out


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps, refs) -> float:
    """Corpus-level BLEU in [0, 100] over token sequences."""
    if len(hyps) != len(refs):
        raise ArityError("hypothesis/reference count mismatch")
    if not hyps:
        raise ArityError("empty corpus")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        total = 0
        match = 0
        for h, r in zip(hyps, refs):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            total += max(len(h) - n + 1, 0)
            match += sum(min(c, rc[g]) for g, c in hc.items())
        if match == 0 or total == 0:
            return 0.0
        log_p += 0.25 * np.log(match / total)
    bp = min(1.0, float(np.exp(1.0 - ref_len / hyp_len)))
    return float(100.0 * bp * np.exp(log_p))


def f1_by_bucket(hyps, refs, vocab, spec: BucketSpec = BucketSpec()):
    """Per-frequency-bucket token F1, pooled over the corpus.

    For each token type, matches are per-sentence clipped counts; precision
    and recall pool matched/hyp/ref counts over all types in a bucket.  A
    bucket empty on both sides scores 0.  Returns a list of
    ``{"lo", "hi", "f1"}`` dicts (``hi`` None for the open bucket).
    """
    if len(hyps) != len(refs):
        raise ArityError("hypothesis/reference count mismatch")
    nb = len(spec.edges)
    match = np.zeros(nb)
    hyp_count = np.zeros(nb)
    ref_count = np.zeros(nb)
    bucket_cache: dict[int, int] = {}

    def bucket(tok: int) -> int:
        if tok not in bucket_cache:
            bucket_cache[tok] = spec.bucket_of(int(vocab.counts[tok]))
        return bucket_cache[tok]

    for h, r in zip(hyps, refs):
        hc = Counter(h)
        rc = Counter(r)
        for tok, c in hc.items():
            b = bucket(tok)
            hyp_count[b] += c
            match[b] += min(c, rc[tok])
        for tok, c in rc.items():
            ref_count[bucket(tok)] += c
    out = []
    for i, (lo, hi) in enumerate(spec.ranges()):
        p = match[i] / hyp_count[i] if hyp_count[i] > 0 else 0.0
        r = match[i] / ref_count[i] if ref_count[i] > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append({"lo": lo, "hi": hi, "f1": float(f1)})
    return out


def decode_corpus(state, pairs, decoder: str, max_steps: int = 64, chunk: int = 64):
    """Decode the source side of (src, tgt) pairs in minibatches."""
    if decoder not in ("greedy", "nn"):
        raise ValueError("decoder must be 'greedy' or 'nn'")
    fn = greedy_decode if decoder == "greedy" else nn_decode
    hyps = []
    for i in range(0, len(pairs), chunk):
        hyps.extend(fn(state, [src for src, _ in pairs[i : i + chunk]], max_steps))
    return hyps


def score_split(state, pairs, vocab, decoder: str, spec: BucketSpec = BucketSpec()):
    """Decode and score one corpus split; returns {"bleu", "buckets"}."""
    hyps = decode_corpus(state, pairs, decoder)
    refs = [tgt for _, tgt in pairs]
    return {
        "bleu": corpus_bleu(hyps, refs),
        "buckets": f1_by_bucket(hyps, refs, vocab, spec),
    }


def collapse_sweep(ckpt_paths, probe_pairs, seed: int = 0) -> list[MetricRecord]:
    """Probe every checkpoint with one shared probe batch; records sorted by
    step (H, E, F within a step).  All checkpoints must share a ModelConfig."""
    if not ckpt_paths:
        raise ArityError("no checkpoints given")
    states = []
    cfg = None
    for path in ckpt_paths:
        state, _ = load_checkpoint(path)
        if cfg is None:
            cfg = state.config
        elif state.config != cfg:
            raise IncompatibleCheckpointsError(
                f"{path}: model config differs from the first checkpoint"
            )
        states.append(state)
    probe = pack_probe_batch(probe_pairs, cfg, RngStream(seed).split("probe"))
    records: list[MetricRecord] = []
    for state in states:
        records.extend(probe_metrics(state, probe, state.step))
    comp_order = {"H": 0, "E": 1, "F": 2}
    records.sort(key=lambda r: (r.step, comp_order[r.component]))
    return records
