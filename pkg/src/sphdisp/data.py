"""Synthetic parallel corpora with Zipfian token frequencies.

Source sequences are drawn i.i.d. from a Zipf(s) distribution over the
non-reserved vocabulary; the target side applies a random tokenwise
bijection and (by default) reverses the sequence, so translation needs
genuine attention while the target-side frequency profile keeps the
rare-token buckets populated.

Generation is a pure function of (parameters, seed); splits are
deterministic 90/5/5 slices by pair index.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RngStream
from .errors import CorpusParseError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
RESERVED = {"pad": PAD_ID, "bos": BOS_ID, "eos": EOS_ID}
N_RESERVED = 3
TASK_MODES = ("map", "map+reverse")

_TOKEN_RE = re.compile(r"^tok(\d+)$")


@dataclass
class Vocabulary:
    """Token inventory with observed train-split counts and frequency ranks.

    Counts are target-side occurrences in the training split (the side the
    rare-token analyses and the embedding regularizer care about).  Ranks
    are a permutation of 1..size-3 over non-reserved tokens, 1 = most
    frequent, ties broken by lower token id.
    """

    tokens: list[str]
    counts: np.ndarray
    ranks: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.tokens) != self.counts.size:
            raise ValueError("tokens and counts length mismatch")
        if len(self.tokens) < N_RESERVED + 1:
            raise ValueError("vocabulary too small")
        ids = np.arange(N_RESERVED, len(self.tokens))
        order = ids[np.lexsort((ids, -self.counts[ids]))]
        ranks = np.zeros(len(self.tokens), dtype=np.int64)
        ranks[order] = np.arange(1, ids.size + 1)
        self.ranks = ranks

    @property
    def size(self) -> int:
        return len(self.tokens)

    def non_reserved_ids(self) -> np.ndarray:
        return np.arange(N_RESERVED, self.size)

    def rank_of(self, token_id: int) -> int:
        if token_id < N_RESERVED or token_id >= self.size:
            raise ValueError(f"token id {token_id} has no frequency rank")
        return int(self.ranks[token_id])

    def rare_token_ids(self) -> np.ndarray:
        """Ids whose frequency rank exceeds half the vocabulary size."""
        return np.nonzero(self.ranks > self.size / 2)[0]

    def to_json(self, extra: dict | None = None) -> str:
        obj = {
            "tokens": self.tokens,
            "counts": self.counts.tolist(),
            "reserved": dict(RESERVED),
        }
        if extra:
            obj.update(extra)
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        obj = json.loads(text)
        if obj.get("reserved") != dict(RESERVED):
            raise ValueError("unexpected reserved-token map")
        return cls(tokens=list(obj["tokens"]), counts=np.asarray(obj["counts"]))


@dataclass
class TaskMap:
    """Tokenwise bijection plus an optional sequence reversal."""

    perm: np.ndarray
    mode: str

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if self.mode not in TASK_MODES:
            raise ValueError(f"mode must be one of {TASK_MODES}")
        nr = self.perm[N_RESERVED:]
        if sorted(nr.tolist()) != list(range(N_RESERVED, self.perm.size)):
            raise ValueError("perm must be a bijection over non-reserved ids")

    def apply(self, src_seq) -> list[int]:
        out = [int(self.perm[t]) for t in src_seq]
        if self.mode == "map+reverse":
            out.reverse()
        return out


@dataclass
class Corpus:
    train: list[tuple[list[int], list[int]]]
    dev: list[tuple[list[int], list[int]]]
    test: list[tuple[list[int], list[int]]]

    def split(self, name: str):
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def token_name(token_id: int) -> str:
    if token_id == PAD_ID:
        return "<pad>"
    if token_id == BOS_ID:
        return "<bos>"
    if token_id == EOS_ID:
        return "<eos>"
    return f"tok{token_id}"


def build_task(vocab_size: int, seed: int, mode: str = "map+reverse") -> TaskMap:
    """Random bijection over non-reserved ids (reserved ids map to themselves)."""
    if vocab_size < 16:
        raise ValueError("vocab_size must be >= 16")
    rng = RngStream(seed).split("task")
    perm = np.arange(vocab_size, dtype=np.int64)
    perm[N_RESERVED:] = N_RESERVED + rng.permutation(vocab_size - N_RESERVED)
    return TaskMap(perm=perm, mode=mode)


def _zipf_cdf(n_types: int, s: float) -> np.ndarray:
    w = np.arange(1, n_types + 1, dtype=np.float64) ** (-s)
    return np.cumsum(w / w.sum())


def gen_corpus(
    vocab_size: int = 2000,
    n_pairs: int = 20000,
    len_range: tuple[int, int] = (8, 16),
    zipf_s: float = 1.2,
    seed: int = 0,
    task: TaskMap | None = None,
):
    """Generate a (Corpus, Vocabulary) pair.

    Which token id gets which frequency rank is itself randomized, so rank
    structure is not aligned with id order.  Vocabulary counts are recorded
    from the target side of the train split.
    """
    if zipf_s <= 0:
        raise ValueError("zipf_s must be positive")
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise ValueError("len_range must satisfy 2 <= lo <= hi")
    if task is None:
        task = build_task(vocab_size, seed)
    rng = RngStream(seed).split("corpus")
    n_types = vocab_size - N_RESERVED
    freq_order = N_RESERVED + rng.permutation(n_types)  # rank r -> id freq_order[r-1]
    lengths = rng.integers(lo, hi + 1, n_pairs)
    total = int(lengths.sum())
    cdf = _zipf_cdf(n_types, zipf_s)
    rank_idx = np.searchsorted(cdf, rng.uniform(total), side="right")
    tokens = freq_order[np.minimum(rank_idx, n_types - 1)]
    pairs = []
    off = 0
    for ln in lengths:
        src = tokens[off : off + ln].tolist()
        off += int(ln)
        pairs.append((src, task.apply(src)))
    i90 = (n_pairs * 90) // 100
    i95 = (n_pairs * 95) // 100
    corpus = Corpus(train=pairs[:i90], dev=pairs[i90:i95], test=pairs[i95:])
    counts = np.zeros(vocab_size, dtype=np.int64)
    for _, tgt in corpus.train:
        counts += np.bincount(tgt, minlength=vocab_size)
    vocab = Vocabulary(
        tokens=[token_name(i) for i in range(vocab_size)], counts=counts
    )
    return corpus, vocab


def write_corpus(path, pairs) -> None:
    """One pair per line: source tokens, TAB, target tokens, single spaces."""
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(
                " ".join(token_name(t) for t in src)
                + "\t"
                + " ".join(token_name(t) for t in tgt)
                + "\n"
            )


def _parse_side(text: str, line_no: int) -> list[int]:
    out = []
    for tok in text.split(" "):
        m = _TOKEN_RE.match(tok)
        if not m:
            raise CorpusParseError(line_no, f"unparseable token {tok!r}")
        out.append(int(m.group(1)))
    return out


def read_corpus(path) -> list[tuple[list[int], list[int]]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusParseError(line_no, "expected exactly one TAB")
            pairs.append(
                (_parse_side(parts[0], line_no), _parse_side(parts[1], line_no))
            )
    return pairs


def load_data_dir(data_dir):
    """Read the three corpus splits and the vocabulary from a directory."""
    data_dir = Path(data_dir)
    vocab = Vocabulary.from_json((data_dir / "vocab.json").read_text())
    corpus = Corpus(
        train=read_corpus(data_dir / "corpus.train.txt"),
        dev=read_corpus(data_dir / "corpus.dev.txt"),
        test=read_corpus(data_dir / "corpus.test.txt"),
    )
    return corpus, vocab
