import numpy as np
import pytest

from sphdisp.data import (
    N_RESERVED,
    RESERVED,
    Corpus,
    TaskMap,
    Vocabulary,
    build_task,
    gen_corpus,
    load_data_dir,
    read_corpus,
    token_name,
    write_corpus,
)
from sphdisp.errors import CorpusParseError


class TestTaskMap:
    def test_bijection_over_non_reserved(self):
        task = build_task(64, seed=3)
        hit = sorted(task.perm[N_RESERVED:].tolist())
        assert hit == list(range(N_RESERVED, 64))
        np.testing.assert_array_equal(task.perm[:N_RESERVED], [0, 1, 2])

    def test_map_reverse(self):
        task = build_task(32, seed=1, mode="map+reverse")
        a, b, c = 5, 9, 17
        assert task.apply([a, b, c]) == [
            int(task.perm[c]),
            int(task.perm[b]),
            int(task.perm[a]),
        ]

    def test_map_only(self):
        task = build_task(32, seed=1, mode="map")
        assert task.apply([5, 9]) == [int(task.perm[5]), int(task.perm[9])]

    def test_same_seed_same_perm(self):
        np.testing.assert_array_equal(build_task(64, 7).perm, build_task(64, 7).perm)

    def test_validation(self):
        with pytest.raises(ValueError):
            build_task(8, 0)
        with pytest.raises(ValueError):
            build_task(32, 0, mode="shuffle")
        with pytest.raises(ValueError):
            TaskMap(perm=np.arange(10)[::-1], mode="map")  # moves reserved ids


class TestGenCorpus:
    def test_counts_non_increasing_by_rank(self):
        _, vocab = gen_corpus(vocab_size=300, n_pairs=2000, seed=1)
        ranked = sorted(
            vocab.non_reserved_ids(), key=lambda i: vocab.rank_of(int(i))
        )
        counts = vocab.counts[ranked]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_default_corpus_has_rare_mass(self):
        _, vocab = gen_corpus(seed=0)  # defaults: |V|=2000, 20k pairs, s=1.2
        n_rare = int(((vocab.counts[3:] < 100)).sum())
        assert n_rare >= 200

    def test_deterministic(self):
        c1, v1 = gen_corpus(vocab_size=200, n_pairs=500, seed=9)
        c2, v2 = gen_corpus(vocab_size=200, n_pairs=500, seed=9)
        assert c1.train == c2.train and c1.dev == c2.dev and c1.test == c2.test
        np.testing.assert_array_equal(v1.counts, v2.counts)

    def test_splits_90_5_5_disjoint(self):
        corpus, _ = gen_corpus(vocab_size=200, n_pairs=1000, seed=2)
        assert len(corpus.train) == 900
        assert len(corpus.dev) == 50
        assert len(corpus.test) == 50

    def test_target_is_task_applied_source(self):
        task = build_task(128, seed=5)
        corpus, _ = gen_corpus(vocab_size=128, n_pairs=100, seed=5, task=task)
        for src, tgt in corpus.train[:20]:
            assert tgt == task.apply(src)

    def test_lengths_in_range(self):
        corpus, _ = gen_corpus(vocab_size=128, n_pairs=200, len_range=(4, 6), seed=3)
        for src, tgt in corpus.train:
            assert 4 <= len(src) <= 6 and len(tgt) == len(src)

    def test_no_reserved_tokens_in_text(self):
        corpus, _ = gen_corpus(vocab_size=64, n_pairs=100, seed=4)
        for src, tgt in corpus.train:
            assert min(src) >= N_RESERVED and min(tgt) >= N_RESERVED

    def test_validation(self):
        with pytest.raises(ValueError):
            gen_corpus(vocab_size=64, n_pairs=10, zipf_s=0.0)
        with pytest.raises(ValueError):
            gen_corpus(vocab_size=64, n_pairs=10, len_range=(1, 4))


class TestCorpusIO:
    def test_round_trip(self, tmp_path):
        corpus, _ = gen_corpus(vocab_size=64, n_pairs=100, seed=6)
        path = tmp_path / "c.txt"
        write_corpus(path, corpus.train)
        assert read_corpus(path) == corpus.train

    def test_format_is_tab_separated_tokens(self, tmp_path):
        path = tmp_path / "c.txt"
        write_corpus(path, [([3, 4], [9])])
        assert path.read_text() == "tok3 tok4\ttok9\n"

    def test_missing_tab_reports_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("tok3 tok4\ttok5\ntok6 tok7\n")
        with pytest.raises(CorpusParseError) as exc:
            read_corpus(path)
        assert exc.value.line_no == 2

    def test_bad_token_reports_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("tok3\ttok5\nwhat?\ttok5\n")
        with pytest.raises(CorpusParseError) as exc:
            read_corpus(path)
        assert exc.value.line_no == 2

    def test_empty_file_is_empty_corpus(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("")
        assert read_corpus(path) == []

    def test_load_data_dir(self, tmp_path):
        corpus, vocab = gen_corpus(vocab_size=64, n_pairs=100, seed=6)
        for split in ("train", "dev", "test"):
            write_corpus(tmp_path / f"corpus.{split}.txt", corpus.split(split))
        (tmp_path / "vocab.json").write_text(vocab.to_json())
        back_corpus, back_vocab = load_data_dir(tmp_path)
        assert back_corpus.train == corpus.train
        np.testing.assert_array_equal(back_vocab.counts, vocab.counts)


class TestVocabulary:
    def test_json_round_trip(self):
        _, vocab = gen_corpus(vocab_size=64, n_pairs=100, seed=6)
        back = Vocabulary.from_json(vocab.to_json(extra={"config_hash": "x"}))
        assert back.tokens == vocab.tokens
        np.testing.assert_array_equal(back.counts, vocab.counts)
        np.testing.assert_array_equal(back.ranks, vocab.ranks)

    def test_ranks_are_permutation(self):
        _, vocab = gen_corpus(vocab_size=100, n_pairs=300, seed=7)
        assert sorted(vocab.ranks[3:].tolist()) == list(range(1, 98))
        assert all(vocab.ranks[:3] == 0)

    def test_rank_ties_break_by_id(self):
        vocab = Vocabulary(
            tokens=[token_name(i) for i in range(6)],
            counts=np.array([0, 0, 0, 5, 5, 9]),
        )
        assert vocab.rank_of(5) == 1
        assert vocab.rank_of(3) == 2
        assert vocab.rank_of(4) == 3

    def test_rare_pool_rule(self):
        _, vocab = gen_corpus(vocab_size=100, n_pairs=300, seed=7)
        pool = vocab.rare_token_ids()
        assert all(vocab.rank_of(int(i)) > 50 for i in pool)
        non_pool = np.setdiff1d(vocab.non_reserved_ids(), pool)
        assert all(vocab.rank_of(int(i)) <= 50 for i in non_pool)

    def test_reserved_have_no_rank(self):
        _, vocab = gen_corpus(vocab_size=64, n_pairs=50, seed=1)
        with pytest.raises(ValueError):
            vocab.rank_of(RESERVED["pad"])

    def test_token_names(self):
        assert token_name(0) == "<pad>"
        assert token_name(1) == "<bos>"
        assert token_name(2) == "<eos>"
        assert token_name(17) == "tok17"


def test_target_side_stays_zipfian():
    # bijection of a Zipf source keeps a Zipf profile on the target side
    _, vocab = gen_corpus(vocab_size=500, n_pairs=5000, seed=11)
    counts = np.sort(vocab.counts[3:])[::-1]
    top_decile = counts[: len(counts) // 10].sum()
    assert top_decile > 0.5 * counts.sum()
    assert (counts < 100).sum() > 200
