import json

import numpy as np
import pytest

import sphdisp.autodiff as ad
from sphdisp.autodiff import RngStream, Tensor
from sphdisp.data import BOS_ID, EOS_ID, PAD_ID
from sphdisp.errors import ArityError, CheckpointError, DegenerateInputError, VocabularyError
from sphdisp.model import (
    ModelConfig,
    conmt_head,
    conmt_loss,
    decode_hidden,
    encode,
    greedy_decode,
    init_model,
    load_checkpoint,
    make_batch,
    masked_rows,
    nmt_loss,
    nn_decode,
    save_checkpoint,
    token_logprob,
)

TINY = dict(vocab_size=50, d_model=16, layers=2, heads=4, ffn_dim=32, max_len=32, dropout=0.0)


@pytest.fixture
def tiny_state():
    return init_model(ModelConfig(**TINY), RngStream(11))


@pytest.fixture
def tiny_batch(tiny_pairs):
    return make_batch(tiny_pairs, ModelConfig(**TINY))


class TestConfigAndInit:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, d_model=30, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=0)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, positional="learned")
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=10, dropout=1.0)

    def test_init_deterministic(self):
        cfg = ModelConfig(**TINY)
        a = init_model(cfg, RngStream(5))
        b = init_model(cfg, RngStream(5))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_init_statistics(self, tiny_state):
        emb = tiny_state.params["tgt_emb"].data
        norms = np.linalg.norm(emb, axis=1)
        assert norms.min() > 0
        assert norms.max() <= 0.02 * np.sqrt(16) * 5
        for name, p in tiny_state.params.items():
            if name.endswith(".g"):
                np.testing.assert_array_equal(p.data, 1.0)
            elif p.data.ndim == 1:
                np.testing.assert_array_equal(p.data, 0.0)

    def test_forward_smoke_finite(self, tiny_state, tiny_batch):
        value, grads = nmt_loss(tiny_state, tiny_batch)
        assert np.isfinite(value)
        assert all(np.all(np.isfinite(g)) for g in grads.values())


class TestBatch:
    def test_layout(self, tiny_pairs):
        batch = make_batch(tiny_pairs, ModelConfig(**TINY))
        assert batch.src[0, 4] == EOS_ID and batch.src[1, 3] == EOS_ID
        assert batch.tgt_in[0, 0] == BOS_ID
        assert batch.tgt_out[0, 4] == EOS_ID
        assert batch.tgt_out[1, 4] == PAD_ID
        assert batch.n_tokens() == 5 + 4

    def test_validation(self):
        cfg = ModelConfig(**TINY)
        with pytest.raises(ArityError):
            make_batch([], cfg)
        with pytest.raises(VocabularyError):
            make_batch([([99], [1])], cfg)
        with pytest.raises(ValueError):
            make_batch([(list(range(3, 35)), [5])], cfg)


class TestTokenLogprob:
    def test_two_token_hand_case(self):
        cfg = ModelConfig(vocab_size=2, d_model=2, layers=1, heads=1, ffn_dim=4, dropout=0.0)
        state = init_model(cfg, RngStream(0))
        state.params["tgt_emb"].data = np.eye(2)
        lp = token_logprob(state, np.array([1.0, 0.0]), 0)
        assert abs(lp - (1 - np.log(np.e + 1))) < 1e-12

    def test_zero_hidden_is_uniform(self, tiny_state):
        lp = token_logprob(tiny_state, np.zeros(16), 7)
        assert abs(lp - (-np.log(50))) < 1e-12

    def test_normalization(self, tiny_state, rng):
        h = rng.normal(16)
        total = sum(np.exp(token_logprob(tiny_state, h, t)) for t in range(50))
        assert abs(total - 1.0) < 1e-9

    def test_matches_naive_log_softmax(self, tiny_state, rng):
        # dot-product/log-sum-exp route vs literal softmax-then-log route
        for _ in range(100):
            h = rng.normal(16)
            scores = tiny_state.params["tgt_emb"].data @ h
            naive = np.log(np.exp(scores) / np.exp(scores).sum())
            t = int(rng.integers(0, 50))
            assert abs(token_logprob(tiny_state, h, t) - naive[t]) < 1e-6

    def test_bad_token(self, tiny_state):
        with pytest.raises(VocabularyError):
            token_logprob(tiny_state, np.zeros(16), 50)


class TestEncode:
    def test_eval_deterministic(self, tiny_state):
        a = encode(tiny_state, [[5, 6, 7], [8, 9]])
        b = encode(tiny_state, [[5, 6, 7], [8, 9]])
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4 + 3, 16)  # lengths + EOS each

    def test_empty_batch(self, tiny_state):
        with pytest.raises(ArityError):
            encode(tiny_state, [])

    def test_batch_permutation_permutes_rows(self, tiny_state):
        ab = encode(tiny_state, [[5, 6, 7], [8, 9]])
        ba = encode(tiny_state, [[8, 9], [5, 6, 7]])
        np.testing.assert_allclose(ab[:4], ba[3:], atol=1e-12)
        np.testing.assert_allclose(ab[4:], ba[:3], atol=1e-12)


class TestDecodeHidden:
    def test_appending_token_keeps_prefix_rows(self, tiny_state):
        h1 = decode_hidden(tiny_state, [[5, 6, 7]], [[9, 10]])
        h2 = decode_hidden(tiny_state, [[5, 6, 7]], [[9, 10, 11]])
        np.testing.assert_array_equal(h1, h2[:3])

    def test_swapping_future_token_keeps_past(self, tiny_state):
        h1 = decode_hidden(tiny_state, [[5, 6, 7]], [[9, 10, 11]])
        h2 = decode_hidden(tiny_state, [[5, 6, 7]], [[9, 10, 20]])
        np.testing.assert_array_equal(h1[:3], h2[:3])
        assert not np.array_equal(h1[3], h2[3])

    def test_deterministic(self, tiny_state):
        a = decode_hidden(tiny_state, [[5, 6]], [[9]])
        b = decode_hidden(tiny_state, [[5, 6]], [[9]])
        np.testing.assert_array_equal(a, b)


class TestLosses:
    def test_uniform_model_gives_log_vocab(self, tiny_state, tiny_batch):
        tiny_state.params["tgt_emb"].data = np.zeros((50, 16))
        value, _ = nmt_loss(tiny_state, tiny_batch, want_grads=False)
        assert abs(value - np.log(50)) < 1e-12

    def test_peaked_model_has_zero_loss(self):
        # decoder states solved so the dot-product logits exactly peak on the
        # gold token at both positions (tok3, then EOS) of a 1-token batch
        from sphdisp.model import nmt_head

        cfg = ModelConfig(vocab_size=4, d_model=8, layers=1, heads=2, ffn_dim=8, dropout=0.0)
        state = init_model(cfg, RngStream(1))
        batch = make_batch([([3], [3])], cfg)
        emb = state.params["tgt_emb"].data  # (4, 8), full row rank generically
        logits = np.full((2, 4), -50.0)
        logits[0, 3] = 50.0
        logits[1, EOS_ID] = 50.0
        rows, *_ = np.linalg.lstsq(emb, logits.T, rcond=None)  # emb @ rows = logits.T
        dec = Tensor(rows.T.reshape(1, 2, 8))
        value = float(nmt_head(state, dec, batch).data)
        assert value < 1e-9

    def test_label_smoothing_changes_value(self, tiny_state, tiny_batch):
        a, _ = nmt_loss(tiny_state, tiny_batch, want_grads=False)
        b, _ = nmt_loss(tiny_state, tiny_batch, label_smoothing=0.1, want_grads=False)
        assert a != b

    def test_conmt_head_oracles(self, tiny_state, tiny_batch):
        emb = tiny_state.params["tgt_emb"]
        mask = tiny_batch.tgt_mask
        targets = tiny_batch.tgt_out[mask]
        e_rows = emb.data[targets]
        for scale, expect in ((3.0, 0.0), (-2.0, 2.0)):
            dec = Tensor(np.zeros((*tiny_batch.tgt_out.shape, 16)))
            dec.data.reshape(-1, 16)[mask.ravel()] = scale * e_rows
            loss = conmt_head(tiny_state, dec, tiny_batch)
            assert abs(float(loss.data) - expect) < 1e-9

    def test_conmt_orthogonal_gives_one(self, tiny_state, tiny_batch):
        emb = tiny_state.params["tgt_emb"]
        mask = tiny_batch.tgt_mask
        e_rows = emb.data[tiny_batch.tgt_out[mask]]
        # build rows orthogonal to each target embedding
        orth = np.zeros_like(e_rows)
        for i, e in enumerate(e_rows):
            v = np.ones(16)
            v -= (v @ e) / (e @ e) * e
            orth[i] = v
        dec = Tensor(np.zeros((*tiny_batch.tgt_out.shape, 16)))
        dec.data.reshape(-1, 16)[mask.ravel()] = orth
        loss = conmt_head(tiny_state, dec, tiny_batch)
        assert abs(float(loss.data) - 1.0) < 1e-9

    def test_conmt_head_scale_invariance(self, tiny_state, tiny_batch, rng):
        # cosine head is invariant to positive rescaling of H rows and of E
        # rows (the full loss is not, since E also feeds the decoder input)
        mask = tiny_batch.tgt_mask
        dec = Tensor(rng.normal((*tiny_batch.tgt_out.shape, 16)))
        base = float(conmt_head(tiny_state, dec, tiny_batch).data)
        dec_scaled = Tensor(dec.data * np.exp(rng.normal((*mask.shape, 1))))
        assert abs(float(conmt_head(tiny_state, dec_scaled, tiny_batch).data) - base) < 1e-9
        tiny_state.params["tgt_emb"].data *= np.exp(rng.normal((50, 1)))
        assert abs(float(conmt_head(tiny_state, dec, tiny_batch).data) - base) < 1e-9

    def test_conmt_zero_norm_rejected(self, tiny_state, tiny_batch):
        tiny_state.params["tgt_emb"].data[9] = 0.0  # a target token of the batch
        with pytest.raises(DegenerateInputError):
            conmt_loss(tiny_state, tiny_batch, want_grads=False)

    def test_frozen_embeddings_get_no_gradient(self, tiny_state, tiny_batch):
        tiny_state.embed_trainable = False
        _, grads = conmt_loss(tiny_state, tiny_batch)
        assert "tgt_emb" not in grads
        _, grads = nmt_loss(tiny_state, tiny_batch)
        assert "tgt_emb" not in grads

    def test_empty_targets_rejected(self, tiny_state):
        cfg = ModelConfig(**TINY)
        batch = make_batch([([5], [6])], cfg)
        batch.tgt_out[:] = PAD_ID
        with pytest.raises(ArityError):
            nmt_loss(tiny_state, batch, want_grads=False)


class TestDropoutAndDeterminism:
    def test_train_mode_uses_rng_deterministically(self, tiny_pairs):
        cfg = ModelConfig(**dict(TINY, dropout=0.2))
        state = init_model(cfg, RngStream(3))
        batch = make_batch(tiny_pairs, cfg)
        a, _ = nmt_loss(state, batch, train=True, rng=RngStream(7), want_grads=False)
        b, _ = nmt_loss(state, batch, train=True, rng=RngStream(7), want_grads=False)
        c, _ = nmt_loss(state, batch, train=True, rng=RngStream(8), want_grads=False)
        d, _ = nmt_loss(state, batch, train=False, want_grads=False)
        assert a == b != c
        assert a != d


class TestDecoding:
    def test_greedy_deterministic_and_stops(self, tiny_state):
        a = greedy_decode(tiny_state, [[5, 6, 7]], max_steps=8)
        b = greedy_decode(tiny_state, [[5, 6, 7]], max_steps=8)
        assert a == b
        assert all(len(s) <= 8 and EOS_ID not in s for s in a)

    def test_nn_decode_emits_matching_embedding(self):
        cfg = ModelConfig(vocab_size=8, d_model=4, layers=1, heads=1, ffn_dim=8, dropout=0.0)
        state = init_model(cfg, RngStream(2))
        h = decode_hidden(state, [[3]], [[]])[0]
        emb = 0.01 * RngStream(9).normal((8, 4))
        emb[5] = 10.0 * h  # cosine 1 with the first decoder state
        state.params["tgt_emb"].data = emb
        out = nn_decode(state, [[3]], max_steps=1)
        assert out[0][0] == 5

    def test_nn_tie_breaks_to_lowest_id(self):
        cfg = ModelConfig(vocab_size=8, d_model=4, layers=1, heads=1, ffn_dim=8, dropout=0.0)
        state = init_model(cfg, RngStream(2))
        h = decode_hidden(state, [[3]], [[]])[0]
        emb = np.tile(-h, (8, 1))  # every token equally (anti-)aligned
        state.params["tgt_emb"].data = emb
        out = nn_decode(state, [[3]], max_steps=1)
        assert out[0][0] == PAD_ID  # argmax tie -> lowest id


class TestCheckpoint:
    def test_round_trip(self, tiny_state, tmp_path):
        tiny_state.step = 42
        path = tmp_path / "m.sphd"
        save_checkpoint(tiny_state, path, {"objective": "nmt"})
        loaded, meta = load_checkpoint(path)
        assert meta["objective"] == "nmt"
        assert loaded.step == 42
        assert loaded.config == tiny_state.config
        for name, p in tiny_state.params.items():
            np.testing.assert_array_equal(
                loaded.params[name].data, p.data.astype(np.float32).astype(np.float64)
            )

    def test_missing_sidecar(self, tiny_state, tmp_path):
        path = tmp_path / "m.sphd"
        save_checkpoint(tiny_state, path)
        (tmp_path / "m.sphd.json").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_shape_rejected(self, tiny_state, tmp_path):
        path = tmp_path / "m.sphd"
        save_checkpoint(tiny_state, path)
        meta = json.loads((tmp_path / "m.sphd.json").read_text())
        meta["model_config"]["d_model"] = 32
        meta["model_config"]["ffn_dim"] = 64
        (tmp_path / "m.sphd.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
