import math

import numpy as np
import pytest

from mercatran.errors import EmptyHistory, HistoryTooLong, InvalidConfig, NonUnitRows, ShapeMismatch, TokenOutOfRange
from mercatran.model import (
    Batch,
    MercatranModel,
    ModelConfig,
    contrastive_step_loss,
    decode_teacher_forced,
    encode_history,
    encode_item,
    generate_query_vectors,
    param_shapes,
    query_vectors,
    training_loss,
)
from mercatran.nn import grad_check_params
from mercatran.nn.tensor import Tensor
from mercatran.preprocess import TokenizedItem


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tok(*ids):
    return TokenizedItem(tuple(ids), "title_brand_category")


def history_of(es, i):
    return [tuple(int(t) for t in es.item_tokens[r] if t) for r in es.history_rows(i)]


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.d, c.d_ff, c.h, c.n_blocks, c.max_history, c.forecast_steps, c.max_tokens) == (64, 1024, 8, 2, 22, 4, 32)
        assert c.temperature == 0.07 and c.batch_size == 256 and c.lr_factor == 1.0

    @pytest.mark.parametrize("bad", [dict(d=30, h=8), dict(forecast_steps=0), dict(temperature=0.0),
                                     dict(vocab_size=40000)])
    def test_invalid(self, bad):
        with pytest.raises(InvalidConfig):
            ModelConfig(**bad).validate()

    def test_param_shapes_consistent(self, tiny_model):
        shapes = param_shapes(tiny_model.config)
        assert {k: v.shape for k, v in tiny_model.params.items()} == shapes
        assert shapes["tok_emb"] == (tiny_model.config.vocab_size, 16)


class TestEncodeItem:
    def test_unit_norm_and_determinism(self, tiny_model):
        v = encode_item(tok(5, 9, 11), tiny_model)
        assert v.shape == (16,)
        assert abs(np.linalg.norm(v.astype(np.float64)) - 1) < 1e-5
        assert encode_item(tok(5, 9, 11), tiny_model).tobytes() == v.tobytes()

    def test_function_of_tokens_only(self, tiny_model):
        a = TokenizedItem((4, 8), "title_only")
        b = TokenizedItem((4, 8), "brand_category")
        assert encode_item(a, tiny_model).tobytes() == encode_item(b, tiny_model).tobytes()

    def test_pad_invariance(self, tiny_model):
        base = tiny_model.item_tower(np.array([[7, 3, 12]])).data
        padded = tiny_model.item_tower(np.array([[7, 3, 12, 0, 0, 0, 0]])).data
        np.testing.assert_allclose(padded, base, atol=1e-6)

    def test_out_of_range(self, tiny_model):
        with pytest.raises(TokenOutOfRange):
            encode_item(tok(tiny_model.config.vocab_size), tiny_model)


class TestEncodeHistory:
    def test_shapes(self, tiny_model):
        assert encode_history([tok(4)], tiny_model).shape == (1, 16)
        assert encode_history([tok(4 + k % 7) for k in range(22)], tiny_model).shape == (22, 16)

    def test_default_width(self):
        m = MercatranModel(ModelConfig(vocab_size=50, d_ff=64, n_blocks=1))
        assert encode_history([tok(3, 4)] * 22, m).shape == (22, 64)

    def test_errors(self, tiny_model):
        with pytest.raises(EmptyHistory):
            encode_history([], tiny_model)
        with pytest.raises(HistoryTooLong):
            encode_history([tok(4)] * 23, tiny_model)

    def test_padding_region_ignored(self, tiny_model):
        rng = np.random.default_rng(0)
        x = unit_rows(rng, 8, 16).astype(np.float32)[None]
        base = tiny_model.encoder(Tensor(x), [5]).data
        y = x.copy()
        y[0, 5:] = unit_rows(rng, 3, 16)
        np.testing.assert_array_equal(tiny_model.encoder(Tensor(y), [5]).data[0, :5], base[0, :5])


class TestDecoder:
    def setup_memory(self, model, seed=0):
        rng = np.random.default_rng(seed)
        memory = encode_history([tok(4, 5), tok(6), tok(7, 8, 9)], model)
        targets = unit_rows(rng, 4, 16).astype(np.float32)
        return memory, targets, rng

    def test_output_norms(self, tiny_model):
        memory, targets, _ = self.setup_memory(tiny_model)
        out = decode_teacher_forced(memory, targets, tiny_model)
        assert out.shape == (4, 16)
        np.testing.assert_allclose(np.linalg.norm(out.astype(np.float64), axis=1), 1, atol=1e-5)

    @pytest.mark.parametrize("s", range(4))
    def test_causality_exact(self, tiny_model, s):
        memory, targets, rng = self.setup_memory(tiny_model, seed=s)
        base = decode_teacher_forced(memory, targets, tiny_model)
        pert = targets.copy()
        pert[s:] = unit_rows(rng, 4 - s, 16)
        out = decode_teacher_forced(memory, pert, tiny_model)
        # prediction at step s (0-based) sees only targets before s
        assert out[: s + 1].tobytes() == base[: s + 1].tobytes()
        if s < 3:
            assert not np.array_equal(out[s + 1:], base[s + 1:])

    def test_wrong_target_count(self, tiny_model):
        memory, targets, _ = self.setup_memory(tiny_model)
        with pytest.raises(ShapeMismatch):
            decode_teacher_forced(memory, targets[:3], tiny_model)


class TestGenerate:
    def test_four_unit_vectors(self, tiny_model):
        q = generate_query_vectors([tok(4, 5), tok(6)], tiny_model)
        assert q.shape == (4, 16)
        np.testing.assert_allclose(np.linalg.norm(q.astype(np.float64), axis=1), 1, atol=1e-5)

    def test_deterministic(self, tiny_model):
        h = [tok(4, 5), tok(6), tok(9)]
        assert generate_query_vectors(h, tiny_model).tobytes() == generate_query_vectors(h, tiny_model).tobytes()

    def test_first_step_matches_teacher_forcing(self, tiny_model):
        h = [tok(4, 5), tok(6), tok(9)]
        q = generate_query_vectors(h, tiny_model)
        tf = decode_teacher_forced(encode_history(h, tiny_model), np.tile(q[:1], (4, 1)), tiny_model)
        np.testing.assert_allclose(q[0], tf[0], atol=1e-6)

    def test_later_steps_feed_back_predictions(self, tiny_model):
        h = [tok(4, 5), tok(6), tok(9)]
        q = generate_query_vectors(h, tiny_model)
        tf = decode_teacher_forced(encode_history(h, tiny_model), q, tiny_model)
        np.testing.assert_allclose(tf, q, atol=1e-5)

    def test_empty(self, tiny_model):
        with pytest.raises(EmptyHistory):
            generate_query_vectors([], tiny_model)

    def test_batched_matches_single(self, tiny_model, small_examples):
        _, es = small_examples
        sub = es.subset(np.arange(5))
        batched = query_vectors(tiny_model, sub, batch_size=3)
        for i in range(5):
            single = generate_query_vectors([tok(*t) for t in history_of(sub, i)], tiny_model)
            np.testing.assert_allclose(batched[i], single, atol=1e-5)


class TestContrastiveLoss:
    def test_single_row_zero(self):
        v = np.array([[0.6, 0.8]])
        assert contrastive_step_loss(v, v).item() == 0.0

    def test_identical_rows(self):
        rows = np.tile([[1.0, 0.0, 0.0]], (4, 1))
        assert abs(contrastive_step_loss(rows, rows).item() - math.log(4)) < 1e-6

    def test_orthonormal_pair(self):
        e = np.eye(2)
        assert abs(contrastive_step_loss(e, e, tau=1.0).item() - math.log(1 + math.exp(-1))) < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        P, Q = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
        assert contrastive_step_loss(P, Q).item() == pytest.approx(contrastive_step_loss(Q, P).item(), abs=1e-12)

    def test_non_unit(self):
        with pytest.raises(NonUnitRows):
            contrastive_step_loss(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]))

    def test_perfect_orthogonal_prediction_near_zero(self):
        e = np.eye(4)
        # diagonal logits 1/tau against zero off-diagonal
        expected = math.log(1 + 3 * math.exp(-1 / 0.07))
        loss = contrastive_step_loss(e, e, 0.07).item()
        assert loss == pytest.approx(expected, rel=1e-9) and loss < 1e-5

    def test_duplicates_positive(self):
        e = np.eye(4)[[0, 0, 1, 2]]
        assert contrastive_step_loss(e, e, 0.07).item() > 0.1


class TestTrainingLoss:
    def test_permutation_invariant(self, tiny_model, small_examples):
        _, es = small_examples
        idx = np.arange(8)
        a = training_loss(es, tiny_model, idx).item()
        b = training_loss(es, tiny_model, idx[::-1].copy()).item()
        assert abs(a - b) < 1e-6

    def test_finite_nonnegative(self, tiny_model, small_examples):
        _, es = small_examples
        val = training_loss(es, tiny_model, np.arange(10)).item()
        assert np.isfinite(val) and val >= 0

    def test_batch_dedups_rows(self, small_examples):
        _, es = small_examples
        b = Batch.from_examples(es, np.arange(6))
        assert len(np.unique(b.tokens, axis=0)) <= b.tokens.shape[0]
        assert b.targets.shape == (6, 4) and b.targets.max() < b.tokens.shape[0]

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck_two_examples(self, small_examples, seed):
        _, es = small_examples
        batch = Batch.from_examples(es, [2 * seed, 2 * seed + 1])
        # renumber the batch's tokens densely so every embedding row is exercised
        used, dense = np.unique(batch.tokens, return_inverse=True)
        batch.tokens = dense.reshape(batch.tokens.shape) + (used[0] != 0)
        cfg = ModelConfig(d=8, d_ff=16, h=2, n_blocks=1, vocab_size=int(batch.tokens.max()) + 1, dropout=0.0,
                          seed=seed)
        model = MercatranModel(cfg).astype(np.float64)
        errs = grad_check_params(lambda: training_loss(batch, model), model.params, n_samples=6, seed=seed)
        emb = grad_check_params(lambda: training_loss(batch, model), {"tok_emb": model.params["tok_emb"]},
                                n_samples=None)
        assert max(errs.values()) < 1e-4 and emb["tok_emb"] < 1e-4


class TestPersistence:
    def test_round_trip(self, tiny_model, tmp_path):
        tiny_model.save(tmp_path / "m", {"tag": 1})
        back, moments, extra = MercatranModel.load(tmp_path / "m")
        assert extra == {"tag": 1} and moments == {}
        assert back.config == tiny_model.config
        h = [tok(4, 5), tok(6)]
        assert generate_query_vectors(h, back).tobytes() == generate_query_vectors(h, tiny_model).tobytes()
