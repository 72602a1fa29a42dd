import math

import numpy as np
import pytest

from mercatran.errors import CorruptFile, NaNInput, ShapeMismatch
from mercatran.nn import (
    AdamState,
    LRSchedule,
    Tape,
    Tensor,
    adam_step,
    causal_mask,
    grad_check,
    layer_norm,
    scaled_dot_attention,
    softmax_rows,
)
from mercatran.nn import checkpoint as ckpt
from mercatran.nn import tensor as T
from mercatran.nn.functional import attention, key_padding_mask

SEEDS = range(5)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_ln3(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, math.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)

    def test_shift_invariance(self):
        np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_nan(self):
        with pytest.raises(NaNInput):
            softmax_rows(np.array([[0.0, np.nan]]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(0, 30, size=(20, 13))
        y = softmax_rows(x).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_two_values(self):
        np.testing.assert_allclose(layer_norm(np.array([[1.0, 3.0]]), 1.0, 0.0, eps=0.0).data, [[-1.0, 1.0]])

    def test_constant_row(self):
        np.testing.assert_array_equal(layer_norm(np.full((1, 4), 2.5), 1.0, 0.0).data, np.zeros((1, 4)))

    def test_gamma_zero(self):
        np.testing.assert_allclose(layer_norm(np.array([[1.0, -2.0, 7.0]]), 0.0, 5.0).data, [[5.0, 5.0, 5.0]])

    def test_moments(self):
        x = np.random.default_rng(1).normal(3, 4, size=(6, 32))
        y = layer_norm(x, 1.0, 0.0, eps=0.0).data
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-12)


class TestAttention:
    def test_hand_example(self):
        out = scaled_dot_attention([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[10.0, 0.0], [0.0, 10.0]]).data
        w = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
        np.testing.assert_allclose(out, [[10 * w, 10 * (1 - w)]], rtol=1e-12)
        np.testing.assert_allclose(out, [[6.698, 3.302]], atol=1e-3)

    def test_orthogonal_query_gives_mean(self):
        V = np.array([[1.0, 2.0], [3.0, 8.0], [5.0, -1.0]])
        K = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        out = scaled_dot_attention([[0.0, 0.0, 1.0]], K, V)
        np.testing.assert_allclose(out.data, [V.mean(axis=0)])

    def test_causal_first_position(self):
        rng = np.random.default_rng(0)
        Q, K, V = rng.normal(size=(3, 4, 2))
        out = scaled_dot_attention(Q, K, V, mask="causal").data
        np.testing.assert_allclose(out[0], V[0])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_causal_independence(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 4))
        base = scaled_dot_attention(x, x, x, mask="causal").data
        for i in range(5):
            y = x.copy()
            y[i + 1:] += rng.normal(size=y[i + 1:].shape)
            np.testing.assert_array_equal(scaled_dot_attention(y, y, y, mask="causal").data[: i + 1], base[: i + 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))
        with pytest.raises(ShapeMismatch):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 4)))
        with pytest.raises(ShapeMismatch):
            scaled_dot_attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((4, 4)), mask="causal")

    def test_masks(self):
        m = causal_mask(3)
        assert np.isneginf(m[0, 1]) and m[1, 0] == 0 and m[2, 2] == 0
        k = key_padding_mask([1, 3], 3)
        assert k.shape == (2, 1, 1, 3) and np.isneginf(k[0, 0, 0, 1]) and (k[1] == 0).all()


class TestGradCheck:
    """Central-difference checks of every differentiable primitive, in float64."""

    @staticmethod
    def x(seed, *shape):
        return np.random.default_rng(seed).normal(size=shape)

    def test_linear_exact(self):
        assert grad_check(lambda t: T.sum_(t), self.x(0, 4, 3)) < 1e-9

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_squared(self, seed):
        assert grad_check(lambda t: T.sum_(T.mul(softmax_rows(t), softmax_rows(t))), self.x(seed, 4, 6)) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_primitives(self, seed):
        rng = np.random.default_rng(seed + 100)
        w = Tensor(rng.normal(size=(5, 3)))
        b = Tensor(rng.normal(size=(3,)))
        g = Tensor(rng.normal(size=(5,)))
        c = rng.normal(size=(4, 5))
        idx = np.array([2, 0, 2, 3])
        labels = np.array([1, 0, 2, 1])
        fns = {
            "add_mul": lambda t: T.sum_(T.mul(t + c, t - 0.5 * c)),
            "gelu": lambda t: T.sum_(T.mul(T.gelu(t), Tensor(c))),
            "matmul": lambda t: T.sum_(T.mul(T.matmul(t, w) + b, T.matmul(t, w))),
            "layer_norm": lambda t: T.sum_(T.mul(T.layer_norm(t, g, Tensor(np.zeros(5))), Tensor(c))),
            "l2_normalize": lambda t: T.sum_(T.mul(T.l2_normalize(t), Tensor(c))),
            "cross_entropy": lambda t: T.cross_entropy(T.matmul(t, w), labels[:4]),
            "take_rows": lambda t: T.sum_(T.mul(T.take_rows(t, idx), Tensor(c))),
            "reshape_transpose": lambda t: T.sum_(T.mul(T.transpose(T.reshape(t, (2, 2, 5)), (2, 0, 1)),
                                                        Tensor(c.reshape(2, 2, 5).transpose(2, 0, 1)))),
            "getitem_concat": lambda t: T.sum_(T.mul(T.concat([t[1:3], t[:1]], axis=0), Tensor(c[:3]))),
            "mean": lambda t: T.mean(T.mul(t, t), axis=1).sum(),
        }
        for name, f in fns.items():
            err = grad_check(f, rng.normal(size=(4, 5)))
            assert err < 1e-4, name

    @pytest.mark.parametrize("seed", SEEDS)
    def test_attention_with_masks(self, seed):
        rng = np.random.default_rng(seed)
        k = Tensor(rng.normal(size=(2, 2, 4, 3)))
        v = Tensor(rng.normal(size=(2, 2, 4, 3)))
        mask = key_padding_mask([2, 4], 4, np.float64)
        f = lambda q: T.sum_(T.mul(attention(q, k, v, mask), Tensor(np.cos(np.arange(48.0)).reshape(2, 2, 4, 3))))
        assert grad_check(f, rng.normal(size=(2, 2, 4, 3))) < 1e-4
        fc = lambda x: T.sum_(T.mul(scaled_dot_attention(x, x, x, "causal"), Tensor(np.sin(np.arange(12.0)).reshape(4, 3))))
        assert grad_check(fc, rng.normal(size=(4, 3))) < 1e-4


class TestTape:
    def test_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = T.sum_(x * x + x)
        (g,) = tape.gradient(y, [x])
        np.testing.assert_array_equal(g, [3.0, 5.0])

    def test_unconnected_source(self):
        x = Tensor(np.ones(2), requires_grad=True)
        z = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = T.sum_(x)
        assert tape.gradient(y, [z]) == [None]

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            pass
        T.sum_(x)
        assert tape.nodes == []


class TestAdam:
    def test_first_step(self):
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        st = AdamState(schedule=LRSchedule("constant", 0.001))
        adam_step(p, {"w": np.ones(3)}, st)
        np.testing.assert_allclose(p["w"].data, -0.001 * 1 / (1 + 1e-8), rtol=1e-12)
        assert st.t == 1

    def test_zero_grad_noop(self):
        p = {"w": Tensor(np.array([0.5, -1.0]), requires_grad=True)}
        adam_step(p, {"w": np.zeros(2)}, AdamState(schedule=LRSchedule("constant", 0.01)))
        np.testing.assert_array_equal(p["w"].data, [0.5, -1.0])

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            p = {"w": Tensor(np.array([0.3, 0.1]), requires_grad=True)}
            st = AdamState()
            for _ in range(3):
                adam_step(p, {"w": np.array([0.2, -0.7])}, st)
            outs.append(p["w"].data.tobytes())
        assert outs[0] == outs[1]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": Tensor(np.zeros(3), requires_grad=True)}, {"w": np.zeros(2)}, AdamState())

    def test_noam_schedule(self):
        s = LRSchedule("noam", 1.0, 64, 4000)
        assert s(4000) == pytest.approx(64 ** -0.5 * 4000 ** -0.5)
        assert s(100) == pytest.approx(64 ** -0.5 * 100 * 4000 ** -1.5)
        assert s(100) < s(4000) > s(20000)
        decayed = LRSchedule("noam", 1.0, 64, 4000, decay_step=25, gamma=0.5)
        assert decayed(10, epoch=25) == pytest.approx(0.5 * decayed(10, epoch=0))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, dtype=np.float32)}
        ckpt.save(tmp_path / "m", params, {"d": 3}, {"note": "x"}, {"adam.m": {"a": np.zeros((2, 3))}})
        cfg, back, moments, extra = ckpt.load(tmp_path / "m", {"a": (2, 3), "b": (4,)})
        assert cfg == {"d": 3} and extra == {"note": "x"}
        np.testing.assert_array_equal(back["a"], params["a"])
        assert back["a"].dtype == np.float32
        np.testing.assert_array_equal(moments["adam.m"]["a"], np.zeros((2, 3)))
        raw = (tmp_path / "m").read_bytes()
        assert raw[:5] == b"MTRN1"

    def test_shape_validation(self, tmp_path):
        ckpt.save(tmp_path / "m", {"a": np.zeros((2, 3))}, {})
        with pytest.raises(ShapeMismatch):
            ckpt.load(tmp_path / "m", {"a": (3, 2)})
        with pytest.raises(ShapeMismatch):
            ckpt.load(tmp_path / "m", {"a": (2, 3), "b": (1,)})

    def test_corrupt(self, tmp_path):
        ckpt.save(tmp_path / "m", {"a": np.zeros((20, 3))}, {})
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-7])
        with pytest.raises(CorruptFile):
            ckpt.load(tmp_path / "t")
        (tmp_path / "b").write_bytes(b"XXXXX" + raw[5:])
        with pytest.raises(CorruptFile):
            ckpt.load(tmp_path / "b")
