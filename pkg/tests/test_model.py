import math

import numpy as np
import pytest

from conftest import rel_err, small_config
from kvnorm import checkpoint
from kvnorm.model import (ModelConfig, apply_rope, attention_head, forward_train,
                          init_weights, kv_memory_bytes, multi_head_merge, project_qkv)
from kvnorm.tensor import SplitMix64, ShapeError, l2_norm


class TestConfig:
    def test_reference_defaults(self):
        c = ModelConfig()
        assert (c.num_layers, c.num_heads, c.d_model, c.d_head, c.d_ff, c.max_seq_len) == \
            (4, 4, 128, 32, 512, 512)

    def test_head_split(self):
        with pytest.raises(ValueError):
            ModelConfig(num_heads=3, d_model=8, d_head=3)

    def test_odd_rope(self):
        with pytest.raises(ValueError):
            ModelConfig(num_heads=1, d_model=3, d_head=3, use_rope=True)
        ModelConfig(num_heads=1, d_model=3, d_head=3, use_rope=False)


class TestProjectQKV:
    def test_zero_input(self, small_model):
        q, k, v = project_qkv(small_model, np.zeros((3, 16), np.float32), 0, 1)
        assert not (q.any() or k.any() or v.any())

    def test_identity(self):
        cfg = ModelConfig(num_layers=1, num_heads=1, d_model=4, d_head=4, d_ff=4, vocab_size=5)
        w = init_weights(cfg)
        for name in ("wq", "wk", "wv"):
            setattr(w.layers[0], name, np.eye(4, dtype=np.float32))
        x = np.arange(8, dtype=np.float32).reshape(2, 4)
        q, k, v = project_qkv(w, x, 0, 0)
        assert np.array_equal(q, x) and np.array_equal(v, x)

    def test_hand_case(self):
        cfg = ModelConfig(num_layers=1, num_heads=1, d_model=2, d_head=2, d_ff=2, vocab_size=3)
        w = init_weights(cfg)
        w.layers[0].wq = np.array([[1, 2], [3, 4]], np.float32)
        w.layers[0].wk = np.array([[0, 1], [1, 0]], np.float32)
        w.layers[0].wv = np.array([[2, 0], [0, 2]], np.float32)
        q, k, v = project_qkv(w, np.array([[1, 1]], np.float32), 0, 0)
        assert q.tolist() == [[4, 6]] and k.tolist() == [[1, 1]] and v.tolist() == [[2, 2]]

    def test_head_block(self, small_model):
        x = np.ones((1, 16), np.float32)
        q, _, _ = project_qkv(small_model, x, 1, 1)
        assert np.allclose(q, x @ small_model.layers[1].wq[:, 8:16])

    def test_shape(self, small_model):
        with pytest.raises(ShapeError):
            project_qkv(small_model, np.zeros((1, 5), np.float32), 0, 0)


class TestRope:
    def test_position_zero(self):
        m = SplitMix64(1).normal(8).reshape(2, 4).astype(np.float32)
        assert np.array_equal(apply_rope(m, [0, 0]), m)

    def test_norm_preserved(self):
        m = SplitMix64(2).normal(5 * 8).reshape(5, 8)
        out = apply_rope(m, [0, 3, 17, 100, 511])
        for a, b in zip(m, out):
            assert l2_norm(a) == pytest.approx(l2_norm(b), abs=1e-6)

    def test_single_rotation(self):
        out = apply_rope(np.array([[1.0, 0.0]]), [1])
        assert np.allclose(out, [[math.cos(1), math.sin(1)]], atol=1e-12)

    def test_frequencies(self):
        # pair j rotates by pos * 10000**(-2j/d)
        out = apply_rope(np.array([[0.0, 0.0, 1.0, 0.0]]), [2])
        ang = 2 * 10000 ** (-2 / 4)
        assert np.allclose(out, [[0, 0, math.cos(ang), math.sin(ang)]], atol=1e-12)

    def test_odd(self):
        with pytest.raises(ShapeError):
            apply_rope(np.zeros((1, 3)), [0])


class TestAttentionHead:
    def test_hand_case(self):
        out, scores = attention_head(np.array([[1.0]], np.float32),
                                     np.array([[0.0], [math.log(3)]], np.float32),
                                     np.array([[1.0], [3.0]], np.float32))
        assert np.allclose(scores, [0.25, 0.75], atol=1e-6)
        assert out[0] == pytest.approx(2.5, abs=1e-6)

    def test_single_entry(self):
        v = np.array([[2.0, -1.0]], np.float32)
        out, scores = attention_head(np.ones((1, 2), np.float32), np.ones((1, 2), np.float32), v)
        assert scores.tolist() == [1.0] and np.array_equal(out, v[0])

    def test_equal_keys(self):
        v = SplitMix64(3).normal(12).reshape(4, 3).astype(np.float32)
        out, scores = attention_head(np.ones((1, 3), np.float32), np.ones((4, 3), np.float32), v)
        assert np.allclose(scores, 0.25) and np.allclose(out, v.mean(axis=0), atol=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            attention_head(np.ones((1, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


class TestMerge:
    def test_identity(self):
        out = multi_head_merge([np.array([1.0, 2.0]), np.array([3.0, 4.0])],
                               np.eye(4, dtype=np.float32))
        assert out.tolist() == [1, 2, 3, 4]

    def test_zero(self):
        assert not multi_head_merge([np.zeros(2), np.zeros(2)], np.ones((4, 4))).any()

    def test_hand_case(self):
        out = multi_head_merge([np.array([1.0]), np.array([2.0])],
                               np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert out.tolist() == [7.0, 10.0]

    def test_head_count(self):
        with pytest.raises(ShapeError):
            multi_head_merge([np.zeros(2)], np.eye(4))


class TestMemory:
    def test_zero(self):
        assert kv_memory_bytes(ModelConfig(), 0, 2) == 0

    def test_llama_scale(self):
        cfg = ModelConfig(num_layers=32, num_heads=32, d_model=4096, d_head=128)
        assert kv_memory_bytes(cfg, 4096, 2) == 2_147_483_648

    def test_linear(self):
        c = ModelConfig()
        assert kv_memory_bytes(c, 200, 4) == 2 * kv_memory_bytes(c, 100, 4)

    def test_precision(self):
        with pytest.raises(ValueError):
            kv_memory_bytes(ModelConfig(), 1, 3)


class TestForwardTrain:
    def test_uniform_logits(self):
        cfg = small_config()
        w = init_weights(cfg, seed=1)
        w.unembed[:] = 0.0
        rng = SplitMix64(4)
        x, y = rng.integers(24, 30).reshape(3, 10), rng.integers(24, 30).reshape(3, 10)
        loss, _ = forward_train(w, x, y)
        assert loss == pytest.approx(math.log(24), abs=1e-4)

    def test_shapes_and_finite(self, small_model):
        rng = SplitMix64(5)
        x, y = rng.integers(24, 24).reshape(2, 12), rng.integers(24, 24).reshape(2, 12)
        _, g = forward_train(small_model, x, y)
        for (name, a), (_, ga) in zip(small_model.named_arrays(), g.named_arrays()):
            assert a.shape == ga.shape, name
            assert np.all(np.isfinite(ga)), name

    def test_empty(self, small_model):
        with pytest.raises(ValueError):
            forward_train(small_model, np.zeros((1, 0), int), np.zeros((1, 0), int))

    def test_ignored_targets(self, small_model):
        x = np.array([[1, 2, 3, 4]])
        l1, _ = forward_train(small_model, x, np.array([[-1, -1, 5, -1]]))
        l2, _ = forward_train(small_model, x[:, :3], np.array([[-1, -1, 5]]))
        assert l1 == pytest.approx(l2, rel=1e-5)

    @pytest.mark.parametrize("use_rope", [True, False])
    def test_finite_difference(self, use_rope):
        cfg = ModelConfig(num_layers=1, num_heads=2, d_model=8, d_head=4, d_ff=16,
                          vocab_size=11, max_seq_len=16, use_rope=use_rope)
        w = init_weights(cfg, seed=3, sigma=0.5).astype(np.float64)
        rng = SplitMix64(8)
        x, y = rng.integers(11, 12).reshape(2, 6), rng.integers(11, 12).reshape(2, 6)
        _, g = forward_train(w, x, y)
        grads = dict(g.named_arrays())
        for name, a in w.named_arrays():
            fd = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + 1e-3
                lp, _ = forward_train(w, x, y)
                a[idx] = old - 1e-3
                lm, _ = forward_train(w, x, y)
                a[idx] = old
                fd[idx] = (lp - lm) / 2e-3
            assert rel_err(grads[name], fd) < 1e-4, name


class TestCheckpoint:
    def test_roundtrip(self, small_model, tmp_path):
        w = small_model.astype(np.float32)
        path = tmp_path / "m.kvsq"
        checkpoint.save(w, str(path))
        blob = path.read_bytes()
        assert blob[:4] == b"KVSQ"
        back = checkpoint.load(str(path))
        assert back.config == w.config
        for (_, a), (_, b) in zip(w.named_arrays(), back.named_arrays()):
            assert np.array_equal(a, b)
        assert checkpoint.to_bytes(back) == blob

    def test_header_layout(self, small_model):
        blob = checkpoint.to_bytes(small_model)
        assert int.from_bytes(blob[4:8], "little") == 1
        n = int.from_bytes(blob[8:16], "little")
        assert blob[16:16 + n].decode() == small_model.config.to_json()

    @pytest.mark.parametrize("mutate", [
        lambda b: b[:-1], lambda b: b + b"\0", lambda b: b"XXXX" + b[4:], lambda b: b[:10],
        lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
    ])
    def test_rejects_malformed(self, small_model, mutate):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(mutate(checkpoint.to_bytes(small_model)))
