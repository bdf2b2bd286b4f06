import numpy as np
import pytest

from conftest import small_config
from kvnorm.cache import BUDGETED_POLICIES, CompressionConfig, EvictionLog
from kvnorm.inference import (CapacityError, decode_step, full_forward_greedy,
                              full_forward_logits, greedy_generate, new_state, prefill)
from kvnorm.model import init_weights
from kvnorm.tensor import SplitMix64


def tokens(n, seed=0, vocab=24):
    return [int(t) for t in SplitMix64(seed).integers(vocab, n)]


def test_prefill_no_compression_occupancy(small_model):
    st = prefill(small_model, tokens(20))
    assert (st.occupancy() == 20).all() and st.t == 20


def test_prefill_budget_binds(small_model):
    comp = CompressionConfig("keep_low_l2", budget=6, skip_layers=(0,))
    st = prefill(small_model, tokens(20), comp)
    assert st.occupancy()[0].tolist() == [20, 20]
    assert st.occupancy()[1].tolist() == [6, 6]


def test_prefill_then_decode_matches_full_forward(small_model):
    seq = tokens(25, seed=3)
    st = prefill(small_model, seq[:-1])
    logits, _ = decode_step(small_model, st, seq[-1])
    full = full_forward_logits(small_model, seq)
    assert np.abs(logits - full[-1]).max() < 1e-5


def test_prefill_logits_match_full_forward(small_model):
    seq = tokens(30, seed=4)
    st = prefill(small_model, seq)
    assert np.abs(st.prefill_logits - full_forward_logits(small_model, seq)).max() < 1e-5


def test_greedy_matches_repeated_full_forward(small_model):
    prompt = tokens(12, seed=5)
    st = prefill(small_model, prompt)
    assert greedy_generate(small_model, st, 8) == full_forward_greedy(small_model, prompt, 8)


def test_decode_deterministic(small_model):
    seq = tokens(10, seed=6)
    a = decode_step(small_model, prefill(small_model, seq), 3)[0]
    b = decode_step(small_model, prefill(small_model, seq), 3)[0]
    assert a.tobytes() == b.tobytes()


def test_attention_records_are_distributions(small_model):
    comp = CompressionConfig("keep_low_l2", ratio=0.5, skip_layers=())
    st = prefill(small_model, tokens(16, seed=7), comp)
    for step in range(5):
        _, rec = decode_step(small_model, st, step)
        for l in range(2):
            for h in range(2):
                row = rec.row(l, h)
                assert np.all(row >= 0)
                assert abs(float(row.sum()) - 1.0) < 1e-6
                assert len(row) == len(rec.positions[l][h])


def test_capacity_error():
    w = init_weights(small_config(max_seq_len=4), seed=1)
    st = prefill(w, [1, 2, 3, 4])
    with pytest.raises(CapacityError):
        decode_step(w, st, 5)


def test_prefill_validation(small_model):
    with pytest.raises(ValueError):
        prefill(small_model, [])
    with pytest.raises(ValueError):
        prefill(small_model, [99])
    with pytest.raises(ValueError):
        prefill(small_model, [1] * 65)


def _policies():
    confs = [CompressionConfig(p, ratio=0.6, skip_layers=(0,), seed=5) for p in BUDGETED_POLICIES]
    confs.append(CompressionConfig("keep_low_l2", budget=5, skip_layers=()))
    confs.append(CompressionConfig("fastgen_lite", local_window=3, skip_layers=(),
                                   special_token_ids={0}, punctuation_token_ids={5, 6}))
    return confs


@pytest.mark.parametrize("comp", _policies(), ids=lambda c: f"{c.policy.value}-{c.budget}")
def test_batched_prefill_equals_stepwise_decoding(small_model, comp):
    # a repeated leading token gives exactly tied key norms, which float noise
    # then breaks differently in the two paths
    seq = tokens(24, seed=9)
    log_a, log_b = EvictionLog(), EvictionLog()
    a = prefill(small_model, seq, comp, log_a)
    b = new_state(small_model, comp, log_b)
    for t in seq:
        logits, rec = decode_step(small_model, b, t)
    assert np.abs(a.last_logits - logits).max() < 1e-5
    for l in range(2):
        for h in range(2):
            assert a.caches[l][h].positions.tolist() == b.caches[l][h].positions.tolist()
            assert np.allclose(a.record.row(l, h), rec.row(l, h), atol=1e-6)
    assert log_a.to_csv() == log_b.to_csv()


def test_ratio_zero_is_noop(small_model):
    seq = tokens(20, seed=9)
    base = prefill(small_model, seq)
    for p in BUDGETED_POLICIES:
        st = prefill(small_model, seq, CompressionConfig(p, ratio=0.0, skip_layers=()))
        assert np.array_equal(st.last_logits, base.last_logits)


def test_skip_layers_never_evicted(small_model):
    comp = CompressionConfig("random", budget=2, skip_layers=(1,))
    st = prefill(small_model, tokens(15, seed=10), comp)
    for _ in range(3):
        decode_step(small_model, st, 1)
    assert st.occupancy()[1].tolist() == [18, 18]
    assert st.occupancy()[0].tolist() == [2, 2]


def test_fastgen_prefill_retains_rule_set(small_model):
    comp = CompressionConfig("fastgen_lite", local_window=2, skip_layers=(0,),
                             special_token_ids={0}, punctuation_token_ids={5})
    seq = [0, 3, 5, 7, 8, 5, 9, 10]
    st = prefill(small_model, seq, comp)
    assert st.caches[1][0].positions.tolist() == [0, 2, 5, 6, 7]


def test_end_of_prompt_eviction(small_model):
    seq = tokens(20, seed=11)
    comp = CompressionConfig("oracle_attention", ratio=0.5, skip_layers=(0,),
                             prefill_eviction="end")
    log = EvictionLog()
    st = prefill(small_model, seq, comp, log)
    base = prefill(small_model, seq)
    # the prompt is encoded in full before the single eviction pass
    assert np.array_equal(st.prefill_logits, base.prefill_logits)
    assert st.occupancy()[1].tolist() == [10, 10]
    assert {e.step for e in log.events} == {19}
    for h in range(2):
        row = base.record.row(1, h)
        kept = set(st.caches[1][h].positions.tolist())
        dropped = [p for p in range(20) if p not in kept]
        assert max(row[dropped]) <= min(row[sorted(kept - {19})])


def test_prefill_eviction_mode_validated():
    with pytest.raises(ValueError):
        CompressionConfig("keep_low_l2", ratio=0.5, prefill_eviction="sometimes")
