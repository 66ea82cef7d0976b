import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from opdlab.env import (EOS, SEP, ConfigError, DecodeFailure, EnvConfig, Interval, decode_trajectory,
                        encode_interval, evaluate, generate_instance, generate_pool, iou, load_pool,
                        locate_run, reward, save_pool, timestamp_aware_iou)


def all_intervals(L):
    return [Interval(s, e) for s in range(L) for e in range(s, L)]


# --- generation --------------------------------------------------------------

def test_generated_span_length_in_range(env_cfg):
    inst = generate_instance(0, env_cfg)
    assert 3 <= inst.gt.length <= 6


def test_generation_is_deterministic(env_cfg):
    a, b = generate_instance(0, env_cfg), generate_instance(0, env_cfg)
    assert json.dumps(a.to_record()) == json.dumps(b.to_record())


def test_gt_length_histogram_uniform(env_cfg):
    lengths = [generate_instance(s, env_cfg).gt.length for s in range(1000)]
    counts = np.bincount(lengths, minlength=7)[3:7]
    assert chisquare(counts).pvalue > 0.01


def test_context_has_single_query_run(env_cfg):
    for s in range(200):
        inst = generate_instance(s, env_cfg)
        hits = [i for i, c in enumerate(inst.context) if c == inst.query]
        assert hits == list(range(inst.gt.start, inst.gt.end + 1))
        assert locate_run(inst.context, inst.query) == inst.gt


def test_invalid_config_raises():
    with pytest.raises(ConfigError):
        EnvConfig(video_length=5, min_span=3, max_span=6)
    with pytest.raises(ConfigError):
        EnvConfig(n_symbols=1)


def test_pool_roundtrip(tmp_path, env_cfg):
    pool = generate_pool(1, 20, env_cfg)
    path = tmp_path / "p.jsonl"
    save_pool(path, pool, {"config_hash": "x"})
    assert load_pool(path) == pool
    first = json.loads(path.read_text().splitlines()[1])
    assert list(first) == ["id", "context", "query", "gt_start", "gt_end", "video_length"]


# --- grammar -------------------------------------------------------------------

def test_decode_two_digit():
    assert decode_trajectory([1, 2, SEP, 3, 4, EOS], 40) == Interval(12, 34)


@pytest.mark.parametrize("tokens", [[1, 2, 3, 4, EOS], [5, SEP, 3, EOS], [1, SEP, 2],
                                    [SEP, 2, EOS], [1, SEP, EOS], [1, 2, 3, SEP, 4, EOS],
                                    [1, SEP, 2, SEP, 3, EOS], [1, SEP, 2, EOS, EOS]])
def test_decode_failures_are_values(tokens):
    assert isinstance(decode_trajectory(tokens, 20), DecodeFailure)


def test_decode_end_outside_video():
    assert isinstance(decode_trajectory([1, SEP, 2, 5, EOS], 20), DecodeFailure)


@pytest.mark.parametrize("L,max_digits", [(9, 1), (10, 1), (12, 2), (30, 2), (100, 2)])
def test_encode_decode_roundtrip_exhaustive(L, max_digits):
    for iv in all_intervals(L):
        assert decode_trajectory(encode_interval(iv, max_digits), L, max_digits) == iv


# --- metrics ---------------------------------------------------------------------

def test_iou_examples():
    assert iou(Interval(2, 6), Interval(4, 8)) == pytest.approx(3 / 7, abs=1e-15)
    assert iou(Interval(5, 9), Interval(5, 9)) == 1.0
    assert iou(Interval(0, 2), Interval(5, 9)) == 0.0


def test_timestamp_aware_iou_examples():
    gt = Interval(4, 8)
    assert timestamp_aware_iou(gt, gt, 20) == 1.0
    assert timestamp_aware_iou(Interval(2, 6), gt, 20) == pytest.approx((3 / 7) * 0.9, abs=1e-15)
    assert timestamp_aware_iou(Interval(0, 2), Interval(5, 9), 20) == 0.0


@pytest.mark.parametrize("L", range(1, 13))
def test_iou_symmetric_and_penalty_bounded_exhaustive(L):
    ivs = all_intervals(L)
    for a, b in itertools.product(ivs, ivs):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert timestamp_aware_iou(a, b, L) <= v
        # exact rational check with inclusive endpoints
        inter = len(set(range(a.start, a.end + 1)) & set(range(b.start, b.end + 1)))
        union = len(set(range(a.start, a.end + 1)) | set(range(b.start, b.end + 1)))
        assert v == inter / union


def test_reward_failure_is_zero():
    gt = Interval(1, 3)
    assert reward(DecodeFailure("x"), gt, 10) == 0.0
    assert reward(gt, gt, 10, "iou") == 1.0
    with pytest.raises(ConfigError):
        reward(gt, gt, 10, "bogus")


# --- evaluation ----------------------------------------------------------------

def test_evaluate_hand_example():
    # a prediction that is a prefix of gt scores len(pred) / len(gt): 6/10, 4/10, 11/20
    gts = [Interval(0, 9), Interval(0, 9), Interval(0, 19)]
    preds = [Interval(0, 5), Interval(0, 3), Interval(0, 10)]
    rep = evaluate(preds, gts, [0.5])
    assert rep.recall_at[0.5] == pytest.approx(2 / 3)
    assert rep.mean_iou == pytest.approx((0.6 + 0.4 + 0.55) / 3)


def test_evaluate_all_correct_and_all_failed():
    gts = [Interval(0, 3), Interval(2, 5)]
    rep = evaluate(gts, gts)
    assert rep.mean_iou == 1.0 and all(v == 1.0 for v in rep.recall_at.values())
    rep = evaluate([DecodeFailure(), DecodeFailure()], gts)
    assert rep.mean_iou == 0.0 and all(v == 0.0 for v in rep.recall_at.values())
    assert sorted(rep.recall_at) == [0.3, 0.5, 0.7]


def test_evaluate_empty_raises():
    with pytest.raises(ValueError):
        evaluate([], [])


interval_pairs = st.integers(0, 19).flatmap(
    lambda s: st.tuples(st.just(s), st.integers(s, 19))).map(lambda t: Interval(*t))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.one_of(interval_pairs, st.just(DecodeFailure())), interval_pairs),
                min_size=1, max_size=30),
       st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_recall_monotone_in_threshold(pairs, thresholds):
    rep = evaluate([p for p, _ in pairs], [g for _, g in pairs], thresholds)
    ths = sorted(rep.recall_at)
    vals = [rep.recall_at[t] for t in ths]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert 0.0 <= rep.mean_iou <= 1.0
