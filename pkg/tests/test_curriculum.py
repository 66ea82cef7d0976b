import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from conftest import make_instance, random_params
from opdlab.curriculum import (CurriculumConfig, ScoredSample, bbds_allocation, bbds_buckets,
                               difficulty_gaussian_sample, disagreement_score, dsus_indices,
                               gaussian_probs, read_scored_csv, read_selection, run_rounds,
                               sample_bbds, sample_dsus, sample_gwds, sample_topk, score_pool,
                               select, teacher_reliability, write_scored_csv, write_selection)
from opdlab.env import EnvConfig, Interval, generate_pool, iou
from opdlab.grpo import TrainerState
from opdlab.policy import (LinearSoftmaxPolicy, OracleTeacher, TeacherConfig, corrupted_target,
                           zero_params)
from opdlab.training import make_step, run_steps


def sample(i, delta, reliable=True, disagreement=0.0):
    inst = make_instance(Interval(0, 2), 10, id=f"s{i:03d}")
    # teacher_iou chosen so that teacher - student reproduces delta exactly
    return ScoredSample(inst, delta, 0.0, delta, disagreement, reliable)


def deltas(selected):
    return [s.delta for s in selected]


# --- TRPV / DBTP ---------------------------------------------------------------------

def test_reliability_of_clean_sharp_teacher(env_cfg):
    t = OracleTeacher(TeacherConfig(50.0, 0.0), 0)
    for inst in generate_pool(0, 20, env_cfg):
        m, ok = teacher_reliability(t, inst, 4, 0.5, np.random.default_rng(1))
        assert m >= 0.999 and ok


def test_reliability_of_corrupted_teacher():
    inst = make_instance(Interval(4, 6), 20)
    assert corrupted_target(inst.gt, 20) == Interval(9, 11)
    t = OracleTeacher(TeacherConfig(50.0, 1.0), 0)
    m, ok = teacher_reliability(t, inst, 4, 0.5, np.random.default_rng(2))
    assert m < 0.5 and not ok


def test_reliability_single_prediction_is_that_iou():
    inst = make_instance(Interval(4, 9), 20)
    t = OracleTeacher(TeacherConfig(50.0, 1.0), 0)
    m, _ = teacher_reliability(t, inst, 1, 0.5, np.random.default_rng(3))
    assert m == pytest.approx(iou(Interval(9, 14), inst.gt)) == pytest.approx(1 / 11)


def test_disagreement_zero_for_identical_policies(inst):
    p = random_params(0)
    assert abs(disagreement_score(LinearSoftmaxPolicy(p), LinearSoftmaxPolicy(p), inst,
                                  np.random.default_rng(0))) <= 1e-10


def test_disagreement_grows_with_teacher_sharpness(inst):
    student = LinearSoftmaxPolicy(zero_params(20, 4, 2))
    scores = [disagreement_score(student, OracleTeacher(TeacherConfig(s), 0), inst,
                                 np.random.default_rng(4)) for s in (1.0, 10.0, 50.0)]
    assert scores[0] < scores[1] < scores[2]


# --- score_pool ------------------------------------------------------------------------

def test_score_pool_deterministic_and_thread_invariant(env_cfg):
    pool = generate_pool(1, 24, env_cfg)
    s, t = LinearSoftmaxPolicy(random_params(1)), OracleTeacher(TeacherConfig(5.0, 0.3), 1)
    cfg = CurriculumConfig()
    a = score_pool(s, t, pool, cfg, seed=9)
    assert a == score_pool(s, t, pool, cfg, seed=9)
    assert a == score_pool(s, t, pool, cfg, seed=9, threads=4)
    assert a != score_pool(s, t, pool, cfg, seed=10)
    for x in a:
        assert x.delta == x.teacher_iou - x.student_iou and x.disagreement >= 0


def test_reliable_fraction_tracks_corruption_rate(env_cfg):
    pool = generate_pool(2, 1000, env_cfg)
    t = OracleTeacher(TeacherConfig(50.0, 0.3), 2)
    scored = score_pool(LinearSoftmaxPolicy(zero_params(20, 4, 2)), t, pool,
                        CurriculumConfig(reliability_threshold=0.5), seed=2)
    frac = np.mean([s.reliable for s in scored])
    assert abs(frac - 0.7) <= 0.05
    # the excluded ones are exactly the corrupted ones
    assert all(s.reliable != t.is_corrupted(s.instance) for s in scored)


def test_scored_sample_enforces_delta():
    inst = make_instance(Interval(0, 2), 10)
    with pytest.raises(ValueError):
        ScoredSample(inst, 0.5, 0.2, 0.1, 0.0, True)
    with pytest.raises(ValueError):
        ScoredSample(inst, 0.5, 0.2, 0.5 - 0.2, -1.0, True)


# --- samplers --------------------------------------------------------------------------

def test_dsus_examples():
    assert dsus_indices(5, 3) == [1, 3, 5]
    pool = [sample(i, d) for i, d in enumerate([0.5, 0.1, 0.9, 0.3, 0.7])]
    assert deltas(sample_dsus(pool, 3)) == [0.9, 0.5, 0.1]
    assert deltas(sample_dsus(pool, 5)) == [0.9, 0.7, 0.5, 0.3, 0.1]
    for bad in (1, 6):
        with pytest.raises(ValueError):
            sample_dsus(pool, bad)


def test_topk_examples():
    pool = [sample(i, d) for i, d in enumerate([0.1, 0.9, 0.5, 0.7])]
    assert deltas(sample_topk(pool, 2)) == [0.9, 0.7]
    assert len(sample_topk(pool, 4)) == 4
    with pytest.raises(ValueError):
        sample_topk(pool, 5)


def test_bbds_examples():
    assert bbds_allocation(7, 5) == [2, 2, 1, 1, 1]
    pool = [sample(i, d) for i, d in enumerate([0.0, 0.05, 0.25, 0.3, 0.45, 0.5, 0.65, 0.7, 0.9, 1.0])]
    chosen = sample_bbds(pool, 5, 5)
    b = bbds_buckets(np.array(deltas(pool)), 5)
    picked = sorted(b[[pool.index(s) for s in chosen]])
    assert picked == [0, 1, 2, 3, 4]
    flat = [sample(i, 0.4) for i in range(6)]
    assert [s.id for s in sample_bbds(flat, 3, 5)] == ["s000", "s001", "s002"]


def test_bbds_shortfall_moves_to_next_bucket():
    # bucket 0 holds one sample but is allotted two
    pool = [sample(i, d) for i, d in enumerate([0.0, 0.5, 0.55, 0.6, 0.95, 1.0])]
    chosen = sample_bbds(pool, 4, 2)
    assert len(chosen) == 4 and len({s.id for s in chosen}) == 4
    assert 0.0 in deltas(chosen)


def test_gwds_probabilities():
    p = gaussian_probs([0.9, 0.5], 0.9, 0.2)
    assert p == pytest.approx([1 / (1 + np.exp(-2)), np.exp(-2) / (1 + np.exp(-2))], abs=1e-12)
    assert p == pytest.approx([0.8808, 0.1192], abs=1e-4)
    pool = [sample(i, d) for i, d in enumerate([0.9, 0.5])]
    assert len(sample_gwds(pool, 2, rng=np.random.default_rng(0))) == 2


def test_gwds_single_draw_frequencies():
    pool = [sample(i, d) for i, d in enumerate([0.95, 0.8, 0.6, 0.4, 0.9])]
    ranked_ids = [s.id for s in sorted(pool, key=lambda s: (-s.delta, s.id))]
    p = gaussian_probs(sorted(deltas(pool), reverse=True), 0.9, 0.2)
    rng = np.random.default_rng(5)
    n = 10_000
    hits = [sample_gwds(pool, 1, rng=rng)[0].id for _ in range(n)]
    counts = np.array([hits.count(i) for i in ranked_ids])
    assert chisquare(counts, n * p).pvalue > 0.01


def test_difficulty_sampler_probabilities():
    assert gaussian_probs([0.3, 0.7], 0.3, 0.2) == pytest.approx([0.8808, 0.1192], abs=1e-4)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.random(int(rng.integers(1, 40)))
        assert abs(gaussian_probs(x, 0.3, 0.2).sum() - 1.0) <= 1e-12
    assert np.allclose(gaussian_probs([0.6] * 7, 0.3, 0.2), 1 / 7, atol=1e-15)
    insts = generate_pool(3, 10, EnvConfig())
    out = difficulty_gaussian_sample(insts, rng.random(10), 4, rng=np.random.default_rng(1))
    assert len({i.id for i in out}) == 4
    with pytest.raises(ValueError):
        difficulty_gaussian_sample(insts, rng.random(10), 11, rng=np.random.default_rng(1))


scored_lists = st.lists(st.tuples(st.floats(-1, 1), st.booleans(), st.floats(0, 5)),
                        min_size=1, max_size=40).map(
    lambda rows: [sample(i, round(d, 3), ok, dis) for i, (d, ok, dis) in enumerate(rows)])


@settings(max_examples=150, deadline=None)
@given(scored_lists, st.sampled_from(["dsus", "topk", "bbds", "gwds"]),
       st.sampled_from(["delta", "disagreement"]), st.integers(1, 40), st.integers(1, 7),
       st.integers(0, 2 ** 31))
def test_strategy_invariants(scored, strategy, key, k, B, seed):
    n_ok = sum(s.reliable for s in scored)
    if seed % 5 and n_ok:
        k = 1 + k % n_ok                            # mostly feasible requests
    cfg = CurriculumConfig(strategy=strategy, bbds_buckets=B, sort_key=key)
    if k > n_ok or (strategy == "dsus" and k < 2):
        with pytest.raises(ValueError):
            select(scored, cfg, k, np.random.default_rng(seed))
        return
    out = select(scored, cfg, k, np.random.default_rng(seed))
    assert len(out) == k
    assert len({s.id for s in out}) == k
    assert all(s.reliable for s in out)
    assert out == select(scored, cfg, k, np.random.default_rng(seed))
    ok = [s for s in scored if s.reliable]
    if strategy == "topk":
        rest = [s for s in ok if s not in out]
        if rest:
            assert min(getattr(s, key) for s in out) >= max(getattr(s, key) for s in rest)
    if strategy == "dsus":
        vals = [getattr(s, key) for s in ok]
        assert getattr(out[0], key) == max(vals) and getattr(out[-1], key) == min(vals)


@given(st.integers(0, 500), st.integers(1, 20))
def test_bbds_allocation_property(k, B):
    a = bbds_allocation(k, B)
    assert sum(a) == k and all(abs(x - k / B) < 1 for x in a)


# --- rounds -----------------------------------------------------------------------------

def _opd_trainer(teacher, steps=30):
    step = make_step("opd", 0.5, 11, teacher)

    def train(params, selection, r):
        return run_steps(TrainerState.fresh(params), selection, step, steps, 16).params
    return train


def test_rounds_change_selection_and_single_round_runs_once(env_cfg):
    pool, holdout = generate_pool(4, 64, env_cfg), generate_pool(5, 32, env_cfg, "holdout")
    t = OracleTeacher(TeacherConfig(5.0, 0.0), 4)
    base = random_params(14, d=8, scale=0.3)
    calls = []

    def counting(params, selection, r):
        calls.append(r)
        return _opd_trainer(t)(params, selection, r)

    one = run_rounds(base, t, pool, holdout, CurriculumConfig(k_select=16, rounds=1), counting, 4)
    assert calls == [0] and len(one) == 1 and len(one[0].selected_ids) == 16
    two = run_rounds(base, t, pool, holdout, CurriculumConfig(k_select=16, rounds=2),
                     _opd_trainer(t), 4)
    assert two[0].selected_ids == one[0].selected_ids
    assert set(two[1].selected_ids) != set(two[0].selected_ids)


def test_rounds_report_shortfall(env_cfg):
    pool = generate_pool(6, 10, env_cfg)
    t = OracleTeacher(TeacherConfig(50.0, 1.0), 6)      # every instance unreliable
    with pytest.raises(ValueError, match="shortfall 4"):
        run_rounds(random_params(0), t, pool, pool, CurriculumConfig(k_select=4), _opd_trainer(t), 0)


def test_csv_and_selection_roundtrip(tmp_path, env_cfg):
    pool = generate_pool(7, 12, env_cfg)
    scored = score_pool(LinearSoftmaxPolicy(random_params(2)), OracleTeacher(TeacherConfig(5.0, 0.3), 7),
                        pool, CurriculumConfig(), seed=1)
    write_scored_csv(tmp_path / "s.csv", scored, "config_hash=abc")
    assert read_scored_csv(tmp_path / "s.csv", pool) == scored
    ids = [s.id for s in scored[:5]]
    write_selection(tmp_path / "sel.txt", ids, "config_hash=abc")
    assert read_selection(tmp_path / "sel.txt") == ids
