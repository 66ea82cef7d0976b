import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from conftest import FixedLogits, central_fd, make_instance, pinned_params, random_params, rel_err
from opdlab.env import EOS, SEP, VOCAB_SIZE, EnvConfig, Interval, encode_interval, generate_pool
from opdlab.policy import (LinearSoftmaxPolicy, OracleTeacher, TeacherConfig, load_checkpoint,
                           make_oracle_teacher, n_phases, phase_of, prefix_phases, save_checkpoint,
                           zero_params)


def random_prefix(rng, max_len=6):
    return [int(t) for t in rng.integers(0, VOCAB_SIZE - 1, size=rng.integers(0, max_len))]


# --- features --------------------------------------------------------------

def test_empty_prefix_block_is_zero(inst):
    x = LinearSoftmaxPolicy(random_params(0)).state_features(inst, ())
    d = x.size // 3
    assert np.all(x[2 * d:] == 0.0)
    assert np.any(x[:2 * d] != 0.0)


def test_prefix_block_order_invariant(inst):
    pol = LinearSoftmaxPolicy(random_params(1))
    a = pol.state_features(inst, [3, 1, SEP, 4])
    b = pol.state_features(inst, [SEP, 4, 3, 1])
    assert np.array_equal(a, b)


def test_zero_params_give_zero_features(inst):
    assert np.all(LinearSoftmaxPolicy(zero_params(20, 4)).state_features(inst, [1, 2]) == 0.0)


def test_phase_tracks_grammar():
    assert [phase_of(p) for p in ([], [1], [1, 2], [1, 2, 3], [1, SEP], [1, SEP, 4], [1, SEP, 4, 5])] \
        == [0, 1, 2, 2, 3, 4, 5]
    toks = [1, 2, SEP, 3, EOS]
    assert list(prefix_phases(toks)) == [phase_of(toks[:t]) for t in range(len(toks))]


# --- distributions ----------------------------------------------------------------

def test_zero_params_uniform(inst):
    pol = LinearSoftmaxPolicy(zero_params(20, 4))
    assert np.allclose(pol.token_distribution(inst, [1]), 1 / 12, atol=1e-15)
    assert pol.log_prob(inst, [], 5) == pytest.approx(np.log(1 / 12), abs=1e-12)


def test_bias_shift_invariance(inst):
    p = random_params(2)
    q = p.copy()
    q.output_bias += 7.5
    a = LinearSoftmaxPolicy(p).token_distribution(inst, [1, SEP])
    b = LinearSoftmaxPolicy(q).token_distribution(inst, [1, SEP])
    assert np.allclose(a, b, atol=1e-14)


def test_large_bias_concentrates(inst):
    p = zero_params(20, 4)
    p.output_bias[:, 0] = 50.0
    assert LinearSoftmaxPolicy(p).token_distribution(inst)[0] >= 1 - 1e-12


def test_distributions_normalized_and_logprob_matches_direct():
    rng = np.random.default_rng(0)
    pool = generate_pool(0, 20, EnvConfig())
    for i in range(100):
        pol = LinearSoftmaxPolicy(random_params([5, i], scale=1.0))
        inst = pool[i % len(pool)]
        prefix = random_prefix(rng)
        dist = pol.token_distribution(inst, prefix)
        assert abs(dist.sum() - 1.0) <= 1e-12 and np.all(dist > 0)
        tok = int(rng.integers(VOCAB_SIZE))
        # oracle: direct softmax of the linear head
        x = pol.state_features(inst, prefix)
        ph = phase_of(prefix)
        z = pol.params.output_weights[ph] @ x + pol.params.output_bias[ph]
        direct = np.exp(z) / np.exp(z).sum()
        assert pol.log_prob(inst, prefix, tok) == pytest.approx(np.log(direct[tok]), abs=1e-10)
        lps = [pol.log_prob(inst, prefix, a) for a in range(VOCAB_SIZE)]
        assert abs(np.exp(lps).sum() - 1.0) <= 1e-10


def test_non_finite_logits_raise(inst):
    p = zero_params(20, 4)
    p.output_bias[0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        LinearSoftmaxPolicy(p).token_distribution(inst)


# --- sampling ---------------------------------------------------------------------

def test_pinned_policy_samples_its_encoding():
    gt = Interval(4, 12)
    inst = make_instance(gt, 20)
    pol = LinearSoftmaxPolicy(pinned_params(gt))
    rngs = np.random.default_rng(0).spawn(1000)
    want = tuple(encode_interval(gt))
    hits = sum(t.tokens == want for t in pol.sample_trajectories(inst, rngs))
    assert hits / 1000 >= 0.999


def test_uniform_first_token_frequencies(inst):
    pol = LinearSoftmaxPolicy(zero_params(20, 4))
    trajs = pol.sample_trajectories(inst, np.random.default_rng(1).spawn(12000))
    counts = np.bincount([t.tokens[0] for t in trajs], minlength=VOCAB_SIZE)
    assert chisquare(counts).pvalue > 0.01


def test_sampling_deterministic_per_stream(inst):
    pol = LinearSoftmaxPolicy(random_params(3))
    a = pol.sample_trajectory(inst, np.random.default_rng(42))
    b = pol.sample_trajectory(inst, np.random.default_rng(42))
    assert a.tokens == b.tokens and np.array_equal(a.logp, b.logp)


def test_trajectory_invariants(inst):
    pol = LinearSoftmaxPolicy(random_params(4))
    for t in pol.sample_trajectories(inst, np.random.default_rng(2).spawn(200), max_len=8):
        assert len(t.logp) == len(t.tokens) <= 8
        assert np.all(t.logp <= 0)
        assert t.tokens[-1] == EOS or len(t.tokens) == 8
        assert EOS not in t.tokens[:-1]


def test_max_len_too_short(inst):
    with pytest.raises(ValueError):
        LinearSoftmaxPolicy(zero_params(20, 4)).sample_trajectory(inst, np.random.default_rng(0), 3)


# --- teacher-forced evaluation ------------------------------------------------------

def test_evaluate_matches_sampling_logp(inst):
    pol = LinearSoftmaxPolicy(random_params(5))
    for t in pol.sample_trajectories(inst, np.random.default_rng(3).spawn(200)):
        assert np.allclose(pol.evaluate_trajectory(inst, t.tokens), t.logp, atol=1e-10, rtol=0)


def test_evaluate_uniform(inst):
    lp = LinearSoftmaxPolicy(zero_params(20, 4)).evaluate_trajectory(inst, [1, 2, SEP, 3, 4])
    assert np.allclose(lp, np.log(1 / 12), atol=1e-14)


def test_evaluate_sum_matches_sequential_product(inst):
    pol = LinearSoftmaxPolicy(random_params(6))
    toks = [1, 4, SEP, 7, EOS]
    prob = 1.0
    for t in range(len(toks)):
        prob *= pol.token_distribution(inst, toks[:t])[toks[t]]
    assert pol.evaluate_trajectory(inst, toks).sum() == pytest.approx(np.log(prob), abs=1e-9)


def test_evaluate_empty_raises(inst):
    with pytest.raises(ValueError):
        LinearSoftmaxPolicy(zero_params(20, 4)).evaluate_trajectory(inst, [])


# --- gradients ----------------------------------------------------------------------

def test_grad_log_prob_matches_finite_differences():
    rng = np.random.default_rng(7)
    pool = generate_pool(7, 50, EnvConfig(video_length=12, max_span=5))
    for i in range(50):
        params = random_params([7, i], video_length=12, d=2, scale=0.8)
        pol = LinearSoftmaxPolicy(params)
        inst, prefix, tok = pool[i], random_prefix(rng), int(rng.integers(VOCAB_SIZE))
        fd = central_fd(lambda q: LinearSoftmaxPolicy(q).log_prob(inst, prefix, tok), params, 1e-5)
        assert rel_err(pol.grad_log_prob(inst, prefix, tok), fd) <= 1e-4


def test_expected_score_is_zero(inst):
    rng = np.random.default_rng(8)
    for i in range(20):
        pol = LinearSoftmaxPolicy(random_params([8, i], scale=1.0))
        prefix = random_prefix(rng)
        dist = pol.token_distribution(inst, prefix)
        total = sum(dist[a] * pol.grad_log_prob(inst, prefix, a) for a in range(VOCAB_SIZE))
        assert np.abs(total).max() <= 1e-8


def test_saturated_policy_output_gradient_vanishes():
    gt = Interval(2, 7)
    inst = make_instance(gt, 20)
    p = pinned_params(gt, logit=60.0)
    g = LinearSoftmaxPolicy(p).grad_log_prob(inst, [], 2)
    offs = p.offsets()
    assert np.abs(g[offs["output_weights"]]).max() <= 1e-8
    assert np.abs(g[offs["output_bias"]]).max() <= 1e-8


def test_flat_layout_roundtrip():
    p = random_params(9)
    offs = p.offsets()
    assert sum(s.stop - s.start for s in offs.values()) == p.size
    q = p.with_flat(p.flatten())
    for k in p.FIELDS:
        assert np.array_equal(getattr(p, k), getattr(q, k))
    assert p.output_weights.shape == (n_phases(2), VOCAB_SIZE, p.d_state)


# --- teacher ------------------------------------------------------------------------

def test_sharp_clean_teacher_greedy_is_exact():
    pool = generate_pool(1, 200, EnvConfig())
    t = OracleTeacher(TeacherConfig(50.0, 0.0), 0)
    assert all(t.greedy(i).decoded == i.gt for i in pool)


def test_fully_corrupted_teacher_never_exact():
    for L in (8, 12, 20, 40):
        pool = generate_pool(2, 200, EnvConfig(video_length=L, min_span=1, max_span=min(6, L)))
        t = OracleTeacher(TeacherConfig(50.0, 1.0), 0)
        assert all(t.greedy(i).decoded != i.gt for i in pool)


def test_corruption_rate_frequency():
    pool = generate_pool(3, 1000, EnvConfig())
    t = make_oracle_teacher(TeacherConfig(5.0, 0.3), np.random.default_rng(0))
    frac = np.mean([t.is_corrupted(i) for i in pool])
    assert abs(frac - 0.3) <= 0.04


def test_teacher_is_fixed_across_student_updates(inst):
    from opdlab.grpo import TrainerState
    from opdlab.opd import OpdConfig, opd_step
    t = OracleTeacher(TeacherConfig(5.0, 0.2), 11)
    toks = [1, SEP, 9, EOS]
    before = t.evaluate_trajectory(inst, toks).tobytes()
    st = TrainerState.fresh(random_params(10))
    for _ in range(3):
        st, _ = opd_step(st, [inst], t, OpdConfig(learning_rate=0.5), seed=0)
    assert t.evaluate_trajectory(inst, toks).tobytes() == before


def test_teacher_shares_policy_contracts(inst):
    t = OracleTeacher(TeacherConfig(3.0), 0)
    traj = t.sample_trajectory(inst, np.random.default_rng(0))
    assert np.allclose(t.evaluate_trajectory(inst, traj.tokens), traj.logp, atol=1e-12)
    assert abs(t.token_distribution(inst, [1]).sum() - 1) <= 1e-12


def test_teacher_config_validation():
    with pytest.raises(ValueError):
        TeacherConfig(0.0)
    with pytest.raises(ValueError):
        TeacherConfig(1.0, 1.5)


# --- checkpoints --------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    a, b = random_params(12), random_params(13)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"student": a, "ref": b}, {"step": 4})
    blocks, header = load_checkpoint(path)
    assert header["meta"]["step"] == 4 and header["vocab"] == VOCAB_SIZE
    assert blocks["student"].flatten().tobytes() == a.flatten().tobytes()
    assert blocks["ref"].flatten().tobytes() == b.flatten().tobytes()


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"student": random_params(0)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.lists(st.integers(0, VOCAB_SIZE - 2), max_size=6))
def test_distribution_sums_to_one_property(seed, prefix):
    inst = make_instance(Interval(3, 6), 20)
    dist = LinearSoftmaxPolicy(random_params(seed, scale=2.0)).token_distribution(inst, prefix)
    assert abs(dist.sum() - 1.0) <= 1e-12


def test_fixed_logits_helper_is_a_policy(inst):
    t = FixedLogits(np.arange(VOCAB_SIZE, dtype=float))
    d = t.token_distribution(inst, [1, 2])
    assert np.argmax(d) == VOCAB_SIZE - 1
