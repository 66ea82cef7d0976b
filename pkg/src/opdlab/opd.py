"""On-policy distillation with dense reverse-KL token rewards.

One rollout per instance from the old (pre-update) student; a fixed teacher
scores every sampled token by teacher forcing; each token gets its own reward
``r_t = log pi_tea(a_t|s_t) - log pi_theta(a_t|s_t)`` and the update is

    sum_t r_t * pi_theta(a_t|s_t) / pi_old(a_t|s_t) * grad log pi_theta(a_t|s_t)

with ``r_t`` held constant (no gradient flows through the reward).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .env import GroundingInstance
from .grpo import TrainerState
from .parallel import ordered_map, ordered_sum
from .policy import LinearSoftmaxPolicy, Policy, PolicyParams, Trajectory, score_logit_grads
from .seeding import stream


@dataclass(frozen=True)
class OpdConfig:
    learning_rate: float = 0.05
    max_len: int = 8
    old_refresh_every: int = 1
    # "current": r_t uses log pi_theta at update time; "sampling": the recorded log pi_old
    reward_logp: str = "current"
    rollouts_per_instance: int = 1

    def __post_init__(self):
        if self.rollouts_per_instance != 1:
            raise ValueError("on-policy distillation uses exactly one rollout per instance")
        if self.reward_logp not in ("current", "sampling"):
            raise ValueError(f"unknown reward_logp {self.reward_logp!r}")


@dataclass
class DenseRewardTrajectory:
    trajectory: Trajectory
    student_logp: np.ndarray
    teacher_logp: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.trajectory)


def dense_rewards(student_logp, teacher_logp) -> np.ndarray:
    s = np.asarray(student_logp, dtype=np.float64)
    t = np.asarray(teacher_logp, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError("student and teacher log-prob sequences differ in length")
    return -(s - t)


def reverse_kl_at_state(student_dist, teacher_dist) -> float:
    p = np.asarray(student_dist, dtype=np.float64)
    q = np.asarray(teacher_dist, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    support = p > 0
    if np.any(q[support] <= 0):
        raise FloatingPointError("teacher assigns zero mass where the student does not")
    return float(max(0.0, np.sum(p[support] * (np.log(p[support]) - np.log(q[support])))))


def score_trajectory(params: PolicyParams, teacher: Policy, instance: GroundingInstance,
                     traj: Trajectory, reward_logp: str = "current") -> DenseRewardTrajectory:
    """Teacher-force ``traj`` through the teacher and attach dense rewards."""
    student_logp = (LinearSoftmaxPolicy(params).evaluate_trajectory(instance, traj.tokens)
                    if reward_logp == "current" else traj.logp)
    teacher_logp = teacher.evaluate_trajectory(instance, traj.tokens)
    return DenseRewardTrajectory(traj, student_logp, teacher_logp,
                                 dense_rewards(student_logp, teacher_logp))


def _token_ratio_grad(params: PolicyParams, instance: GroundingInstance, tokens,
                      old_logp: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    pol = LinearSoftmaxPolicy(params)
    toks = np.asarray(tokens, dtype=np.int64)
    lp = pol.log_probs_along(instance, toks)
    ratio = np.exp(lp[np.arange(len(toks)), toks] - old_logp)
    g = score_logit_grads(lp, toks) * (rewards * ratio)[:, None]
    return pol.backprop(instance, toks, g)


def opd_gradient(params: PolicyParams, old_params: PolicyParams, traj: DenseRewardTrajectory,
                 instance: GroundingInstance) -> np.ndarray:
    if params.shapes != old_params.shapes:
        raise ValueError("parameter sets have mismatched dimensions")
    t = traj.trajectory
    old_logp = LinearSoftmaxPolicy(old_params).evaluate_trajectory(instance, t.tokens)
    return _token_ratio_grad(params, instance, t.tokens, old_logp, traj.rewards)


def opd_surrogate(params: PolicyParams, old_params: PolicyParams, traj: DenseRewardTrajectory,
                  instance: GroundingInstance) -> float:
    """``sum_t r_t * ratio_t(theta)`` with r_t frozen; gradient = :func:`opd_gradient`."""
    t = traj.trajectory
    cur = LinearSoftmaxPolicy(params).evaluate_trajectory(instance, t.tokens)
    old = LinearSoftmaxPolicy(old_params).evaluate_trajectory(instance, t.tokens)
    return float(np.sum(traj.rewards * np.exp(cur - old)))


def _instance_update(state: TrainerState, cfg: OpdConfig, teacher: Policy, seed: int,
                     inst: GroundingInstance):
    rng = stream(seed, "opd", state.step, inst.id)
    traj = LinearSoftmaxPolicy(state.old_params).sample_trajectory(inst, rng, cfg.max_len)
    scored = score_trajectory(state.params, teacher, inst, traj, cfg.reward_logp)
    g = _token_ratio_grad(state.params, inst, traj.tokens, traj.logp, scored.rewards)
    return g, scored.rewards, len(traj)


def opd_step(state: TrainerState, pool_slice: list[GroundingInstance], teacher: Policy,
             cfg: OpdConfig, seed: int, threads: int = 1) -> tuple[TrainerState, dict]:
    if not pool_slice:
        raise ValueError("empty pool slice")
    t0 = time.perf_counter()
    results = ordered_map(lambda inst: _instance_update(state, cfg, teacher, seed, inst),
                          pool_slice, threads)
    grad = ordered_sum(r[0] for r in results) / len(pool_slice)
    new = state.params.with_flat(state.params.flatten() + cfg.learning_rate * grad)
    step = state.step + 1
    old = new.copy() if step % cfg.old_refresh_every == 0 else state.old_params
    rewards = np.concatenate([r[1] for r in results])
    metrics = {
        "step": step,
        "algo": "opd",
        "mean_dense_reward": float(rewards.mean()),
        "kl_proxy": float(-rewards.mean()),
        "grad_norm": float(np.linalg.norm(grad)),
        "tokens_generated": int(sum(r[2] for r in results)),
        "wallclock_ms": (time.perf_counter() - t0) * 1e3,
    }
    return TrainerState(new, old, state.ref_params, step, dict(state.extra)), metrics
