"""Group Relative Policy Optimization baseline.

Objective, per instance, for a group of G rollouts from the old policy::

    J(theta) = 1/G * sum_i w_i(theta) * rhat_i  -  beta * KL(pi_theta || pi_ref)

with trajectory importance ratio ``w_i = pi_theta(tau_i) / pi_old(tau_i)`` and
``rhat`` the group-normalized sequence reward. Its gradient is
``1/G sum_i w_i rhat_i sum_t grad log pi_theta(a_t|s_t)``: one scalar credit
shared by every token of a trajectory. The KL term is computed exactly over
the vocabulary at each visited state and averaged over the group's states.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .env import GroundingInstance, reward
from .parallel import ordered_map, ordered_sum
from .policy import LinearSoftmaxPolicy, Policy, PolicyParams, Trajectory, score_logit_grads
from .seeding import stream


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    beta: float = 0.01
    learning_rate: float = 0.05
    norm_epsilon: float = 1e-8
    reward: str = "timestamp_aware_iou"
    max_len: int = 8
    old_refresh_every: int = 1

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.reward not in ("iou", "timestamp_aware_iou"):
            raise ValueError(f"unknown reward {self.reward!r}")


@dataclass
class GroupBatch:
    instance: GroundingInstance
    trajectories: list[Trajectory]
    raw_rewards: np.ndarray | None = None
    normalized_rewards: np.ndarray | None = None

    @property
    def tokens_generated(self) -> int:
        return sum(len(t) for t in self.trajectories)


@dataclass
class TrainerState:
    """The single mutable copy a trainer owns; snapshots are never modified."""

    params: PolicyParams
    old_params: PolicyParams
    ref_params: PolicyParams
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: PolicyParams) -> "TrainerState":
        return cls(params.copy(), params.copy(), params.copy())


def rollout_group(old_policy: Policy, instance: GroundingInstance, G: int,
                  rng: np.random.Generator, max_len: int = 8) -> GroupBatch:
    if G < 2:
        raise ValueError("group size must be >= 2")
    # child stream i belongs to rollout i whatever order the rows are evaluated in
    rngs = rng.spawn(G)
    return GroupBatch(instance, old_policy.sample_trajectories(instance, rngs, max_len))


def score_group(batch: GroupBatch, reward_kind: str = "timestamp_aware_iou") -> GroupBatch:
    inst = batch.instance
    batch.raw_rewards = np.array([reward(t.decoded, inst.gt, inst.video_length, reward_kind)
                                  for t in batch.trajectories])
    return batch


def group_normalize(raw_rewards, epsilon: float = 1e-8) -> np.ndarray:
    r = np.asarray(raw_rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group normalization needs at least 2 rewards")
    centered = r - r.mean()
    return centered / (r.std() + epsilon)


def _check_compatible(*params: PolicyParams) -> None:
    shapes = {tuple(p.shapes.items()) for p in params}
    if len(shapes) != 1:
        raise ValueError("parameter sets have mismatched dimensions")


def grpo_gradient(params: PolicyParams, old_params: PolicyParams, ref_params: PolicyParams,
                  batch: GroupBatch, beta: float) -> np.ndarray:
    """Ascent direction of the surrogate J for one scored, normalized group."""
    _check_compatible(params, old_params, ref_params)
    if batch.normalized_rewards is None:
        raise ValueError("batch must be scored and normalized first")
    pol, ref = LinearSoftmaxPolicy(params), LinearSoftmaxPolicy(ref_params)
    inst = batch.instance
    G = len(batch.trajectories)
    n_states = batch.tokens_generated
    grad = np.zeros(params.size)
    for traj, rhat in zip(batch.trajectories, batch.normalized_rewards):
        toks = np.asarray(traj.tokens)
        lp = pol.log_probs_along(inst, toks)
        w = np.exp(lp[np.arange(len(toks)), toks].sum() - traj.logp.sum())
        g = score_logit_grads(lp, toks) * (w * rhat / G)
        if beta:
            g -= beta * _kl_logit_grads(lp, ref.log_probs_along(inst, toks)) / n_states
        grad += pol.backprop(inst, toks, g)
    return grad


def _kl_logit_grads(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    """Rows of d KL(p || q) / d logits_p = p * (log p - log q - KL)."""
    p = np.exp(lp)
    kl = (p * (lp - lq)).sum(axis=1, keepdims=True)
    return p * (lp - lq - kl)


def mean_visited_kl(params: PolicyParams, ref_params: PolicyParams, batch: GroupBatch) -> float:
    pol, ref = LinearSoftmaxPolicy(params), LinearSoftmaxPolicy(ref_params)
    kls = []
    for traj in batch.trajectories:
        lp = pol.log_probs_along(batch.instance, traj.tokens)
        lq = ref.log_probs_along(batch.instance, traj.tokens)
        kls.append((np.exp(lp) * (lp - lq)).sum(axis=1))
    return float(np.concatenate(kls).mean())


def grpo_surrogate(params: PolicyParams, old_params: PolicyParams, ref_params: PolicyParams,
                   batch: GroupBatch, beta: float) -> float:
    """The scalar whose gradient :func:`grpo_gradient` returns."""
    pol = LinearSoftmaxPolicy(params)
    G = len(batch.trajectories)
    total = 0.0
    for traj, rhat in zip(batch.trajectories, batch.normalized_rewards):
        cur = pol.evaluate_trajectory(batch.instance, traj.tokens)
        total += np.exp(cur.sum() - traj.logp.sum()) * rhat / G
    return float(total - beta * mean_visited_kl(params, ref_params, batch))


def _instance_update(state: TrainerState, cfg: GrpoConfig, seed: int, inst: GroundingInstance):
    rng = stream(seed, "grpo", state.step, inst.id)
    batch = rollout_group(LinearSoftmaxPolicy(state.old_params), inst, cfg.group_size, rng,
                          cfg.max_len)
    score_group(batch, cfg.reward)
    batch.normalized_rewards = group_normalize(batch.raw_rewards, cfg.norm_epsilon)
    g = grpo_gradient(state.params, state.old_params, state.ref_params, batch, cfg.beta)
    return g, float(batch.raw_rewards.mean()), batch.tokens_generated


def grpo_step(state: TrainerState, pool_slice: list[GroundingInstance], cfg: GrpoConfig,
              seed: int, threads: int = 1) -> tuple[TrainerState, dict]:
    if not pool_slice:
        raise ValueError("empty pool slice")
    t0 = time.perf_counter()
    results = ordered_map(lambda inst: _instance_update(state, cfg, seed, inst), pool_slice, threads)
    grad = ordered_sum(r[0] for r in results) / len(pool_slice)
    new = state.params.with_flat(state.params.flatten() + cfg.learning_rate * grad)
    step = state.step + 1
    old = new.copy() if step % cfg.old_refresh_every == 0 else state.old_params
    metrics = {
        "step": step,
        "algo": "grpo",
        "mean_reward": float(np.mean([r[1] for r in results])),
        "grad_norm": float(np.linalg.norm(grad)),
        "tokens_generated": int(sum(r[2] for r in results)),
        "wallclock_ms": (time.perf_counter() - t0) * 1e3,
    }
    return TrainerState(new, old, state.ref_params, step, dict(state.extra)), metrics
