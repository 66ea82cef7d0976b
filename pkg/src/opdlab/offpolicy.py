"""Off-policy distillation baselines on fixed corpus trajectories.

Both variants teacher-force the canonical ground-truth encoding of each
instance; the student never samples, so these trainers generate zero tokens.

* ``oprkd``: the on-policy dense reverse-KL update applied to corpus tokens.
* ``opfkd``: per-state forward KL(P_tea || P_stu) over the full vocabulary,
  minimized by plain gradient descent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .env import GroundingInstance, decode_trajectory, encode_interval
from .grpo import TrainerState
from .opd import _token_ratio_grad, dense_rewards
from .parallel import ordered_map, ordered_sum
from .policy import LinearSoftmaxPolicy, Policy, PolicyParams, prefix_phases, score_logit_grads

VARIANTS = ("oprkd", "opfkd")


@dataclass(frozen=True)
class CorpusTrajectory:
    instance: GroundingInstance
    tokens: tuple[int, ...]
    phases: np.ndarray
    origin: str = "corpus"

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class OffPolicyConfig:
    variant: str = "opfkd"
    learning_rate: float = 0.05
    old_refresh_every: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown off-policy variant {self.variant!r}")


def encode_gt(instance: GroundingInstance, max_digits: int = 2) -> CorpusTrajectory:
    toks = tuple(encode_interval(instance.gt, max_digits))
    ct = CorpusTrajectory(instance, toks, prefix_phases(toks, max_digits))
    assert decode_trajectory(toks, instance.video_length, max_digits) == instance.gt
    return ct


def oprkd_rewards(params: PolicyParams, ct: CorpusTrajectory, teacher: Policy) -> np.ndarray:
    student = LinearSoftmaxPolicy(params).evaluate_trajectory(ct.instance, ct.tokens)
    return dense_rewards(student, teacher.evaluate_trajectory(ct.instance, ct.tokens))


def oprkd_gradient(params: PolicyParams, old_params: PolicyParams, ct: CorpusTrajectory,
                   teacher: Policy) -> np.ndarray:
    old_logp = LinearSoftmaxPolicy(old_params).evaluate_trajectory(ct.instance, ct.tokens)
    return _token_ratio_grad(params, ct.instance, ct.tokens, old_logp,
                             oprkd_rewards(params, ct, teacher))


def oprkd_surrogate(params, old_params, ct: CorpusTrajectory, teacher, rewards=None) -> float:
    if rewards is None:
        rewards = oprkd_rewards(params, ct, teacher)
    cur = LinearSoftmaxPolicy(params).evaluate_trajectory(ct.instance, ct.tokens)
    old = LinearSoftmaxPolicy(old_params).evaluate_trajectory(ct.instance, ct.tokens)
    return float(np.sum(rewards * np.exp(cur - old)))


def opfkd_loss(params: PolicyParams, ct: CorpusTrajectory, teacher: Policy) -> np.ndarray:
    lp = LinearSoftmaxPolicy(params).log_probs_along(ct.instance, ct.tokens)
    lq = teacher.log_probs_along(ct.instance, ct.tokens)
    return np.maximum(0.0, (np.exp(lq) * (lq - lp)).sum(axis=1))


def opfkd_gradient(params: PolicyParams, ct: CorpusTrajectory, teacher: Policy) -> np.ndarray:
    """Ascent gradient of ``-sum_t loss_t``: per state, logit gradient q - p."""
    pol = LinearSoftmaxPolicy(params)
    lp = pol.log_probs_along(ct.instance, ct.tokens)
    q = np.exp(teacher.log_probs_along(ct.instance, ct.tokens))
    return pol.backprop(ct.instance, ct.tokens, q - np.exp(lp))


def sft_gradient(params: PolicyParams, ct: CorpusTrajectory) -> np.ndarray:
    """Ascent gradient of the corpus log-likelihood (cross-entropy to gt tokens)."""
    pol = LinearSoftmaxPolicy(params)
    toks = np.asarray(ct.tokens)
    lp = pol.log_probs_along(ct.instance, toks)
    return pol.backprop(ct.instance, toks, score_logit_grads(lp, toks))


def _instance_update(state: TrainerState, cfg: OffPolicyConfig, teacher: Policy,
                     inst: GroundingInstance):
    ct = encode_gt(inst, state.params.max_digits)
    if cfg.variant == "oprkd":
        r = oprkd_rewards(state.params, ct, teacher)
        old = LinearSoftmaxPolicy(state.old_params).evaluate_trajectory(inst, ct.tokens)
        g = _token_ratio_grad(state.params, inst, ct.tokens, old, r)
        return g, float(-r.mean())
    g = opfkd_gradient(state.params, ct, teacher)
    return g, float(opfkd_loss(state.params, ct, teacher).mean())


def offpolicy_step(state: TrainerState, pool_slice: list[GroundingInstance], teacher: Policy,
                   cfg: OffPolicyConfig, threads: int = 1) -> tuple[TrainerState, dict]:
    if not pool_slice:
        raise ValueError("empty pool slice")
    t0 = time.perf_counter()
    results = ordered_map(lambda inst: _instance_update(state, cfg, teacher, inst),
                          pool_slice, threads)
    grad = ordered_sum(r[0] for r in results) / len(pool_slice)
    new = state.params.with_flat(state.params.flatten() + cfg.learning_rate * grad)
    step = state.step + 1
    old = new.copy() if step % cfg.old_refresh_every == 0 else state.old_params
    metrics = {
        "step": step,
        "algo": cfg.variant,
        "mean_loss": float(np.mean([r[1] for r in results])),
        "grad_norm": float(np.linalg.norm(grad)),
        "tokens_generated": 0,
        "wallclock_ms": (time.perf_counter() - t0) * 1e3,
    }
    return TrainerState(new, old, state.ref_params, step, dict(state.extra)), metrics
