"""Algorithm dispatch, batching and the supervised warm-up shared by every entry point."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .env import GroundingInstance
from .grpo import GrpoConfig, TrainerState, grpo_step
from .offpolicy import OffPolicyConfig, encode_gt, offpolicy_step, sft_gradient
from .opd import OpdConfig, opd_step
from .parallel import ordered_map, ordered_sum
from .policy import Policy, PolicyParams, init_params

ALGOS = ("grpo", "opd", "oprkd", "opfkd")

StepFn = Callable[[TrainerState, list[GroundingInstance]], tuple[TrainerState, dict]]


def make_step(algo: str, lr: float, seed: int, teacher: Policy | None = None, threads: int = 1,
              group_size: int = 8, beta: float = 0.01, max_len: int = 8,
              reward: str = "timestamp_aware_iou", reward_logp: str = "current",
              old_refresh_every: int = 1) -> StepFn:
    if algo == "grpo":
        cfg = GrpoConfig(group_size=group_size, beta=beta, learning_rate=lr, reward=reward,
                         max_len=max_len, old_refresh_every=old_refresh_every)
        return lambda st, sl: grpo_step(st, sl, cfg, seed, threads)
    if teacher is None:
        raise ValueError(f"{algo} needs a teacher")
    if algo == "opd":
        cfg = OpdConfig(learning_rate=lr, max_len=max_len, reward_logp=reward_logp,
                        old_refresh_every=old_refresh_every)
        return lambda st, sl: opd_step(st, sl, teacher, cfg, seed, threads)
    if algo in ("oprkd", "opfkd"):
        cfg = OffPolicyConfig(variant=algo, learning_rate=lr, old_refresh_every=old_refresh_every)
        return lambda st, sl: offpolicy_step(st, sl, teacher, cfg, threads)
    raise ValueError(f"unknown algo {algo!r}")


def batch_at(instances: Sequence[GroundingInstance], step: int, batch_size: int) -> list:
    """Slice ``step`` of a cyclic pass over ``instances``."""
    n = len(instances)
    if n == 0:
        raise ValueError("no training instances")
    return [instances[(step * batch_size + j) % n] for j in range(batch_size)]


def steps_for_epochs(n: int, batch_size: int, epochs: float) -> int:
    return max(1, int(round(epochs * n / batch_size)))


def run_steps(state: TrainerState, instances: Sequence[GroundingInstance], step_fn: StepFn,
              n_steps: int, batch_size: int = 32,
              callback: Callable[[TrainerState, dict], None] | None = None) -> TrainerState:
    """Advance ``state`` from ``state.step`` to ``n_steps``; batches follow the absolute step."""
    while state.step < n_steps:
        state, metrics = step_fn(state, batch_at(instances, state.step, batch_size))
        if callback is not None:
            callback(state, metrics)
    return state


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 80
    learning_rate: float = 0.05
    batch_size: int = 32
    init_scale: float = 0.3


def warmup_student(pool: Sequence[GroundingInstance], video_length: int, d: int, max_digits: int,
                   seed: int, cfg: WarmupConfig = WarmupConfig(), threads: int = 1) -> PolicyParams:
    """Random init followed by a short cross-entropy fit to ground-truth encodings.

    Produces the weak base student every post-training algorithm starts from.
    """
    p = init_params(np.random.default_rng([seed, 0xB45E]), video_length, d, max_digits,
                    cfg.init_scale)
    for s in range(cfg.steps):
        sl = batch_at(pool, s, cfg.batch_size)
        grads = ordered_map(lambda inst: sft_gradient(p, encode_gt(inst, max_digits)), sl, threads)
        p = p.with_flat(p.flatten() + cfg.learning_rate * ordered_sum(grads) / len(sl))
    return p
