import numpy as np
import pytest

from opdlab.env import SEP, EOS, VOCAB_SIZE, EnvConfig, GroundingInstance, Interval, generate_instance
from opdlab.policy import Policy, PolicyParams, init_params, n_phases, target_tokens, zero_params


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end check")


@pytest.fixture
def env_cfg():
    return EnvConfig()


@pytest.fixture
def inst(env_cfg):
    return generate_instance(3, env_cfg)


def make_instance(gt: Interval, video_length: int, query: int = 0, other: int = 1,
                  id: str = "fixed") -> GroundingInstance:
    ctx = [other] * video_length
    for i in range(gt.start, gt.end + 1):
        ctx[i] = query
    return GroundingInstance(id, tuple(ctx), query, gt, video_length)


def random_params(seed, video_length=20, d=4, max_digits=2, scale=0.5) -> PolicyParams:
    return init_params(np.random.default_rng(seed), video_length, d, max_digits, scale)


def pinned_params(interval: Interval, video_length: int = 20, d: int = 4, max_digits: int = 2,
                  logit: float = 50.0) -> PolicyParams:
    """Zero weights, bias ``logit`` on the grammar-correct token of ``interval`` in every phase."""
    p = zero_params(video_length, d, max_digits)
    tt = target_tokens(interval, max_digits)
    p.output_bias[np.arange(n_phases(max_digits)), tt] = logit
    return p


class FixedLogits(Policy):
    """The same logits at every state; handy for hand-built teachers."""

    def __init__(self, logits, max_digits: int = 2):
        self.z = np.asarray(logits, dtype=np.float64)
        self.max_digits = max_digits

    def _logits(self, instance, phases, counts, lengths):
        return np.broadcast_to(self.z, (len(phases), VOCAB_SIZE)).copy()


def central_fd(f, params: PolicyParams, h: float = 1e-6) -> np.ndarray:
    v = params.flatten()
    g = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(params.with_flat(v + e)) - f(params.with_flat(v - e))) / (2 * h)
    return g


def rel_err(a, b) -> float:
    return float(np.abs(a - b).max() / max(1e-12, np.abs(b).max()))


__all__ = ["make_instance", "random_params", "pinned_params", "FixedLogits", "central_fd",
           "rel_err", "SEP", "EOS"]
