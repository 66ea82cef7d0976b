"""Small autoregressive categorical policies over the digit grammar.

A state is ``(instance, prefix)``. The student (:class:`LinearSoftmaxPolicy`)
maps it to a feature vector and applies a linear-softmax head selected by the
*grammar phase* of the prefix (SEP emitted or not, digits since the last
boundary)::

    x      = [frame_embed[onset], frame_embed[offset], mean(token_embed[prefix])]
    logits = output_weights[phase] @ x + output_bias[phase]

``onset``/``offset`` are the first and last frames of the query symbol's run
in the context; the prefix block is zero for an empty prefix. Everything is
closed form, so exact log-probabilities, full distributions and analytic
gradients are cheap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import (DEFAULT_THRESHOLDS, EOS, SEP, VOCAB_SIZE, DecodeFailure, EvalReport,
                  GroundingInstance, Interval, decode_trajectory, encode_number, evaluate)
from .seeding import str_key

CKPT_FORMAT = "opdlab-ckpt"
CKPT_VERSION = 1


def n_phases(max_digits: int) -> int:
    return 2 * (max_digits + 1)


def phase_of(prefix: Sequence[int], max_digits: int = 2) -> int:
    sep_seen, k = False, 0
    for tok in prefix:
        if tok == SEP:
            sep_seen, k = True, 0
        elif tok < SEP:
            k += 1
    return int(sep_seen) * (max_digits + 1) + min(k, max_digits)


def prefix_phases(tokens: Sequence[int], max_digits: int = 2) -> np.ndarray:
    """Phase of every prefix ``tokens[:t]`` for t = 0..len(tokens)-1."""
    out = np.empty(len(tokens), dtype=np.int64)
    sep_seen, k = 0, 0
    for t, tok in enumerate(tokens):
        out[t] = sep_seen * (max_digits + 1) + min(k, max_digits)
        if tok == SEP:
            sep_seen, k = 1, 0
        elif tok < SEP:
            k += 1
    return out


def prefix_counts(tokens: Sequence[int]) -> np.ndarray:
    """Row t holds the token counts of ``tokens[:t]``."""
    T = len(tokens)
    C = np.zeros((T, VOCAB_SIZE))
    if T > 1:
        C[np.arange(1, T), np.asarray(tokens[:-1], dtype=np.int64)] = 1.0
        C = np.cumsum(C, axis=0)
    return C


def log_softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


# --- parameters -------------------------------------------------------------

@dataclass
class PolicyParams:
    frame_embed: np.ndarray     # (video_length, d)
    token_embed: np.ndarray     # (vocab, d)
    output_weights: np.ndarray  # (n_phases, vocab, 3d)
    output_bias: np.ndarray     # (n_phases, vocab)

    FIELDS = ("frame_embed", "token_embed", "output_weights", "output_bias")

    def __post_init__(self):
        L, d = self.frame_embed.shape
        P, V, ds = self.output_weights.shape
        if (ds != 3 * d or V != VOCAB_SIZE or self.token_embed.shape != (V, d)
                or self.output_bias.shape != (P, V)):
            raise ValueError("inconsistent PolicyParams shapes")

    @property
    def d(self) -> int:
        return self.frame_embed.shape[1]

    @property
    def d_state(self) -> int:
        return 3 * self.d

    @property
    def video_length(self) -> int:
        return self.frame_embed.shape[0]

    @property
    def max_digits(self) -> int:
        return self.output_bias.shape[0] // 2 - 1

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(getattr(self, k).shape) for k in self.FIELDS}

    @property
    def size(self) -> int:
        return sum(getattr(self, k).size for k in self.FIELDS)

    def offsets(self) -> dict[str, slice]:
        """Where each block lives in the flat vector (and in every gradient)."""
        out, pos = {}, 0
        for k in self.FIELDS:
            n = getattr(self, k).size
            out[k] = slice(pos, pos + n)
            pos += n
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in self.FIELDS])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of size {self.size}, got {vec.shape}")
        offs = self.offsets()
        return PolicyParams(**{k: vec[offs[k]].reshape(getattr(self, k).shape).copy()
                               for k in self.FIELDS})

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flatten())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flatten())))


def zero_params(video_length: int, d: int = 8, max_digits: int = 2) -> PolicyParams:
    P = n_phases(max_digits)
    return PolicyParams(np.zeros((video_length, d)), np.zeros((VOCAB_SIZE, d)),
                        np.zeros((P, VOCAB_SIZE, 3 * d)), np.zeros((P, VOCAB_SIZE)))


def init_params(rng: np.random.Generator, video_length: int, d: int = 8,
                max_digits: int = 2, scale: float = 0.3) -> PolicyParams:
    if not 1 <= d <= 16:
        raise ValueError("d must lie in [1, 16]")
    p = zero_params(video_length, d, max_digits)
    return p.with_flat(rng.normal(0.0, scale, size=p.size))


# --- trajectories -----------------------------------------------------------

@dataclass
class Trajectory:
    instance_id: str
    tokens: tuple[int, ...]
    logp: np.ndarray            # per-token log-prob under the sampling policy
    phases: np.ndarray          # grammar phase of each token's state
    decoded: Interval | DecodeFailure

    def __len__(self) -> int:
        return len(self.tokens)


# --- policies ---------------------------------------------------------------

class Policy:
    """Read-only surface shared by students and teachers.

    Subclasses implement :meth:`_logits` for a batch of states given as grammar
    phases, prefix token counts and prefix lengths.
    """

    max_digits: int = 2

    def _logits(self, instance: GroundingInstance, phases: np.ndarray, counts: np.ndarray,
                lengths: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_probs_along(self, instance, tokens: Sequence[int]) -> np.ndarray:
        """Log-distributions (T, vocab) at every state ``tokens[:t]``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        return log_softmax(self._logits(instance, prefix_phases(tokens, self.max_digits),
                                        prefix_counts(tokens), np.arange(len(tokens))))

    def token_distribution(self, instance, prefix: Sequence[int] = ()) -> np.ndarray:
        return np.exp(self.log_probs_along(instance, list(prefix) + [EOS])[-1])

    def log_prob(self, instance, prefix: Sequence[int], token: int) -> float:
        return float(self.log_probs_along(instance, list(prefix) + [token])[-1, token])

    def evaluate_trajectory(self, instance, tokens: Sequence[int]) -> np.ndarray:
        """Teacher-forced per-token log-probabilities. Never samples."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("empty trajectory")
        lp = self.log_probs_along(instance, tokens)
        return lp[np.arange(len(tokens)), tokens]

    def sample_trajectories(self, instance, rngs: Sequence[np.random.Generator],
                            max_len: int = 8) -> list[Trajectory]:
        """One trajectory per generator, sampled in lockstep.

        Each row consumes exactly ``max_len`` uniforms from its own generator,
        so a row's outcome depends only on that generator.
        """
        if max_len < 4:
            raise ValueError("max_len must be >= 4")
        n = len(rngs)
        u = np.stack([r.random(max_len) for r in rngs]) if n else np.zeros((0, max_len))
        return self._rollout(instance, u, max_len)

    def _rollout(self, instance, u: np.ndarray | None, max_len: int) -> list[Trajectory]:
        greedy = u is None
        n = 1 if greedy else len(u)
        span = self.max_digits + 1
        tokens = np.full((n, max_len), -1, dtype=np.int64)
        phases = np.zeros((n, max_len), dtype=np.int64)
        logp = np.zeros((n, max_len))
        counts = np.zeros((n, VOCAB_SIZE))
        sep_seen = np.zeros(n, dtype=np.int64)
        k = np.zeros(n, dtype=np.int64)
        alive = np.ones(n, dtype=bool)
        rows = np.arange(n)
        for t in range(max_len):
            ph = sep_seen * span + np.minimum(k, self.max_digits)
            lp = log_softmax(self._logits(instance, ph, counts, np.full(n, t)))
            if greedy:
                tok = lp.argmax(axis=1)
            else:
                c = np.cumsum(np.exp(lp), axis=1)
                tok = np.minimum((u[:, t:t + 1] * c[:, -1:] >= c).sum(axis=1), VOCAB_SIZE - 1)
            tokens[alive, t] = tok[alive]
            phases[alive, t] = ph[alive]
            logp[alive, t] = lp[rows, tok][alive]
            counts[rows, tok] += 1.0
            is_sep = tok == SEP
            sep_seen = np.where(is_sep, 1, sep_seen)
            k = np.where(is_sep, 0, np.where(tok < SEP, k + 1, k))
            alive &= tok != EOS
            if not alive.any():
                break
        out = []
        for i in range(n):
            m = tokens[i] >= 0
            toks = tokens[i][m]
            out.append(Trajectory(
                instance_id=instance.id,
                tokens=tuple(int(x) for x in toks),
                logp=logp[i][m],
                phases=phases[i][m],
                decoded=decode_trajectory(toks, instance.video_length, self.max_digits),
            ))
        return out

    def sample_trajectory(self, instance, rng: np.random.Generator, max_len: int = 8) -> Trajectory:
        return self.sample_trajectories(instance, [rng], max_len)[0]

    def greedy(self, instance, max_len: int = 8) -> Trajectory:
        return self._rollout(instance, None, max_len)[0]


class LinearSoftmaxPolicy(Policy):
    """Trainable student; see the module docstring for the feature map."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self.max_digits = params.max_digits

    def context_features(self, instance: GroundingInstance) -> np.ndarray:
        E = self.params.frame_embed
        return np.concatenate([E[instance.run.start], E[instance.run.end]])

    def state_features(self, instance, prefix: Sequence[int] = ()) -> np.ndarray:
        pre = np.zeros(self.params.d)
        if len(prefix):
            pre = self.params.token_embed[np.asarray(prefix, dtype=np.int64)].mean(axis=0)
        return np.concatenate([self.context_features(instance), pre])

    def _features(self, instance, counts, lengths) -> np.ndarray:
        n = len(lengths)
        denom = np.maximum(lengths, 1)[:, None]
        pre = (counts @ self.params.token_embed) / denom
        ctx = np.broadcast_to(self.context_features(instance), (n, 2 * self.params.d))
        return np.concatenate([ctx, pre], axis=1)

    def _logits(self, instance, phases, counts, lengths):
        p = self.params
        x = self._features(instance, counts, lengths)
        return np.einsum("nvk,nk->nv", p.output_weights[phases], x) + p.output_bias[phases]

    def backprop(self, instance, tokens: Sequence[int], logit_grads: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of ``sum_t <logit_grads[t], logits(s_t)>``.

        State ``s_t`` has prefix ``tokens[:t]``; ``logit_grads`` has one row per
        token (rows may be zero).
        """
        p = self.params
        d = p.d
        toks = np.asarray(tokens, dtype=np.int64)
        g = np.asarray(logit_grads, dtype=np.float64)
        T = len(toks)
        phases = prefix_phases(toks, self.max_digits)
        x = self._features(instance, prefix_counts(toks), np.arange(T))

        g_w = np.zeros_like(p.output_weights)
        np.add.at(g_w, phases, g[:, :, None] * x[:, None, :])
        g_b = np.zeros_like(p.output_bias)
        np.add.at(g_b, phases, g)

        u = np.einsum("tvk,tv->tk", p.output_weights[phases], g)
        g_e = np.zeros_like(p.frame_embed)
        ctx_sum = u[:, :2 * d].sum(axis=0)
        g_e[instance.run.start] += ctx_sum[:d]
        g_e[instance.run.end] += ctx_sum[d:]

        # the prefix mean at step t spreads u_t / t over tokens[:t]
        g_t = np.zeros_like(p.token_embed)
        if T > 1:
            v = u[1:, 2 * d:] / np.arange(1, T)[:, None]
            suffix = np.cumsum(v[::-1], axis=0)[::-1]   # suffix[j] = sum_{t > j} v_t
            np.add.at(g_t, toks[:T - 1], suffix)
        return np.concatenate([g_e.ravel(), g_t.ravel(), g_w.ravel(), g_b.ravel()])

    def grad_log_prob(self, instance, prefix: Sequence[int], token: int) -> np.ndarray:
        toks = list(prefix) + [token]
        lp = self.log_probs_along(instance, toks)
        g = np.zeros_like(lp)
        g[-1] = score_logit_grads(lp[-1:], np.array([token]))[0]
        return self.backprop(instance, toks, g)


def evaluate_policy(policy: Policy, instances: Sequence[GroundingInstance],
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS, max_len: int = 8) -> EvalReport:
    """Greedy (argmax) decoding on every instance, scored by plain IoU."""
    preds = [policy.greedy(inst, max_len).decoded for inst in instances]
    return evaluate(preds, [inst.gt for inst in instances], thresholds)


def score_logit_grads(log_probs: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Rows of d log p(token) / d logits = one_hot(token) - p."""
    g = -np.exp(log_probs)
    g[np.arange(len(tokens)), tokens] += 1.0
    return g


# --- teacher ----------------------------------------------------------------

@dataclass(frozen=True)
class TeacherConfig:
    sharpness: float = 5.0
    corruption_rate: float = 0.0

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ValueError("sharpness must be > 0")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")


def target_tokens(interval: Interval, max_digits: int = 2) -> np.ndarray:
    """The grammar-correct next token for every phase, aiming at ``interval``."""
    out = np.empty(n_phases(max_digits), dtype=np.int64)
    for part, (x, closer) in enumerate(((interval.start, SEP), (interval.end, EOS))):
        digits = encode_number(x)
        for k in range(max_digits + 1):
            out[part * (max_digits + 1) + k] = digits[k] if k < len(digits) else closer
    return out


def corrupted_target(gt: Interval, video_length: int) -> Interval:
    """gt shifted by video_length // 4 (right if it fits, else left, clipped)."""
    shift = max(1, video_length // 4)
    if gt.end + shift <= video_length - 1:
        return Interval(gt.start + shift, gt.end + shift)
    return Interval(max(0, gt.start - shift), max(0, gt.end - shift))


class OracleTeacher(Policy):
    """Fixed near-oracle teacher with controllable per-instance corruption.

    Logits are ``sharpness`` on the grammar-correct token for its target
    interval and 0 elsewhere, whatever digits the prefix already holds, so it
    always steers back toward the target. Each instance is corrupted (target
    shifted away from gt) with probability ``corruption_rate``, decided once
    from the instance id and the teacher seed.
    """

    def __init__(self, cfg: TeacherConfig, seed: int, max_digits: int = 2):
        self.cfg = cfg
        self.seed = int(seed)
        self.max_digits = max_digits
        self._targets: dict[str, np.ndarray] = {}

    def is_corrupted(self, instance: GroundingInstance) -> bool:
        if self.cfg.corruption_rate <= 0.0:
            return False
        u = np.random.default_rng([self.seed, str_key(instance.id)]).random()
        return bool(u < self.cfg.corruption_rate)

    def target(self, instance: GroundingInstance) -> Interval:
        if self.is_corrupted(instance):
            return corrupted_target(instance.gt, instance.video_length)
        return instance.gt

    def _logits(self, instance, phases, counts, lengths):
        tt = self._targets.get(instance.id)
        if tt is None:
            tt = target_tokens(self.target(instance), self.max_digits)
            self._targets[instance.id] = tt
        z = np.zeros((len(phases), VOCAB_SIZE))
        z[np.arange(len(phases)), tt[phases]] = self.cfg.sharpness
        return z


def make_oracle_teacher(cfg: TeacherConfig, rng: np.random.Generator,
                        max_digits: int = 2) -> OracleTeacher:
    return OracleTeacher(cfg, int(rng.integers(2 ** 31)), max_digits)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, blocks: dict[str, PolicyParams], meta: dict | None = None) -> None:
    """JSON header line, then the blocks' flat little-endian float64 data."""
    first = next(iter(blocks.values()))
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "vocab": VOCAB_SIZE,
        "d": first.d,
        "video_length": first.video_length,
        "max_digits": first.max_digits,
        "shapes": {k: list(v) for k, v in first.shapes.items()},
        "blocks": list(blocks),
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for params in blocks.values():
            f.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, PolicyParams], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT or header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} {CKPT_FORMAT} file")
    template = zero_params(header["video_length"], header["d"], header["max_digits"])
    data = np.frombuffer(raw[nl + 1:], dtype="<f8")
    n = template.size
    if data.size != n * len(header["blocks"]):
        raise ValueError(f"{path}: truncated checkpoint")
    blocks = {name: template.with_flat(data[i * n:(i + 1) * n].astype(np.float64))
              for i, name in enumerate(header["blocks"])}
    return blocks, header
