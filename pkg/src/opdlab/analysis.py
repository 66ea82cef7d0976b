"""Gradient-variance measurement, the reverse-KL gradient identity, and budget accounting.

Variance estimators, one sample per trajectory at a frozen parameter point:

* ``opd``:  sum_t r_t * grad log pi(a_t|s_t), with r_t = log pi_tea - log pi.
* ``grpo``: rhat_1 * sum_t grad log pi(a_t|s_t), where rhat_1 is the first
  rollout's reward normalized within its group of G. Only that rollout's
  gradient enters the sample, so both estimators are compared per generated
  trajectory; averaging G such samples gives the matched-budget estimate for
  either method, which scales both traces by the same 1/G up to the weak
  coupling GRPO normalization introduces inside a group.

The time decomposition ``Var(sum_t h_t) = sum_t Var(h_t) + 2 sum_{t<t'} Cov(h_t, h_t')``
is evaluated on the two frame-embedding rows (onset and offset, 2d
coordinates) that every step reads, where h_t is the per-step contribution
A_t * grad log pi(a_t|s_t). Output-layer blocks are phase-specific, so their
cross-time terms vanish by construction and would say nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .env import GroundingInstance, reward
from .grpo import group_normalize
from .policy import LinearSoftmaxPolicy, Policy, PolicyParams, prefix_phases, score_logit_grads
from .seeding import stream

ESTIMATORS = ("grpo", "opd")
SLICE = "frame_embed[onset, offset]"


def _header(estimator: str, group_size: int) -> str:
    if estimator == "grpo":
        return (f"grpo: per-trajectory contribution rhat_1 * score(tau_1), rhat normalized within a "
                f"group of G={group_size}; matched budget = one trajectory per sample")
    return "opd: per-trajectory sum_t r_t * score_t, one rollout per sample"


@dataclass
class VarianceReport:
    estimator: str
    n_samples: int
    trace_cov: float
    per_coord_var: np.ndarray
    decomposition: dict[str, float]
    header: str = ""
    mean_tokens: float = 0.0
    samples: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "n_samples": self.n_samples,
                "trace_cov": self.trace_cov, "decomposition": self.decomposition,
                "mean_tokens": self.mean_tokens, "header": self.header,
                "slice": SLICE}


def decompose(per_step: np.ndarray) -> dict[str, float]:
    """Trace-level decomposition of Var(sum_t h_t) from samples shaped (n, T, D)."""
    n = per_step.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    hc = per_step - per_step.mean(axis=0)
    total = float((hc.sum(axis=1) ** 2).sum() / (n - 1))
    # Gram over time steps: gram[t, u] = sum_{i,d} hc[i,t,d] hc[i,u,d]
    gram = np.einsum("itd,iud->tu", hc, hc) / (n - 1)
    sum_var = float(np.trace(gram))
    sum_cov = float(np.triu(gram, k=1).sum())
    return {"sum_var_terms": sum_var, "sum_cov_terms": sum_cov, "total": total}


def _slice_rows(params: PolicyParams, tokens, logit_grads: np.ndarray, max_len: int) -> np.ndarray:
    """Per-step gradient on the onset/offset frame-embedding rows, zero-padded to ``max_len``."""
    d = params.d
    ph = prefix_phases(tokens, params.max_digits)
    out = np.zeros((max_len, 2 * d))
    rows = np.einsum("tvk,tv->tk", params.output_weights[ph], logit_grads)
    out[:len(ph)] = rows[:, :2 * d]
    return out


def estimator_samples(estimator: str, params: PolicyParams, instance: GroundingInstance,
                      n_samples: int, seed: int, teacher: Policy | None = None,
                      group_size: int = 8, reward_kind: str = "timestamp_aware_iou",
                      max_len: int = 8, chunk: int = 2048):
    """Full-gradient samples (n, size), per-step slice samples (n, max_len, 2d), lengths."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "opd" and teacher is None:
        raise ValueError("the opd estimator needs a teacher")
    pol = LinearSoftmaxPolicy(params)
    roots = stream(seed, "variance", estimator, instance.id).spawn(n_samples)
    full = np.empty((n_samples, params.size))
    steps = np.empty((n_samples, max_len, 2 * params.d))
    lengths = np.empty(n_samples)
    for lo in range(0, n_samples, chunk):
        block = roots[lo:lo + chunk]
        if estimator == "opd":
            trajs = pol.sample_trajectories(instance, block, max_len)
            advs = None
        else:
            rngs = [c for r in block for c in r.spawn(group_size)]
            group = pol.sample_trajectories(instance, rngs, max_len)
            trajs, advs = [], []
            for i in range(len(block)):
                g = group[i * group_size:(i + 1) * group_size]
                raw = [reward(t.decoded, instance.gt, instance.video_length, reward_kind) for t in g]
                trajs.append(g[0])
                advs.append(group_normalize(raw)[0])
        for j, traj in enumerate(trajs):
            toks = np.asarray(traj.tokens)
            lp = pol.log_probs_along(instance, toks)
            if estimator == "opd":
                a = teacher.evaluate_trajectory(instance, toks) - lp[np.arange(len(toks)), toks]
            else:
                a = np.full(len(toks), advs[j])
            lg = score_logit_grads(lp, toks) * a[:, None]
            full[lo + j] = pol.backprop(instance, toks, lg)
            steps[lo + j] = _slice_rows(params, toks, lg, max_len)
            lengths[lo + j] = len(toks)
    return full, steps, lengths


def measure_variance(estimator: str, params: PolicyParams, instance: GroundingInstance,
                     n_samples: int, seed: int, teacher: Policy | None = None,
                     group_size: int = 8, reward_kind: str = "timestamp_aware_iou",
                     max_len: int = 8, keep_samples: bool = True) -> VarianceReport:
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    full, steps, lengths = estimator_samples(estimator, params, instance, n_samples, seed,
                                             teacher, group_size, reward_kind, max_len)
    var = full.var(axis=0, ddof=1)
    return VarianceReport(estimator, n_samples, float(var.sum()), var, decompose(steps),
                          _header(estimator, group_size), float(lengths.mean()),
                          full if keep_samples else None)


def trace_cov(samples: np.ndarray) -> float:
    return float(samples.var(axis=0, ddof=1).sum())


def bootstrap_traces(samples: np.ndarray, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    """Trace of the covariance on ``n_boot`` resamples (rows drawn with replacement)."""
    n = samples.shape[0]
    sq = (samples ** 2).sum(axis=1)
    out = np.empty(n_boot)
    for b in range(n_boot):
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        mean = counts @ samples / n
        out[b] = (counts @ sq - n * mean @ mean) / (n - 1)
    return out


def variance_dominance(low: VarianceReport, high: VarianceReport, n_boot: int = 1000,
                       rng: np.random.Generator | None = None, level: float = 0.95) -> dict:
    """One-sided bootstrap test that ``low`` has the smaller covariance trace."""
    if low.samples is None or high.samples is None:
        raise ValueError("reports must keep their samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    diff = bootstrap_traces(low.samples, n_boot, rng) - bootstrap_traces(high.samples, n_boot, rng)
    upper = float(np.quantile(diff, level))
    return {"trace_low": low.trace_cov, "trace_high": high.trace_cov,
            "ratio": low.trace_cov / high.trace_cov if high.trace_cov > 0 else math.inf,
            "diff_upper": upper, "level": level, "n_boot": n_boot, "passed": upper < 0.0}


# --- reverse-KL gradient identity -------------------------------------------

def reverse_kl_logit_grad(lp: np.ndarray, lq: np.ndarray) -> np.ndarray:
    """d KL(softmax(z) || q) / dz at log-probabilities ``lp``: p * (log p - log q - KL)."""
    p = np.exp(lp)
    return p * (lp - lq - (p * (lp - lq)).sum())


def exact_identity(logits_p: Sequence[float], logits_q: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Enumerated expectation of r(a) * dlog p(a)/dz and the analytic -dKL/dz.

    Works for any (small) vocabulary; both sides are exact sums.
    """
    z = np.asarray(logits_p, dtype=np.float64)
    lp = z - np.logaddexp.reduce(z)
    w = np.asarray(logits_q, dtype=np.float64)
    lq = w - np.logaddexp.reduce(w)
    p = np.exp(lp)
    expect = np.zeros_like(z)
    for a in range(len(z)):
        score = -p.copy()
        score[a] += 1.0
        expect += p[a] * (lq[a] - lp[a]) * score
    return expect, -reverse_kl_logit_grad(lp, lq)


@dataclass
class KlCheck:
    mc_gradient: np.ndarray
    analytic_gradient: np.ndarray
    std_error: np.ndarray
    max_z_score: float
    n_samples: int

    def to_dict(self) -> dict:
        return {"max_z_score": self.max_z_score, "n_samples": self.n_samples,
                "max_abs_analytic": float(np.abs(self.analytic_gradient).max()),
                "max_abs_diff": float(np.abs(self.mc_gradient - self.analytic_gradient).max())}


def kl_identity_check(params: PolicyParams, teacher: Policy, instance: GroundingInstance,
                      n_samples: int, rng: np.random.Generator,
                      prefix: Sequence[int] = ()) -> KlCheck:
    """Monte-Carlo mean of the per-token update at one state vs -grad KL(pi || pi_tea).

    Every sample's parameter gradient is a linear image of its logit gradient,
    so means and per-coordinate variances follow exactly from logit-space moments.
    """
    pol = LinearSoftmaxPolicy(params)
    toks = list(prefix) + [0]
    lp = pol.log_probs_along(instance, toks)[-1]
    lq = teacher.log_probs_along(instance, toks)[-1]
    V = len(lp)
    # rows of jac: parameter gradient of the last state's logit v
    jac = np.empty((V, params.size))
    for v in range(V):
        g = np.zeros((len(toks), V))
        g[-1, v] = 1.0
        jac[v] = pol.backprop(instance, toks, g)
    a = rng.choice(V, size=n_samples, p=np.exp(lp))
    lg = -np.exp(lp)[None, :] * (lq[a] - lp[a])[:, None]
    lg[np.arange(n_samples), a] += lq[a] - lp[a]
    mean_l = lg.mean(axis=0)
    cov_l = np.cov(lg, rowvar=False)
    mc = mean_l @ jac
    analytic = -reverse_kl_logit_grad(lp, lq) @ jac
    se = np.sqrt(np.maximum(0.0, np.einsum("vp,vw,wp->p", jac, cov_l, jac)) / n_samples)
    live = se > 1e-12 * max(1.0, float(np.abs(analytic).max()))
    z = np.zeros_like(se)
    z[live] = (mc[live] - analytic[live]) / se[live]
    return KlCheck(mc, analytic, se, float(np.abs(z).max()) if live.any() else 0.0, n_samples)


# --- budget accounting -------------------------------------------------------

@dataclass
class BudgetCurve:
    algo: str
    tokens: list[int] = field(default_factory=list)
    wallclock_ms: list[float] = field(default_factory=list)
    mean_iou: list[float] = field(default_factory=list)

    @classmethod
    def from_metrics(cls, records: Iterable[dict], algo: str | None = None) -> "BudgetCurve":
        """Cumulate step records; each ``event: eval`` record adds a point."""
        curve = None
        tok, wall = 0, 0.0
        for rec in records:
            if curve is None:
                curve = cls(algo or rec.get("algo", "?"))
            if rec.get("event") == "eval":
                curve.tokens.append(tok)
                curve.wallclock_ms.append(wall)
                curve.mean_iou.append(float(rec["mean_iou"]))
            elif "tokens_generated" in rec:
                tok += int(rec["tokens_generated"])
                wall += float(rec.get("wallclock_ms", 0.0))
        return curve if curve is not None else cls(algo or "?")

    def first_reaching(self, target: float) -> tuple[int, float] | None:
        for t, w, m in zip(self.tokens, self.wallclock_ms, self.mean_iou):
            if m >= target:
                return t, w
        return None


def budget_compare(curves: Sequence[BudgetCurve], target_miou: float) -> list[dict]:
    if len(curves) < 1:
        raise ValueError("need at least one curve")
    rows = []
    for c in curves:
        hit = c.first_reaching(target_miou)
        rows.append({"algo": c.algo, "target_miou": target_miou,
                     "reached": hit is not None,
                     "tokens_to_target": hit[0] if hit else None,
                     "wallclock_ms_to_target": hit[1] if hit else None,
                     "final_miou": c.mean_iou[-1] if c.mean_iou else None})
    return rows
