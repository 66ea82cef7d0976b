"""Teacher-validated disagreement focusing (TVDF) and difficulty sampling.

Scoring attaches to every pool instance the mean IoU of ``top_k_preds`` sampled
predictions from the teacher (tau) and from the student (sigma), their
difference ``delta = tau - sigma``, and the summed per-state reverse KL along
one student rollout (disagreement). Instances whose teacher IoU falls below
``reliability_threshold`` are marked unreliable and never selected.

Samplers order candidates by the configured key (``delta`` by default)
descending, then by instance id ascending.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import EvalReport, GroundingInstance, prediction_iou
from .parallel import ordered_map
from .policy import Policy, PolicyParams, LinearSoftmaxPolicy, evaluate_policy
from .seeding import stream

log = logging.getLogger(__name__)

STRATEGIES = ("dsus", "topk", "bbds", "gwds")
SORT_KEYS = ("delta", "disagreement")
CSV_COLUMNS = ("id", "teacher_iou", "student_iou", "delta", "disagreement", "reliable")


@dataclass(frozen=True)
class ScoredSample:
    instance: GroundingInstance
    teacher_iou: float
    student_iou: float
    delta: float
    disagreement: float
    reliable: bool

    def __post_init__(self):
        if self.delta != self.teacher_iou - self.student_iou:
            raise ValueError("delta must equal teacher_iou - student_iou")
        if self.disagreement < 0:
            raise ValueError("disagreement must be >= 0")

    @property
    def id(self) -> str:
        return self.instance.id

    def to_row(self) -> dict:
        return {"id": self.id, "teacher_iou": repr(self.teacher_iou),
                "student_iou": repr(self.student_iou), "delta": repr(self.delta),
                "disagreement": repr(self.disagreement), "reliable": int(self.reliable)}


@dataclass(frozen=True)
class CurriculumConfig:
    k_select: int = 128
    top_k_preds: int = 4
    reliability_threshold: float = 0.5
    strategy: str = "topk"
    bbds_buckets: int = 5
    gwds_center: float = 0.9
    gwds_sigma: float = 0.2
    rounds: int = 1
    sort_key: str = "delta"
    max_len: int = 8

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.sort_key not in SORT_KEYS:
            raise ValueError(f"unknown sort key {self.sort_key!r}")
        if self.top_k_preds < 1 or self.k_select < 1 or self.rounds < 1 or self.bbds_buckets < 1:
            raise ValueError("top_k_preds, k_select, rounds and bbds_buckets must be >= 1")
        if not self.gwds_sigma > 0:
            raise ValueError("gwds_sigma must be > 0")


@dataclass(frozen=True)
class DifficultyConfig:
    mu: float = 0.3
    sigma: float = 0.2


# --- scoring ----------------------------------------------------------------

def top_k_iou(policy: Policy, instance: GroundingInstance, k: int, rng: np.random.Generator,
              max_len: int = 8) -> float:
    """Mean plain IoU of ``k`` independent temperature-1 samples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    trajs = policy.sample_trajectories(instance, rng.spawn(k), max_len)
    return float(np.mean([prediction_iou(t.decoded, instance.gt) for t in trajs]))


def teacher_reliability(teacher: Policy, instance: GroundingInstance, top_k_preds: int,
                        threshold: float, rng: np.random.Generator,
                        max_len: int = 8) -> tuple[float, bool]:
    m = top_k_iou(teacher, instance, top_k_preds, rng, max_len)
    return m, m >= threshold


def disagreement_score(student: Policy, teacher: Policy, instance: GroundingInstance,
                       rng: np.random.Generator, max_len: int = 8) -> float:
    """Sum of full-vocabulary KL(student || teacher) over one student rollout's states."""
    traj = student.sample_trajectory(instance, rng, max_len)
    lp = student.log_probs_along(instance, traj.tokens)
    lq = teacher.log_probs_along(instance, traj.tokens)
    kl = np.maximum(0.0, (np.exp(lp) * (lp - lq)).sum(axis=1))
    return float(kl.sum())


def score_instance(student: Policy, teacher: Policy, instance: GroundingInstance,
                   cfg: CurriculumConfig, seed: int, round_index: int = 0) -> ScoredSample:
    r_tea, r_stu, r_dis = stream(seed, "score", round_index, instance.id).spawn(3)
    tau, ok = teacher_reliability(teacher, instance, cfg.top_k_preds,
                                  cfg.reliability_threshold, r_tea, cfg.max_len)
    sigma = top_k_iou(student, instance, cfg.top_k_preds, r_stu, cfg.max_len)
    dis = disagreement_score(student, teacher, instance, r_dis, cfg.max_len)
    return ScoredSample(instance, tau, sigma, tau - sigma, dis, ok)


def score_pool(student: Policy, teacher: Policy, pool: Sequence[GroundingInstance],
               cfg: CurriculumConfig, seed: int, threads: int = 1,
               round_index: int = 0) -> list[ScoredSample]:
    """Score every instance; each draws from its own stream keyed by (seed, round, id)."""
    if not pool:
        raise ValueError("empty pool")
    return ordered_map(lambda inst: score_instance(student, teacher, inst, cfg, seed, round_index),
                       pool, threads)


# --- samplers ---------------------------------------------------------------

def eligible(scored: Sequence[ScoredSample]) -> list[ScoredSample]:
    return [s for s in scored if s.reliable]


def sort_desc(scored: Sequence[ScoredSample], key: str = "delta") -> list[ScoredSample]:
    return sorted(scored, key=lambda s: (-getattr(s, key), s.id))


def dsus_indices(n: int, k: int) -> list[int]:
    """1-based evenly spaced ranks ``round(1 + (n-1) t / (k-1))``, half to even."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    return [round(1 + (n - 1) * t / (k - 1)) for t in range(k)]


def _spaced(items: list, c: int) -> list:
    if c <= 0:
        return []
    if c >= len(items):
        return list(items)
    if c == 1:
        return [items[0]]
    return [items[j - 1] for j in dsus_indices(len(items), c)]


def _check_k(k: int, n: int) -> None:
    if k > n:
        raise ValueError(f"requested {k} samples but only {n} reliable candidates "
                         f"(shortfall {k - n})")
    if k < 1:
        raise ValueError("k must be >= 1")


def sample_dsus(scored: Sequence[ScoredSample], k: int, key: str = "delta") -> list[ScoredSample]:
    ranked = sort_desc(eligible(scored), key)
    _check_k(k, len(ranked))
    return [ranked[j - 1] for j in dsus_indices(len(ranked), k)]


def sample_topk(scored: Sequence[ScoredSample], k: int, key: str = "delta") -> list[ScoredSample]:
    ranked = sort_desc(eligible(scored), key)
    _check_k(k, len(ranked))
    return ranked[:k]


def bbds_allocation(k: int, B: int) -> list[int]:
    """``floor(k/B) + 1`` for the first ``k mod B`` buckets, ``floor(k/B)`` after."""
    if B < 1:
        raise ValueError("B must be >= 1")
    q, r = divmod(k, B)
    return [q + 1 if b < r else q for b in range(B)]


def bbds_buckets(values: np.ndarray, B: int) -> np.ndarray:
    """Equal-width bucket index in [0, B) over [min, max]; the last bucket holds max."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(len(values), dtype=np.int64)
    idx = np.floor((values - lo) / ((hi - lo) / B)).astype(np.int64)
    return np.clip(idx, 0, B - 1)


def sample_bbds(scored: Sequence[ScoredSample], k: int, B: int = 5,
                key: str = "delta") -> list[ScoredSample]:
    ranked = sort_desc(eligible(scored), key)
    _check_k(k, len(ranked))
    vals = np.array([getattr(s, key) for s in ranked])
    if vals.max() == vals.min():
        return ranked[:k]
    bucket = bbds_buckets(vals, B)
    members = [[s for s, b in zip(ranked, bucket) if b == i] for i in range(B)]
    alloc = bbds_allocation(k, B)
    take = [0] * B
    carry = 0
    for b in range(B):
        want = alloc[b] + carry
        take[b] = min(want, len(members[b]))
        carry = want - take[b]
    # a shortfall left after the last bucket wraps to buckets with spare room
    while carry:
        for b in range(B):
            room = len(members[b]) - take[b]
            if room > 0 and carry:
                extra = min(room, carry)
                take[b] += extra
                carry -= extra
    out = []
    for b in range(B):
        out.extend(_spaced(members[b], take[b]))
    return out


def gaussian_probs(values, center: float, sigma: float) -> np.ndarray:
    """``p_i`` proportional to ``exp(-(x_i - center)^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    x = np.asarray(values, dtype=np.float64)
    logw = -((x - center) ** 2) / (2.0 * sigma ** 2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def weighted_without_replacement(probs: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential categorical draws, renormalizing over the remaining items each time."""
    remaining = list(range(len(probs)))
    w = np.asarray(probs, dtype=np.float64)
    out = []
    for _ in range(k):
        p = w[remaining]
        j = int(rng.choice(len(remaining), p=p / p.sum()))
        out.append(remaining.pop(j))
    return out


def sample_gwds(scored: Sequence[ScoredSample], k: int, center: float = 0.9, sigma: float = 0.2,
                rng: np.random.Generator | None = None, key: str = "delta") -> list[ScoredSample]:
    ranked = sort_desc(eligible(scored), key)
    _check_k(k, len(ranked))
    if rng is None:
        raise ValueError("gwds needs an rng")
    p = gaussian_probs([getattr(s, key) for s in ranked], center, sigma)
    return [ranked[i] for i in weighted_without_replacement(p, k, rng)]


def difficulty_gaussian_sample(instances: Sequence[GroundingInstance], ious: Sequence[float], k: int,
                               mu: float = 0.3, sigma: float = 0.2,
                               rng: np.random.Generator | None = None) -> list[GroundingInstance]:
    """Draw ``k`` instances favouring base-model IoU near ``mu``."""
    if len(instances) != len(ious):
        raise ValueError("instances and ious differ in length")
    _check_k(k, len(instances))
    if rng is None:
        raise ValueError("difficulty sampling needs an rng")
    p = gaussian_probs(ious, mu, sigma)
    return [instances[i] for i in weighted_without_replacement(p, k, rng)]


def select(scored: Sequence[ScoredSample], cfg: CurriculumConfig, k: int | None = None,
           rng: np.random.Generator | None = None) -> list[ScoredSample]:
    k = cfg.k_select if k is None else k
    if cfg.strategy == "dsus":
        return sample_dsus(scored, k, cfg.sort_key)
    if cfg.strategy == "topk":
        return sample_topk(scored, k, cfg.sort_key)
    if cfg.strategy == "bbds":
        return sample_bbds(scored, k, cfg.bbds_buckets, cfg.sort_key)
    return sample_gwds(scored, k, cfg.gwds_center, cfg.gwds_sigma, rng, cfg.sort_key)


# --- multi-round ------------------------------------------------------------

@dataclass
class RoundResult:
    round: int
    selected_ids: list[str]
    n_reliable: int
    params: PolicyParams
    report: EvalReport
    scored: list[ScoredSample] = field(repr=False, default_factory=list)


TrainFn = Callable[[PolicyParams, list[GroundingInstance], int], PolicyParams]


def run_rounds(student: PolicyParams, teacher: Policy, pool: Sequence[GroundingInstance],
               holdout: Sequence[GroundingInstance], cfg: CurriculumConfig, train: TrainFn,
               seed: int, threads: int = 1, start_round: int = 0,
               on_round: Callable[[RoundResult], None] | None = None) -> list[RoundResult]:
    """Score with the current student, filter, select, train, evaluate; ``cfg.rounds`` times.

    ``train(params, selection, round_index)`` returns the updated parameters.
    ``start_round`` skips completed rounds when ``student`` is their output.
    """
    params = student
    results = []
    for r in range(start_round, cfg.rounds):
        scored = score_pool(LinearSoftmaxPolicy(params), teacher, pool, cfg, seed, threads, r)
        n_ok = len(eligible(scored))
        if n_ok < cfg.k_select:
            raise ValueError(f"round {r + 1}: only {n_ok} reliable samples for k={cfg.k_select} "
                             f"(shortfall {cfg.k_select - n_ok})")
        chosen = select(scored, cfg, rng=stream(seed, "select", r))
        params = train(params, [s.instance for s in chosen], r)
        report = evaluate_policy(LinearSoftmaxPolicy(params), holdout, max_len=cfg.max_len)
        log.info("round %d: reliable=%d selected=%d holdout mIoU=%.4f",
                 r + 1, n_ok, len(chosen), report.mean_iou)
        res = RoundResult(r + 1, [s.id for s in chosen], n_ok, params, report, scored)
        if on_round is not None:
            on_round(res)
        results.append(res)
    return results


# --- interchange ------------------------------------------------------------

def write_scored_csv(path, scored: Sequence[ScoredSample], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in scored:
            w.writerow(s.to_row())


def read_scored_csv(path, pool: Sequence[GroundingInstance]) -> list[ScoredSample]:
    by_id = {inst.id: inst for inst in pool}
    with open(path, encoding="utf-8", newline="") as f:
        rows = csv.DictReader(line for line in f if not line.startswith("#"))
        out = []
        for row in rows:
            if row["id"] not in by_id:
                raise KeyError(f"scored id {row['id']!r} not in pool")
            tau, sigma = float(row["teacher_iou"]), float(row["student_iou"])
            out.append(ScoredSample(by_id[row["id"]], tau, sigma, tau - sigma,
                                    float(row["disagreement"]), row["reliable"] == "1"))
    return out


def write_selection(path, ids: Sequence[str], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write(f"# {header}\n")
        for i in ids:
            f.write(f"{i}\n")


def read_selection(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
