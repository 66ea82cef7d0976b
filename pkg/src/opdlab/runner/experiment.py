"""Command implementations. Each works inside one run directory.

Layout::

    <run>/config.cfg          resolved config snapshot
    <run>/pools/*.jsonl       train / holdout / pretrain instances
    <run>/metrics.jsonl       step and eval records
    <run>/checkpoints/        last.ckpt, step-NNNNNN.ckpt, round-N.ckpt
    <run>/final.ckpt          blocks student, old, ref
    <run>/curriculum/         per-round scored CSV and selections
    <run>/MANIFEST            every file with its size, plus the config hash
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..analysis import (BudgetCurve, budget_compare, kl_identity_check, measure_variance,
                        variance_dominance)
from ..curriculum import (RoundResult, eligible, read_scored_csv, read_selection,
                          run_rounds, score_pool, select, write_scored_csv, write_selection,
                          difficulty_gaussian_sample)
from ..env import ConfigError, GroundingInstance, generate_pool, load_pool, prediction_iou, save_pool
from ..grpo import TrainerState
from ..policy import (LinearSoftmaxPolicy, OracleTeacher, Policy, PolicyParams, evaluate_policy,
                      load_checkpoint, make_oracle_teacher, save_checkpoint)
from ..seeding import stream
from ..training import make_step, run_steps, warmup_student
from . import io
from .config import ExperimentConfig

log = logging.getLogger(__name__)

SPLITS = ("train", "holdout", "pretrain")


class CheckFailure(RuntimeError):
    """A determinism or statistical gate did not pass (exit code 3)."""


class MissingInput(ConfigError):
    """A required input file is absent (reported as a configuration error)."""


@dataclass
class Pools:
    train: list[GroundingInstance]
    holdout: list[GroundingInstance]
    pretrain: list[GroundingInstance]


def _prepare(cfg: ExperimentConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    snap = out / "config.cfg"
    if snap.exists():
        prev = ExperimentConfig.load(snap)
        if prev.hash() != cfg.hash():
            log.warning("run dir %s held config %s; overwriting with %s", out, prev.hash(), cfg.hash())
    cfg.dump(snap)
    return out


# --- gen ---------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, out) -> dict:
    out = _prepare(cfg, out)
    (out / "pools").mkdir(exist_ok=True)
    env = cfg.env_config()
    sizes = {"train": cfg.train_size, "holdout": cfg.holdout_size, "pretrain": cfg.pretrain_size}
    pools = {s: generate_pool(cfg.seed, n, env, s) for s, n in sizes.items()}
    seen: dict[str, str] = {}
    for split, insts in pools.items():
        for inst in insts:
            if inst.id in seen:
                raise CheckFailure(f"instance id {inst.id} appears in {seen[inst.id]} and {split}")
            seen[inst.id] = split
    for split, insts in pools.items():
        save_pool(out / "pools" / f"{split}.jsonl", insts,
                  {"config_hash": cfg.hash(), "kind": "pool", "split": split})
    io.write_manifest(out, cfg.hash())
    return {s: len(p) for s, p in pools.items()}


def load_pools(out) -> Pools:
    d = Path(out) / "pools"
    missing = [s for s in SPLITS if not (d / f"{s}.jsonl").exists()]
    if missing:
        raise MissingInput(f"missing pool(s) {', '.join(missing)} under {d}; run `gen` first")
    return Pools(*(load_pool(d / f"{s}.jsonl") for s in SPLITS))


# --- shared pieces -------------------------------------------------------------

def base_student(cfg: ExperimentConfig, pools: Pools, threads: int = 1) -> PolicyParams:
    return warmup_student(pools.pretrain, cfg.video_length, cfg.d, cfg.max_digits, cfg.seed,
                          cfg.warmup_config(), threads)


def build_teacher(cfg: ExperimentConfig) -> Policy:
    if cfg.teacher == "checkpoint":
        path = Path(cfg.teacher_checkpoint)
        if not path.exists():
            raise MissingInput(f"teacher checkpoint {path} not found")
        blocks, _ = load_checkpoint(path)
        return LinearSoftmaxPolicy(blocks["student"])
    return make_oracle_teacher(cfg.teacher_config(), stream(cfg.seed, "teacher"), cfg.max_digits)


def _select_ids(instances: Sequence[GroundingInstance], ids: Sequence[str]) -> list[GroundingInstance]:
    by_id = {i.id: i for i in instances}
    unknown = [i for i in ids if i not in by_id]
    if unknown:
        raise ConfigError(f"selection lists {len(unknown)} id(s) not in the training pool, "
                          f"e.g. {unknown[0]}")
    return [by_id[i] for i in ids]


def training_instances(cfg: ExperimentConfig, pools: Pools, base: PolicyParams, teacher: Policy,
                       threads: int = 1) -> list[GroundingInstance]:
    insts = list(pools.train)
    if cfg.selection:
        path = Path(cfg.selection)
        if not path.exists():
            raise MissingInput(f"selection file {path} not found")
        insts = _select_ids(insts, read_selection(path))
    if cfg.difficulty_k:
        pol = LinearSoftmaxPolicy(base)
        ious = [prediction_iou(pol.greedy(i, cfg.max_len).decoded, i.gt) for i in insts]
        insts = difficulty_gaussian_sample(insts, ious, cfg.difficulty_k, cfg.difficulty_mu,
                                           cfg.difficulty_sigma, stream(cfg.seed, "difficulty"))
    if cfg.trpv_filter:
        scored = score_pool(LinearSoftmaxPolicy(base), teacher, insts, cfg.curriculum_config(),
                            cfg.seed, threads)
        insts = [s.instance for s in eligible(scored)]
        if not insts:
            raise ConfigError("no reliable training instances remain after filtering")
    return insts


def _step_fn(cfg: ExperimentConfig, teacher: Policy | None, threads: int):
    return make_step(cfg.algo, cfg.learning_rate, cfg.seed, teacher, threads, cfg.group_size,
                     cfg.beta, cfg.max_len, cfg.reward, cfg.reward_logp, cfg.old_refresh_every)


def _eval_record(cfg, policy: Policy, holdout, step: int, **extra) -> dict:
    rep = evaluate_policy(policy, holdout, cfg.thresholds_tuple(), cfg.max_len)
    return {"step": step, "algo": cfg.algo, "event": "eval", **extra,
            "mean_iou": rep.mean_iou, "recall_at": rep.to_dict()["recall_at"]}


def _save_state(path, state: TrainerState, cfg: ExperimentConfig, **meta) -> None:
    save_checkpoint(path, {"student": state.params, "old": state.old_params, "ref": state.ref_params},
                    {"step": state.step, "config_hash": cfg.hash(), "algo": cfg.algo, **meta})


def _load_state(path) -> tuple[TrainerState, dict]:
    blocks, header = load_checkpoint(path)
    meta = header["meta"]
    return TrainerState(blocks["student"], blocks["old"], blocks["ref"], int(meta["step"])), meta


# --- train -----------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out, threads: int = 1, resume: bool = False,
              stop_after: int | None = None) -> dict:
    """Run the configured trainer; ``stop_after`` halts early as if interrupted."""
    out = _prepare(cfg, out)
    pools = load_pools(out)
    teacher = build_teacher(cfg) if cfg.algo != "grpo" or cfg.curriculum or cfg.trpv_filter else None
    base = base_student(cfg, pools, threads)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    save_checkpoint(out / "base.ckpt", {"student": base}, {"config_hash": cfg.hash(), "step": 0})
    if cfg.curriculum:
        summary = _train_curriculum(cfg, out, pools, base, teacher, threads, resume, stop_after)
    else:
        summary = _train_plain(cfg, out, pools, base, teacher, threads, resume, stop_after)
    io.write_manifest(out, cfg.hash())
    return summary


def _train_plain(cfg, out: Path, pools: Pools, base, teacher, threads, resume, stop_after) -> dict:
    insts = training_instances(cfg, pools, base, teacher, threads)
    total = cfg.total_steps(len(insts))
    last = out / "checkpoints" / "last.ckpt"
    state = TrainerState.fresh(base)
    if resume and last.exists():
        state, meta = _load_state(last)
        if meta.get("config_hash") != cfg.hash():
            raise ConfigError("checkpoint was written under a different config")
        log.info("resuming from step %d", state.step)
    writer = io.MetricsWriter(out / "metrics.jsonl", cfg.hash(),
                              resume_from_step=state.step if resume else None)
    if state.step == 0:
        writer.write(_eval_record(cfg, LinearSoftmaxPolicy(state.params), pools.holdout, 0))
    step_fn = _step_fn(cfg, teacher, threads)
    limit = total if stop_after is None else min(total, stop_after)

    def on_step(st: TrainerState, metrics: dict) -> None:
        writer.write(metrics)
        if st.step % cfg.eval_every == 0 or st.step == total:
            writer.write(_eval_record(cfg, LinearSoftmaxPolicy(st.params), pools.holdout, st.step))
        if st.step % cfg.checkpoint_every == 0 or st.step == total:
            _save_state(last, st, cfg)
            _save_state(out / "checkpoints" / f"step-{st.step:06d}.ckpt", st, cfg)

    state = run_steps(state, insts, step_fn, limit, cfg.batch_size, on_step)
    done = state.step >= total
    if done:
        _save_state(out / "final.ckpt", state, cfg)
    report = evaluate_policy(LinearSoftmaxPolicy(state.params), pools.holdout,
                             cfg.thresholds_tuple(), cfg.max_len)
    return {"steps": state.step, "total_steps": total, "complete": done,
            "n_train": len(insts), "holdout": report.to_dict()}


def _train_curriculum(cfg, out: Path, pools: Pools, base, teacher, threads, resume,
                      stop_after) -> dict:
    ccfg = cfg.curriculum_config()
    cdir = out / "curriculum"
    cdir.mkdir(exist_ok=True)
    step_fn = _step_fn(cfg, teacher, threads)
    start, params = 0, base
    if resume:
        done = sorted(out.glob("checkpoints/round-*.ckpt"))
        if done:
            st, meta = _load_state(done[-1])
            start, params = int(meta["round"]), st.params
    writer = io.MetricsWriter(out / "metrics.jsonl", cfg.hash(),
                              resume_from_step=start * cfg.round_steps if resume else None)
    if start == 0:
        writer.write(_eval_record(cfg, LinearSoftmaxPolicy(base), pools.holdout, 0, round=0))
    stop_round = cfg.rounds if stop_after is None else min(cfg.rounds, stop_after)
    ccfg = dataclasses.replace(ccfg, rounds=stop_round)

    def train(p: PolicyParams, selection, r: int) -> PolicyParams:
        offset = r * cfg.round_steps

        def on_step(st, metrics):
            writer.write({**metrics, "step": offset + st.step, "round": r + 1})

        st = run_steps(TrainerState.fresh(p), selection, step_fn, cfg.round_steps,
                       cfg.batch_size, on_step)
        return st.params

    def on_round(res: RoundResult) -> None:
        hdr = f"config_hash = {cfg.hash()}"
        write_scored_csv(cdir / f"round-{res.round}.scored.csv", res.scored, hdr)
        write_selection(cdir / f"round-{res.round}.selection", res.selected_ids, hdr)
        writer.write(_eval_record(cfg, LinearSoftmaxPolicy(res.params), pools.holdout,
                                  res.round * cfg.round_steps, round=res.round,
                                  n_reliable=res.n_reliable))
        st = TrainerState(res.params, res.params, base, res.round * cfg.round_steps)
        _save_state(out / "checkpoints" / f"round-{res.round}.ckpt", st, cfg, round=res.round)

    results = run_rounds(params, teacher, pools.train, pools.holdout, ccfg, train, cfg.seed,
                         threads, start, on_round)
    final = results[-1].params if results else params
    complete = stop_round == cfg.rounds
    if complete:
        st = TrainerState(final, final, base, cfg.rounds * cfg.round_steps)
        _save_state(out / "final.ckpt", st, cfg, round=cfg.rounds)
        from ..plotting import plot_rounds
        mious = [r["mean_iou"] for r in io.read_jsonl(out / "metrics.jsonl")
                 if r.get("event") == "eval" and r.get("round", 0) >= 1]
        teacher_miou = evaluate_policy(teacher, pools.holdout, max_len=cfg.max_len).mean_iou
        plot_rounds(mious, cdir / "rounds.png", teacher_miou, cfg.hash())
    return {"rounds": [{"round": r.round, "mean_iou": r.report.mean_iou,
                        "n_reliable": r.n_reliable, "n_selected": len(r.selected_ids)}
                       for r in results], "complete": complete}


# --- eval / score / select ---------------------------------------------------------

def load_policy(checkpoint, block: str = "student") -> LinearSoftmaxPolicy:
    path = Path(checkpoint)
    if not path.exists():
        raise MissingInput(f"checkpoint {path} not found")
    blocks, _ = load_checkpoint(path)
    if block not in blocks:
        raise ConfigError(f"checkpoint has blocks {list(blocks)}, not {block!r}")
    return LinearSoftmaxPolicy(blocks[block])


def cmd_eval(policy: Policy, holdout_path, out, thresholds: Sequence[float], max_len: int,
             config_hash: str) -> dict:
    if not Path(holdout_path).exists():
        raise MissingInput(f"holdout pool {holdout_path} not found")
    holdout = load_pool(holdout_path)
    rep = evaluate_policy(policy, holdout, thresholds, max_len)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "eval.json", rep.to_dict(), config_hash)
    io.write_text(out / "eval.txt", rep.table(), config_hash)
    return rep.to_dict()


def cmd_score(cfg: ExperimentConfig, out, checkpoint=None, threads: int = 1) -> Path:
    out = Path(out)
    pools = load_pools(out)
    student = (load_policy(checkpoint) if checkpoint else
               LinearSoftmaxPolicy(base_student(cfg, pools, threads)))
    scored = score_pool(student, build_teacher(cfg), pools.train, cfg.curriculum_config(),
                        cfg.seed, threads)
    path = out / "scored.csv"
    write_scored_csv(path, scored, f"config_hash = {cfg.hash()}")
    io.write_manifest(out, cfg.hash())
    return path


def cmd_select(cfg: ExperimentConfig, scored_path, pool_path, out_path, k: int | None = None) -> list[str]:
    for p in (scored_path, pool_path):
        if not Path(p).exists():
            raise MissingInput(f"{p} not found")
    scored = read_scored_csv(scored_path, load_pool(pool_path))
    try:
        chosen = select(scored, cfg.curriculum_config(), k, stream(cfg.seed, "select", 0))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    ids = [s.id for s in chosen]
    write_selection(out_path, ids, f"config_hash = {cfg.hash()}")
    return ids


# --- analyze / compare -------------------------------------------------------------

def cmd_variance(cfg: ExperimentConfig, run_dir, out, checkpoint=None, n_samples: int = 10000,
                 instance_index: int = 0, sharpness: float = 10.0, n_boot: int = 1000) -> dict:
    """Both estimators at the checkpoint's student (default: the base student)."""
    from ..plotting import plot_variance
    from ..policy import TeacherConfig
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pools = load_pools(run_dir)
    params = load_policy(checkpoint).params if checkpoint else base_student(cfg, pools)
    if not 0 <= instance_index < len(pools.holdout):
        raise ConfigError(f"instance index {instance_index} outside the holdout pool")
    inst = pools.holdout[instance_index]
    teacher = OracleTeacher(TeacherConfig(sharpness, 0.0), cfg.seed, cfg.max_digits)
    opd = measure_variance("opd", params, inst, n_samples, cfg.seed, teacher,
                           cfg.group_size, cfg.reward, cfg.max_len)
    grpo = measure_variance("grpo", params, inst, n_samples, cfg.seed, None,
                            cfg.group_size, cfg.reward, cfg.max_len)
    dom = variance_dominance(opd, grpo, n_boot, np.random.default_rng([cfg.seed, 99]))
    result = {"instance": inst.id, "reports": [opd.to_dict(), grpo.to_dict()], "dominance": dom}
    io.write_json(out / "variance.json", result, cfg.hash())
    rows = [{"estimator": r.estimator, "n_samples": r.n_samples, "trace_cov": r.trace_cov,
             "mean_tokens": r.mean_tokens, **r.decomposition} for r in (opd, grpo)]
    io.write_csv(out / "variance.csv", rows, cfg.hash())
    plot_variance([opd, grpo], out / "variance.png", cfg.hash())
    return result


def cmd_kl_check(cfg: ExperimentConfig, out, n_samples: int = 200000, threshold: float = 3.0,
                 sharpness: float = 5.0) -> dict:
    from ..policy import TeacherConfig, init_params
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(np.random.default_rng([cfg.seed, 0x4B4C]), cfg.video_length, cfg.d,
                         cfg.max_digits, cfg.init_scale)
    inst = generate_pool(cfg.seed, 1, cfg.env_config(), "klcheck")[0]
    teacher = OracleTeacher(TeacherConfig(sharpness, 0.0), cfg.seed, cfg.max_digits)
    chk = kl_identity_check(params, teacher, inst, n_samples, stream(cfg.seed, "klcheck"))
    result = {**chk.to_dict(), "threshold": threshold, "passed": chk.max_z_score <= threshold}
    io.write_json(out / "kl_check.json", result, cfg.hash())
    io.write_csv(out / "kl_check.csv",
                 [{"coord": i, "mc": m, "analytic": a, "std_error": s}
                  for i, (m, a, s) in enumerate(zip(chk.mc_gradient, chk.analytic_gradient,
                                                    chk.std_error))], cfg.hash())
    if not result["passed"]:
        raise CheckFailure(f"KL identity check failed: max |z| = {chk.max_z_score:.3f} > {threshold}")
    return result


def curves_from_metrics(paths: Sequence) -> list[BudgetCurve]:
    curves = []
    for p in paths:
        if not Path(p).exists():
            raise MissingInput(f"metrics file {p} not found")
        curves.append(BudgetCurve.from_metrics(io.read_jsonl(p)))
    return curves


def joint_hash(metrics_paths: Sequence) -> str:
    """Config hashes of the given metrics streams, joined with '+' (order kept, duplicates dropped)."""
    seen = []
    for p in metrics_paths:
        h = (io.read_header(p) or {}).get("config_hash", "unknown") if Path(p).exists() else "missing"
        if h not in seen:
            seen.append(h)
    return "+".join(seen)


def cmd_budget(metrics_paths: Sequence, out, target: float, config_hash: str) -> list[dict]:
    from ..plotting import plot_budget
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    curves = curves_from_metrics(metrics_paths)
    rows = budget_compare(curves, target)
    io.write_json(out / "budget.json", {"target_miou": target, "rows": rows}, config_hash)
    io.write_csv(out / "budget.csv", rows, config_hash)
    points = [{"algo": c.algo, "tokens": t, "wallclock_ms": w, "mean_iou": m}
              for c in curves for t, w, m in zip(c.tokens, c.wallclock_ms, c.mean_iou)]
    io.write_csv(out / "curves.csv", points, config_hash,
                 ["algo", "tokens", "wallclock_ms", "mean_iou"])
    plot_budget(curves, out / "budget.png", target, config_hash=config_hash)
    return rows


def cmd_compare(cfg: ExperimentConfig, out, algos: Sequence[str], target: float = 0.6,
                threads: int = 1) -> list[dict]:
    """Train each algorithm on the same pools and base student, then tabulate and plot."""
    out = _prepare(cfg, out)
    if not (out / "pools" / "train.jsonl").exists():
        cmd_gen(cfg, out)
    paths = []
    for algo in algos:
        sub = out / algo
        sub.mkdir(exist_ok=True)
        (sub / "pools").mkdir(exist_ok=True)
        for split in SPLITS:
            dst = sub / "pools" / f"{split}.jsonl"
            dst.write_bytes((out / "pools" / f"{split}.jsonl").read_bytes())
        t0 = time.perf_counter()
        cmd_train(cfg.replace(algo=algo), sub, threads)
        log.info("%s trained in %.1fs", algo, time.perf_counter() - t0)
        paths.append(sub / "metrics.jsonl")
    rows = cmd_budget(paths, out / "report", target, cfg.hash())
    io.write_manifest(out, cfg.hash())
    return rows


__all__ = ["CheckFailure", "MissingInput", "cmd_gen", "cmd_train", "cmd_eval", "cmd_score",
           "cmd_select", "cmd_variance", "cmd_kl_check", "cmd_budget", "cmd_compare",
           "load_pools", "load_policy", "base_student", "build_teacher"]
