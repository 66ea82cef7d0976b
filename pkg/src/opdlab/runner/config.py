"""Flat ``key = value`` experiment configuration.

Files hold one key per line (``#`` comments allowed, no sections). Every key
has a type and a default in :data:`SCHEMA`; unknown keys are an error. The
config hash is the SHA-256 of the canonical rendering of all resolved values,
so two files that differ only in comments or key order hash identically.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from ..curriculum import STRATEGIES, SORT_KEYS, CurriculumConfig
from ..env import ConfigError, EnvConfig
from ..policy import TeacherConfig
from ..training import ALGOS, WarmupConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    doc: str
    choices: tuple | None = None


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


SCHEMA: dict[str, Key] = {
    "config_version": Key(int, CONFIG_VERSION, "schema version"),
    "seed": Key(int, 1, "master seed; every random stream derives from it"),
    # world
    "video_length": Key(int, 20, "bins per synthetic video"),
    "n_symbols": Key(int, 4, "feature symbols"),
    "min_span": Key(int, 3, "shortest ground-truth run"),
    "max_span": Key(int, 6, "longest ground-truth run"),
    "max_digits": Key(int, 2, "digits per boundary in the output grammar"),
    "train_size": Key(int, 512, "training pool size"),
    "holdout_size": Key(int, 128, "held-out pool size"),
    "pretrain_size": Key(int, 256, "warm-up corpus size for the base student"),
    # student
    "d": Key(int, 8, "embedding width"),
    "init_scale": Key(float, 0.3, "std of the random initialization"),
    "warmup_steps": Key(int, 80, "supervised warm-up steps for the base student"),
    "warmup_lr": Key(float, 0.05, "warm-up learning rate"),
    "max_len": Key(int, 8, "maximum trajectory length"),
    # trainer
    "algo": Key(str, "opd", "post-training algorithm", ALGOS),
    "learning_rate": Key(float, 0.05, "SGD step size"),
    "batch_size": Key(int, 32, "instances per step"),
    "epochs": Key(float, 1.0, "passes over the training pool (ignored when steps > 0)"),
    "steps": Key(int, 0, "total optimizer steps; 0 derives them from epochs"),
    "group_size": Key(int, 8, "grpo rollouts per instance"),
    "beta": Key(float, 0.01, "grpo KL coefficient"),
    "reward": Key(str, "timestamp_aware_iou", "grpo sequence reward", ("iou", "timestamp_aware_iou")),
    "reward_logp": Key(str, "current", "opd: student log-prob used in r_t", ("current", "sampling")),
    "old_refresh_every": Key(int, 1, "steps between old-policy refreshes"),
    # teacher
    "teacher": Key(str, "oracle", "oracle or checkpoint", ("oracle", "checkpoint")),
    "teacher_sharpness": Key(float, 5.0, "oracle logit on the correct token"),
    "teacher_corruption": Key(float, 0.0, "fraction of instances with a shifted oracle target"),
    "teacher_checkpoint": Key(str, "", "checkpoint whose 'student' block is the teacher"),
    # evaluation
    "thresholds": Key(str, "0.3,0.5,0.7", "recall thresholds"),
    "eval_every": Key(int, 10, "steps between held-out evaluations"),
    "checkpoint_every": Key(int, 50, "steps between checkpoints"),
    # curriculum
    "curriculum": Key(bool, False, "run multi-round teacher-validated selection"),
    "trpv_filter": Key(bool, False, "drop unreliable instances before plain training"),
    "k_select": Key(int, 128, "instances selected per round"),
    "top_k_preds": Key(int, 4, "sampled predictions per model when scoring"),
    "reliability_threshold": Key(float, 0.5, "minimum teacher IoU to keep an instance"),
    "strategy": Key(str, "topk", "selection strategy", STRATEGIES),
    "sort_key": Key(str, "delta", "selection ordering field", SORT_KEYS),
    "bbds_buckets": Key(int, 5, "bucketed sampler bucket count"),
    "gwds_center": Key(float, 0.9, "gaussian sampler center"),
    "gwds_sigma": Key(float, 0.2, "gaussian sampler width"),
    "rounds": Key(int, 1, "curriculum rounds"),
    "round_steps": Key(int, 40, "optimizer steps per curriculum round"),
    "selection": Key(str, "", "file of instance ids to train on instead of the full pool"),
    # difficulty-aware pool construction
    "difficulty_k": Key(int, 0, "if > 0, draw this many training instances by base-model IoU"),
    "difficulty_mu": Key(float, 0.3, "difficulty sampler center"),
    "difficulty_sigma": Key(float, 0.2, "difficulty sampler width"),
}


def _parse(key: str, raw: str):
    spec = SCHEMA[key]
    raw = raw.strip()
    try:
        if spec.type is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            val = low in ("true", "1", "yes")
        else:
            val = spec.type(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.type.__name__}") from None
    if spec.choices and val not in spec.choices:
        raise ConfigError(f"{key}: {val!r} not one of {', '.join(map(str, spec.choices))}")
    return val


def _render(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return repr(val) if isinstance(val, float) else str(val)


class ExperimentConfig:
    """Resolved configuration; attribute access per schema key."""

    def __init__(self, values: dict | None = None):
        merged = {k: s.default for k, s in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _parse(k, v if isinstance(v, str) else _render(v))
        object.__setattr__(self, "_values", merged)
        self.validate()

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __setattr__(self, name, value):
        raise AttributeError("ExperimentConfig is immutable; use replace()")

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig({**self._values, **changes})

    def as_dict(self) -> dict:
        return dict(self._values)

    def validate(self) -> None:
        v = self._values
        if v["config_version"] != CONFIG_VERSION:
            raise ConfigError(f"config_version {v['config_version']} unsupported "
                              f"(expected {CONFIG_VERSION})")
        self.env_config()
        for k in ("train_size", "holdout_size", "pretrain_size", "batch_size", "eval_every",
                  "checkpoint_every", "round_steps", "old_refresh_every"):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if v["steps"] < 0 or v["epochs"] <= 0:
            raise ConfigError("steps must be >= 0 and epochs > 0")
        if not v["learning_rate"] >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if v["group_size"] < 2:
            raise ConfigError("group_size must be >= 2")
        if not 1 <= v["d"] <= 16:
            raise ConfigError("d must lie in [1, 16]")
        if v["max_len"] < 2 * v["max_digits"] + 2:
            raise ConfigError("max_len too short for the output grammar")
        if v["teacher"] == "checkpoint" and not v["teacher_checkpoint"]:
            raise ConfigError("teacher = checkpoint needs teacher_checkpoint")
        try:
            self.teacher_config()
            self.curriculum_config()
            self.thresholds_tuple()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- typed views --
    def env_config(self) -> EnvConfig:
        v = self._values
        try:
            return EnvConfig(v["video_length"], v["n_symbols"], v["min_span"], v["max_span"],
                             v["max_digits"])
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(self.teacher_sharpness, self.teacher_corruption)

    def curriculum_config(self) -> CurriculumConfig:
        return CurriculumConfig(k_select=self.k_select, top_k_preds=self.top_k_preds,
                                reliability_threshold=self.reliability_threshold,
                                strategy=self.strategy, bbds_buckets=self.bbds_buckets,
                                gwds_center=self.gwds_center, gwds_sigma=self.gwds_sigma,
                                rounds=self.rounds, sort_key=self.sort_key, max_len=self.max_len)

    def warmup_config(self) -> WarmupConfig:
        return WarmupConfig(self.warmup_steps, self.warmup_lr, self.batch_size, self.init_scale)

    def thresholds_tuple(self) -> tuple[float, ...]:
        th = _floats(self.thresholds)
        if not th or any(not 0 <= t <= 1 for t in th):
            raise ValueError("thresholds must be a non-empty list of fractions")
        return th

    def total_steps(self, n_train: int) -> int:
        if self.steps:
            return self.steps
        return max(1, int(round(self.epochs * n_train / self.batch_size)))

    # -- persistence --
    def canonical(self) -> str:
        return "".join(f"{k} = {_render(self._values[k])}\n" for k in SCHEMA)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(f"# config_hash = {self.hash()}\n" + self.canonical(),
                              encoding="utf-8")

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.parse(text, overrides)

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#",), inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string("[config]\n" + text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        values = dict(cp["config"])
        values.update(overrides or {})
        return cls(values)


def describe_schema() -> str:
    width = max(map(len, SCHEMA))
    lines = []
    for k, s in SCHEMA.items():
        extra = f" [{'|'.join(map(str, s.choices))}]" if s.choices else ""
        lines.append(f"{k.ljust(width)}  {_render(s.default)!s:<22} {s.doc}{extra}")
    return "\n".join(lines)
