"""Seeded experiment runs: evaluation, normalised scores, windowed reports and CSV output."""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .agents import (ActorCritic, AgentConfig, MetricsRecord, Phase, PretrainConfig,
                     pretrain_then_train)
from .core import OfflineDataset, content_hash, load_jsonl
from .envs import (BehaviorKind, BehaviorPolicySpec, ContinuousEnvSpec, generate_dataset,
                   pointmass_env, run_episodes, score_anchors)

__all__ = [
    "CSV_HEADER", "EvalReport", "ExperimentConfig", "ExperimentResult", "MetricsRecord",
    "evaluate_policy", "normalized_score", "read_metrics", "run_experiment", "run_seed",
    "steps_to_threshold", "windowed_scores", "write_metrics", "compare_efficiency",
    "phase_switch_drop", "train_seed", "preset_config", "PRESETS",
]

CSV_HEADER = ("step,phase,seed,loss_actor,loss_critic,loss_bc,loss_cql,loss_div,"
              "eval_return,normalized_score,wall_clock_s")
_LOSS_COLUMNS = ("actor", "critic", "bc", "cql", "div")
EVAL_SEED_OFFSET = 1_000_003


def evaluate_policy(env: ContinuousEnvSpec, policy: Callable, n_episodes: int, seed: int) -> float:
    """Mean undiscounted return of ``policy`` (used as-is, no exploration noise)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns, _ = run_episodes(env, policy, n_episodes, np.random.default_rng(seed))
    return float(returns.mean())


def normalized_score(raw: float, random_anchor: float, expert_anchor: float) -> float:
    if not expert_anchor > random_anchor:
        raise ValueError(
            f"degenerate anchors: expert {expert_anchor} must exceed random {random_anchor}")
    return (raw - random_anchor) / (expert_anchor - random_anchor)


# --- configuration ------------------------------------------------------------------

# named desk-scale datasets (2-D dense point mass, medium-quality scripted behavior)
PRESETS = {
    "pointmass-medium": {"env": {"dim": 2, "sparse": False},
                         "dataset": {"quality": 0.5, "n_episodes": 200, "seed": 0}},
    "pointmass-small-data": {"env": {"dim": 2, "sparse": False},
                             "dataset": {"quality": 0.5, "n_episodes": 25, "seed": 0}},
}


@dataclass(frozen=True)
class DatasetRef:
    """Either a JSONL path or a recipe for regenerating the data deterministically."""

    path: Optional[str] = None
    quality: float = 0.5
    n_episodes: int = 200
    seed: int = 0
    behavior: str = BehaviorKind.SCRIPTED_PROPORTIONAL.value
    noise_scale: float = 1.0

    def load(self, env: ContinuousEnvSpec) -> OfflineDataset:
        if self.path is not None:
            if not Path(self.path).exists():
                raise FileNotFoundError(f"dataset {self.path} does not exist")
            return load_jsonl(self.path)
        spec = BehaviorPolicySpec(BehaviorKind(self.behavior), self.quality, self.noise_scale,
                                  self.seed)
        return generate_dataset(env, spec, self.n_episodes, self.seed)


@dataclass(frozen=True)
class ExperimentConfig:
    env: dict = field(default_factory=lambda: {"dim": 2, "sparse": False})
    dataset: DatasetRef = field(default_factory=DatasetRef)
    agent: AgentConfig = field(default_factory=AgentConfig)
    pretrain: Optional[PretrainConfig] = None
    total_steps: int = 3000
    eval_every: int = 250
    eval_episodes: int = 10
    seeds: tuple = (0,)
    output_dir: Optional[str] = None
    window_fraction: float = 1.0 / 3.0
    log_every: int = 250
    name: str = "run"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.dataset, dict):
            object.__setattr__(self, "dataset", DatasetRef(**self.dataset))
        if isinstance(self.agent, dict):
            object.__setattr__(self, "agent", _agent_from_dict(self.agent))
        if isinstance(self.pretrain, dict):
            object.__setattr__(self, "pretrain", PretrainConfig(**self.pretrain))
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.eval_every <= 0 or self.total_steps % self.eval_every:
            raise ValueError("eval_every must be positive and divide total_steps")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if not 0.0 < self.window_fraction <= 1.0:
            raise ValueError("window_fraction must lie in (0, 1]")

    def make_env(self) -> ContinuousEnvSpec:
        return pointmass_env(**self.env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["agent"] = _enum_values(d["agent"])
        d["pretrain"] = None if self.pretrain is None else _enum_values(d["pretrain"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _enum_values(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = v.value if hasattr(v, "value") else (list(v) if isinstance(v, tuple) else v)
    return out


def _agent_from_dict(d: dict) -> AgentConfig:
    unknown = set(d) - set(AgentConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
    return AgentConfig(**d)


# --- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    mean: float
    std: float
    steps_to_threshold: Optional[float] = None
    per_seed: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: dict  # seed -> list[MetricsRecord]
    report: EvalReport
    anchors: dict


def _evals(records: Sequence[MetricsRecord]) -> list:
    return [r for r in records if r.normalized_score is not None]


def windowed_scores(records: Sequence[MetricsRecord], fraction: float = 1.0 / 3.0) -> list:
    """Normalised scores of evaluations inside the final ``fraction`` of the RL phase.

    Runs without an RL phase fall back to the last evaluation.
    """
    evals = _evals(records)
    if not evals:
        return []
    rl = [r for r in evals if r.phase is Phase.RL]
    rl_start = max((r.step for r in evals if r.phase is not Phase.RL), default=0)
    if not rl:
        return [evals[-1].normalized_score]
    end = rl[-1].step
    cut = end - fraction * (end - rl_start)
    return [r.normalized_score for r in rl if r.step > cut - 1e-9] or [rl[-1].normalized_score]


def steps_to_threshold(records: Sequence[MetricsRecord], threshold: float,
                       smoothing: int = 3) -> Optional[int]:
    """First step at which the trailing ``smoothing``-eval moving average reaches ``threshold``."""
    evals = _evals(records)
    scores = [r.normalized_score for r in evals]
    for i in range(smoothing - 1, len(evals)):
        if np.mean(scores[i - smoothing + 1: i + 1]) >= threshold:
            return evals[i].step
    return None


def _report(per_seed_records: dict, fraction: float, failures: dict) -> EvalReport:
    means = {s: float(np.mean(windowed_scores(r, fraction))) for s, r in per_seed_records.items()
             if _evals(r)}
    vals = [means[s] for s in sorted(means)]
    mean = float(np.mean(vals)) if vals else math.nan
    std = float(np.std(vals)) if vals else 0.0
    return EvalReport(mean, std, None, means, failures)


def compare_efficiency(pretrained: dict, scratch: dict, fraction: float = 1.0 / 3.0,
                       ratio: float = 0.9) -> dict:
    """Pairwise steps-to-threshold for runs sharing seeds.

    The threshold for each seed is ``ratio`` times the scratch run's final windowed
    score; unreached thresholds count as infinitely many steps.
    """
    out = {"pretrained": {}, "scratch": {}, "threshold": {}}
    for seed in sorted(set(pretrained) & set(scratch)):
        thr = ratio * float(np.mean(windowed_scores(scratch[seed], fraction)))
        out["threshold"][seed] = thr
        for key, recs in (("pretrained", pretrained[seed]), ("scratch", scratch[seed])):
            k = steps_to_threshold(recs, thr)
            out[key][seed] = math.inf if k is None else k
    for key in ("pretrained", "scratch"):
        vals = list(out[key].values())
        out[f"median_{key}"] = float(np.median(vals)) if vals else math.nan
    return out


# --- running -------------------------------------------------------------------------


def run_seed(cfg: ExperimentConfig, seed: int, ds: Optional[OfflineDataset] = None,
             anchors: Optional[dict] = None) -> list:
    """Train and evaluate one seed; returns its MetricsRecords."""
    return train_seed(cfg, seed, ds, anchors)[0]


def train_seed(cfg: ExperimentConfig, seed: int, ds: Optional[OfflineDataset] = None,
               anchors: Optional[dict] = None) -> tuple[list, ActorCritic]:
    """Like :func:`run_seed` but also returns the trained agent."""
    env = cfg.make_env()
    ds = cfg.dataset.load(env) if ds is None else ds
    anchors = score_anchors(env) if anchors is None else anchors
    agent = replace(cfg.agent, seed=seed)
    ac = ActorCritic.create(env.obs_dim, env.act_dim, agent)
    eval_seed = EVAL_SEED_OFFSET + seed

    def evaluator(policy):
        raw = evaluate_policy(env, policy, cfg.eval_episodes, eval_seed)
        return raw, normalized_score(raw, anchors["random"], anchors["expert"])

    records = list(pretrain_then_train(ac, ds, cfg.pretrain, agent, cfg.total_steps, evaluator,
                                       cfg.eval_every, cfg.log_every, seed))
    return records, ac


def _run_seed_safe(args):
    cfg, seed, ds, anchors = args
    try:
        return seed, run_seed(cfg, seed, ds, anchors), None
    except Exception as exc:  # isolate per-seed failures
        return seed, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def run_experiment(cfg: ExperimentConfig, ds: Optional[OfflineDataset] = None,
                   jobs: int = 1) -> ExperimentResult:
    """Run every seed (optionally in ``jobs`` processes) and aggregate the windowed score.

    A failing seed is recorded in ``report.failures`` and the others still complete.
    When ``output_dir`` is set, per-seed CSVs and a manifest are written there.
    """
    env = cfg.make_env()
    ds = cfg.dataset.load(env) if ds is None else ds
    anchors = score_anchors(env)
    tasks = [(cfg, s, ds, anchors) for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed_safe, tasks))
    else:
        results = [_run_seed_safe(t) for t in tasks]
    records, failures = {}, {}
    for seed, recs, err in results:
        if err is None:
            records[seed] = recs
        else:
            failures[seed] = err
    report = _report(records, cfg.window_fraction, failures)
    result = ExperimentResult(cfg, records, report, anchors)
    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for seed, recs in records.items():
            write_metrics(recs, out / f"{cfg.name}_seed{seed}.csv")
        write_manifest(result, ds, out / f"{cfg.name}_manifest.json")
    return result


def write_manifest(result: ExperimentResult, ds: OfflineDataset, path) -> Path:
    manifest = {
        "name": result.config.name,
        "config": result.config.to_dict(),
        "dataset_id": ds.dataset_id,
        "dataset_hash": content_hash(ds),
        "anchors": result.anchors,
        "report": {"mean": result.report.mean, "std": result.report.std,
                   "per_seed": {str(k): v for k, v in result.report.per_seed.items()},
                   "failures": {str(k): v for k, v in result.report.failures.items()}},
    }
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# --- CSV -------------------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".9g")


def write_metrics(records: Sequence[MetricsRecord], path) -> Path:
    """Write records as CSV (floats at 9 significant digits, absent values empty)."""
    if not records:
        raise ValueError("records must be non-empty")
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise ValueError(f"directory {path.parent} does not exist")
    lines = [CSV_HEADER]
    for r in records:
        cells = [str(int(r.step)), Phase(r.phase).value, str(int(r.seed))]
        cells += [_fmt(r.losses.get(k)) for k in _LOSS_COLUMNS]
        cells += [_fmt(r.eval_return), _fmt(r.normalized_score), _fmt(r.wall_clock_s)]
        lines.append(",".join(cells))
    try:
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ValueError(f"cannot write {path}: {exc}") from exc
    return path


def read_metrics(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if ",".join(reader.fieldnames or []) != CSV_HEADER:
            raise ValueError(f"{path} does not have the metrics header")
        for row in reader:
            f = {k: (float(v) if v != "" else None) for k, v in row.items()
                 if k not in ("step", "phase", "seed")}
            losses = {k: f[f"loss_{k}"] for k in _LOSS_COLUMNS if f[f"loss_{k}"] is not None}
            out.append(MetricsRecord(int(row["step"]), Phase(row["phase"]), int(row["seed"]),
                                     losses, f["eval_return"], f["normalized_score"],
                                     f["wall_clock_s"] or 0.0))
    return out


def strip_wall_clock(path) -> str:
    """CSV text with the wall-clock column removed (for determinism comparisons)."""
    lines = Path(path).read_text().splitlines()
    return "\n".join(line.rsplit(",", 1)[0] for line in lines) + "\n"


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))


def phase_switch_drop(records: Sequence[MetricsRecord], fraction: float = 0.1) -> Optional[float]:
    """Relative score change right after pre-training ends.

    Compares the last pre-training evaluation with the mean of the RL-phase
    evaluations in the first ``fraction`` of the RL phase; positive values are drops.
    """
    evals = _evals(records)
    pre = [r for r in evals if r.phase is not Phase.RL]
    rl = [r for r in evals if r.phase is Phase.RL]
    if not pre or not rl:
        return None
    start, end = pre[-1].step, rl[-1].step
    horizon = start + fraction * (end - start)
    early = [r.normalized_score for r in rl if r.step <= horizon + 1e-9]
    if not early:
        early = [rl[0].normalized_score]
    base = pre[-1].normalized_score
    return (base - float(np.mean(early))) / max(abs(base), 1e-12)


def preset_config(preset: str, **overrides) -> ExperimentConfig:
    """ExperimentConfig for a named dataset preset, with field overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = dict(PRESETS[preset], name=preset)
    base.update(overrides)
    return ExperimentConfig(**base)
