"""Offline dataset model and return-target computations.

Trajectories are stored as immutable tuples of :class:`Transition`. Training code
works on the flat array view produced by :meth:`OfflineDataset.arrays`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

Observation = Union[int, np.ndarray]
ActionValue = Union[int, np.ndarray]

# Maps an array of states (one row / entry per state) to per-state entropies.
EntropyEstimator = Callable[[np.ndarray], np.ndarray]


class DoneKind(str, enum.Enum):
    NOT_DONE = "NotDone"
    TERMINATION = "Termination"
    TIMEOUT = "Timeout"


class TimeoutMode(str, enum.Enum):
    TREAT_AS_TERMINAL = "TreatAsTerminal"
    BOOTSTRAP_EXCLUDED = "BootstrapExcluded"


class VisitMode(str, enum.Enum):
    FIRST_VISIT = "FirstVisit"
    EVERY_VISIT = "EveryVisit"


class AnnotationMode(str, enum.Enum):
    HARD = "Hard"
    SOFT = "Soft"


def _as_obs(x) -> Observation:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError(f"discrete index must be non-negative, got {x}")
        return int(x)
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _same_obs(a: Observation, b: Observation) -> bool:
    if isinstance(a, int) or isinstance(b, int):
        return a == b
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True)
class Transition:
    state: Observation
    action: ActionValue
    reward: float
    next_state: Observation
    done_kind: DoneKind = DoneKind.NOT_DONE

    def __post_init__(self):
        object.__setattr__(self, "state", _as_obs(self.state))
        object.__setattr__(self, "next_state", _as_obs(self.next_state))
        object.__setattr__(self, "action", _as_obs(self.action))
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "done_kind", DoneKind(self.done_kind))


class TrajectoryError(ValueError):
    """Raised for empty or non-contiguous trajectories."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Trajectory:
    transitions: tuple

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    @property
    def end_kind(self) -> DoneKind:
        return self.transitions[-1].done_kind

    def validate(self) -> None:
        """Check non-emptiness, contiguity and done flags.

        Raises:
            TrajectoryError: with ``index`` set to the first offending step.
        """
        if not self.transitions:
            raise TrajectoryError("trajectory is empty")
        for i in range(len(self.transitions) - 1):
            if not _same_obs(self.transitions[i].next_state, self.transitions[i + 1].state):
                raise TrajectoryError(
                    f"trajectory is not contiguous between steps {i} and {i + 1}", index=i
                )
            if self.transitions[i].done_kind is not DoneKind.NOT_DONE:
                raise TrajectoryError(f"step {i} is marked done before the last step", index=i)
        if self.transitions[-1].done_kind is DoneKind.NOT_DONE:
            raise TrajectoryError(
                "last transition must be Termination or Timeout", index=len(self.transitions) - 1
            )


@dataclass(frozen=True)
class ReturnConfig:
    gamma: float = 0.99
    lambda_mix: float = 0.0
    timeout_mode: TimeoutMode = TimeoutMode.TREAT_AS_TERMINAL
    visit_mode: VisitMode = VisitMode.EVERY_VISIT

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError(f"lambda_mix must lie in [0, 1], got {self.lambda_mix}")
        object.__setattr__(self, "timeout_mode", TimeoutMode(self.timeout_mode))
        object.__setattr__(self, "visit_mode", VisitMode(self.visit_mode))


@dataclass(frozen=True)
class OfflineDataset:
    """A fixed collection of trajectories plus optional per-step annotations.

    ``rtg`` and ``soft_rtg`` hold one array per trajectory. ``annotation_gamma``
    records the discount the annotations were computed with.
    """

    trajectories: tuple
    dataset_id: str = "dataset"
    seed: int = 0
    rtg: Optional[tuple] = None
    soft_rtg: Optional[tuple] = None
    annotation_gamma: Optional[float] = None
    timeout_mode: TimeoutMode = TimeoutMode.TREAT_AS_TERMINAL

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        for name in ("rtg", "soft_rtg"):
            ann = getattr(self, name)
            if ann is None:
                continue
            ann = tuple(np.asarray(a, dtype=np.float64) for a in ann)
            if len(ann) != len(self.trajectories) or any(
                len(a) != len(t) for a, t in zip(ann, self.trajectories)
            ):
                raise ValueError(f"{name} must hold one value per transition")
            for a in ann:
                a.setflags(write=False)
            object.__setattr__(self, name, ann)

    def __len__(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def is_discrete(self) -> bool:
        return isinstance(self.trajectories[0].transitions[0].state, int)

    @cached_property
    def arrays(self) -> dict:
        """Flat numpy view: obs, actions, rewards, next_obs, terminals, timeouts,
        traj_index, step_index, rtg / soft_rtg (when annotated) and
        ``pretrain_mask`` (steps usable as Monte-Carlo regression targets)."""
        trans = [t for traj in self.trajectories for t in traj.transitions]
        if not trans:
            raise ValueError("dataset is empty")
        if isinstance(trans[0].state, int):
            obs = np.array([t.state for t in trans], dtype=np.int64)
            next_obs = np.array([t.next_state for t in trans], dtype=np.int64)
        else:
            obs = np.stack([t.state for t in trans])
            next_obs = np.stack([t.next_state for t in trans])
        if isinstance(trans[0].action, int):
            actions = np.array([t.action for t in trans], dtype=np.int64)
        else:
            actions = np.stack([t.action for t in trans])
        out = {
            "obs": obs,
            "actions": actions,
            "rewards": np.array([t.reward for t in trans]),
            "next_obs": next_obs,
            "terminals": np.array([t.done_kind is DoneKind.TERMINATION for t in trans]),
            "timeouts": np.array([t.done_kind is DoneKind.TIMEOUT for t in trans]),
            "traj_index": np.concatenate(
                [np.full(len(tr), i) for i, tr in enumerate(self.trajectories)]
            ),
            "step_index": np.concatenate([np.arange(len(tr)) for tr in self.trajectories]),
        }
        if self.rtg is not None:
            out["rtg"] = np.concatenate(self.rtg)
        if self.soft_rtg is not None:
            out["soft_rtg"] = np.concatenate(self.soft_rtg)
        out["pretrain_mask"] = np.concatenate(
            [_pretrain_mask(tr, self.annotation_gamma or 1.0, self.timeout_mode)
             for tr in self.trajectories]
        )
        for v in out.values():
            v.setflags(write=False)
        return out


def _pretrain_mask(traj: Trajectory, gamma: float, mode: TimeoutMode) -> np.ndarray:
    mask = np.ones(len(traj), dtype=bool)
    if mode is TimeoutMode.BOOTSTRAP_EXCLUDED and traj.end_kind is DoneKind.TIMEOUT:
        # the truncated tail misses a non-negligible share of the discounted return
        tail = len(traj) if gamma >= 1.0 else math.ceil(1.0 / (1.0 - gamma) - 1e-9)
        mask[max(0, len(traj) - tail):] = False
    return mask


def compute_return_to_go(traj: Trajectory, cfg: ReturnConfig) -> np.ndarray:
    """Discounted return-to-go for every step, via one backward pass.

    Under both timeout modes the final step's return is its own reward; the
    ``BootstrapExcluded`` mode only affects which steps are used as critic
    pre-training targets (see ``OfflineDataset.arrays["pretrain_mask"]``).
    """
    traj.validate()
    rewards = traj.rewards
    out = np.empty_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + cfg.gamma * running
        out[t] = running
    return out


def compute_mixed_target(R, r, gamma, q_next, lambda_mix):
    """``(1 - lambda) * R + lambda * (r + gamma * q_next)``; works on scalars or arrays."""
    if not 0.0 <= lambda_mix <= 1.0:
        raise ValueError(f"lambda_mix must lie in [0, 1], got {lambda_mix}")
    if lambda_mix == 0.0:
        return R
    if lambda_mix == 1.0:
        return r + gamma * q_next
    return (1.0 - lambda_mix) * R + lambda_mix * (r + gamma * q_next)


def compute_soft_return_to_go(
    traj: Trajectory,
    cfg: ReturnConfig,
    temperature: float,
    entropy_estimator: EntropyEstimator,
) -> np.ndarray:
    """Return-to-go with entropy bonuses of every *later* state in the trajectory.

    ``entropy_estimator`` receives the stacked states of the trajectory and must
    return one entropy per state.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be non-negative, got {temperature}")
    traj.validate()
    rewards = traj.rewards
    if temperature == 0.0:
        return compute_return_to_go(traj, cfg)
    states = _stack_states([t.state for t in traj.transitions])
    ent = np.asarray(entropy_estimator(states), dtype=np.float64).reshape(-1)
    if ent.shape[0] != len(traj):
        raise ValueError("entropy_estimator must return one value per state")
    out = np.empty_like(rewards)
    running = rewards[-1]
    out[-1] = running
    for t in range(len(rewards) - 2, -1, -1):
        running = rewards[t] + cfg.gamma * (temperature * ent[t + 1] + running)
        out[t] = running
    return out


def _stack_states(states: Sequence[Observation]) -> np.ndarray:
    if isinstance(states[0], int):
        return np.array(states, dtype=np.int64)
    return np.stack(states)


def annotate_dataset(
    ds: OfflineDataset,
    cfg: ReturnConfig,
    mode: AnnotationMode = AnnotationMode.HARD,
    temperature: float = 0.0,
    entropy_estimator: Optional[EntropyEstimator] = None,
) -> OfflineDataset:
    """Return a copy of ``ds`` with per-step returns-to-go attached.

    Hard mode fills ``rtg``; Soft mode fills ``soft_rtg`` (and keeps or fills
    ``rtg`` too, which the ablations use).
    """
    mode = AnnotationMode(mode)
    if not ds.trajectories or len(ds) == 0:
        raise ValueError("cannot annotate an empty dataset")
    if mode is AnnotationMode.SOFT and entropy_estimator is None:
        raise ValueError("Soft annotation requires an entropy estimator")
    rtg = tuple(compute_return_to_go(tr, cfg) for tr in ds.trajectories)
    soft = ds.soft_rtg
    if mode is AnnotationMode.SOFT:
        soft = tuple(
            compute_soft_return_to_go(tr, cfg, temperature, entropy_estimator)
            for tr in ds.trajectories
        )
    return replace(
        ds, rtg=rtg, soft_rtg=soft, annotation_gamma=cfg.gamma, timeout_mode=cfg.timeout_mode
    )


# --- JSON-lines dataset files -------------------------------------------------


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [float(v) for v in x]
    return x


def dumps_jsonl(ds: OfflineDataset) -> str:
    """Serialise a dataset as JSON lines, one object per transition."""
    lines = []
    for i, traj in enumerate(ds.trajectories):
        for step, t in enumerate(traj.transitions):
            row = {
                "traj_id": i,
                "step": step,
                "state": _jsonable(t.state),
                "action": _jsonable(t.action),
                "reward": t.reward,
                "next_state": _jsonable(t.next_state),
                "done_kind": t.done_kind.value,
            }
            if ds.rtg is not None:
                row["rtg"] = float(ds.rtg[i][step])
            if ds.soft_rtg is not None:
                row["soft_rtg"] = float(ds.soft_rtg[i][step])
            lines.append(json.dumps(row, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_jsonl(ds: OfflineDataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_jsonl(ds))
    return path


def content_hash(ds: OfflineDataset) -> str:
    """Git-style blob hash (sha1 over ``blob <len>\\0<bytes>``) of the JSONL form."""
    data = dumps_jsonl(ds).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def load_jsonl(path, dataset_id: Optional[str] = None, seed: int = 0,
               annotation_gamma: Optional[float] = None) -> OfflineDataset:
    path = Path(path)
    groups: dict = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        groups.setdefault(row["traj_id"], []).append(row)
    trajectories, rtg, soft = [], [], []
    for tid in sorted(groups):
        rows = sorted(groups[tid], key=lambda r: r["step"])
        trajectories.append(Trajectory(tuple(
            Transition(r["state"], r["action"], r["reward"], r["next_state"], r["done_kind"])
            for r in rows
        )))
        rtg.append([r.get("rtg") for r in rows])
        soft.append([r.get("soft_rtg") for r in rows])
    has_rtg = all(v is not None for vals in rtg for v in vals) and rtg
    has_soft = all(v is not None for vals in soft for v in vals) and soft
    return OfflineDataset(
        tuple(trajectories),
        dataset_id=dataset_id or path.stem,
        seed=seed,
        rtg=tuple(rtg) if has_rtg else None,
        soft_rtg=tuple(soft) if has_soft else None,
        annotation_gamma=annotation_gamma if (has_rtg or has_soft) else None,
    )


def dataset_from_trajectories(trajectories: Sequence[Trajectory], dataset_id: str = "dataset",
                              seed: int = 0) -> OfflineDataset:
    for tr in trajectories:
        tr.validate()
    return OfflineDataset(tuple(trajectories), dataset_id=dataset_id, seed=seed)

