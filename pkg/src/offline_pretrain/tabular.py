"""Exact tabular Q-learning and fitted Q-iteration studies."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import DoneKind, OfflineDataset, VisitMode
from .envs import TabularMDP


@dataclass(frozen=True)
class QTable:
    values: np.ndarray
    gamma: float
    visited_mask: np.ndarray
    action_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if not np.isfinite(vals).all():
            raise ValueError("Q-table entries must be finite")
        visited = np.array(self.visited_mask, dtype=bool)
        if visited.shape != vals.shape:
            raise ValueError("visited_mask must match the value table")
        amask = (np.ones(vals.shape, dtype=bool) if self.action_mask is None
                 else np.array(self.action_mask, dtype=bool))
        for name, v in (("values", vals), ("visited_mask", visited), ("action_mask", amask)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def zeros(cls, mdp: TabularMDP, gamma: float) -> "QTable":
        shape = (mdp.n_states, mdp.n_actions)
        return cls(np.zeros(shape), gamma, np.zeros(shape, dtype=bool), mdp.action_mask)

    def with_values(self, values: np.ndarray) -> "QTable":
        return replace(self, values=values)

    def greedy(self) -> np.ndarray:
        """Greedy action per state; -1 where the maximum is tied."""
        masked = np.where(self.action_mask, self.values, -np.inf)
        best = masked.max(axis=1, keepdims=True)
        ties = (masked == best).sum(axis=1) > 1
        return np.where(ties, -1, masked.argmax(axis=1))

    def state_values(self, terminal_mask: Optional[np.ndarray] = None) -> np.ndarray:
        v = np.where(self.action_mask, self.values, -np.inf).max(axis=1)
        if terminal_mask is not None:
            v = np.where(terminal_mask, 0.0, v)
        return v


# --- Monte-Carlo initialisation and Q-learning ------------------------------


def mc_initialize(ds: OfflineDataset, gamma: float, visit_mode: VisitMode,
                  n_states: Optional[int] = None, n_actions: Optional[int] = None,
                  action_mask: Optional[np.ndarray] = None) -> QTable:
    """Average the annotated return-to-go over visits of each state-action pair."""
    visit_mode = VisitMode(visit_mode)
    if n_states is None or n_actions is None:
        if action_mask is None:
            raise ValueError("need n_states/n_actions or an action_mask")
        n_states, n_actions = np.asarray(action_mask).shape
    shape = (n_states, n_actions)
    total = np.zeros(shape)
    count = np.zeros(shape)
    if ds.trajectories:
        if ds.rtg is None:
            raise ValueError("dataset must be annotated with returns-to-go")
        if ds.annotation_gamma is None or not math.isclose(ds.annotation_gamma, gamma):
            raise ValueError(
                f"annotation gamma {ds.annotation_gamma} does not match requested gamma {gamma}"
            )
        for traj, rtg in zip(ds.trajectories, ds.rtg):
            seen = set()
            for t, tr in enumerate(traj.transitions):
                key = (tr.state, tr.action)
                if visit_mode is VisitMode.FIRST_VISIT and key in seen:
                    continue
                seen.add(key)
                total[key] += rtg[t]
                count[key] += 1
    visited = count > 0
    values = np.divide(total, count, out=np.zeros(shape), where=visited)
    return QTable(values, gamma, visited, action_mask)


def q_learning_epoch(q: QTable, ds: OfflineDataset, lr: float, gamma: float) -> QTable:
    """One in-place sweep of the Q-learning update over the data in trajectory order.

    Terminal transitions bootstrap from 0; the max at the next state only ranges
    over available actions.
    """
    if not 0.0 < lr <= 1.0:
        raise ValueError(f"lr must lie in (0, 1], got {lr}")
    values = q.values.copy()
    visited = q.visited_mask.copy()
    amask = q.action_mask
    for traj in ds.trajectories:
        for tr in traj.transitions:
            s, a, s2 = tr.state, tr.action, tr.next_state
            if tr.done_kind is DoneKind.TERMINATION:
                boot = 0.0
            else:
                boot = values[s2][amask[s2]].max()
            values[s, a] += lr * (tr.reward + gamma * boot - values[s, a])
            visited[s, a] = True
    return replace(q, values=values, visited_mask=visited, gamma=gamma)


class InitKind(str, enum.Enum):
    ZERO = "Zero"
    MC_FIRST_VISIT = "MCFirstVisit"
    MC_EVERY_VISIT = "MCEveryVisit"
    INTERPOLATED = "Interpolated"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class InitStrategy:
    kind: InitKind = InitKind.ZERO
    beta: float = 0.0
    table: Optional[QTable] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.kind is InitKind.INTERPOLATED:
            if not 0.0 <= self.beta <= 1.0:
                raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
            if self.table is None:
                raise ValueError("Interpolated init needs an anchor table")
        if self.kind is InitKind.CUSTOM and self.table is None:
            raise ValueError("Custom init needs a table")

    @classmethod
    def interpolated(cls, beta: float, anchor: QTable) -> "InitStrategy":
        return cls(InitKind.INTERPOLATED, beta, anchor)

    @classmethod
    def custom(cls, table: QTable) -> "InitStrategy":
        return cls(InitKind.CUSTOM, table=table)

    def build(self, mdp: TabularMDP, gamma: float, ds: Optional[OfflineDataset] = None) -> QTable:
        if self.kind is InitKind.ZERO:
            return QTable.zeros(mdp, gamma)
        if self.kind in (InitKind.MC_FIRST_VISIT, InitKind.MC_EVERY_VISIT):
            if ds is None:
                raise ValueError("MC initialisation needs an annotated dataset")
            mode = (VisitMode.FIRST_VISIT if self.kind is InitKind.MC_FIRST_VISIT
                    else VisitMode.EVERY_VISIT)
            return mc_initialize(ds, gamma, mode, action_mask=mdp.action_mask)
        if self.kind is InitKind.INTERPOLATED:
            vals = self.beta * self.table.values
            return QTable(vals, gamma, self.table.visited_mask, mdp.action_mask)
        return QTable(self.table.values, gamma, self.table.visited_mask, mdp.action_mask)


def run_q_learning(mdp: TabularMDP, ds: OfflineDataset, init: InitStrategy, lr: float = 1.0,
                   gamma: float = 1.0, max_epochs: int = 10,
                   stop_when_converged: bool = True) -> list[QTable]:
    """Epoch-by-epoch history, starting with the initialised table (epoch 0).

    With ``stop_when_converged`` the loop ends after the first epoch that leaves
    the table unchanged (that epoch is still included).
    """
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    q = init.build(mdp, gamma, ds)
    history = [q]
    for _ in range(max_epochs):
        nq = q_learning_epoch(q, ds, lr, gamma)
        history.append(nq)
        if stop_when_converged and np.array_equal(nq.values, q.values):
            break
        q = nq
    return history


def solve_optimal_tabular(mdp: TabularMDP, gamma: float, tol: float = 1e-10,
                          max_iters: int = 100_000) -> QTable:
    """Value iteration until the sup-norm Bellman residual is at most ``tol``.

    Raises:
        RuntimeError: if the residual is still above ``tol`` after ``max_iters``.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 1.0 and not mdp.terminal_states:
        raise ValueError("gamma = 1 requires an episodic MDP with absorbing terminals")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = math.inf
    for _ in range(max_iters):
        nq = mdp.bellman_optimality(q, gamma)
        residual = np.max(np.abs(nq - q))
        q = nq
        # ||q - Tq|| <= gamma * ||q - q_prev|| <= residual
        if residual <= tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge: residual {residual:.3e}")
    return QTable(q, gamma, np.ones(q.shape, dtype=bool), mdp.action_mask)


def bellman_residual(mdp: TabularMDP, q: np.ndarray, gamma: float) -> float:
    return float(np.max(np.abs(q - mdp.bellman_optimality(q, gamma))))


# --- fitted Q-iteration study ----------------------------------------------


@dataclass
class FqiReport:
    iterations: int
    epsilons: list
    init_error: float
    final_error: float
    delta_threshold: float
    errors: list = field(default_factory=list)
    converged: bool = True
    beta: Optional[float] = None

    def bound(self, gamma: float) -> list:
        """Error bound after each iteration k given the measured per-step errors."""
        out = [self.init_error]
        for k in range(1, len(self.epsilons) + 1):
            s = sum(gamma ** i * self.epsilons[k - i - 1] for i in range(k))
            out.append(s + gamma ** k * self.init_error)
        return out


def fitted_q_iteration(mdp: TabularMDP, gamma: float, q0: QTable, delta: float,
                       max_iters: int = 10_000, noise_scale: float = 0.0, seed: int = 0,
                       q_star: Optional[np.ndarray] = None) -> FqiReport:
    """Iterate the exact backup (plus optional uniform noise) until within ``delta`` of Q*.

    The tabular arg-min is exact, so the per-iteration approximation error is
    just the injected noise, measured as ``||Q_{k+1} - T Q_k||``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"fitted Q-iteration needs gamma < 1, got {gamma}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if q_star is None:
        q_star = solve_optimal_tabular(mdp, gamma, tol=1e-13).values
    rng = np.random.default_rng(seed)
    q = np.array(q0.values, dtype=np.float64)
    err = float(np.max(np.abs(q - q_star)))
    report = FqiReport(0, [], err, err, delta, errors=[err])
    k = 0
    while err > delta:
        if k >= max_iters:
            report.converged = False
            break
        tq = mdp.bellman_optimality(q, gamma)
        nq = tq
        if noise_scale > 0:
            nq = tq + rng.uniform(-noise_scale, noise_scale, size=tq.shape)
        report.epsilons.append(float(np.max(np.abs(nq - tq))))
        q = nq
        k += 1
        err = float(np.max(np.abs(q - q_star)))
        report.errors.append(err)
    report.iterations = k
    report.final_error = err
    return report


def contraction_iteration_bound(init_error: float, delta: float, gamma: float) -> int:
    """Smallest k with ``gamma**k * init_error <= delta`` (noise-free case)."""
    if init_error <= delta:
        return 0
    return math.ceil(math.log(delta / init_error) / math.log(gamma))


def fqi_init_sweep(mdp: TabularMDP, gamma: float, anchors: Sequence[InitStrategy],
                   delta: float, noise_scale: float = 0.0, seed: int = 0,
                   max_iters: int = 10_000) -> list[FqiReport]:
    """Run fitted Q-iteration from every initialisation, sharing the noise stream."""
    if not anchors:
        raise ValueError("anchors must be non-empty")
    q_star = solve_optimal_tabular(mdp, gamma, tol=1e-13).values
    reports = []
    for init in anchors:
        q0 = init.build(mdp, gamma)
        rep = fitted_q_iteration(mdp, gamma, q0, delta, max_iters, noise_scale, seed, q_star)
        if init.kind is InitKind.INTERPOLATED:
            rep.beta = init.beta
        reports.append(rep)
    return reports


# --- the motivational example -----------------------------------------------

# visited pairs in column order: Q(0,→), Q(1,←), Q(1,→), Q(2,→)
TABLE1_PAIRS = ((0, 1), (1, 0), (1, 1), (2, 1))
TABLE1_ZERO = ((0, 0, 0, 0), (0, -1, -2, 3), (-2, -2, 1, 3), (1, 0, 1, 3))
TABLE1_MC_EVERY = ((0.5, 0, 1, 3), (1, 0, 1, 3), (1, 0, 1, 3), (1, 0, 1, 3))
TABLE1_MC_FIRST = ((0, 0, 1, 3), (1, 0, 1, 3), (1, 0, 1, 3), (1, 0, 1, 3))


def table1_grid(visit_mode: VisitMode = VisitMode.EVERY_VISIT, lr: float = 1.0,
                epochs: int = 3) -> tuple[np.ndarray, np.ndarray, list, list]:
    """Q-learning on the motivational MDP from zero and from MC initialisation.

    Returns ``(zero_grid, mc_grid, zero_history, mc_history)`` where each grid has
    one row per epoch ``0..epochs`` and the four visited pairs as columns.
    """
    from .core import ReturnConfig, annotate_dataset
    from .envs import motivational_mdp

    mdp, ds = motivational_mdp()
    ds = annotate_dataset(ds, ReturnConfig(gamma=1.0))
    kind = (InitKind.MC_FIRST_VISIT if VisitMode(visit_mode) is VisitMode.FIRST_VISIT
            else InitKind.MC_EVERY_VISIT)
    grids, hists = [], []
    for init in (InitStrategy(InitKind.ZERO), InitStrategy(kind)):
        hist = run_q_learning(mdp, ds, init, lr=lr, gamma=1.0, max_epochs=epochs,
                              stop_when_converged=False)
        grids.append(np.array([[q.values[p] for p in TABLE1_PAIRS] for q in hist]))
        hists.append(hist)
    return grids[0], grids[1], hists[0], hists[1]


def table1_expected(visit_mode: VisitMode = VisitMode.EVERY_VISIT) -> tuple[np.ndarray, np.ndarray]:
    mc = TABLE1_MC_FIRST if VisitMode(visit_mode) is VisitMode.FIRST_VISIT else TABLE1_MC_EVERY
    return np.array(TABLE1_ZERO, dtype=float), np.array(mc, dtype=float)


def first_optimal_epoch(history: Sequence[QTable], q_star: QTable, policy: bool = False,
                        pairs: Sequence[tuple] = TABLE1_PAIRS) -> Optional[int]:
    """First epoch whose values on ``pairs`` equal Q* (or whose greedy actions match)."""
    target = np.array([q_star.values[p] for p in pairs])
    states = sorted({s for s, _ in pairs})
    best = q_star.greedy()[states]
    for k, q in enumerate(history):
        if policy:
            if np.array_equal(q.greedy()[states], best):
                return k
        elif np.array_equal(np.array([q.values[p] for p in pairs]), target):
            return k
    return None
