"""Built-in environments, scripted behavior policies and dataset generation.

Two families live here: exact tabular MDPs (used with the solvers in
:mod:`offline_pretrain.tabular`) and a small continuous point-mass task that
stands in for the locomotion benchmarks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DoneKind, OfflineDataset, Trajectory, Transition

# policy(observations, rng) -> actions, batched over the leading axis
Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class TabularMDP:
    """Finite MDP with explicit transition tensor ``P[s, a, s']`` and rewards ``r[s, a]``.

    ``action_mask[s, a]`` marks the actions available in each state; masked
    actions never enter a max over actions.
    """

    P: np.ndarray
    r: np.ndarray
    terminal_states: frozenset = frozenset()
    d0: Optional[np.ndarray] = None
    action_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise ValueError(f"inconsistent shapes P{P.shape} r{r.shape}")
        if not np.allclose(P.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("every row of P must sum to 1")
        n = P.shape[0]
        d0 = np.full(n, 1.0 / n) if self.d0 is None else np.asarray(self.d0, dtype=np.float64)
        if abs(d0.sum() - 1.0) > 1e-12:
            raise ValueError("d0 must sum to 1")
        mask = (np.ones(r.shape, dtype=bool) if self.action_mask is None
                else np.asarray(self.action_mask, dtype=bool))
        if not mask.any(axis=1).all():
            raise ValueError("every state needs at least one available action")
        terminals = frozenset(int(s) for s in self.terminal_states)
        for s in terminals:
            if not (np.allclose(P[s, :, s], 1.0) and np.allclose(r[s], 0.0)):
                raise ValueError(f"terminal state {s} must absorb with zero reward")
        for name, val in (("P", P), ("r", r), ("d0", d0), ("action_mask", mask)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "terminal_states", terminals)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_states, dtype=bool)
        m[list(self.terminal_states)] = True
        return m

    def bellman_optimality(self, q: np.ndarray, gamma: float) -> np.ndarray:
        """Exact backup ``r + gamma * P max_a Q`` with terminal values pinned to 0."""
        v = np.where(self.action_mask, q, -np.inf).max(axis=1)
        v[self.terminal_mask] = 0.0
        return self.r + gamma * self.P @ v


def motivational_mdp() -> tuple[TabularMDP, OfflineDataset]:
    """Four-state chain with the single offline trajectory s0→s1→s0→s1→s2→end.

    Actions are ``LEFT`` (0) and ``RIGHT`` (1). State 0 only allows RIGHT, state 2
    only allows RIGHT, and state 3 is terminal. Rewards along the trajectory are
    0, -1, 0, -2, +3.
    """
    n, m = 4, 2
    P = np.zeros((n, m, n))
    r = np.zeros((n, m))
    mask = np.zeros((n, m), dtype=bool)

    def edge(s, a, s2, rew):
        P[s, a, s2] = 1.0
        r[s, a] = rew
        mask[s, a] = True

    edge(0, RIGHT, 1, 0.0)
    edge(1, LEFT, 0, -1.0)
    edge(1, RIGHT, 2, -2.0)
    edge(2, RIGHT, 3, 3.0)
    # unavailable actions self-loop so P stays stochastic
    for s in range(3):
        for a in range(m):
            if not mask[s, a]:
                P[s, a, s] = 1.0
    P[3, :, 3] = 1.0
    mask[3, :] = True
    d0 = np.array([1.0, 0.0, 0.0, 0.0])
    mdp = TabularMDP(P, r, frozenset({3}), d0, mask)

    path = [(0, RIGHT, 0.0, 1), (1, LEFT, -1.0, 0), (0, RIGHT, 0.0, 1),
            (1, RIGHT, -2.0, 2), (2, RIGHT, 3.0, 3)]
    transitions = [
        Transition(s, a, rew, s2, DoneKind.TERMINATION if i == len(path) - 1 else DoneKind.NOT_DONE)
        for i, (s, a, rew, s2) in enumerate(path)
    ]
    ds = OfflineDataset((Trajectory(transitions),), dataset_id="motivational", seed=0)
    return mdp, ds


def random_tabular_mdp(n_states: int, n_actions: int, seed: int,
                       reward_scale: float = 1.0, concentration: float = 1.0) -> TabularMDP:
    if n_states < 2 or n_actions < 2:
        raise ValueError(f"need n_states >= 2 and n_actions >= 2, got {n_states}, {n_actions}")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P /= P.sum(-1, keepdims=True)
    r = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions))
    return TabularMDP(P, r)


# --- continuous point mass ---------------------------------------------------


@dataclass(frozen=True)
class ContinuousEnvSpec:
    """Point mass on ``[-1, 1]^dim`` that must reach the origin.

    The observation is ``(position, velocity)`` per dimension and the action is a
    bounded acceleration. Hitting a wall stops the mass on that axis.
    """

    name: str
    obs_dim: int
    act_dim: int
    timeout_limit: int = 200
    init_noise_scale: float = 1.0
    sparse: bool = False
    goal_radius: float = 0.05
    dt: float = 0.05
    accel: float = 2.0
    process_noise: float = 0.0
    gamma: float = 0.99

    def __post_init__(self):
        if self.timeout_limit <= 0:
            raise ValueError("timeout_limit must be positive")

    @property
    def dim(self) -> int:
        return self.act_dim

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        pos = rng.uniform(-1.0, 1.0, size=(n, self.dim)) * self.init_noise_scale
        return np.concatenate([pos, np.zeros((n, self.dim))], axis=1)

    def dynamics(self, state: np.ndarray, action: np.ndarray, noise: Optional[np.ndarray] = None):
        """Batched deterministic step.

        Returns ``(next_state, reward, terminated)`` where ``terminated`` is a boolean
        array (goal reached). Timeouts are decided by the caller's step counter.
        """
        state = np.atleast_2d(state)
        action = np.clip(np.atleast_2d(action), -1.0, 1.0)
        d = self.dim
        pos, vel = state[:, :d], state[:, d:]
        vel = vel + self.dt * self.accel * action
        if noise is not None and self.process_noise > 0:
            vel = vel + self.process_noise * noise
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        vel = np.where(hit, 0.0, vel)
        pos = np.clip(pos, -1.0, 1.0)
        dist = np.linalg.norm(pos, axis=1)
        reached = dist < self.goal_radius
        if self.sparse:
            reward = reached.astype(np.float64)
        else:
            reward = -dist - 0.01 * np.sum(action ** 2, axis=1)
        return np.concatenate([pos, vel], axis=1), reward, reached

    def step_kind(self, terminated: bool, t: int) -> DoneKind:
        if terminated:
            return DoneKind.TERMINATION
        if t + 1 >= self.timeout_limit:
            return DoneKind.TIMEOUT
        return DoneKind.NOT_DONE


def pointmass_env(dim: int = 1, sparse: bool = False, **overrides) -> ContinuousEnvSpec:
    if dim not in (1, 2):
        raise ValueError(f"pointmass supports dim 1 or 2, got {dim}")
    name = f"pointmass{dim}d-{'sparse' if sparse else 'dense'}"
    return ContinuousEnvSpec(name=name, obs_dim=2 * dim, act_dim=dim, sparse=sparse, **overrides)


# --- behavior policies -------------------------------------------------------


class BehaviorKind(str, enum.Enum):
    SCRIPTED_PROPORTIONAL = "ScriptedProportional"
    EPSILON_GREEDY_TABULAR = "EpsilonGreedyTabular"
    NOISY_EXPERT = "NoisyExpert"


@dataclass(frozen=True)
class BehaviorPolicySpec:
    kind: BehaviorKind = BehaviorKind.SCRIPTED_PROPORTIONAL
    quality: float = 0.5
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", BehaviorKind(self.kind))
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality must lie in [0, 1], got {self.quality}")


KP, KD = 4.0, 3.0


@dataclass
class PDController:
    """Goal-seeking PD controller with optional Gaussian action noise."""

    dim: int
    kp: float = KP
    kd: float = KD
    noise_std: float = 0.0
    deterministic: bool = field(init=False)

    def __post_init__(self):
        self.deterministic = self.noise_std == 0.0

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        pos, vel = obs[:, : self.dim], obs[:, self.dim:]
        return np.clip(-self.kp * pos - self.kd * vel, -1.0, 1.0)

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        obs = np.atleast_2d(obs)
        pos, vel = obs[:, : self.dim], obs[:, self.dim:]
        a = -self.kp * pos - self.kd * vel
        if self.noise_std > 0:
            a = a + self.noise_std * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)


@dataclass
class UniformRandomPolicy:
    dim: int
    deterministic: bool = False

    def __call__(self, obs, rng):
        return rng.uniform(-1.0, 1.0, size=(np.atleast_2d(obs).shape[0], self.dim))


@dataclass
class EpsilonGreedyTabular:
    q: np.ndarray
    action_mask: np.ndarray
    epsilon: float
    deterministic: bool = False

    def __call__(self, states, rng):
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        masked = np.where(self.action_mask[states], self.q[states], -np.inf)
        greedy = masked.argmax(axis=1)
        explore = rng.random(states.shape[0]) < self.epsilon
        out = greedy.copy()
        for i in np.flatnonzero(explore):
            out[i] = rng.choice(np.flatnonzero(self.action_mask[states[i]]))
        return out


def scripted_behavior(env, spec: BehaviorPolicySpec, gamma: float = 0.9):
    """Build the behavior policy described by ``spec`` for ``env``.

    For the point mass, ``ScriptedProportional`` weakens the position gain by
    ``quality**2`` (a sluggish but well-damped controller) and adds Gaussian
    action noise with std ``noise_scale * (1 - quality)``; ``NoisyExpert``
    keeps the expert gains and only adds the noise. For tabular MDPs the policy
    is epsilon-greedy on the optimal Q with ``epsilon = 1 - quality``.
    """
    if isinstance(env, TabularMDP):
        if spec.kind is not BehaviorKind.EPSILON_GREEDY_TABULAR:
            raise ValueError(f"{spec.kind.value} does not apply to a tabular MDP")
        from .tabular import solve_optimal_tabular  # noqa: PLC0415  (circular)

        q = solve_optimal_tabular(env, gamma, tol=1e-10).values
        return EpsilonGreedyTabular(q, env.action_mask, 1.0 - spec.quality)
    if isinstance(env, ContinuousEnvSpec):
        noise = spec.noise_scale * (1.0 - spec.quality)
        if spec.kind is BehaviorKind.SCRIPTED_PROPORTIONAL:
            return PDController(env.dim, kp=KP * spec.quality ** 2, kd=KD, noise_std=noise)
        if spec.kind is BehaviorKind.NOISY_EXPERT:
            return PDController(env.dim, noise_std=noise)
        raise ValueError(f"{spec.kind.value} does not apply to a continuous environment")
    raise TypeError(f"unsupported environment type {type(env).__name__}")


def expert_policy(env: ContinuousEnvSpec) -> PDController:
    return PDController(env.dim)


# --- rollouts ------------------------------------------------------------------


def run_episodes(env: ContinuousEnvSpec, policy: Policy, n_episodes: int,
                 rng: np.random.Generator, record: bool = False):
    """Simulate ``n_episodes`` in lock-step.

    Returns the undiscounted episode returns and, when ``record`` is set, a list of
    per-episode ``(obs, actions, rewards, next_obs, terminated_last)`` arrays.
    """
    obs = env.reset(rng, n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    terminated = np.zeros(n_episodes, dtype=bool)
    buf = []
    for t in range(env.timeout_limit):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        act = np.clip(np.asarray(policy(obs[idx], rng), dtype=np.float64), -1.0, 1.0)
        act = act.reshape(idx.size, env.act_dim)
        noise = rng.standard_normal((idx.size, env.dim)) if env.process_noise > 0 else None
        nxt, rew, reached = env.dynamics(obs[idx], act, noise)
        if record:
            buf.append((idx, obs[idx].copy(), act, rew, nxt))
        returns[idx] += rew
        lengths[idx] += 1
        obs[idx] = nxt
        terminated[idx] = reached
        alive[idx] = ~reached
    if not record:
        return returns, None
    episodes = []
    for e in range(n_episodes):
        parts = [(o[k], a[k], r[k], n[k]) for (ix, o, a, r, n) in buf
                 for k in np.flatnonzero(ix == e)]
        episodes.append((
            np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts]),
            np.array([p[2] for p in parts]), np.stack([p[3] for p in parts]), terminated[e],
        ))
    return returns, episodes


def rollout(env, policy: Policy, n_episodes: int, seed: int,
            max_steps: int = 100) -> list[Trajectory]:
    """Collect ``n_episodes`` trajectories; deterministic given ``seed``.

    ``max_steps`` only applies to tabular MDPs (continuous tasks use their own
    ``timeout_limit``).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(env, TabularMDP):
        return [_tabular_episode(env, policy, rng, max_steps) for _ in range(n_episodes)]
    _, episodes = run_episodes(env, policy, n_episodes, rng, record=True)
    trajs = []
    for obs, act, rew, nxt, term in episodes:
        T = len(rew)
        trans = []
        for t in range(T):
            kind = DoneKind.NOT_DONE
            if t == T - 1:
                kind = DoneKind.TERMINATION if term else DoneKind.TIMEOUT
            trans.append(Transition(obs[t], act[t], rew[t], nxt[t], kind))
        trajs.append(Trajectory(tuple(trans)))
    return trajs


def _tabular_episode(mdp: TabularMDP, policy: Policy, rng: np.random.Generator,
                     max_steps: int) -> Trajectory:
    s = int(rng.choice(mdp.n_states, p=mdp.d0))
    trans = []
    for t in range(max_steps):
        a = int(np.asarray(policy(np.array([s]), rng)).reshape(-1)[0])
        s2 = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
        if s2 in mdp.terminal_states:
            kind = DoneKind.TERMINATION
        elif t + 1 == max_steps:
            kind = DoneKind.TIMEOUT
        else:
            kind = DoneKind.NOT_DONE
        trans.append(Transition(s, a, mdp.r[s, a], s2, kind))
        if kind is not DoneKind.NOT_DONE:
            break
        s = s2
    return Trajectory(tuple(trans))


def generate_dataset(env, spec: BehaviorPolicySpec, n_episodes: int, seed: Optional[int] = None,
                     dataset_id: Optional[str] = None, **kwargs) -> OfflineDataset:
    """Roll out the scripted behavior policy and wrap the trajectories as a dataset."""
    seed = spec.seed if seed is None else seed
    policy = scripted_behavior(env, spec)
    trajs = rollout(env, policy, n_episodes, seed, **kwargs)
    name = getattr(env, "name", "tabular")
    return OfflineDataset(
        tuple(trajs),
        dataset_id=dataset_id or f"{name}-q{spec.quality:g}-n{n_episodes}-s{seed}",
        seed=seed,
    )


def score_anchors(env: ContinuousEnvSpec, n_episodes: int = 200, seed: int = 12345) -> dict:
    """Mean undiscounted return of the uniform random and the expert policy."""
    rand, _ = run_episodes(env, UniformRandomPolicy(env.dim), n_episodes,
                           np.random.default_rng(seed))
    exp, _ = run_episodes(env, expert_policy(env), n_episodes, np.random.default_rng(seed))
    return {"random": float(rand.mean()), "expert": float(exp.mean())}
