"""Actor-critic losses and the supervised-pretraining → off-policy training loop.

Algorithms share one :class:`ActorCritic` container: a deterministic (TD3
family) or tanh-Gaussian (soft family) actor, and a stacked critic ensemble
with Polyak target copies. Every ``*_update`` function performs one optimiser
step on one batch and returns a :class:`LossReport`.
"""

from __future__ import annotations

import enum
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .core import (AnnotationMode, OfflineDataset, ReturnConfig, TimeoutMode, annotate_dataset,
                   compute_mixed_target)
from .nn import autograd as ag
from .nn import policy as pol
from .nn.autograd import Tape, Tensor
from .nn.mlp import MLPConfig, ParamTree, apply_mlp, init_mlp, input_gradient
from .nn.optim import OptimizerState, adam_step, polyak_update


class Algorithm(str, enum.Enum):
    BC = "BC"
    TD3BC = "TD3BC"
    CQL_ONLY = "CQLOnly"
    TD3BC_CQL = "TD3BC_CQL"
    ENSEMBLE_SOFT_AC = "EnsembleSoftAC"
    ENSEMBLE_SOFT_AC_BC = "EnsembleSoftAC_BC"

    @property
    def soft(self) -> bool:
        return self in (Algorithm.ENSEMBLE_SOFT_AC, Algorithm.ENSEMBLE_SOFT_AC_BC)

    @property
    def uses_cql(self) -> bool:
        return self in (Algorithm.CQL_ONLY, Algorithm.TD3BC_CQL)


class RegularizerKind(str, enum.Enum):
    NONE = "None"
    CQL = "CQL"
    ENSEMBLE_DIVERSIFY = "EnsembleDiversify"


class BCMode(str, enum.Enum):
    HARD = "Hard"
    SOFT = "Soft"


class Phase(str, enum.Enum):
    ACTOR_PRETRAIN = "ActorPretrain"
    CRITIC_PRETRAIN = "CriticPretrain"
    RL = "RL"


@dataclass(frozen=True)
class AgentConfig:
    """Settings for the off-policy phase (and network shapes for every phase).

    ``tau`` is the Polyak *retention* coefficient (0.995 keeps 99.5% of the target).
    """

    algorithm: Algorithm = Algorithm.TD3BC
    gamma: float = 0.99
    tau: float = 0.995
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden_dims: tuple = (64, 64)
    actor_layernorm: bool = True
    critic_layernorm: bool = True
    # TD3 family
    bc_alpha: float = 2.5
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    # CQL
    cql_weight: float = 1.0
    cql_n_actions: int = 10
    cql_temperature: float = 1.0
    # ensemble soft actor-critic
    n_critics: int = 2
    eta: float = 0.0
    temperature: float = 0.05
    bc_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        for name in ("bc_alpha", "cql_weight", "eta", "temperature", "bc_weight",
                     "policy_noise", "noise_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.algorithm.soft and self.n_critics < 2:
            raise ValueError("ensemble algorithms need n_critics >= 2")
        if self.algorithm in (Algorithm.TD3BC, Algorithm.TD3BC_CQL, Algorithm.CQL_ONLY) \
                and self.n_critics != 2:
            raise ValueError("TD3-family algorithms use twin critics (n_critics = 2)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class PretrainConfig:
    """Supervised pre-training settings.

    ``pretrain_steps`` caps each pre-training phase; a phase ends early once its
    supervised losses improve by less than ``plateau_tol`` (relative) between two
    consecutive ``plateau_window``-step windows.
    """

    lambda_mix: float = 0.0
    pretrain_steps: int = 2000
    plateau_tol: float = 0.01
    plateau_window: int = 500
    value_regularizer: RegularizerKind = RegularizerKind.NONE
    regularizer_weight: float = 1.0
    bc_mode: BCMode = BCMode.HARD
    soft_temperature: float = 0.05
    pretrain_actor: bool = True
    pretrain_critic: bool = True
    timeout_mode: TimeoutMode = TimeoutMode.TREAT_AS_TERMINAL
    entropy_samples: int = 10

    def __post_init__(self):
        object.__setattr__(self, "value_regularizer", RegularizerKind(self.value_regularizer))
        object.__setattr__(self, "bc_mode", BCMode(self.bc_mode))
        object.__setattr__(self, "timeout_mode", TimeoutMode(self.timeout_mode))
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError("lambda_mix must lie in [0, 1]")
        if self.pretrain_steps <= 0:
            raise ValueError("pretrain_steps must be positive")
        if self.regularizer_weight < 0:
            raise ValueError("regularizer_weight must be non-negative")


@dataclass
class LossReport:
    losses: dict = field(default_factory=dict)
    grad_norms: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def check_finite(self, where: str) -> None:
        for k, v in self.losses.items():
            if not math.isfinite(v):
                raise TrainingAborted(where, f"non-finite {k} loss", self)


class TrainingAborted(RuntimeError):
    def __init__(self, phase: str, message: str, report: Optional[LossReport] = None):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
        self.report = report


@dataclass
class ActorCritic:
    obs_dim: int
    act_dim: int
    actor_cfg: MLPConfig
    actor: ParamTree
    actor_target: ParamTree
    actor_opt: OptimizerState
    critic_cfg: MLPConfig
    critic: ParamTree
    critic_target: ParamTree
    critic_opt: OptimizerState
    gaussian: bool
    rng: np.random.Generator
    n_updates: int = 0

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, cfg: AgentConfig,
               gaussian: Optional[bool] = None) -> "ActorCritic":
        gaussian = cfg.algorithm.soft if gaussian is None else gaussian
        rng = np.random.default_rng(cfg.seed)
        a_cfg = MLPConfig(obs_dim, cfg.hidden_dims, (2 if gaussian else 1) * act_dim,
                          layernorm=cfg.actor_layernorm)
        c_cfg = MLPConfig(obs_dim + act_dim, cfg.hidden_dims, 1, layernorm=cfg.critic_layernorm,
                          ensemble_size=cfg.n_critics)
        actor = init_mlp(a_cfg, rng)
        critic = init_mlp(c_cfg, rng)
        return cls(obs_dim, act_dim, a_cfg, actor, actor.copy(),
                   OptimizerState.for_params(actor, cfg.actor_lr), c_cfg, critic, critic.copy(),
                   OptimizerState.for_params(critic, cfg.critic_lr), gaussian, rng)

    @property
    def n_critics(self) -> int:
        return self.critic_cfg.ensemble_size

    # numpy-only evaluation helpers (no gradients) ----------------------------
    def actor_output(self, obs, params: Optional[ParamTree] = None) -> np.ndarray:
        tape = Tape()
        p = tape.constants(self.actor if params is None else params)
        return apply_mlp(p, self.actor_cfg, tape.const(np.atleast_2d(obs))).data

    def act(self, obs, params: Optional[ParamTree] = None) -> np.ndarray:
        """Deterministic action: ``tanh`` of the actor output (Gaussian: of the mean)."""
        out = self.actor_output(obs, params)
        return np.tanh(out[..., : self.act_dim])

    def q_values(self, obs, actions, params: Optional[ParamTree] = None) -> np.ndarray:
        """Critic ensemble outputs with shape ``(n_critics, B)``."""
        tape = Tape()
        p = tape.constants(self.critic if params is None else params)
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(actions)], axis=-1)
        return apply_mlp(p, self.critic_cfg, tape.const(x)).data[..., 0]

    def policy_head(self, obs) -> pol.GaussianPolicyHead:
        out = self.actor_output(obs)
        return pol.GaussianPolicyHead(out[..., : self.act_dim], out[..., self.act_dim:])

    def snapshot_policy(self) -> Callable:
        """Read-only deterministic policy ``f(obs, rng) -> actions`` for evaluation."""
        frozen = self.actor.copy()
        return lambda obs, rng=None: self.act(obs, frozen)

    def entropy_estimator(self, n_samples: int, seed: int) -> Callable[[np.ndarray], np.ndarray]:
        """Sampled ``-log pi`` entropy estimate (with tanh correction) per state."""
        rng = np.random.default_rng(seed)

        def estimate(states: np.ndarray) -> np.ndarray:
            head = self.policy_head(np.atleast_2d(states))
            total = np.zeros(head.mean.shape[0])
            for _ in range(n_samples):
                _, logp = pol.sample_squashed_gaussian(head, rng=rng)
                total -= logp
            return total / n_samples

        return estimate


# --- batches ----------------------------------------------------------------------


def sample_batch(arrays: dict, rng: np.random.Generator, batch_size: int,
                 pool: Optional[np.ndarray] = None) -> dict:
    n = arrays["obs"].shape[0] if pool is None else pool.shape[0]
    idx = rng.integers(0, n, size=batch_size)
    if pool is not None:
        idx = pool[idx]
    return {k: v[idx] for k, v in arrays.items()}


# --- loss building blocks -------------------------------------------------------


def _sq(x) -> np.ndarray:
    return x[..., 0]


def critic_forward(p: dict, cfg: MLPConfig, obs, actions) -> Tensor:
    """Ensemble Q-values ``(E, B)`` on the tape; ``actions`` may be a Tensor."""
    tape = next(iter(p.values())).tape
    x = ag.concat([tape.const(obs), actions], axis=-1)
    out = apply_mlp(p, cfg, x)
    return out[..., 0]


def normalize_and_combine(primary: Tensor, aux: Tensor, c: float) -> Tensor:
    """``primary/|primary| + c * aux/|aux|`` with magnitudes treated as constants.

    A magnitude below 1e-12 leaves that term un-normalised.
    """
    pa = abs(float(primary.data))
    xa = abs(float(aux.data))
    p_term = primary / pa if pa >= 1e-12 else primary
    a_term = aux / xa if xa >= 1e-12 else aux
    if c == 0.0:
        return p_term
    return p_term + c * a_term


def cql_regularizer(p: dict, cfg: MLPConfig, batch: dict, n_actions: int, temperature: float,
                    rng: np.random.Generator) -> Tensor:
    """``temperature * logsumexp(Q(s, a_k)/temperature) - Q(s, a_data)`` over uniform a_k.

    Averaged over states and ensemble members.
    """
    if n_actions < 1:
        raise ValueError("n_actions must be >= 1")
    obs, act = batch["obs"], batch["actions"]
    B, d = act.shape
    rand = rng.uniform(-1.0, 1.0, size=(B * n_actions, d))
    obs_rep = np.repeat(obs, n_actions, axis=0)
    q_rand = critic_forward(p, cfg, obs_rep, p[next(iter(p))].tape.const(rand))
    q_rand = ag.reshape(q_rand, q_rand.shape[:-1] + (B, n_actions))
    if temperature > 0:
        lse = temperature * ag.logsumexp(q_rand * (1.0 / temperature), axis=-1)
    else:
        lse = ag.min_over(-1.0 * q_rand, axis=-1) * -1.0
    q_data = critic_forward(p, cfg, obs, p[next(iter(p))].tape.const(act))
    return lse.mean() - q_data.mean()


def cql_value(ac: ActorCritic, batch: dict, n_actions: int, temperature: float,
              rng: np.random.Generator) -> float:
    tape = Tape()
    return float(cql_regularizer(tape.constants(ac.critic), ac.critic_cfg, batch, n_actions,
                                 temperature, rng).data)


def diversity_penalty(p: dict, cfg: MLPConfig, batch: dict, obs_dim: int) -> Tensor:
    """Mean pairwise cosine similarity between members' action-gradients of Q."""
    tape = next(iter(p.values())).tape
    x = tape.const(np.concatenate([batch["obs"], batch["actions"]], axis=-1))
    E = cfg.ensemble_size
    B = batch["obs"].shape[0]
    grads = input_gradient(p, cfg, x, np.ones((E, B, 1)))[..., obs_dim:]
    norm = ag.power(ag.square(grads).sum(axis=-1, keepdims=True) + 1e-12, 0.5)
    unit = grads / norm
    total = unit.sum(axis=0)
    pair_sum = ag.square(total).sum(axis=-1) - ag.square(unit).sum(axis=-1).sum(axis=0)
    return pair_sum.mean() * (1.0 / (E * (E - 1)))


def _member(params: ParamTree, i: int) -> dict:
    return {k: v[i] for k, v in params.items()}


def _single_cfg(cfg: MLPConfig) -> MLPConfig:
    return replace(cfg, ensemble_size=None)


# --- TD targets ----------------------------------------------------------------------


def hard_td_target(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> np.ndarray:
    """Clipped double-Q target with target-policy smoothing (target networks only)."""
    nxt = batch["next_obs"]
    a_next = ac.act(nxt, ac.actor_target)
    noise = np.clip(cfg.policy_noise * ac.rng.standard_normal(a_next.shape),
                    -cfg.noise_clip, cfg.noise_clip)
    a_next = np.clip(a_next + noise, -1.0, 1.0)
    q_next = ac.q_values(nxt, a_next, ac.critic_target).min(axis=0)
    return q_next


def soft_td_target(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> np.ndarray:
    """Min over target critics minus the entropy term at a fresh policy sample."""
    nxt = batch["next_obs"]
    head = ac.policy_head(nxt)
    a_next, logp = pol.sample_squashed_gaussian(head, rng=ac.rng)
    q_next = ac.q_values(nxt, a_next, ac.critic_target).min(axis=0)
    return q_next - cfg.temperature * logp


def next_value(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> np.ndarray:
    q = soft_td_target(ac, batch, cfg) if ac.gaussian else hard_td_target(ac, batch, cfg)
    return q * (1.0 - batch["terminals"])


# --- actor updates ----------------------------------------------------------------


def _actor_step(ac: ActorCritic, tape: Tape, p: dict, loss: Tensor, report: LossReport):
    tape.backward(loss)
    grads = tape.grads_for(ac.actor)
    report.grad_norms["actor"] = float(np.sqrt(sum((g * g).sum() for g in grads.values())))
    adam_step(ac.actor_opt, ac.actor, grads)


def _actor_action(ac: ActorCritic, p: dict, obs: np.ndarray):
    """Deterministic tanh action, or a reparameterised sample and log-prob."""
    tape = next(iter(p.values())).tape
    out = apply_mlp(p, ac.actor_cfg, tape.const(obs))
    if not ac.gaussian:
        return ag.tanh(out), None, out
    mean, log_std = pol.split_head(out, ac.act_dim)
    noise = ac.rng.standard_normal(mean.shape)
    a, logp = pol.rsample(mean, log_std, noise)
    return a, logp, out


def bc_update(ac: ActorCritic, batch: dict) -> LossReport:
    """One step of mean-squared behavior cloning (sampled action for Gaussian actors)."""
    report = LossReport()
    tape = Tape()
    p = tape.watch(ac.actor)
    a, _, _ = _actor_action(ac, p, batch["obs"])
    loss = ag.square(a - batch["actions"]).mean()
    report.losses["bc"] = float(loss.data)
    report.check_finite("bc")
    _actor_step(ac, tape, p, loss, report)
    return report


def soft_bc_update(ac: ActorCritic, batch: dict, temperature: float) -> LossReport:
    """One step on ``temperature * log pi(a~|s) - log pi(a|s)``."""
    if not ac.gaussian:
        raise ValueError("soft behavior cloning needs a Gaussian policy head")
    report = LossReport()
    tape = Tape()
    p = tape.watch(ac.actor)
    out = apply_mlp(p, ac.actor_cfg, tape.const(batch["obs"]))
    mean, log_std = pol.split_head(out, ac.act_dim)
    nll = -pol.log_prob(mean, log_std, batch["actions"]).mean()
    loss = nll
    if temperature > 0:
        _, logp = pol.rsample(mean, log_std, ac.rng.standard_normal(mean.shape))
        loss = temperature * logp.mean() + nll
    report.losses["bc"] = float(loss.data)
    report.check_finite("soft_bc")
    _actor_step(ac, tape, p, loss, report)
    return report


# --- critic updates ----------------------------------------------------------------


def _critic_step(ac: ActorCritic, tape: Tape, loss: Tensor, report: LossReport, tau: float):
    tape.backward(loss)
    grads = tape.grads_for(ac.critic)
    report.grad_norms["critic"] = float(np.sqrt(sum((g * g).sum() for g in grads.values())))
    adam_step(ac.critic_opt, ac.critic, grads)
    polyak_update(ac.critic_target, ac.critic, tau)


def _collapse_warning(q: np.ndarray, report: LossReport) -> None:
    if q.shape[0] > 1 and float(q.var(axis=0).mean()) < 1e-8:
        report.warnings.append("critic ensemble collapsed: member outputs nearly identical")


def critic_pretrain_update(ac: ActorCritic, batch: dict, pre: PretrainConfig,
                           cfg: AgentConfig, target_key: str = "rtg") -> LossReport:
    """Regress every critic member onto the (optionally TD-mixed) return-to-go."""
    if target_key not in batch:
        raise ValueError(f"batch has no {target_key!r} annotations")
    report = LossReport()
    R = batch[target_key]
    q_next = next_value(ac, batch, cfg) if pre.lambda_mix > 0 else 0.0
    y = compute_mixed_target(R, batch["rewards"], cfg.gamma, q_next, pre.lambda_mix)
    tape = Tape()
    p = tape.watch(ac.critic)
    q = critic_forward(p, ac.critic_cfg, batch["obs"], tape.const(batch["actions"]))
    mse = ag.square(q - y).mean(axis=-1).sum()
    loss = mse
    report.losses["critic"] = float(mse.data)
    if pre.value_regularizer is RegularizerKind.CQL:
        reg = cql_regularizer(p, ac.critic_cfg, batch, cfg.cql_n_actions, cfg.cql_temperature,
                              ac.rng)
        report.losses["cql"] = float(reg.data)
        loss = normalize_and_combine(mse, reg, pre.regularizer_weight)
    elif pre.value_regularizer is RegularizerKind.ENSEMBLE_DIVERSIFY:
        div = diversity_penalty(p, ac.critic_cfg, batch, ac.obs_dim)
        report.losses["div"] = float(div.data)
        loss = normalize_and_combine(mse, div, pre.regularizer_weight)
    report.check_finite("critic_pretrain")
    _collapse_warning(q.data, report)
    _critic_step(ac, tape, loss, report, cfg.tau)
    return report


def td3bc_update(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> LossReport:
    """TD3+BC step, optionally with the CQL critic penalty (TD3BC_CQL / CQLOnly)."""
    report = LossReport()
    y = batch["rewards"] + cfg.gamma * next_value(ac, batch, cfg)
    tape = Tape()
    p = tape.watch(ac.critic)
    q = critic_forward(p, ac.critic_cfg, batch["obs"], tape.const(batch["actions"]))
    td = ag.square(q - y).mean(axis=-1).sum()
    loss = td
    report.losses["critic"] = float(td.data)
    if cfg.algorithm.uses_cql:
        reg = cql_regularizer(p, ac.critic_cfg, batch, cfg.cql_n_actions, cfg.cql_temperature,
                              ac.rng)
        report.losses["cql"] = float(reg.data)
        loss = normalize_and_combine(td, reg, cfg.cql_weight)
    report.check_finite("rl")
    _critic_step(ac, tape, loss, report, cfg.tau)

    ac.n_updates += 1
    if ac.n_updates % cfg.policy_delay == 0:
        bc_alpha = 0.0 if cfg.algorithm is Algorithm.CQL_ONLY else cfg.bc_alpha
        report.losses.update(_td3_actor_step(ac, batch, bc_alpha, report))
        polyak_update(ac.actor_target, ac.actor, cfg.tau)
    return report


def _td3_actor_step(ac: ActorCritic, batch: dict, bc_alpha: float, report: LossReport) -> dict:
    """Actor loss ``-lambda * Q1(s, pi(s)) + (pi(s) - a)^2`` with ``lambda = alpha / mean|Q1|``.

    ``bc_alpha = 0`` drops the BC term and maximises Q1 alone.
    """
    tape = Tape()
    p = tape.watch(ac.actor)
    pi = ag.tanh(apply_mlp(p, ac.actor_cfg, tape.const(batch["obs"])))
    q1_params = tape.constants(ParamTree(_member(ac.critic, 0)))
    x = ag.concat([tape.const(batch["obs"]), pi], axis=-1)
    q1 = apply_mlp(q1_params, _single_cfg(ac.critic_cfg), x)[..., 0]
    scale = float(np.abs(q1.data).mean())
    bc = ag.square(pi - batch["actions"]).mean()
    if bc_alpha > 0:
        lam = bc_alpha / max(scale, 1e-8)
        loss = -lam * q1.mean() + bc
    else:
        loss = -q1.mean() * (1.0 / max(scale, 1e-8))
    out = {"actor": float(loss.data), "bc": float(bc.data)}
    if not math.isfinite(out["actor"]):
        raise TrainingAborted("rl", "non-finite actor loss", report)
    _actor_step(ac, tape, p, loss, report)
    return out


def ensemble_soft_update(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> LossReport:
    """Min-over-ensemble soft actor-critic step (plus hard BC for EnsembleSoftAC_BC)."""
    if ac.n_critics < 2:
        raise ValueError("ensemble updates need at least two critics")
    report = LossReport()
    y = batch["rewards"] + cfg.gamma * next_value(ac, batch, cfg)
    tape = Tape()
    p = tape.watch(ac.critic)
    q = critic_forward(p, ac.critic_cfg, batch["obs"], tape.const(batch["actions"]))
    td = ag.square(q - y).mean(axis=-1).sum()
    loss = td
    report.losses["critic"] = float(td.data)
    if cfg.eta > 0:
        div = diversity_penalty(p, ac.critic_cfg, batch, ac.obs_dim)
        report.losses["div"] = float(div.data)
        loss = td + cfg.eta * div
    report.check_finite("rl")
    _collapse_warning(q.data, report)
    _critic_step(ac, tape, loss, report, cfg.tau)

    tape = Tape()
    pa = tape.watch(ac.actor)
    a, logp, _ = _actor_action(ac, pa, batch["obs"])
    qc = tape.constants(ac.critic)
    q_pi = ag.min_over(critic_forward(qc, ac.critic_cfg, batch["obs"], a), axis=0)
    actor_loss = (cfg.temperature * logp - q_pi).mean()
    report.losses["actor"] = float(actor_loss.data)
    if cfg.algorithm is Algorithm.ENSEMBLE_SOFT_AC_BC:
        bc = ag.square(a - batch["actions"]).mean()
        report.losses["bc"] = float(bc.data)
        actor_loss = normalize_and_combine(actor_loss, bc, cfg.bc_weight)
    if not math.isfinite(float(actor_loss.data)):
        raise TrainingAborted("rl", "non-finite actor loss", report)
    _actor_step(ac, tape, pa, actor_loss, report)
    ac.n_updates += 1
    return report


def rl_update(ac: ActorCritic, batch: dict, cfg: AgentConfig) -> LossReport:
    alg = cfg.algorithm
    if alg is Algorithm.BC:
        return bc_update(ac, batch)
    if alg.soft:
        return ensemble_soft_update(ac, batch, cfg)
    return td3bc_update(ac, batch, cfg)


# --- orchestration ------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    phase: Phase
    seed: int
    losses: dict = field(default_factory=dict)
    eval_return: Optional[float] = None
    normalized_score: Optional[float] = None
    wall_clock_s: float = 0.0
    boundary: bool = False


class PlateauDetector:
    """Signals once every tracked loss stops improving by ``tol`` between windows."""

    def __init__(self, window: int, tol: float):
        self.window = window
        self.tol = tol
        self.sums: dict = {}
        self.prev: dict = {}
        self.count = 0
        self.flat: dict = {}

    def update(self, losses: dict) -> bool:
        for k, v in losses.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.count += 1
        if self.count < self.window:
            return False
        done = True
        for k, s in self.sums.items():
            cur = s / self.count
            prev = self.prev.get(k)
            improvement = math.inf if prev is None else (prev - cur) / max(abs(prev), 1e-12)
            self.flat[k] = improvement < self.tol
            done &= self.flat[k]
            self.prev[k] = cur
        self.sums = {}
        self.count = 0
        return done


Evaluator = Callable[[Callable], tuple]


def pretrain_then_train(
    ac: ActorCritic,
    ds: OfflineDataset,
    pre: Optional[PretrainConfig],
    agent: AgentConfig,
    total_steps: int,
    evaluator: Optional[Evaluator] = None,
    eval_every: int = 0,
    log_every: int = 100,
    seed: int = 0,
) -> Iterator[MetricsRecord]:
    """Run supervised pre-training (if ``pre`` is given), then ``total_steps`` RL updates.

    Yields a :class:`MetricsRecord` every ``log_every`` steps, at every evaluation
    and at every phase boundary. Steps are counted globally across phases.
    ``evaluator(policy)`` must return ``(raw_return, normalized_score)``.
    """
    start = time.perf_counter()
    rcfg = ReturnConfig(agent.gamma, pre.lambda_mix if pre else 0.0,
                        pre.timeout_mode if pre else TimeoutMode.TREAT_AS_TERMINAL)
    if ds.rtg is None or ds.annotation_gamma != agent.gamma:
        ds = annotate_dataset(ds, rcfg)
    arrays = dict(ds.arrays)
    arrays["terminals"] = arrays["terminals"].astype(np.float64)
    keys = ("obs", "actions", "rewards", "next_obs", "terminals", "rtg")
    batch_arrays = {k: arrays[k] for k in keys}
    pool = np.flatnonzero(arrays["pretrain_mask"])
    rng = ac.rng
    step = 0
    interval: dict = {}
    counts: dict = {}

    def log(phase: Phase, losses: dict, force_eval: bool = False, boundary: bool = False):
        nonlocal interval, counts
        for k, v in losses.items():
            interval[k] = interval.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
        do_eval = evaluator is not None and (force_eval or (eval_every and step % eval_every == 0))
        if not (do_eval or boundary or step % log_every == 0):
            return None
        rec = MetricsRecord(step, phase, seed, {k: v / counts[k] for k, v in interval.items()},
                            boundary=boundary)
        interval, counts = {}, {}
        if do_eval:
            rec.eval_return, rec.normalized_score = evaluator(ac.snapshot_policy())
        rec.wall_clock_s = time.perf_counter() - start
        return rec

    if evaluator is not None:
        raw, norm = evaluator(ac.snapshot_policy())
        first = Phase.ACTOR_PRETRAIN if pre and pre.pretrain_actor else (
            Phase.CRITIC_PRETRAIN if pre and pre.pretrain_critic else Phase.RL)
        yield MetricsRecord(0, first, seed, {}, raw, norm, time.perf_counter() - start)

    soft = pre is not None and pre.bc_mode is BCMode.SOFT
    if soft and not ac.gaussian:
        raise ValueError("soft pre-training needs a Gaussian actor")

    def pretrain_loop(phase, do_actor, do_critic, target_key):
        nonlocal step
        det = PlateauDetector(pre.plateau_window, pre.plateau_tol)
        for i in range(pre.pretrain_steps):
            losses = {}
            try:
                if do_actor:
                    batch = sample_batch(batch_arrays, rng, agent.batch_size)
                    rep = (soft_bc_update(ac, batch, pre.soft_temperature) if soft
                           else bc_update(ac, batch))
                    losses["bc"] = rep.losses["bc"]
                if do_critic:
                    batch = sample_batch(batch_arrays, rng, agent.batch_size, pool)
                    rep = critic_pretrain_update(ac, batch, pre, agent, target_key)
                    losses.update({k: v for k, v in rep.losses.items() if k != "bc"})
            except TrainingAborted as exc:
                raise TrainingAborted(phase.value, str(exc), exc.report) from exc
            step += 1
            tracked = {k: v for k, v in losses.items() if k in ("bc", "critic")}
            last = i == pre.pretrain_steps - 1 or det.update(tracked)
            rec = log(phase, losses, force_eval=last, boundary=last)
            if rec is not None:
                yield rec
            if last:
                return

    if pre is not None:
        if soft:
            if pre.pretrain_actor:
                yield from pretrain_loop(Phase.ACTOR_PRETRAIN, True, False, "rtg")
            if pre.pretrain_critic:
                est = ac.entropy_estimator(pre.entropy_samples, seed=agent.seed + 7919)
                ds = annotate_dataset(ds, rcfg, AnnotationMode.SOFT, agent.temperature, est)
                batch_arrays["soft_rtg"] = ds.arrays["soft_rtg"]
                yield from pretrain_loop(Phase.CRITIC_PRETRAIN, False, True, "soft_rtg")
        else:
            if pre.pretrain_actor or pre.pretrain_critic:
                phase = Phase.ACTOR_PRETRAIN if pre.pretrain_actor else Phase.CRITIC_PRETRAIN
                yield from pretrain_loop(phase, pre.pretrain_actor, pre.pretrain_critic, "rtg")
        # targets start from the pre-trained networks
        ac.actor_target.assign(ac.actor)
        ac.critic_target.assign(ac.critic)

    for _ in range(total_steps):
        batch = sample_batch(batch_arrays, rng, agent.batch_size)
        try:
            rep = rl_update(ac, batch, agent)
        except TrainingAborted as exc:
            raise TrainingAborted(Phase.RL.value, str(exc), exc.report) from exc
        for w in rep.warnings:
            warnings.warn(w, RuntimeWarning, stacklevel=2)
        step += 1
        rec = log(Phase.RL, rep.losses)
        if rec is not None:
            yield rec
