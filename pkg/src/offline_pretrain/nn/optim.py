"""Adam and Polyak averaging over :class:`ParamTree` leaves (updated in place)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import ParamTree


@dataclass
class OptimizerState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamTree, learning_rate: float = 3e-4, **kw) -> "OptimizerState":
        return cls(learning_rate, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(d["learning_rate"], d["beta1"], d["beta2"], d["eps"],
                   {k: np.array(v) for k, v in d["m"].items()},
                   {k: np.array(v) for k, v in d["v"].items()}, d["step"])


def adam_step(state: OptimizerState, params: ParamTree, grads) -> tuple[ParamTree, OptimizerState]:
    """Bias-corrected Adam update; rejects non-finite gradients before touching anything."""
    for k in params:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in leaf {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.bump()
    return params, state


def polyak_update(target: ParamTree, online: ParamTree, tau: float) -> ParamTree:
    """``target <- tau * target + (1 - tau) * online``.

    ``tau`` is the *retention* coefficient: 1 keeps the target, 0 copies online.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if set(target) != set(online):
        raise ValueError("target and online trees have different leaves")
    for k, t in target.items():
        o = online[k]
        if t.shape != o.shape:
            raise ValueError(f"leaf {k}: shape {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    target.bump()
    return target
