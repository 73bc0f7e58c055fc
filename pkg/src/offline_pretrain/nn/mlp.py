"""Dense MLPs with optional LayerNorm, expressed on the autodiff tape."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor


class ParamTree(dict):
    """Named parameter arrays plus a mutation counter.

    Tapes remember the counter at record time and refuse to run backward once it
    has moved (see :class:`~offline_pretrain.nn.autograd.StaleTapeError`).
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "ParamTree":
        return ParamTree({k: v.copy() for k, v in self.items()})

    def assign(self, other) -> None:
        for k, v in other.items():
            self[k][...] = v
        self.bump()

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values()))


class Activation(str, enum.Enum):
    RELU = "ReLU"


class InitScheme(str, enum.Enum):
    UNIFORM_FAN_IN = "UniformFanIn"


@dataclass(frozen=True)
class MLPConfig:
    """Architecture of one MLP, or of a stacked ensemble when ``ensemble_size`` is set.

    With ``layernorm`` a normalisation (learnable gain and bias) sits between every
    hidden linear layer and its activation; the output layer is left plain.
    """

    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1
    activation: Activation = Activation.RELU
    layernorm: bool = True
    init_scheme: InitScheme = InitScheme.UNIFORM_FAN_IN
    ensemble_size: Optional[int] = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "init_scheme", InitScheme(self.init_scheme))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.ensemble_size is not None and self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")

    @property
    def dims(self) -> list:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.value
        d["init_scheme"] = self.init_scheme.value
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MLPConfig":
        return cls(**d)


def init_mlp(cfg: MLPConfig, rng: np.random.Generator) -> ParamTree:
    """Uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    lead = () if cfg.ensemble_size is None else (cfg.ensemble_size,)
    params = ParamTree()
    dims = cfg.dims
    for i in range(cfg.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        params[f"W{i}"] = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out))
        params[f"b{i}"] = rng.uniform(-bound, bound, size=lead + (1, fan_out))
        if cfg.layernorm and i < cfg.n_layers - 1:
            params[f"g{i}"] = np.ones(lead + (1, fan_out))
            params[f"beta{i}"] = np.zeros(lead + (1, fan_out))
    return params


def check_params(params: ParamTree, cfg: MLPConfig) -> None:
    expected = init_mlp(cfg, np.random.default_rng(0))
    if set(expected) != set(params):
        raise ValueError(f"parameter names {sorted(params)} do not match config")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise ValueError(f"leaf {k} has shape {params[k].shape}, expected {v.shape}")


def apply_mlp(p: dict, cfg: MLPConfig, x, composed_ln: bool = False,
              keep: Optional[list] = None) -> Tensor:
    """Run the network on tape tensors ``p`` (from ``Tape.watch``/``constants``).

    ``x`` has shape ``(B, input_dim)``; ensembles return ``(E, B, output_dim)``.
    ``keep`` collects ``(pre_norm, post_norm)`` tensors for each hidden layer.
    """
    h = x
    last = cfg.n_layers - 1
    ln = ag.layernorm_composed if composed_ln else ag.layernorm
    for i in range(cfg.n_layers):
        z = ag.linear(h, p[f"W{i}"], p[f"b{i}"])
        if i == last:
            return z
        n = ln(z, p[f"g{i}"], p[f"beta{i}"], cfg.ln_eps) if cfg.layernorm else z
        if keep is not None:
            keep.append((z, n))
        h = ag.relu(n)
    raise AssertionError("unreachable")


def forward(params: ParamTree, cfg: MLPConfig, x) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on a vector or a batch and return ``(y, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[-1] != cfg.input_dim:
        raise ValueError(f"input has {xb.shape[-1]} features, expected {cfg.input_dim}")
    tape = Tape()
    p = tape.watch(params)
    y = apply_mlp(p, cfg, tape.const(xb))
    tape.output = y
    tape.single = single
    out = y.data
    if single:
        out = out[..., 0, :]
    return out, tape


def backward(tape: Tape, upstream) -> ParamTree:
    """Gradients of ``sum(y * upstream)`` for every leaf watched by ``forward``."""
    if tape.output is None:
        raise ValueError("tape has no recorded output")
    up = np.asarray(upstream, dtype=np.float64)
    if getattr(tape, "single", False):
        up = np.expand_dims(up, -2)
    tape.backward(tape.output, up)
    tree = tape._watched[0][0]
    return tape.grads_for(tree)


def layernorm(x, gain=1.0, bias=0.0, eps: float = 1e-5) -> np.ndarray:
    """Plain numpy layer normalisation over the last axis (population variance)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gain + bias


def input_gradient(p: dict, cfg: MLPConfig, x: Tensor, upstream) -> Tensor:
    """Differentiable ``d(sum(net(x) * upstream))/dx``.

    The reverse pass is written with tape operations so that the result can be
    differentiated again with respect to the parameters (used by the ensemble
    diversity penalty). ReLU masks are treated as constants.
    """
    keep: list = []
    apply_mlp(p, cfg, x, composed_ln=True, keep=keep)
    last = cfg.n_layers - 1
    up = upstream if isinstance(upstream, Tensor) else x.tape.const(upstream)
    g = ag.matmul(up, ag.swap_last(p[f"W{last}"]))
    for i in range(last - 1, -1, -1):
        z, n = keep[i]
        g = g * x.tape.const((n.data > 0).astype(np.float64))
        if cfg.layernorm:
            g = _layernorm_vjp(z, p[f"g{i}"], g, cfg.ln_eps)
        g = ag.matmul(g, ag.swap_last(p[f"W{i}"]))
    return g


def _layernorm_vjp(z: Tensor, gain: Tensor, g: Tensor, eps: float) -> Tensor:
    mu = ag.mean(z, axis=-1, keepdims=True)
    zc = z - mu
    inv = ag.power(ag.mean(ag.square(zc), axis=-1, keepdims=True) + eps, -0.5)
    xhat = zc * inv
    gh = g * gain
    return inv * (gh - ag.mean(gh, axis=-1, keepdims=True)
                  - xhat * ag.mean(gh * xhat, axis=-1, keepdims=True))


@dataclass
class Network:
    """An MLP config bundled with its parameters."""

    cfg: MLPConfig
    params: ParamTree = field(default_factory=ParamTree)

    @classmethod
    def create(cls, cfg: MLPConfig, rng: np.random.Generator) -> "Network":
        return cls(cfg, init_mlp(cfg, rng))

    def __call__(self, x) -> np.ndarray:
        tape = Tape()
        return apply_mlp(tape.constants(self.params), self.cfg,
                         tape.const(np.atleast_2d(x))).data
