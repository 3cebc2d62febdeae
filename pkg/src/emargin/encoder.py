"""Pointwise convolutional encoder.

Three blocks of (kernel-size-1 convolution, batch norm, ReLU). A kernel of
size 1 sees one timestep at a time, so each block is a per-timestep linear
map applied to the flattened ``(B*T) x D`` input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, DomainError

TRAINABLE = ("weight", "bias", "gamma", "beta")
BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, int] = (64, 64)
    output_dim: int = 320
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.hidden_dims) != 2:
            raise ConfigError(f"three blocks need exactly two hidden widths, got {self.hidden_dims}")
        if min(self.widths) <= 0:
            raise ConfigError(f"all encoder dimensions must be positive, got {self.widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", (64, 64)))})


def preset(name: str, input_dim: int) -> EncoderConfig:
    """``"full"`` gives 320-d embeddings, ``"compact"`` 32-d."""
    dims = {"full": 320, "compact": 32}
    if name not in dims:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(dims)}")
    return EncoderConfig(input_dim=input_dim, output_dim=dims[name])


@dataclass
class Block:
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class EncoderParams:
    blocks: list[Block] = field(default_factory=list)

    def named_arrays(self, names=TRAINABLE + BUFFERS) -> dict[str, np.ndarray]:
        return {
            f"block{i}.{n}": getattr(blk, n)
            for i, blk in enumerate(self.blocks)
            for n in names
        }

    def trainable(self) -> dict[str, np.ndarray]:
        return self.named_arrays(TRAINABLE)

    def set(self, name: str, value: np.ndarray) -> None:
        blk, attr = name.split(".")
        setattr(self.blocks[int(blk[len("block"):])], attr, np.asarray(value, dtype=np.float64))

    def copy(self) -> "EncoderParams":
        return EncoderParams([Block(**{k: v.copy() for k, v in vars(b).items()}) for b in self.blocks])


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform(+-sqrt(6/fan_in)) weights, zero bias, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    blocks = []
    widths = cfg.widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        blocks.append(
            Block(
                weight=rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
                gamma=np.ones(fan_out),
                beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out),
                running_var=np.ones(fan_out),
            )
        )
    return EncoderParams(blocks)


def encode(
    X,
    params: EncoderParams,
    cfg: EncoderConfig,
    mode: str = "eval",
    leaves: dict[str, Tensor] | None = None,
) -> Tensor:
    """Map B x T x D inputs to B x T x d embeddings.

    ``leaves`` optionally supplies tensors (keyed like
    :meth:`EncoderParams.trainable`) to use in place of the stored arrays, so
    that gradients can be collected for them. Train mode updates the running
    batch-norm statistics in ``params``.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim != 3 or X.shape[2] != cfg.input_dim:
        raise DimensionError(f"encode: expected B x T x {cfg.input_dim} input, got {X.shape}")
    if not np.isfinite(X.data).all():
        raise DomainError("encode: input contains non-finite values")
    B, T, D = X.shape
    if mode == "train" and B * T < 2:
        raise DomainError("encode: train mode needs at least two timesteps for batch statistics")
    leaves = leaves or {}
    h = ad.reshape(X, (B * T, D))
    ones = Tensor(np.ones((B * T, 1)))
    for i, blk in enumerate(params.blocks):
        w = leaves.get(f"block{i}.weight", blk.weight)
        b = leaves.get(f"block{i}.bias", blk.bias)
        g = leaves.get(f"block{i}.gamma", blk.gamma)
        be = leaves.get(f"block{i}.beta", blk.beta)
        bias_rows = ad.matmul(ones, ad.reshape(b, (1, -1)))
        h = ad.matmul(h, w) + bias_rows
        h = ad.batchnorm(
            h, g, be, blk.running_mean, blk.running_var,
            mode=mode, momentum=cfg.bn_momentum, epsilon=cfg.bn_epsilon,
        )
        h = ad.relu(h)
    return ad.reshape(h, (B, T, cfg.output_dim))


def embed(X: np.ndarray, params: EncoderParams, cfg: EncoderConfig, chunk: int = 64) -> np.ndarray:
    """Eval-mode embeddings as a plain array, computed in sequence chunks."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(X.shape[:2] + (cfg.output_dim,))
    with ad.no_grad():
        for start in range(0, X.shape[0], chunk):
            out[start:start + chunk] = encode(X[start:start + chunk], params, cfg, "eval").data
    return out
