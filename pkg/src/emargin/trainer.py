"""AdamW training loop and checkpoint persistence for the encoder."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, encode, init_params
from .errors import ConfigError, ContractError, DataError, FormatError, NumericError
from .loss import LossConfig, emargin_loss, plain_infonce_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EMGN"
CHECKPOINT_VERSION = 1
SAMPLE_THRESHOLD = 160_000
DEFAULT_SEEDS = (1, 2, 3)
LOSS_KINDS = ("emargin", "infonce")


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class Moments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: Moments,
    t: int,
    cfg: AdamWConfig,
) -> tuple[dict[str, np.ndarray], Moments]:
    """One decoupled-weight-decay Adam update; returns new params and moments."""
    if t < 1:
        raise ContractError(f"adamw_step: step index must be >= 1, got {t}")
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"adamw_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = cfg.beta1 * moments.m.get(name, np.zeros_like(p)) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * moments.v.get(name, np.zeros_like(p)) + (1.0 - cfg.beta2) * g * g
        decayed = p - cfg.lr * cfg.weight_decay * p
        new_params[name] = decayed - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        m_new[name], v_new[name] = m, v
    return new_params, Moments(m_new, v_new, t)


def iteration_budget(num_samples: int, threshold: int = SAMPLE_THRESHOLD) -> int:
    """200 optimizer steps below ``threshold`` training instances, 600 otherwise."""
    return 200 if num_samples < threshold else 600


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.001
    iterations: int | None = None
    loss_kind: str = "emargin"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float | None = None
    sample_threshold: int = SAMPLE_THRESHOLD

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("batch_size and learning_rate must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")

    @property
    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    params: EncoderParams
    moments: Moments
    iteration: int
    seed: int
    loss_trace: list[float]
    train_config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def compute_loss(X: np.ndarray, Z: Tensor, cfg: TrainConfig) -> Tensor:
    if cfg.loss_kind == "emargin":
        return emargin_loss(X, Z, cfg.loss)
    return plain_infonce_loss(Z, cfg.loss.temperature, cfg.loss.cosine_epsilon)


def train(
    data: np.ndarray,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    checkpoint_path: str | Path | None = None,
    params: EncoderParams | None = None,
) -> Checkpoint:
    """Optimize the encoder for a fixed number of sampled mini-batches.

    ``data`` is a B x T x D array of training sequences. Batches are drawn with
    replacement from a generator seeded by ``cfg.seed``. If a step fails
    numerically the partial checkpoint is flushed before the error propagates.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise DataError(f"train: need a non-empty B x T x D array, got shape {data.shape}")
    n_seq, T, _ = data.shape
    iterations = cfg.iterations or iteration_budget(n_seq * T, cfg.sample_threshold)
    params = params.copy() if params is not None else init_params(encoder_cfg, cfg.seed)
    sampler = np.random.default_rng([cfg.seed, 1])
    opt = cfg.adamw
    ckpt = Checkpoint(encoder_cfg, params, Moments(), 0, cfg.seed, [], cfg.to_dict())

    for step in range(1, iterations + 1):
        X = data[sampler.integers(0, n_seq, size=cfg.batch_size)]
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.trainable().items()}
        try:
            with ad.Graph():
                Z = encode(X, params, encoder_cfg, "train", leaves=leaves)
                loss = compute_loss(X, Z, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at step {step}")
                ad.backward(loss)
            grads = {k: t.grad if t.grad is not None else np.zeros(t.shape) for k, t in leaves.items()}
            if cfg.grad_clip is not None:
                grads = _clip(grads, cfg.grad_clip)
            updated, ckpt.moments = adamw_step(params.trainable(), grads, ckpt.moments, step, opt)
        except NumericError:
            if checkpoint_path is not None:
                save_checkpoint(ckpt, checkpoint_path)
            raise
        for name, value_arr in updated.items():
            params.set(name, value_arr)
        ckpt.iteration = step
        ckpt.loss_trace.append(value)
        if step == 1 or step % 50 == 0:
            log.info("step %d/%d loss %.6f", step, iterations, value)

    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


# ---------------------------------------------------------------- checkpoint file
#
# "EMGN" | u32 version | u64 header length | JSON header | f32 LE arrays


def _array_layout(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.named_arrays().items()]
    for k in ckpt.params.trainable():
        if k in ckpt.moments.m:
            arrays.append((f"m/{k}", ckpt.moments.m[k]))
            arrays.append((f"v/{k}", ckpt.moments.v[k]))
    return arrays


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically via a temporary file in the target directory."""
    path = Path(path)
    arrays = _array_layout(ckpt)
    header = {
        "encoder_config": ckpt.encoder_config.to_dict(),
        "train_config": ckpt.train_config,
        "iteration": ckpt.iteration,
        "moment_step": ckpt.moments.step,
        "seed": ckpt.seed,
        "loss_trace": ckpt.loss_trace,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", ckpt.version, len(blob)))
            fh.write(blob)
            for _, a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, "<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")

    enc_cfg = EncoderConfig.from_dict(header["encoder_config"])
    params = init_params(enc_cfg, 0)
    for name, arr in arrays.items():
        kind, key = name.split("/", 1)
        if kind == "param":
            params.set(key, arr)
    moments = Moments(
        {k.split("/", 1)[1]: a for k, a in arrays.items() if k.startswith("m/")},
        {k.split("/", 1)[1]: a for k, a in arrays.items() if k.startswith("v/")},
        header["moment_step"],
    )
    return Checkpoint(
        encoder_config=enc_cfg,
        params=params,
        moments=moments,
        iteration=header["iteration"],
        seed=header["seed"],
        loss_trace=list(header["loss_trace"]),
        train_config=header["train_config"],
        version=version,
    )
