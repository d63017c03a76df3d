"""Per-pixel softmax student, Adam, and the noisy-oracle teacher."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import TAG_TEACHER, ConfigError, ContractError, Sample, TrainingFault, keyed_rng

_HEADER = struct.Struct("<qqq")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    W: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W))
        object.__setattr__(self, "b", _frozen(self.b))
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ContractError("W must be (C, d) and b must be (C,)")

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> ModelSnapshot:
        return cls(np.zeros((n_classes, dim)), np.zeros(n_classes), 0)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def with_version(self, version: int) -> ModelSnapshot:
        return ModelSnapshot(self.W, self.b, version)

    def same_weights(self, other: ModelSnapshot) -> bool:
        return self.W.tobytes() == other.W.tobytes() and self.b.tobytes() == other.b.tobytes()

    def to_bytes(self) -> bytes:
        c, d = self.W.shape
        return (
            _HEADER.pack(c, d, self.version)
            + self.W.astype("<f8").tobytes()
            + self.b.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> ModelSnapshot:
        if len(data) < _HEADER.size:
            raise ValueError("checkpoint too short for header")
        c, d, version = _HEADER.unpack_from(data)
        expected = _HEADER.size + 8 * (c * d + c)
        if c < 1 or d < 1 or len(data) != expected:
            raise ValueError(f"checkpoint size {len(data)} does not match header C={c}, d={d}")
        flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
        return cls(flat[: c * d].reshape(c, d), flat[c * d :], version)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m_W: np.ndarray
    m_b: np.ndarray
    v_W: np.ndarray
    v_b: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, model: ModelSnapshot) -> OptimizerState:
        zw, zb = np.zeros_like(model.W), np.zeros_like(model.b)
        return cls(zw, zb, zw.copy(), zb.copy(), 0)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    batch_size: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")


@dataclass(frozen=True)
class TeacherOracle:
    """Pseudo-labeler that corrupts ground truth at a daylight-dependent rate."""

    base_error: float = 0.15
    night_penalty: float = 0.15
    key: int = 0
    n_classes: int = 6

    MAX_ERROR = 0.9

    def __post_init__(self):
        if not 0 <= self.base_error < 1 or self.night_penalty < 0:
            raise ConfigError("teacher needs 0 <= base_error < 1 and night_penalty >= 0")
        if self.n_classes < 2:
            raise ConfigError("teacher needs at least two classes")

    def error_rate(self, daylight: int) -> float:
        return min(self.base_error + (self.night_penalty if daylight == 1 else 0.0), self.MAX_ERROR)


def _stack(batch: Sequence[tuple[Sample, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    if not batch:
        raise ContractError("empty training batch")
    for sample, labels in batch:
        if len(labels) != sample.n_pixels:
            raise ContractError("label grid does not match sample pixel count")
    x = np.concatenate([s.pixels for s, _ in batch])
    y = np.concatenate([np.asarray(l, dtype=np.int64) for _, l in batch])
    return x, y


def predict(model: ModelSnapshot, sample: Sample) -> np.ndarray:
    """Per-pixel argmax of W x + b; ties go to the lowest class id."""
    if sample.pixels.shape[1] != model.dim:
        raise ContractError(f"feature dim {sample.pixels.shape[1]} != model dim {model.dim}")
    return np.argmax(sample.pixels @ model.W.T + model.b, axis=1)


def loss_and_grad(
    model: ModelSnapshot, batch: Sequence[tuple[Sample, np.ndarray]]
) -> tuple[float, np.ndarray, np.ndarray]:
    """Pixel-averaged softmax cross-entropy and its gradient wrt (W, b)."""
    x, y = _stack(batch)
    if x.shape[1] != model.dim:
        raise ContractError(f"feature dim {x.shape[1]} != model dim {model.dim}")
    n = len(y)
    logits = x @ model.W.T + model.b
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - logits[rows, y]))
    delta = np.exp(logits - log_z[:, None])
    delta[rows, y] -= 1.0
    delta /= n
    return loss, delta.T @ x, delta.sum(axis=0)


def adam_step(
    model: ModelSnapshot,
    opt: OptimizerState,
    grads: tuple[np.ndarray, np.ndarray],
    cfg: TrainingConfig,
    cell: int | None = None,
) -> tuple[ModelSnapshot, OptimizerState]:
    g_W, g_b = grads
    if g_W.shape != model.W.shape or g_b.shape != model.b.shape:
        raise ContractError("gradient shapes do not match the model")
    if not (np.all(np.isfinite(g_W)) and np.all(np.isfinite(g_b))):
        raise TrainingFault("non-finite gradient", cell=cell)
    step = opt.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    m_W = b1 * opt.m_W + (1 - b1) * g_W
    m_b = b1 * opt.m_b + (1 - b1) * g_b
    v_W = b2 * opt.v_W + (1 - b2) * g_W * g_W
    v_b = b2 * opt.v_b + (1 - b2) * g_b * g_b
    c1, c2 = 1 - b1**step, 1 - b2**step
    W = model.W - cfg.learning_rate * (m_W / c1) / (np.sqrt(v_W / c2) + cfg.eps)
    b = model.b - cfg.learning_rate * (m_b / c1) / (np.sqrt(v_b / c2) + cfg.eps)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise TrainingFault("non-finite parameters after update", cell=cell)
    return ModelSnapshot(W, b, model.version), OptimizerState(m_W, m_b, v_W, v_b, step)


def teacher_label(oracle: TeacherOracle, sample: Sample, weather) -> np.ndarray:
    """Ground truth with each pixel flipped to a uniform other class w.p. eta."""
    eta = oracle.error_rate(weather.daylight)
    rng = keyed_rng(oracle.key, TAG_TEACHER, sample.agent, int(round(sample.time * 1000)))
    truth = sample.truth
    if truth.max() >= oracle.n_classes:
        raise ContractError("sample truth exceeds the teacher's label space")
    p = len(truth)
    flip = rng.random(p) < eta
    offset = rng.integers(1, oracle.n_classes, size=p)
    return np.where(flip, (truth + offset) % oracle.n_classes, truth)
