"""Shared domain types, keyed random streams and confusion-matrix metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

AgentId = int
CellId = int
ZoneId = int


class ContractError(ValueError):
    """A precondition of a library operation was violated."""


class ConfigError(ValueError):
    """A configuration is invalid or infeasible."""


class UndefinedMetricError(ArithmeticError):
    """A metric was requested over an empty confusion matrix."""


class TrainingFault(RuntimeError):
    """Non-finite values appeared while training a cell student."""

    def __init__(self, message: str, cell: CellId | None = None, time: float | None = None):
        super().__init__(message)
        self.cell = cell
        self.time = time

    def __str__(self) -> str:
        msg = super().__str__()
        if self.cell is not None:
            msg += f" (cell {self.cell}"
            msg += f", t={self.time:g})" if self.time is not None else ")"
        return msg


# Stream tags keep the world, teacher and split draws statistically independent.
TAG_SAMPLE = 1
TAG_TEACHER = 2
TAG_SPLIT = 3
TAG_WORLD = 4


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-style generator: a pure function of the integer key tuple.

    Draws never depend on how many other streams were consumed before, so
    results are independent of execution order.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class Sample:
    """One agent observation: P feature vectors plus hidden per-pixel truth."""

    agent: AgentId
    time: float
    pixels: np.ndarray  # (P, d) float64
    truth: np.ndarray  # (P,) int64

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.truth.ndim != 1:
            raise ContractError("pixels must be (P, d) and truth (P,)")
        if len(self.pixels) != len(self.truth) or len(self.truth) == 0:
            raise ContractError("pixels and truth must have the same nonzero length")

    @property
    def n_pixels(self) -> int:
        return len(self.truth)


@dataclass(frozen=True)
class RateConfig:
    f_D: float = 1.0
    f_T: float = 1.0 / 3.0
    f_S: float = 1.0 / 30.0

    def __post_init__(self):
        if not (self.f_D >= self.f_T >= self.f_S > 0):
            raise ConfigError("rates must satisfy f_D >= f_T >= f_S > 0")
        self.teacher_stride
        self.student_stride

    @staticmethod
    def _ratio(a: float, b: float, what: str) -> int:
        r = Fraction(a).limit_denominator(10_000) / Fraction(b).limit_denominator(10_000)
        if r.denominator != 1:
            raise ConfigError(f"{what} must be a positive integer, got {float(r):g}")
        return int(r)

    @property
    def teacher_stride(self) -> int:
        """Stream ticks per teacher/upload tick."""
        return self._ratio(self.f_D, self.f_T, "f_D/f_T")

    @property
    def student_stride(self) -> int:
        """Stream ticks per student broadcast tick."""
        return self.teacher_stride * self._ratio(self.f_T, self.f_S, "f_T/f_S")


def empty_cm(n_classes: int) -> np.ndarray:
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def cm_update(cm: np.ndarray, predicted: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Return ``cm`` plus one count per pixel at ``[truth, predicted]``."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    n = cm.shape[0]
    if predicted.shape != truth.shape:
        raise ContractError(f"label grids differ in length: {predicted.shape} vs {truth.shape}")
    if predicted.size and (
        predicted.min() < 0 or truth.min() < 0 or predicted.max() >= n or truth.max() >= n
    ):
        raise ContractError(f"class id out of range [0, {n})")
    counts = np.bincount(truth.astype(np.int64) * n + predicted, minlength=n * n)
    return cm + counts.reshape(n, n)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN where a class has zero union."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    out = np.full(len(tp), np.nan)
    nz = union > 0
    out[nz] = tp[nz] / union[nz]
    return out


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes with nonzero union.

    Raises UndefinedMetricError on an all-zero matrix.
    """
    iou = iou_per_class(cm)
    valid = ~np.isnan(iou)
    if not valid.any():
        raise UndefinedMetricError("mIoU undefined for an empty confusion matrix")
    return float(iou[valid].mean())


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_unit(*key: int) -> float:
    """Stateless hash of an integer tuple to a uniform float in [0, 1)."""
    h = 0
    for k in key:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return (h >> 11) / float(1 << 53)
