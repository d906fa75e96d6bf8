"""Clean / per-attack / worst-case robust accuracy, rank aggregation, and 1 - mCE."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from .attacks import AttackConfig, generate_eval_suite
from .models import Model


class ReportInconsistency(AssertionError):
    pass


@dataclass
class RobustnessReport:
    clean_acc: float
    per_attack_acc: dict[str, float] = field(default_factory=dict)
    per_sample_correct: dict[str, np.ndarray] = field(default_factory=dict)
    worst_case_acc: float | None = None

    def check(self) -> None:
        for name, mask in self.per_sample_correct.items():
            if self.per_attack_acc[name] != float(np.mean(mask)):
                raise ReportInconsistency(f"per_attack_acc[{name}] disagrees with its per-sample mask")
        if self.per_attack_acc and self.worst_case_acc > min(self.per_attack_acc.values()):
            raise ReportInconsistency("worst_case_acc exceeds the smallest per-attack accuracy")

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "per_attack_acc": dict(self.per_attack_acc),
            "per_sample_correct": {k: [bool(v) for v in m] for k, m in self.per_sample_correct.items()},
            "worst_case_acc": self.worst_case_acc,
        }


def worst_case_accuracy(per_sample_correct: Mapping[str, Sequence[bool]]) -> float:
    """Fraction of samples classified correctly under every attack in the set."""
    if not per_sample_correct:
        raise ValueError("worst_case_accuracy needs at least one attack")
    masks = [np.asarray(m, dtype=bool) for m in per_sample_correct.values()]
    n = len(masks[0])
    if n == 0 or any(len(m) != n for m in masks):
        raise ValueError(f"per-sample masks must share one non-zero length, got {[len(m) for m in masks]}")
    return float(np.logical_and.reduce(masks).mean())


def evaluate_model(model: Model, x: np.ndarray, y: np.ndarray, attack_configs: Sequence[AttackConfig], seed: int = 0) -> RobustnessReport:
    with model.frozen():
        clean = float((model.predict_logits(x).argmax(axis=1) == y).mean())
    suite = generate_eval_suite(model, x, y, attack_configs, seed=seed)
    correct = {name: ~adv.success_mask for name, adv in suite.items()}
    report = RobustnessReport(
        clean_acc=clean,
        per_attack_acc={name: float(np.mean(m)) for name, m in correct.items()},
        per_sample_correct=correct,
        worst_case_acc=worst_case_accuracy(correct) if correct else None,
    )
    report.check()
    return report


def average_rank(table: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """Mean over attacks of each architecture's descending-accuracy rank (ties share the average rank)."""
    archs = list(table)
    if not archs:
        return {}
    attacks = sorted(table[archs[0]])
    for a in archs:
        if sorted(table[a]) != attacks:
            raise ValueError(f"ragged table: {a} has attacks {sorted(table[a])}, expected {attacks}")
    ranks = np.zeros(len(archs))
    for attack in attacks:
        ranks += rankdata([-table[a][attack] for a in archs], method="average")
    return {a: float(r / len(attacks)) for a, r in zip(archs, ranks)}


# ---------------------------------------------------------------- corruptions

SEVERITIES = (1, 2, 3, 4, 5)
GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.16, 0.20)
IMPULSE_FRACTION = (0.01, 0.02, 0.04, 0.06, 0.09)
BLUR_SIZE = (3, 5, 7, 9, 11)  # odd so the window is centred; even sizes shift the image
BRIGHTNESS_SHIFT = (0.05, 0.1, 0.15, 0.2, 0.3)
CONTRAST_FACTOR = (0.8, 0.65, 0.5, 0.35, 0.2)


def _gaussian_noise(x, s, rng):
    return x + rng.normal(0.0, GAUSSIAN_SIGMA[s - 1], size=x.shape)


def _impulse_noise(x, s, rng):
    out = x.copy()
    hit = rng.random(x.shape) < IMPULSE_FRACTION[s - 1]
    out[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(np.float64)
    return out


def _box_blur(x, s, rng):
    k = BLUR_SIZE[s - 1]
    return uniform_filter(x, size=(1, 1, k, k), mode="nearest")


def _brightness(x, s, rng):
    return x + BRIGHTNESS_SHIFT[s - 1]


def _contrast(x, s, rng):
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return (x - mean) * CONTRAST_FACTOR[s - 1] + mean


CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "impulse_noise": _impulse_noise,
    "box_blur": _box_blur,
    "brightness": _brightness,
    "contrast": _contrast,
}


def corrupt(x: np.ndarray, name: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption at severity 1..5; deterministic in (seed, name, severity), output in [0, 1]."""
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    rng = np.random.default_rng([seed, list(CORRUPTIONS).index(name), severity])
    return np.clip(CORRUPTIONS[name](np.asarray(x, dtype=np.float64), severity, rng), 0.0, 1.0)


def corruption_errors(model: Model, x: np.ndarray, y: np.ndarray, seed: int = 0) -> dict[tuple[str, int], float]:
    out = {}
    with model.frozen():
        for name in CORRUPTIONS:
            for s in SEVERITIES:
                pred = model.predict_logits(corrupt(x, name, s, seed)).argmax(axis=1)
                out[(name, s)] = float((pred != y).mean())
    return out


@dataclass
class CorruptionReport:
    per_corruption_error: dict[tuple[str, int], float]
    mce: float
    one_minus_mce: float

    def to_dict(self) -> dict:
        return {
            "per_corruption_error": {f"{n}@{s}": v for (n, s), v in self.per_corruption_error.items()},
            "mce": self.mce,
            "one_minus_mce": self.one_minus_mce,
        }


def mce_from_errors(errors: Mapping[tuple[str, int], float], reference: Mapping[tuple[str, int], float]) -> float:
    ratios = []
    for name in CORRUPTIONS:
        for s in SEVERITIES:
            if not reference.get((name, s), 0.0) > 0:
                raise ZeroDivisionError(f"reference error for ({name}, severity {s}) must be positive")
        ratios.append(sum(errors[(name, s)] for s in SEVERITIES) / sum(reference[(name, s)] for s in SEVERITIES))
    return float(np.mean(ratios))


def corruption_mce(model: Model, x: np.ndarray, y: np.ndarray, reference_errors, seed: int = 0) -> CorruptionReport:
    """Mean over corruptions of summed-over-severity error relative to a reference model."""
    errors = corruption_errors(model, x, y, seed)
    mce = mce_from_errors(errors, reference_errors)
    return CorruptionReport(per_corruption_error=errors, mce=mce, one_minus_mce=1.0 - mce)
