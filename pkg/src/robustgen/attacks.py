"""PGD attacks under l1 / l2 / l-inf budgets with exact ball projections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORMS = ("L1", "L2", "Linf")
DEFAULT_EPSILON = {"Linf": 8 / 255, "L2": 1.5, "L1": 40.0}


class NumericError(ArithmeticError):
    pass


class BudgetViolation(AssertionError):
    pass


@dataclass
class AttackConfig:
    norm: str = "Linf"
    epsilon: float | None = None
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True
    restarts: int = 1
    clip_range: tuple[float, float] = (0.0, 1.0)
    l1_sparsity: float = 0.01
    name: str | None = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError(f"steps and restarts must be >= 1, got {self.steps}, {self.restarts}")
        if self.epsilon is None:
            self.epsilon = DEFAULT_EPSILON[self.norm]
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.steps
        self.clip_range = tuple(float(v) for v in self.clip_range)
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @property
    def label(self) -> str:
        return self.name or f"PGD-{self.norm}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_range"] = list(self.clip_range)
        return d


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    success_mask: np.ndarray
    loss_trace: list[float]
    losses: np.ndarray


# ---------------------------------------------------------------- projections


def _within(p: np.ndarray, eps: float, norm_fn) -> np.ndarray:
    """Shave off the last-ulp rounding overshoot so feasibility holds exactly."""
    while norm_fn(p) > eps:
        p = p * np.nextafter(1.0, 0.0)
    return p


def _project_l1(v: np.ndarray, eps: float) -> np.ndarray:
    a = np.abs(v)
    if a.sum() <= eps:
        return v.copy()
    # soft-threshold level from the sorted cumulative sums
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    rho = np.nonzero(u * k > css - eps)[0][-1]
    theta = (css[rho] - eps) / (rho + 1.0)
    return _within(np.sign(v) * np.maximum(a - theta, 0.0), eps, lambda p: np.abs(p).sum())


def project_lp(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Euclidean projection of a flat vector onto the ``norm`` ball of radius ``epsilon``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise NumericError("project_lp received non-finite values")
    if norm == "Linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "L2":
        n = np.linalg.norm(delta)
        return _within(delta * (epsilon / n), epsilon, np.linalg.norm) if n > epsilon else delta.copy()
    if norm == "L1":
        return _project_l1(delta, epsilon)
    raise ValueError(f"unknown norm {norm!r}")


def lp_norm(v: np.ndarray, norm: str) -> float:
    v = np.asarray(v).reshape(-1)
    return float({"L1": np.abs(v).sum, "L2": lambda: np.linalg.norm(v), "Linf": lambda: np.abs(v).max(initial=0.0)}[norm]())


def attack_step_direction(grad: np.ndarray, norm: str, step_size: float, l1_sparsity: float = 0.01) -> np.ndarray:
    """Steepest-ascent step of size ``step_size`` in the given geometry.

    The l1 rule spreads the step mass evenly over the top-k coordinates by
    ``|grad|`` with k = max(1, ceil(l1_sparsity * dims)).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if norm == "Linf":
        return step_size * np.sign(grad)
    if norm == "L2":
        n = np.linalg.norm(grad)
        return grad * (step_size / n) if n > 0 else np.zeros_like(grad)
    if norm == "L1":
        k = max(1, math.ceil(l1_sparsity * grad.size))
        out = np.zeros_like(grad)
        top = np.argsort(-np.abs(grad), kind="stable")[:k]
        out[top] = np.sign(grad[top]) * (step_size / k)
        return out
    raise ValueError(f"unknown norm {norm!r}")


def _random_start(rng: np.random.Generator, shape, cfg: AttackConfig) -> np.ndarray:
    n = shape[0]
    dims = int(np.prod(shape[1:]))
    if cfg.norm == "Linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    # laplace draws give uniformly distributed l1 directions, gaussians l2 ones
    direction = rng.laplace(size=(n, dims)) if cfg.norm == "L1" else rng.normal(size=(n, dims))
    direction /= np.array([max(lp_norm(d, cfg.norm), 1e-300) for d in direction])[:, None]
    radius = rng.uniform(0.0, cfg.epsilon, size=(n, 1))
    return (direction * radius).reshape(shape)


# ------------------------------------------------------------------------ PGD


def _loss_and_grad(model, x_adv: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xt = Tensor(x_adv, requires_grad=True)
    logits = model(xt)
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("model emitted non-finite logits")
    # summed loss keeps per-sample gradients unscaled by the batch size
    ad.backward(ad.cross_entropy(logits, y, reduction="sum"), wrt=[xt])
    return ad.per_sample_cross_entropy(logits.data, y), xt.grad, logits.data


def _project_batch(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Row-wise :func:`project_lp` over a batch (vectorised for l2 / l-inf)."""
    if norm == "Linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "L2":
        n = np.linalg.norm(flat, axis=1, keepdims=True)
        scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
        return (flat * scale).reshape(delta.shape)
    return np.stack([project_lp(row, norm, eps) for row in flat]).reshape(delta.shape)


def _step_batch(grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "Linf":
        return cfg.step_size * np.sign(grad)
    flat = grad.reshape(grad.shape[0], -1)
    if cfg.norm == "L2":
        n = np.linalg.norm(flat, axis=1, keepdims=True)
        return np.where(n > 0, flat * (cfg.step_size / np.where(n > 0, n, 1.0)), 0.0).reshape(grad.shape)
    rows = [attack_step_direction(g, cfg.norm, cfg.step_size, cfg.l1_sparsity) for g in flat]
    return np.stack(rows).reshape(grad.shape)


def _final_losses(model, x_adv, y, step):
    with ad.no_grad():
        logits = model(x_adv).data
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"model emitted non-finite logits at step {step}")
    return ad.per_sample_cross_entropy(logits, y)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AdvBatch:
    """Projected gradient ascent on cross-entropy inside the ``cfg`` budget.

    The model is evaluated frozen (eval mode, no parameter gradients).  Each
    restart keeps its final iterate; per sample, the highest-loss candidate
    over restarts wins.  Without a random start the unperturbed input is
    itself a candidate, so an attack never does worse than the clean point.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    lo, hi = cfg.clip_range
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"input outside clip range {cfg.clip_range}")

    with model.frozen():
        best_x = x.copy()
        best_loss = np.full(len(x), -np.inf)
        trace: list[float] = []
        if not cfg.random_start:
            best_loss = _final_losses(model, x, y, 0)

        for _ in range(cfg.restarts):
            x_adv = x
            if cfg.random_start:
                start = _project_batch(_random_start(rng, x.shape, cfg), cfg.norm, cfg.epsilon)
                x_adv = np.clip(x + start, lo, hi)
            for step in range(cfg.steps):
                try:
                    losses, grad, _ = _loss_and_grad(model, x_adv, y)
                except NumericError as exc:
                    raise NumericError(f"{exc} at step {step}") from None
                trace.append(float(losses.mean()))
                delta = _project_batch((x_adv - x) + _step_batch(grad, cfg), cfg.norm, cfg.epsilon)
                x_adv = np.clip(x + delta, lo, hi)
            final = _final_losses(model, x_adv, y, cfg.steps)
            trace.append(float(final.mean()))
            better = final > best_loss
            best_loss = np.where(better, final, best_loss)
            best_x[better] = x_adv[better]

        pred = model.predict_logits(best_x).argmax(axis=1)

    check_budget(x, best_x, cfg)
    return AdvBatch(x_adv=best_x, success_mask=pred != y, loss_trace=trace, losses=best_loss)


def check_budget(x: np.ndarray, x_adv: np.ndarray, cfg: AttackConfig) -> None:
    lo, hi = cfg.clip_range
    if x_adv.size and (x_adv.min() < lo or x_adv.max() > hi):
        raise BudgetViolation("adversarial example leaves the clip range")
    diffs = (x_adv - x).reshape(len(x), -1)
    for i, d in enumerate(diffs):
        if lp_norm(d, cfg.norm) > cfg.epsilon * (1 + 1e-9) + 1e-12:
            raise BudgetViolation(f"sample {i}: ||delta||_{cfg.norm} = {lp_norm(d, cfg.norm)} > {cfg.epsilon}")


def generate_eval_suite(
    model, x: np.ndarray, y: np.ndarray, configs: Sequence[AttackConfig], seed: int = 0, batch_size: int = 256
) -> dict[str, AdvBatch]:
    """Run every config over the full set; masks stay aligned with sample order."""
    out: dict[str, AdvBatch] = {}
    for idx, cfg in enumerate(configs):
        rng = np.random.default_rng([seed, idx])
        parts = [pgd(model, x[i : i + batch_size], y[i : i + batch_size], cfg, rng) for i in range(0, len(x), batch_size)]
        name = cfg.label
        if name in out:
            name = f"{name}#{idx}"
        out[name] = AdvBatch(
            x_adv=np.concatenate([p.x_adv for p in parts]),
            success_mask=np.concatenate([p.success_mask for p in parts]),
            loss_trace=[v for p in parts for v in p.loss_trace],
            losses=np.concatenate([p.losses for p in parts]),
        )
    return out
