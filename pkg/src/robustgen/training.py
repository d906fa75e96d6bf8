"""Standard, PGD-adversarial (SAT) and TRADES training with AdamW + cosine warmup."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, NumericError, pgd
from .autodiff import Tensor
from .models import Model, is_weight

log = logging.getLogger(__name__)

METHODS = ("standard", "sat", "trades")


def default_train_attack() -> AttackConfig:
    return AttackConfig(norm="Linf", epsilon=8 / 255, steps=7)


@dataclass
class TrainConfig:
    method: str = "sat"
    attack: AttackConfig = field(default_factory=default_train_attack)
    epochs: int = 30
    batch_size: int = 64
    lr_peak: float = 1e-3
    warmup_epochs: int = 3
    weight_decay: float = 0.05
    l1_lambda: float = 0.0
    trades_beta: float = 6.0
    seed: int = 0
    eval_every: int = 10
    eval_samples: int = 256
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")
        if not self.trades_beta > 0:
            raise ValueError("trades_beta must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_robust_acc: float
    eval_clean_acc: float | None
    eval_robust_acc: float | None
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[int, str, str, float | None]]:
        """(epoch, split, metric, value) rows; wall time is left out so logs compare byte-for-byte."""
        out = []
        for r in self.records:
            out += [
                (r.epoch, "train", "loss", r.train_loss),
                (r.epoch, "train", "robust_acc", r.train_robust_acc),
                (r.epoch, "train", "lr", r.lr),
                (r.epoch, "eval", "clean_acc", r.eval_clean_acc),
                (r.epoch, "eval", "robust_acc", r.eval_robust_acc),
            ]
        return out


# ------------------------------------------------------------------ schedule


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """Linear ramp from 0 to ``lr_peak`` over ``warmup_steps``, then half-cosine decay to 0."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be in [0, {total_steps})")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float, weight_decay: float) -> None:
    """One AdamW step; decoupled decay p <- p - lr*wd*p precedes the Adam update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -------------------------------------------------------------------- losses


def l1_penalty(model: Model) -> Tensor:
    """Sum of |w| over conv/linear weights (biases and norm affines excluded)."""
    terms = [ad.abs_(p).sum() for name, p in model.params.items() if is_weight(name)]
    total = Tensor(0.0)
    for t in terms:
        total = total + t
    return total


def trades_inner(model: Model, x: np.ndarray, cfg: AttackConfig, steps: int | None = None, rng=None) -> np.ndarray:
    """PGD-l-inf maximisation of KL(f(x) || f(x')) over x' in the cfg ball."""
    steps = cfg.steps if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = cfg.clip_range
    with model.frozen():
        with ad.no_grad():
            clean = Tensor(model(x).data)
        x_adv = x.copy()
        if cfg.random_start and steps > 0:
            x_adv = np.clip(x + 0.001 * rng.normal(size=x.shape), lo, hi)
        for _ in range(steps):
            xt = Tensor(x_adv, requires_grad=True)
            ad.backward(ad.kl_divergence(clean, model(xt)), wrt=[xt])
            delta = np.clip(x_adv + cfg.step_size * np.sign(xt.grad) - x, -cfg.epsilon, cfg.epsilon)
            x_adv = np.clip(x + delta, lo, hi)
    return x_adv


def trades_loss(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, inner_steps: int | None = None, rng=None):
    """CE(f(x), y) + beta * KL(f(x) || f(x')); returns (total, ce, kl, x_adv)."""
    x_adv = trades_inner(model, x, cfg.attack, inner_steps, rng)
    logits = model(x)
    ce = ad.cross_entropy(logits, y)
    kl = ad.kl_divergence(logits, model(x_adv))
    return ce + kl * cfg.trades_beta, ce, kl, x_adv


# ------------------------------------------------------------------- trainer


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    with model.frozen():
        return float((model.predict_logits(x).argmax(axis=1) == y).mean())


class Trainer:
    """Owns a model, its optimizer state and the schedule for one training run."""

    def __init__(self, model: Model, cfg: TrainConfig, n_train: int):
        self.model = model
        self.cfg = cfg
        self.steps_per_epoch = math.ceil(n_train / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.warmup_steps = cfg.warmup_epochs * self.steps_per_epoch
        self.state = AdamState()
        self.step = 0
        self.log = TrainLog()
        self.data_rng = np.random.default_rng([cfg.seed, 1])
        self.attack_rng = np.random.default_rng([cfg.seed, 2])

    def _batch_loss(self, xb, yb):
        cfg, model = self.cfg, self.model
        if cfg.method == "trades":
            loss, _, _, x_used = trades_loss(model, xb, yb, cfg, rng=self.attack_rng)
            return loss, x_used, None
        x_used = pgd(model, xb, yb, cfg.attack, self.attack_rng).x_adv if cfg.method == "sat" else xb
        model.train()
        logits = model(x_used)
        return ad.cross_entropy(logits, yb), x_used, logits.data

    def train_step(self, xb: np.ndarray, yb: np.ndarray) -> tuple[float, float]:
        cfg, model = self.cfg, self.model
        lr = cosine_warmup_lr(self.step, self.total_steps, self.warmup_steps, cfg.lr_peak)
        self.log.lr_trace.append(lr)
        model.train()
        loss, x_used, logits = self._batch_loss(xb, yb)
        if cfg.l1_lambda > 0:
            loss = loss + l1_penalty(model) * cfg.l1_lambda
        model.zero_grad()
        ad.backward(loss, wrt=list(model.params.values()))
        adamw_update(model.params, {k: p.grad for k, p in model.params.items()}, self.state, lr, cfg.weight_decay)
        self.step += 1
        if logits is None:
            with model.frozen():
                logits = model.predict_logits(x_used)
        return loss.item(), float((logits.argmax(axis=1) == yb).sum())

    def run_epoch(self, x: np.ndarray, y: np.ndarray, epoch: int, x_eval=None, y_eval=None) -> EpochRecord:
        start = time.perf_counter()
        order = self.data_rng.permutation(len(x))
        losses, correct = [], 0.0
        lr = 0.0
        for b, i in enumerate(range(0, len(x), self.cfg.batch_size)):
            idx = order[i : i + self.cfg.batch_size]
            lr = cosine_warmup_lr(self.step, self.total_steps, self.warmup_steps, self.cfg.lr_peak)
            try:
                loss, hits = self.train_step(x[idx], y[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            losses.append(loss * len(idx))
            correct += hits
        clean_acc = robust_acc = None
        last = epoch == self.cfg.epochs
        if x_eval is not None and (last or (self.cfg.eval_every and epoch % self.cfg.eval_every == 0)):
            xe, ye = x_eval[: self.cfg.eval_samples], y_eval[: self.cfg.eval_samples]
            clean_acc = accuracy(self.model, xe, ye)
            adv = pgd(self.model, xe, ye, self.cfg.attack, np.random.default_rng([self.cfg.seed, 3, epoch]))
            robust_acc = float(1.0 - adv.success_mask.mean())
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(sum(losses) / len(x)),
            train_robust_acc=correct / len(x),
            eval_clean_acc=clean_acc,
            eval_robust_acc=robust_acc,
            lr=lr,
            wall_time=time.perf_counter() - start,
        )
        self.log.records.append(rec)
        log.info("epoch %d loss %.4f train-acc %.3f lr %.2e", epoch, rec.train_loss, rec.train_robust_acc, lr)
        return rec

    def fit(self, x, y, x_eval=None, y_eval=None, checkpoint_dir=None) -> TrainLog:
        for epoch in range(1, self.cfg.epochs + 1):
            self.run_epoch(x, y, epoch, x_eval, y_eval)
            k = self.cfg.checkpoint_every
            if checkpoint_dir is not None and k and epoch % k == 0:
                self.model.save(Path(checkpoint_dir) / f"checkpoint_epoch{epoch:03d}.rgw")
        return self.log


def sat_epoch(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, trainer: Trainer | None = None, epoch: int = 1):
    """One pass of PGD adversarial training; the model is updated in place."""
    if cfg.method != "sat":
        raise ValueError(f"sat_epoch needs method='sat', got {cfg.method!r}")
    trainer = trainer or Trainer(model, cfg, len(x))
    return trainer.run_epoch(x, y, epoch)


def train(model: Model, x, y, cfg: TrainConfig, x_eval=None, y_eval=None, checkpoint_dir=None) -> TrainLog:
    return Trainer(model, cfg, len(x)).fit(x, y, x_eval, y_eval, checkpoint_dir)
