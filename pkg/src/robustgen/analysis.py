"""Explanatory instruments: weight sparsity, filter-normalised loss landscapes,
Rademacher-style bound calculators and a low-rank SDP certificate."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import project_lp
from .models import Model, extract_weight_groups, is_weight

# ------------------------------------------------------------------ sparsity


@dataclass
class SparsityReport:
    group: str
    ratio: float | None
    threshold: float | None
    max_abs_weight: float | None
    bin_edges: np.ndarray = field(default_factory=lambda: np.zeros(0))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    size: int = 0


def sparsity_ratio(values, threshold_frac: float = 0.01, bins: int = 101, group: str = "values") -> SparsityReport:
    """Fraction of entries with |w| strictly below ``threshold_frac * max|w|``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("sparsity_ratio needs a non-empty array")
    max_abs = float(np.abs(v).max())
    threshold = threshold_frac * max_abs
    ratio = float(np.count_nonzero(np.abs(v) < threshold) / v.size)
    span = max_abs if max_abs > 0 else 1.0
    counts, edges = np.histogram(v, bins=bins, range=(-span, span))
    return SparsityReport(group, ratio, threshold, max_abs, edges, counts, int(v.size))


def group_sparsity(model: Model, threshold_frac: float = 0.01) -> dict[str, SparsityReport]:
    out = {}
    for group, values in extract_weight_groups(model).items():
        if values.size == 0:
            out[group] = SparsityReport(group, None, None, None)
        else:
            out[group] = sparsity_ratio(values, threshold_frac, group=group)
    return out


# ----------------------------------------------------------------- landscape


def _filter_axis(name: str, value: np.ndarray):
    """Axis indexing output units: conv filters are axis 0, (in, out) linear matrices axis 1."""
    if not is_weight(name):
        return None
    return 0 if value.ndim == 4 else value.ndim - 1


def filter_normalized_directions(model: Model, seed: int = 0) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Two Gaussian directions with every filter rescaled to its model filter's norm.

    Biases, norm affines and position tables get a zero direction.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        d = {}
        for name, p in model.params.items():
            axis = _filter_axis(name, p.data)
            if axis is None:
                d[name] = np.zeros_like(p.data)
                continue
            raw = np.moveaxis(rng.normal(size=p.shape), axis, 0)
            ref = np.moveaxis(p.data, axis, 0)
            flat_raw = raw.reshape(raw.shape[0], -1)
            ref_norm = np.linalg.norm(ref.reshape(ref.shape[0], -1), axis=1, keepdims=True)
            raw_norm = np.linalg.norm(flat_raw, axis=1, keepdims=True)
            scaled = np.where(ref_norm > 0, flat_raw * (ref_norm / np.where(raw_norm > 0, raw_norm, 1.0)), 0.0)
            d[name] = np.moveaxis(scaled.reshape(raw.shape), 0, axis)
        out.append(d)
    return out[0], out[1]


@dataclass
class LandscapeGrid:
    alphas: list[float]
    betas: list[float]
    loss: np.ndarray
    direction_seed: int | None = None
    baseline_loss: float | None = None

    def rows(self):
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                yield a, b, float(self.loss[i, j])


def mean_cross_entropy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(ad.per_sample_cross_entropy(model.predict_logits(x), y).mean())


def landscape_grid(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    directions,
    alphas: Sequence[float],
    betas: Sequence[float],
    loss_fn: Callable[[Model, np.ndarray, np.ndarray], float] = mean_cross_entropy,
    direction_seed: int | None = None,
) -> LandscapeGrid:
    """Loss at theta + a*d1 + b*d2 over the grid; weights are restored afterwards.

    Non-finite losses are stored as +inf.  Needs exclusive access to ``model``.
    """
    if 0.0 not in list(alphas) or 0.0 not in list(betas):
        raise ValueError("landscape axes must include 0")
    d1, d2 = directions
    original = {k: p.data for k, p in model.params.items()}
    grid = np.empty((len(alphas), len(betas)))
    try:
        with model.frozen():
            baseline = loss_fn(model, x, y)
            for i, a in enumerate(alphas):
                for j, b in enumerate(betas):
                    if a == 0.0 and b == 0.0:
                        grid[i, j] = baseline
                        continue
                    for k, p in model.params.items():
                        p.data = original[k] + a * d1[k] + b * d2[k]
                    value = loss_fn(model, x, y)
                    grid[i, j] = value if np.isfinite(value) else np.inf
                    for k, p in model.params.items():
                        p.data = original[k]
    finally:
        for k, p in model.params.items():
            p.data = original[k]
    return LandscapeGrid(list(alphas), list(betas), grid, direction_seed, baseline)


# ------------------------------------------------------------------- bounds


@dataclass
class LemmaBoundInputs:
    R_S: float
    epsilon: float
    Theta: float
    d: int
    n: int
    p: float
    c: float = 0.5

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be >= 1")
        if not 0 < self.c < 1:
            raise ValueError("c must lie in (0, 1)")

    @property
    def q(self) -> float:
        return math.inf if self.p == 1 else (1.0 if math.isinf(self.p) else self.p / (self.p - 1))


def lemma1_bounds(inp: LemmaBoundInputs) -> tuple[float, float]:
    """Sandwich on the adversarial Rademacher complexity of an l_p-bounded linear class.

    upper = R_S + eps * Theta * d**(1 - 1/p) / sqrt(n); lower = (c / 2) * upper.
    """
    if inp.p < 1:
        raise ValueError(f"p must be >= 1, got {inp.p}")
    exponent = 1.0 - 1.0 / inp.p
    upper = inp.R_S + inp.epsilon * inp.Theta * inp.d**exponent / math.sqrt(inp.n)
    return (inp.c / 2.0) * upper, upper


_DUAL = {"L1": "Linf", "L2": "L2", "Linf": "L1"}


def rademacher_draws(
    x: np.ndarray,
    theta: float,
    trials: int,
    norm: str = "L2",
    seed: int = 0,
    epsilon: float = 0.0,
    labels: np.ndarray | None = None,
    steps: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw sup estimates and the sign vectors that produced them.

    The supremum of (1/n) sum_i s_i f(x_i) over {f(x) = y <w, x> - eps ||w||_1 : ||w||_norm <= theta}
    is approached by projected (sub)gradient ascent on w; eps = 0 gives the
    plain linear class.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    n = len(flat)
    y = np.ones(n) if labels is None else np.asarray(labels, dtype=np.float64)
    rng = np.random.default_rng(seed)
    values, sigmas = np.empty(trials), np.empty((trials, n))
    for t in range(trials):
        sigma = rng.choice([-1.0, 1.0], size=n)
        g = (sigma * y) @ flat
        s_sum = sigma.sum()

        def objective(w):
            return float(w @ g - epsilon * np.abs(w).sum() * s_sum)

        w = np.zeros_like(g)
        best = objective(w)
        gnorm = np.linalg.norm(g)
        for k in range(1, steps + 1):
            sub = g - epsilon * s_sum * np.sign(w)
            sn = np.linalg.norm(sub)
            if sn == 0 or gnorm == 0:
                break
            w = project_lp(w + (theta / sn) / math.sqrt(k) * sub, norm, theta)
            best = max(best, objective(w))
        values[t] = best / n
        sigmas[t] = sigma
    return values, sigmas


def empirical_rademacher(x: np.ndarray, theta: float, trials: int, norm: str = "L2", seed: int = 0, **kw) -> float:
    """Monte-Carlo empirical Rademacher complexity of a norm-bounded linear class."""
    return float(rademacher_draws(x, theta, trials, norm, seed, **kw)[0].mean())


# -------------------------------------------------------------- Q and the SDP


def build_Q(w1_col: np.ndarray, A1: np.ndarray) -> np.ndarray:
    """Symmetric (1 + d + m) block matrix for column w (length m) and A1 (m x d), b = diag(w).

    Row/column blocks are [1 | d | m]; only the last block row and column are
    non-zero: top-right 1^T A1^T b, middle-right A1^T b, and their transposes.
    """
    w = np.asarray(w1_col, dtype=np.float64).reshape(-1)
    A1 = np.asarray(A1, dtype=np.float64)
    if A1.ndim != 2 or A1.shape[0] != w.size:
        raise ValueError(f"A1 shape {A1.shape} incompatible with column of length {w.size}")
    m, d = A1.shape
    At_b = A1.T * w[None, :]  # A1^T diag(w): d x m
    Q = np.zeros((1 + d + m, 1 + d + m))
    Q[0, 1 + d :] = At_b.sum(axis=0)
    Q[1 : 1 + d, 1 + d :] = At_b
    Q[1 + d :, 0] = Q[0, 1 + d :]
    Q[1 + d :, 1 : 1 + d] = At_b.T
    return Q


def sdp_certificate(Q: np.ndarray, rank: int | None = None, restarts: int = 6, iters: int = 3000, seed: int = 0, tol: float = 1e-13):
    """(upper, witness) for max <Q, P> over P >= 0 with diag(P) <= 1.

    witness comes from projected gradient ascent on P = V V^T with rows of V
    kept inside the unit ball (rank min(dim, 8), several random restarts);
    upper = sum |Q_ij| holds because |P_ij| <= 1 on the feasible set.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T, rtol=0, atol=1e-12):
        raise ValueError("sdp_certificate needs a symmetric square matrix")
    upper = float(np.abs(Q).sum())
    dim = Q.shape[0]
    lip = 2.0 * np.linalg.norm(Q, 2)
    if lip == 0:
        return upper, 0.0
    r = rank or min(dim, 8)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        V = rng.normal(size=(dim, r))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        value = float(np.sum(Q * (V @ V.T)))
        for _ in range(iters):
            V = V + (2.0 / lip) * (Q @ V)
            norms = np.linalg.norm(V, axis=1, keepdims=True)
            V = V / np.maximum(norms, 1.0)
            new = float(np.sum(Q * (V @ V.T)))
            if new - value <= tol * max(1.0, abs(value)):
                value = max(value, new)
                break
            value = new
        best = max(best, value)
    return upper, min(best, upper)


def sign_vector_lower_bound(Q: np.ndarray) -> float:
    """max over s in {-1, +1}^n of s^T Q s by enumeration (small n only)."""
    n = Q.shape[0]
    if n > 20:
        raise ValueError("enumeration limited to n <= 20")
    signs = 1.0 - 2.0 * ((np.arange(2**n)[:, None] >> np.arange(n)) & 1)
    return float(np.max(np.einsum("ki,ij,kj->k", signs, Q, signs)))


@dataclass
class Theorem2Inputs:
    s1: float
    s2: float
    b1: float
    b2: float
    gamma: float
    n: int
    d_max: int
    X_fro: float
    delta_prob: float = 0.05
    E_mean: float = 0.0
    epsilon: float = 8 / 255

    def __post_init__(self):
        if min(self.s1, self.s2, self.b1, self.b2) < 0:
            raise ValueError("norm budgets must be >= 0")
        if not 0 < self.delta_prob < 1:
            raise ValueError("delta_prob must lie in (0, 1)")
        if not 0 <= self.E_mean <= 1:
            raise ValueError("E_mean must lie in [0, 1]")
        if self.n < 1 or self.d_max < 1:
            raise ValueError("n and d_max must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(b: float, s: float, label: str) -> float:
    if s == 0:
        if b != 0:
            raise ValueError(f"{label}: spectral budget is 0 but l1 budget is {b}")
        return 0.0
    return b / s


def complexity_constant(inp: Theorem2Inputs) -> float:
    """C = ((b1/s1)^(2/3) + (b2/s2)^(2/3))^(3/2) * ||X||_F."""
    r1 = _ratio(inp.b1, inp.s1, "s1") ** (2.0 / 3.0)
    r2 = _ratio(inp.b2, inp.s2, "s2") ** (2.0 / 3.0)
    return (r1 + r2) ** 1.5 * inp.X_fro


def theorem2_terms(inp: Theorem2Inputs) -> dict[str, float]:
    if not inp.gamma > 0:
        raise ValueError(f"gamma must be > 0, got {inp.gamma}")
    n, g = inp.n, inp.gamma
    C = complexity_constant(inp)
    return {
        "empirical": inp.E_mean,
        "complexity": (4.0 / n**1.5 + 60.0 * math.log(n) * math.log(2 * inp.d_max) / n * inp.s1 * inp.s2 * C) / g,
        "adversarial": 2.0 * inp.epsilon * inp.b1 * inp.b2 / (g * math.sqrt(n)),
        "confidence": 3.0 * math.sqrt(math.log(2.0 / inp.delta_prob) / (2.0 * n)),
        "C": C,
    }


def theorem2_bound(inp: Theorem2Inputs) -> float:
    """Margin-based upper bound on the adversarial error of a one-attention-layer network."""
    t = theorem2_terms(inp)
    return t["empirical"] + t["complexity"] + t["adversarial"] + t["confidence"]


def spectral_norm(M: np.ndarray, iters: int = 50, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value by power iteration on M^T M."""
    M = np.asarray(M, dtype=np.float64)
    if not M.any():
        return 0.0
    v = np.random.default_rng(seed).normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = M.T @ (M @ v)
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        v = u / nu
        new = float(np.linalg.norm(M @ v))
        if abs(new - sigma) <= tol * max(new, 1e-300):
            sigma = new
            break
        sigma = new
    return sigma


def attention_matrices(model: Model) -> tuple[str, np.ndarray, np.ndarray]:
    """(prefix, A1, W1) of the first attention block.

    A1 is the value path W_v @ W_out (d x d), W1 the first feedforward matrix (d x hidden).
    """
    for name in model.params:
        if name.endswith(".attn.v.weight"):
            prefix = name[: -len(".attn.v.weight")]
            A1 = model.params[name].data @ model.params[f"{prefix}.attn.out.weight"].data
            return prefix, A1, model.params[f"{prefix}.ffn.fc1.weight"].data
    raise ValueError("model has no attention block")


def logit_margins(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with model.frozen():
        logits = model.predict_logits(x)
    idx = np.arange(len(y))
    correct = logits[idx, y].copy()
    logits[idx, y] = -np.inf
    return correct - logits.max(axis=1)


def certificate_value(A1: np.ndarray, W1: np.ndarray, max_columns: int | None = None, **sdp_kw) -> float:
    """max over columns k of W1 and signs z of the SDP witness for z * Q(w_k, A1)."""
    cols = range(W1.shape[1]) if max_columns is None else range(min(max_columns, W1.shape[1]))
    best = 0.0
    for k in cols:
        Q = build_Q(W1[:, k], A1)
        for z in (1.0, -1.0):
            best = max(best, sdp_certificate(z * Q, **sdp_kw)[1])
    return best


def margin_indicators(margins: np.ndarray, epsilon: float, certificate: float) -> np.ndarray:
    """E_i = 1[margin_i - (eps / 2) * certificate <= 0]."""
    return (np.asarray(margins) - 0.5 * epsilon * certificate <= 0).astype(np.float64)


def model_bound_inputs(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    gamma: float,
    epsilon: float = 8 / 255,
    delta_prob: float = 0.05,
    max_columns: int | None = None,
) -> Theorem2Inputs:
    """Measure the bound's norm budgets on the first attention block of ``model``."""
    _, A1, W1 = attention_matrices(model)
    cert = certificate_value(A1, W1, max_columns=max_columns, restarts=2, iters=500)
    E = margin_indicators(logit_margins(model, x, y), epsilon, cert)
    return Theorem2Inputs(
        s1=spectral_norm(A1),
        s2=spectral_norm(W1),
        b1=float(np.abs(A1).sum()),
        b2=float(np.abs(W1).sum()),
        gamma=gamma,
        n=len(x),
        d_max=max(A1.shape + W1.shape),
        X_fro=float(np.linalg.norm(np.asarray(x).reshape(len(x), -1))),
        delta_prob=delta_prob,
        E_mean=float(E.mean()),
        epsilon=epsilon,
    )
