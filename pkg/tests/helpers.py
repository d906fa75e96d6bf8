"""Finite-difference gradient oracle shared by the gradient tests."""

import numpy as np

from robustgen import autodiff as ad
from robustgen.autodiff import Tensor


def numeric_grad(f, arrays, index, h=1e-5, coords=None):
    """Central differences of scalar f(*arrays) with respect to arrays[index].

    ``coords`` restricts the check to a subset of flat positions (the rest stay NaN).
    """
    base = arrays[index]
    grad = np.full(base.size, np.nan)
    flat = base.reshape(-1)
    for i in range(base.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f(*arrays)
        flat[i] = old - h
        down = f(*arrays)
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(base.shape)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    mask = ~np.isnan(b)
    a, b = a[mask], b[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grads(build, arrays):
    """Run ``build`` on fresh leaf tensors and return their gradients."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(build(*leaves), wrt=leaves)
    return [t.grad for t in leaves]


def check_gradients(build, arrays, tol=1e-4, h=1e-5):
    """Worst relative error between backward() and central differences over every input."""
    grads = analytic_grads(build, arrays)

    def scalar(*xs):
        with ad.no_grad():
            return build(*[Tensor(x) for x in xs]).item()

    worst = 0.0
    for i in range(len(arrays)):
        worst = max(worst, rel_err(grads[i], numeric_grad(scalar, [a.copy() for a in arrays], i, h)))
    assert worst <= tol, f"gradient relative error {worst:.3g} > {tol}"
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    """Random values with |v| >= margin, so kinks (relu, abs) sit outside the h-ball."""
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-300) * margin + v, v)


def primitive_cases(seed):
    """(name, build, arrays) for every primitive; build maps leaf tensors to a scalar."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, size=4)
    w = r.normal(size=(2, 3, 4))  # fixed cotangent so non-scalar ops reduce to a generic scalar

    def proj(t, shape=(2, 3, 4)):
        return ad.sum_(ad.mul(t, Tensor(np.resize(w, shape))))

    bn_mean, bn_var = np.zeros(3), np.ones(3)
    return [
        ("add", lambda a, b: proj(ad.add(a, b)), [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))]),
        ("sub", lambda a, b: proj(ad.sub(a, b)), [r.normal(size=(2, 3, 4)), r.normal(size=(1, 4))]),
        ("mul", lambda a, b: proj(ad.mul(a, b)), [r.normal(size=(2, 3, 4)), r.normal(size=(2, 1, 4))]),
        ("div", lambda a, b: proj(ad.div(a, b)), [r.normal(size=(2, 3, 4)), r.uniform(1.0, 2.0, size=(4,))]),
        ("exp", lambda a: proj(ad.exp(a)), [r.normal(size=(2, 3, 4))]),
        ("log", lambda a: proj(ad.log(a)), [r.uniform(0.5, 2.0, size=(2, 3, 4))]),
        ("square", lambda a: proj(ad.square(a)), [r.normal(size=(2, 3, 4))]),
        ("abs", lambda a: proj(ad.abs_(a)), [_away_from_zero(r, (2, 3, 4))]),
        ("relu", lambda a: proj(ad.relu(a)), [_away_from_zero(r, (2, 3, 4))]),
        ("gelu", lambda a: proj(ad.gelu(a)), [r.normal(size=(2, 3, 4))]),
        ("sum_axis", lambda a: ad.sum_(ad.mul(ad.sum_(a, axis=1), Tensor(w[:, 0, :]))), [r.normal(size=(2, 3, 4))]),
        ("mean_keepdims", lambda a: proj(ad.mul(a, ad.mean(a, axis=(0, 2), keepdims=True))), [r.normal(size=(2, 3, 4))]),
        ("reshape", lambda a: proj(ad.reshape(a, (2, 3, 4))), [r.normal(size=(6, 4))]),
        ("transpose", lambda a: proj(ad.transpose(a, (1, 0, 2))), [r.normal(size=(3, 2, 4))]),
        ("matmul", lambda a, b: proj(ad.matmul(a, b)), [r.normal(size=(2, 3, 5)), r.normal(size=(5, 4))]),
        ("conv2d", lambda x, k: ad.sum_(ad.square(ad.conv2d(x, k, stride=1, padding=1))), [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3))]),
        ("conv2d_stride2", lambda x, k: ad.sum_(ad.square(ad.conv2d(x, k, stride=2, padding=1))), [r.normal(size=(1, 2, 6, 6)), r.normal(size=(2, 2, 3, 3))]),
        ("softmax", lambda a: proj(ad.softmax(a, axis=-1)), [r.normal(size=(2, 3, 4))]),
        ("log_softmax", lambda a: proj(ad.log_softmax(a, axis=1)), [r.normal(size=(2, 3, 4))]),
        ("cross_entropy", lambda a: ad.cross_entropy(a, labels), [r.normal(size=(4, 3))]),
        ("cross_entropy_sum", lambda a: ad.cross_entropy(a, labels, reduction="sum"), [r.normal(size=(4, 3))]),
        ("kl_divergence", lambda p, q: ad.kl_divergence(p, q), [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
        ("layer_norm", lambda x, s, b: proj(ad.layer_norm(x, s, b)), [r.normal(size=(2, 3, 4)), r.normal(size=(4,)), r.normal(size=(4,))]),
        (
            "batch_norm_train",
            lambda x, s, b: proj(ad.batch_norm(x, s, b, bn_mean.copy(), bn_var.copy(), training=True), (2, 3, 2, 2)),
            [r.normal(size=(2, 3, 2, 2)), r.normal(size=(3,)), r.normal(size=(3,))],
        ),
        (
            "batch_norm_eval",
            lambda x, s, b: proj(ad.batch_norm(x, s, b, bn_mean + 0.3, bn_var * 2.0, training=False), (2, 3, 2, 2)),
            [r.normal(size=(2, 3, 2, 2)), r.normal(size=(3,)), r.normal(size=(3,))],
        ),
    ]


TINY_SPECS = {
    "CNN": dict(family="CNN", widths=[2, 3], input_shape=(3, 8, 8), num_classes=3, blocks=1, activation="gelu"),
    "ViT": dict(family="ViT", widths=[4, 4], patch_size=4, heads=2, input_shape=(3, 8, 8), num_classes=3, activation="gelu"),
    "Hybrid": dict(family="Hybrid", stages="CTTT", widths=[2, 4, 4, 4], heads=2, input_shape=(3, 16, 16), num_classes=3, blocks=1, activation="gelu"),
}


def model_gradient_error(family, seed, per_tensor=3, h=1e-5):
    """Relative error of backward() vs central differences on a random subset of every parameter and the input."""
    from robustgen.models import ModelSpec, build_model

    spec = ModelSpec(**TINY_SPECS[family])
    model = build_model(spec, seed).train()
    r = np.random.default_rng([seed, 99])
    for p in model.params.values():  # move off the symmetric init so every path carries signal
        p.data = p.data + 0.1 * r.normal(size=p.shape)
    x = r.uniform(size=(2,) + spec.input_shape)
    y = r.integers(0, spec.num_classes, size=2)

    xt = Tensor(x.copy(), requires_grad=True)
    ad.backward(ad.cross_entropy(model(xt), y), wrt=[xt, *model.params.values()])
    targets = [("input", xt.data, xt.grad)] + [(k, p.data, p.grad) for k, p in model.params.items()]

    def loss():
        with ad.no_grad():
            return ad.cross_entropy(model(Tensor(x)), y).item()

    got, want = [], []
    for name, data, grad in targets:
        flat = x.reshape(-1) if name == "input" else data.reshape(-1)
        for i in r.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            got.append(grad.reshape(-1)[i])
            want.append((up - down) / (2 * h))
    return rel_err(got, want)


def projection_oracle(v, norm, eps):
    """Euclidean projection onto the l_p ball by a generic constrained solver (no sorting, no closed form)."""
    from scipy.optimize import minimize

    v = np.asarray(v, dtype=float)
    n = v.size
    if norm == "Linf":
        res = minimize(lambda p: 0.5 * np.sum((p - v) ** 2), np.zeros(n), jac=lambda p: p - v,
                       bounds=[(-eps, eps)] * n, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
        return res.x
    if norm == "L2":
        cons = {"type": "ineq", "fun": lambda p: eps**2 - p @ p, "jac": lambda p: -2 * p}
        res = minimize(lambda p: 0.5 * np.sum((p - v) ** 2), np.zeros(n), jac=lambda p: p - v,
                       constraints=[cons], method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
        return res.x
    # l1 as a smooth QP over p = u - w with u, w >= 0 and sum(u + w) <= eps
    def f(z):
        p = z[:n] - z[n:]
        return 0.5 * np.sum((p - v) ** 2)

    def g(z):
        r = z[:n] - z[n:] - v
        return np.concatenate([r, -r])

    cons = {"type": "ineq", "fun": lambda z: eps - z.sum(), "jac": lambda z: -np.ones(2 * n)}
    res = minimize(f, np.zeros(2 * n), jac=g, bounds=[(0, None)] * (2 * n), constraints=[cons],
                   method="SLSQP", options={"ftol": 1e-15, "maxiter": 1000})
    return res.x[:n] - res.x[n:]


def l1_grid_projection(v, eps, points=401, rounds=4):
    """Brute-force l1 projection of a 3-vector: dense grid over the ball, refined around the best point."""
    v = np.asarray(v, dtype=float)
    center, half = np.zeros(3), eps
    best = None
    for _ in range(rounds):
        axis = np.linspace(-half, half, points)
        a, b = np.meshgrid(center[0] + axis, center[1] + axis, indexing="ij")
        # for fixed (p0, p1) the optimal p2 is v2 clamped to the remaining l1 budget
        room = eps - np.abs(a) - np.abs(b)
        ok = room >= 0
        c = np.clip(v[2], -np.where(ok, room, 0), np.where(ok, room, 0))
        cost = np.where(ok, (a - v[0]) ** 2 + (b - v[1]) ** 2 + (c - v[2]) ** 2, np.inf)
        i = np.unravel_index(np.argmin(cost), cost.shape)
        best = np.array([a[i], b[i], c[i]])
        center, half = best, half * 4 / points
    return best
