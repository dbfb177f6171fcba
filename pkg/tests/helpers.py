"""Independent oracles shared by the test modules."""

import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of the scalar function ``f()`` w.r.t. each array,
    perturbing the arrays in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            fp = f()
            arr[i] = orig - step
            fm = f()
            arr[i] = orig
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest |a - n| / max(|a|, |n|, floor) across entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def brute_knn(ref, queries, k):
    """O(N^2) neighbours sorted by (distance, index)."""
    out = []
    for q in queries:
        d = [(float(np.sum((np.asarray(p, float) - q) ** 2)), j) for j, p in enumerate(ref)]
        d.sort()
        out.append([j for _, j in d[:k]])
    return np.array(out, dtype=np.int64)


def brute_nn_dist(a, b):
    """Per-point Euclidean distance from each row of a to its nearest row of b."""
    out = []
    for p in a:
        out.append(min(float(np.sqrt(np.sum((p - q) ** 2))) for q in b))
    return np.array(out)


def model_gradcheck(max_entries=32, step=1e-5, seed=0, floor=1e-5):
    """Per-parameter max relative error between the backward pass of the full
    training objective and central differences.

    Checks up to ``max_entries`` seeded entries of each parameter tensor plus
    one directional derivative along a random direction spanning the whole
    tensor. Noise draws and input plans are fixed so the loss is a
    deterministic function of the weights.
    """
    from proxytr import tensor as T
    from proxytr.config import model_preset, train_preset
    from proxytr.model import CompletionModel
    from proxytr.training import objective

    model = CompletionModel(model_preset("gradcheck"), seed=seed)
    tcfg = train_preset("gradcheck")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 12, 3))
    g = rng.normal(size=(1, 40, 3))
    plan = model.prepare(x)

    def loss():
        result = model(x, g, rng=np.random.default_rng(seed + 1), plan=plan)
        return objective(model, result, g, tcfg)[0]

    model.zero_grad()
    loss().backward()

    def value():
        with T.no_grad():
            return float(loss().data)

    errors = {}
    pick = np.random.default_rng(seed + 2)
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(pick.choice(flat.size, max_entries, replace=False))
        numeric = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * step))
        err = max_rel_error(grad[idx], np.array(numeric), floor)
        direction = pick.normal(size=flat.size)
        direction /= np.linalg.norm(direction)
        orig = flat.copy()
        flat[:] = orig + step * direction
        fp = value()
        flat[:] = orig - step * direction
        fm = value()
        flat[:] = orig
        err = max(err, max_rel_error(grad @ direction, (fp - fm) / (2 * step), floor))
        errors[name] = err
    return errors
