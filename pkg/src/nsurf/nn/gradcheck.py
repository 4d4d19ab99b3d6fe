from __future__ import annotations

import numpy as np


def relative_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(fn, params: dict, eps: float = 1e-4, analytic: dict | None = None,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn(params)`` returns ``(loss, grads)`` with float ``loss`` and a dict of
    gradient arrays keyed like ``params``; arrays are perturbed in place and
    restored. Pass ``max_entries`` to probe a random subset of each array
    (always including its largest-gradient entry).
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
    if analytic is None:
        _, analytic = fn(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        g = analytic.get(name)
        if g is None:
            g = np.zeros_like(p)
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries - 1, replace=False)
            idx = np.unique(np.append(idx, np.argmax(np.abs(g).reshape(-1))))
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = fn(params)[0]
            flat[i] = old - eps
            fm = fn(params)[0]
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], num)))
    return worst
