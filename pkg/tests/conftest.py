import numpy as np

from navkit import tensor as T


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic, numeric, atol=1e-9):
    """Worst relative deviation; differences below atol count as exact
    (central differences carry ~1e-11 roundoff noise on O(1) losses, which
    would otherwise dominate coordinates whose true gradient is zero)."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    rel = np.where(diff <= atol, 0.0, diff / denom)
    return np.max(rel)


def gradcheck(build_loss, params, h=1e-5, tol=1e-6):
    """Compare autodiff grads of build_loss(params) against finite differences.

    ``build_loss`` must rebuild the graph from the current param data on
    every call. Returns the worst relative error over all parameters.
    """
    loss = build_loss()
    T.zero_grads(params)
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f(x, p=p):
            old = p.data
            p.data = x
            out = build_loss().item()
            p.data = old
            return out

        numeric = numeric_grad(f, p.data.copy(), h=h)
        worst = max(worst, relative_error(analytic, numeric))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst
