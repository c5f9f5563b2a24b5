"""Independent reference computations shared by the unit and acceptance tests."""
import math

import numpy as np
from scipy.optimize import linprog

from psem.predictor import PredictorParams, forward


def gauss_solve(a, b):
    """Gaussian elimination with partial pivoting, pure Python floats."""
    n = len(b)
    m = [list(map(float, row)) + [float(v)] for row, v in zip(a, b)]
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(m[r][c]))
        m[c], m[p] = m[p], m[c]
        for r in range(c + 1, n):
            f = m[r][c] / m[c][c]
            for k in range(c, n + 1):
                m[r][k] -= f * m[c][k]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (m[r][n] - sum(m[r][k] * x[k] for k in range(r + 1, n))) / m[r][r]
    return np.array(x)


def ridge_oracle(phi, target, lam):
    """(Phi'Phi + lam I)^-1 Phi' r from the normal equations by elimination."""
    phi = np.asarray(phi, dtype=float)
    a = (phi.T @ phi + lam * np.eye(phi.shape[1])).tolist()
    b = (phi.T @ np.asarray(target, dtype=float)).tolist()
    return gauss_solve(a, b)


def _loss(theta, kappa, L, x, y):
    return (forward(PredictorParams.from_flat(theta, kappa, L), x) - y) ** 2


def fd_gradient(p, x, y, h=1e-6, order=2):
    """Central differences of the squared loss; order 4 uses the five-point stencil."""
    theta = p.flat()
    g = np.empty_like(theta)

    def at(i, step):
        t = theta.copy()
        t[i] += step
        return _loss(t, p.kappa, p.L, x, y)

    for i in range(theta.size):
        if order == 2:
            g[i] = (at(i, h) - at(i, -h)) / (2 * h)
        else:
            g[i] = (-at(i, 2 * h) + 8 * at(i, h) - 8 * at(i, -h) + at(i, -2 * h)) / (12 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_returns(seed, n=None, m=None):
    """Daily-scale returns with a random common factor and per-asset vol."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(60, 300))
    m = m or int(rng.integers(2, 12))
    f = rng.normal(size=(n, 1))
    return 0.01 * (rng.uniform(0, 0.9) * f + rng.normal(size=(n, m))) * rng.uniform(0.5, 2, m)


def tie_aware_gap(x, w, alpha, tie_tol=1e-9):
    """Smallest CVaR contribution gap over every valid historical tail.

    The tail holds the worst ceil((1 - alpha) N) portfolio losses.
    Observations strictly beyond the VaR are fully in it; those tied at the
    VaR (relative tolerance ``tie_tol``) may enter fractionally. The best
    split is found by a small LP. Returns (gap, cvar); the CVaR does not
    depend on the split.
    """
    loss = -(x @ w)
    k = math.ceil((1 - alpha) * len(loss) - 1e-9)
    var = np.sort(loss)[::-1][k - 1]
    scale = max(float(np.max(np.abs(loss))), 1e-300)
    above = loss > var + tie_tol * scale
    tied = np.abs(loss - var) <= tie_tol * scale
    cvar = (loss[above].sum() + (k - above.sum()) * var) / k
    base = (-x[above]).sum(axis=0)
    tie = -x[tied]
    m, nt = x.shape[1], tie.shape[0]
    target = cvar / m
    c = np.r_[np.zeros(nt), 1.0]
    a_ub, b_ub = [], []
    for j in range(m):
        a_ub.append(np.r_[w[j] * tie[:, j] / k, -target])
        b_ub.append(target - w[j] * base[j] / k)
        a_ub.append(np.r_[-w[j] * tie[:, j] / k, -target])
        b_ub.append(-target + w[j] * base[j] / k)
    sol = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=[np.r_[np.ones(nt), 0.0]], b_eq=[k - above.sum()],
                  bounds=[(0, 1)] * nt + [(0, None)], method="highs")
    if sol.status != 0:
        return math.inf, cvar
    return float(sol.fun), float(cvar)
