"""Reference long-only allocators.

Every allocator returns simplex weights (non-negative, summing to one).
Hierarchical methods work on the correlation distance sqrt((1 - rho) / 2)
with single linkage. Assets are put into a canonical order (by variance)
before clustering so that permuting the input columns only permutes the
output weights.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage, to_tree
from scipy.spatial.distance import squareform

from .errors import (
    DegenerateCorrelation,
    InvalidParameter,
    NonPositiveMSE,
    SolverFailed,
    ZeroVolColumn,
)
from .market_data import ReturnsMatrix

SHRINK = 1e-6


@dataclass
class AllocatorResult:
    weights: np.ndarray
    method_name: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method_name, "weights": [float(w) for w in self.weights],
                "diagnostics": self.diagnostics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _values(returns) -> np.ndarray:
    x = returns.values if isinstance(returns, ReturnsMatrix) else np.asarray(returns, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1 or x.shape[0] < 2:
        raise InvalidParameter("returns must be an N x M matrix with N >= 2, M >= 1")
    return x


def _normalise(w) -> np.ndarray:
    w = np.clip(np.asarray(w, dtype=float), 0.0, None)
    return w / w.sum()


def covariance(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Population covariance, blended with 1e-6 x its diagonal if not positive definite."""
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=0))
    try:
        np.linalg.cholesky(cov)
        return cov, False
    except np.linalg.LinAlgError:
        return cov + SHRINK * np.diag(np.diag(cov)), True


def allocate_equal(M: int) -> AllocatorResult:
    if M < 1:
        raise InvalidParameter("M must be >= 1")
    return AllocatorResult(np.full(M, 1.0 / M), "equal")


def allocate_mse_weighted(test_mse) -> AllocatorResult:
    mse = np.asarray(test_mse, dtype=float)
    if mse.size < 1 or not np.all(mse > 0) or not np.all(np.isfinite(mse)):
        raise NonPositiveMSE("every MSE must be positive and finite")
    inv = 1.0 / mse
    return AllocatorResult(inv / inv.sum(), "mse_weighted")


def allocate_inverse_vol(returns) -> AllocatorResult:
    x = _values(returns)
    sigma = x.std(axis=0)
    if np.any(sigma <= 0):
        raise ZeroVolColumn(f"zero-volatility column(s): {np.flatnonzero(sigma <= 0).tolist()}")
    inv = 1.0 / sigma
    return AllocatorResult(inv / inv.sum(), "inverse_vol")


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _div_ratio(w, sigma, cov) -> float:
    return float(w @ sigma) / math.sqrt(float(w @ cov @ w))


def allocate_max_div(returns, tol: float = 1e-10, patience: int = 50,
                     max_iter: int = 100_000) -> AllocatorResult:
    """Maximise (w . sigma) / sqrt(w' Sigma w) over the simplex.

    Projected gradient ascent with backtracking, stopped once the ratio has
    improved by less than ``tol`` for ``patience`` consecutive iterations.
    The support found is then polished with the closed-form optimum
    w ~ Sigma_S^-1 sigma_S when that point satisfies the KKT conditions.
    """
    x = _values(returns)
    m = x.shape[1]
    if m == 1:
        return AllocatorResult(np.ones(1), "max_div", {"iterations": 0})
    cov, shrunk = covariance(x)
    sigma = np.sqrt(np.diag(cov))
    if np.any(sigma <= 0):
        raise ZeroVolColumn("zero-volatility column")
    # scale-free problem: work in units of the largest volatility
    s = sigma.max()
    sigma, cov = sigma / s, cov / (s * s)

    w = (1.0 / sigma) / np.sum(1.0 / sigma)
    ratio = _div_ratio(w, sigma, cov)
    step, quiet = 1.0, 0
    for it in range(1, max_iter + 1):
        var = float(w @ cov @ w)
        sd = math.sqrt(var)
        grad = sigma / sd - float(w @ sigma) * (cov @ w) / (var * sd)
        while True:
            cand = project_simplex(w + step * grad)
            new = _div_ratio(cand, sigma, cov)
            if new >= ratio or step < 1e-16:
                break
            step *= 0.5
        gain = new - ratio
        if new >= ratio:
            w, ratio = cand, new
        quiet = quiet + 1 if gain < tol else 0
        step = min(step * 2.0, 1e3)
        if quiet >= patience:
            break
    else:
        raise SolverFailed(f"max-diversification did not converge in {max_iter} iterations")

    polished = False
    support = np.flatnonzero(w > 1e-8)
    try:
        ws = np.linalg.solve(cov[np.ix_(support, support)], sigma[support])
        if np.all(ws > 0):
            cand = np.zeros(m)
            cand[support] = ws / ws.sum()
            var = float(cand @ cov @ cand)
            sd = math.sqrt(var)
            grad = sigma / sd - float(cand @ sigma) * (cov @ cand) / (var * sd)
            # KKT: no excluded asset may have a larger gradient than the support
            if np.all(grad <= grad[support].max() + 1e-9) and _div_ratio(cand, sigma, cov) >= ratio - 1e-12:
                w, ratio, polished = cand, _div_ratio(cand, sigma, cov), True
    except np.linalg.LinAlgError:
        pass
    return AllocatorResult(_normalise(w), "max_div",
                           {"iterations": it, "ratio": ratio, "polished": polished, "shrunk": shrunk})


def _prepare_hierarchy(x: np.ndarray):
    cov, shrunk = covariance(x)
    var = np.diag(cov)
    if np.any(var <= 0):
        raise DegenerateCorrelation("zero-variance column")
    sd = np.sqrt(var)
    corr = np.clip(cov / np.outer(sd, sd), -1.0, 1.0)
    if not np.all(np.isfinite(corr)):
        raise DegenerateCorrelation("correlation matrix is not finite")
    # canonical order: ascending variance, then mean correlation, then column
    order = np.lexsort((np.arange(var.size), corr.mean(axis=1), var))
    cov = cov[np.ix_(order, order)]
    corr = corr[np.ix_(order, order)]
    dist = np.sqrt(np.clip((1.0 - corr) / 2.0, 0.0, None))
    np.fill_diagonal(dist, 0.0)
    link = linkage(squareform(dist, checks=False), method="single")
    return cov, dist, link, order, shrunk


def _ivp(cov: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.diag(cov)
    return inv / inv.sum()


def _cluster_var(cov: np.ndarray, items) -> float:
    sub = cov[np.ix_(items, items)]
    w = _ivp(sub)
    return float(w @ sub @ w)


def _unpermute(w_sorted: np.ndarray, order: np.ndarray) -> np.ndarray:
    w = np.empty_like(w_sorted)
    w[order] = w_sorted
    return w


def allocate_hrp(returns) -> AllocatorResult:
    """Single-linkage tree, quasi-diagonal ordering, recursive bisection."""
    x = _values(returns)
    m = x.shape[1]
    if m < 2:
        raise InvalidParameter("HRP needs at least two assets")
    cov, _, link, order, shrunk = _prepare_hierarchy(x)
    leaves = to_tree(link).pre_order()
    w = np.ones(m)
    clusters = [leaves]
    while clusters:
        nxt = []
        for c in clusters:
            if len(c) < 2:
                continue
            half = len(c) // 2
            left, right = c[:half], c[half:]
            vl, vr = _cluster_var(cov, left), _cluster_var(cov, right)
            alpha = 1.0 - vl / (vl + vr)
            w[left] *= alpha
            w[right] *= 1.0 - alpha
            nxt += [left, right]
        clusters = nxt
    return AllocatorResult(_normalise(_unpermute(w, order)), "hrp", {"leaf_order": leaves, "shrunk": shrunk})


def _dispersion(dist: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if idx.size > 1:
            total += dist[np.ix_(idx, idx)].sum() / (2.0 * idx.size)
    return total


def gap_statistic_k(points: np.ndarray, k_max: int, n_refs: int = 20, seed: int = 0) -> int:
    """Number of clusters by the gap statistic (smallest k with gap(k) >= gap(k+1) - s(k+1)).

    Points are clustered with single linkage on Euclidean distance; the
    reference distribution is uniform over the points' bounding box.
    """
    n = points.shape[0]
    k_max = max(1, min(k_max, n))
    if k_max == 1:
        return 1

    def log_w(pts):
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        link = linkage(squareform(d, checks=False), method="single")
        out = []
        for k in range(1, k_max + 1):
            labels = fcluster(link, k, criterion="maxclust")
            out.append(math.log(max(_dispersion(d, labels), 1e-300)))
        return np.array(out)

    observed = log_w(points)
    rng = np.random.default_rng(seed)
    lo, hi = points.min(axis=0), points.max(axis=0)
    refs = np.array([log_w(rng.uniform(lo, hi, points.shape)) for _ in range(n_refs)])
    gap = refs.mean(axis=0) - observed
    s = refs.std(axis=0) * math.sqrt(1.0 + 1.0 / n_refs)
    for k in range(1, k_max):
        if gap[k - 1] >= gap[k] - s[k]:
            return k
    return k_max


def allocate_herc(returns, n_refs: int = 20) -> AllocatorResult:
    """Hierarchical equal risk contribution.

    The cluster count comes from the gap statistic (capped at ceil(sqrt(M))).
    Walking the tree top-down, each split divides weight between its two
    children in inverse proportion to their inverse-variance-portfolio
    variance; inside each final cluster weights are inverse variance.
    """
    x = _values(returns)
    m = x.shape[1]
    if m < 2:
        raise InvalidParameter("HERC needs at least two assets")
    cov, dist, link, order, shrunk = _prepare_hierarchy(x)
    k = gap_statistic_k(dist, math.ceil(math.sqrt(m)), n_refs=n_refs)
    labels = fcluster(link, k, criterion="maxclust")
    k_found = len(np.unique(labels))

    w = np.zeros(m)

    def allocate(node, budget):
        ids = node.pre_order()
        if len(np.unique(labels[ids])) == 1 or node.is_leaf():
            w[ids] = budget * _ivp(cov[np.ix_(ids, ids)])
            return
        left, right = node.get_left(), node.get_right()
        vl = _cluster_var(cov, left.pre_order())
        vr = _cluster_var(cov, right.pre_order())
        alpha = 1.0 - vl / (vl + vr)
        allocate(left, budget * alpha)
        allocate(right, budget * (1.0 - alpha))

    allocate(to_tree(link), 1.0)
    return AllocatorResult(_normalise(_unpermute(w, order)), "herc", {"n_clusters": k_found, "shrunk": shrunk})


def cvar_contributions(x: np.ndarray, w: np.ndarray, alpha: float = 0.95):
    """Historical CVaR of the portfolio loss and its Euler decomposition.

    The tail is the worst ceil((1 - alpha) N) observations of -x.w; each
    asset's contribution is w_j times its mean loss over that tail, so the
    contributions sum to the CVaR.
    """
    loss = -(x @ w)
    n_tail = max(1, math.ceil((1.0 - alpha) * x.shape[0] - 1e-9))
    tail = np.argsort(-loss, kind="stable")[:n_tail]
    contrib = w * (-x[tail]).mean(axis=0)
    return float(contrib.sum()), contrib


# tight interior-point tolerances: the optimum sits on a kink of the
# piecewise-linear CVaR, so default accuracy leaves visible contribution gaps
_CLARABEL_OPTS = {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12, "tol_feas": 1e-12,
                  "tol_ktratio": 1e-10, "max_iter": 500}


def _cvar_rp_convex(x: np.ndarray, alpha: float):
    """Risk-parity point of historical CVaR via its convex log-barrier program.

    Minimises CVaR(y) - (1/M) sum log y_j with CVaR in Rockafellar-Uryasev
    form; at the optimum y_j g_j = 1/M for a CVaR subgradient g. The duals
    of the tail constraints give that subgradient as tail weights in [0, 1]
    (fractional only for observations tied at the VaR).
    """
    import cvxpy as cp  # slow to import; only this allocator needs it

    n, m = x.shape
    n_tail = max(1, math.ceil((1.0 - alpha) * n - 1e-9))
    scale = float(x.std())
    xs = x / scale
    y = cp.Variable(m, pos=True)
    t = cp.Variable()
    u = cp.Variable(n, nonneg=True)
    tail = u >= -xs @ y - t
    prob = cp.Problem(cp.Minimize(t + cp.sum(u) / n_tail - cp.sum(cp.log(y)) / m), [tail])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            prob.solve(solver=cp.CLARABEL, **_CLARABEL_OPTS)
        except cp.SolverError:
            return None
    # the result is verified by the caller, so "inaccurate" is acceptable here
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or y.value is None:
        return None
    return np.asarray(y.value, dtype=float), np.asarray(tail.dual_value, dtype=float) * n_tail


def tail_weights(loss: np.ndarray, n_tail: int, hint=None, rel_tol: float = 1e-6) -> np.ndarray:
    """A valid historical tail of size ``n_tail`` for the given losses.

    Observations strictly beyond the VaR weigh 1, those below weigh 0. The
    remaining mass is spread over observations tied at the VaR (within
    ``rel_tol``), in proportion to ``hint`` when given.
    """
    var = np.sort(loss)[::-1][n_tail - 1]
    tol = rel_tol * max(float(np.max(np.abs(loss))), 1e-300)
    above = loss > var + tol
    tied = np.abs(loss - var) <= tol
    w = above.astype(float)
    rest = n_tail - int(above.sum())
    h = np.clip(hint[tied], 0.0, None) if hint is not None else np.ones(int(tied.sum()))
    if h.sum() <= 0:
        h = np.ones(int(tied.sum()))
    w[tied] = np.minimum(rest * h / h.sum(), 1.0)
    w[tied] *= rest / w[tied].sum()
    return w


def cvar_rp_contributions(x: np.ndarray, w: np.ndarray, tail_w: np.ndarray):
    """Contributions w_j * (tail-weighted mean loss of asset j)."""
    return w * (tail_w @ -x) / tail_w.sum()


def allocate_cvar_rp(returns, alpha: float = 0.95, tol: float = 1e-4,
                     max_iter: int = 5000) -> AllocatorResult:
    """Equal historical-CVaR risk contributions.

    The historical CVaR is piecewise linear in the weights, so simple
    multiplicative rescaling w_j <- w_j (target / c_j)^0.5 tends to cycle
    between tail sets. The equal-contribution point is found from the convex
    program instead and then pinned to the exact kink by a small Newton
    solve; multiplicative updates are the fallback when that fails or the
    tail carries no loss. ``diagnostics['gap']`` is the largest relative
    deviation of a contribution from CVaR / M, measured on a tail rebuilt
    from the portfolio losses.
    """
    x = _values(returns)
    m = x.shape[1]
    if not 0.0 < alpha < 1.0:
        raise InvalidParameter("alpha must lie in (0, 1)")
    if m == 1:
        return AllocatorResult(np.ones(1), "cvar_rp", {"converged": True, "iterations": 0, "gap": 0.0})
    sigma = x.std(axis=0)
    if np.any(sigma <= 0):
        raise ZeroVolColumn("zero-volatility column")

    solved = _cvar_rp_convex(x, alpha)
    if solved is not None:
        y, dual_w = solved
        w, gap, cvar = _polish(x, y / y.sum(), dual_w, alpha)
        if gap < tol:
            return AllocatorResult(_normalise(w), "cvar_rp", {
                "converged": True, "method": "convex", "gap": gap, "alpha": alpha,
                "cvar": cvar, "iterations": 0})
    return _cvar_rp_multiplicative(x, alpha, tol, max_iter)


def _contribution_gap(x, w, tw):
    contrib = cvar_rp_contributions(x, w, tw)
    cvar = float(contrib.sum())
    if cvar <= 0:
        return math.inf, cvar
    m = x.shape[1]
    return float(np.max(np.abs(contrib - cvar / m)) / (cvar / m)), cvar


def _kink_newton(x, w, hint, n_tail, iters: int = 30):
    """Newton solve for the exact equal-contribution point on a CVaR kink.

    Unknowns are the weights and the fractional tail weights of the
    observations tied at the VaR. Equations: weights sum to one, tied
    losses are equal, tail mass is n_tail, contributions are equal.
    Returns (w, tail weights) or None when the tie pattern is not valid.
    """
    loss = -(x @ w)
    var = np.sort(loss)[::-1][n_tail - 1]
    tol = 1e-6 * float(np.max(np.abs(loss)))
    above = loss > var + tol
    tied = np.flatnonzero(np.abs(loss - var) <= tol)
    lx = -x
    g_above = lx[above].sum(axis=0)
    lt = lx[tied]
    m, p = x.shape[1], tied.size
    t = tail_weights(loss, n_tail, hint)[tied]
    z = np.concatenate([w, t])
    for _ in range(iters):
        w, t = z[:m], z[m:]
        g = g_above + t @ lt
        c = w * g / n_tail
        f = np.concatenate([[w.sum() - 1.0], (lt[1:] - lt[0]) @ w, [t.sum() - (n_tail - above.sum())],
                            c[:-1] - c[1:]])
        jac = np.zeros((m + p, m + p))
        jac[0, :m] = 1.0
        jac[1:p, :m] = lt[1:] - lt[0]
        jac[p, m:] = 1.0
        dc = np.zeros((m, m + p))
        dc[np.arange(m), np.arange(m)] = g / n_tail
        dc[:, m:] = (w[:, None] * lt.T) / n_tail
        jac[p + 1:] = dc[:-1] - dc[1:]
        step = np.linalg.lstsq(jac, -f, rcond=None)[0]
        z = z + step
        if np.max(np.abs(step)) < 1e-15:
            break
    w, t = z[:m], z[m:]
    if np.any(w < -1e-12) or np.any(t < -1e-9) or np.any(t > 1 + 1e-9):
        return None
    w = np.clip(w, 0.0, None)
    loss = -(x @ w)
    level = loss[tied].mean()
    rest = np.ones(loss.size, bool)
    rest[tied] = False
    # strictly-beyond and below sets must keep their side of the VaR
    if np.any(loss[above] <= level) or np.any(loss[rest & ~above] >= level):
        return None
    tw = above.astype(float)
    tw[tied] = np.clip(t, 0.0, 1.0)
    return w / w.sum(), tw


def _polish(x, w, hint, alpha, rounds: int = 3):
    """Refine the solver point and score candidates on a strictly valid tail.

    The kink Newton solve usually lands exactly; fixed-tail rescaling
    (w_j ~ 1 / g_j) covers tails without ties. Returns (w, gap, cvar).
    """
    n_tail = max(1, math.ceil((1.0 - alpha) * x.shape[0] - 1e-9))
    cands = []
    try:
        kink = _kink_newton(x, w, hint, n_tail)
    except np.linalg.LinAlgError:
        kink = None
    if kink is not None:
        cands.append(kink)
    for _ in range(rounds + 1):
        tw = tail_weights(-(x @ w), n_tail, hint, rel_tol=1e-9)
        cands.append((w, tw))
        g = tw @ -x
        if np.any(g <= 0):
            break
        w, hint = (1.0 / g) / np.sum(1.0 / g), tw
    best = (cands[0][0], math.inf, math.nan)
    for cw, ctw in cands:
        # re-derive the tail from the losses; the candidate's own weights are only a tie-split hint
        tw = tail_weights(-(x @ cw), n_tail, ctw, rel_tol=1e-9)
        gap, cvar = _contribution_gap(x, cw, tw)
        if gap < best[1]:
            best = (cw, gap, cvar)
    return best


def _cvar_rp_multiplicative(x, alpha, tol, max_iter) -> AllocatorResult:
    m = x.shape[1]
    sigma = x.std(axis=0)
    w = (1.0 / sigma) / np.sum(1.0 / sigma)
    best_w, best_gap = w, math.inf
    converged = False
    for it in range(max_iter + 1):
        cvar, contrib = cvar_contributions(x, w, alpha)
        if cvar <= 0:
            break  # no loss in the tail: risk parity is undefined
        target = cvar / m
        gap = float(np.max(np.abs(contrib - target)) / target)
        if gap < best_gap:
            best_w, best_gap = w, gap
        if gap < tol:
            converged = True
            break
        if it == max_iter:
            break
        ratio = np.where(contrib > 0, target / np.where(contrib > 0, contrib, 1.0), 4.0)
        w = w * np.sqrt(np.clip(ratio, 0.25, 4.0))
        w = w / w.sum()
    return AllocatorResult(_normalise(best_w), "cvar_rp", {
        "converged": converged, "method": "multiplicative", "iterations": it,
        "gap": best_gap, "alpha": alpha})


ALLOCATORS = {
    "inverse_vol": allocate_inverse_vol,
    "cvar_rp": allocate_cvar_rp,
    "max_div": allocate_max_div,
    "hrp": allocate_hrp,
    "herc": allocate_herc,
}
