"""Independent reference implementations used as test oracles.

Everything here is deliberately written from first principles (path
enumeration, normal equations, textbook formulas) rather than reusing the
library code under test.
"""

import math

import numpy as np


def enumerated_dtw(x, y, step_pattern="symmetric2"):
    """Minimal warping cost found by enumerating every monotone path.

    A path walks the local-cost lattice from (0, 0) to (n-1, m-1) using
    steps (1, 0), (0, 1), (1, 1). The first cell always contributes
    |x[0] - y[0]| once; later cells contribute their local cost, doubled
    for diagonal steps under the symmetric2 pattern. Exponential in the
    series lengths, so keep them short.
    """
    diag = 2.0 if step_pattern == "symmetric2" else 1.0
    n, m = len(x), len(y)
    best = math.inf
    stack = [(0, 0, abs(x[0] - y[0]))]
    while stack:
        i, j, cost = stack.pop()
        if i == n - 1 and j == m - 1:
            best = min(best, cost)
            continue
        if i + 1 < n:
            stack.append((i + 1, j, cost + abs(x[i + 1] - y[j])))
        if j + 1 < m:
            stack.append((i, j + 1, cost + abs(x[i] - y[j + 1])))
        if i + 1 < n and j + 1 < m:
            stack.append((i + 1, j + 1, cost + diag * abs(x[i + 1] - y[j + 1])))
    return best


def normal_equation_ols(X, y):
    """OLS estimates and standard errors straight from the normal equations.

    Returns (beta, se, sigma2) with beta = (X'X)^{-1} X'y and
    sigma2 = RSS / (n - p). Only suitable for well-conditioned designs.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ beta
    dof = X.shape[0] - X.shape[1]
    sigma2 = float(resid @ resid) / dof
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(xtx)))
    return beta, se, sigma2


def pearson_r(x, y):
    """Plain-formula Pearson correlation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / math.sqrt((xc * xc).sum() * (yc * yc).sum()))


def simplex_qp_min(x1, X0, w, tol=1e-9):
    """Check w against the KKT conditions of min ||x1 - X0 w|| on the simplex.

    Returns the largest violation among: simplex feasibility, stationarity
    of active coordinates, and non-negativity of the reduced gradient on
    inactive ones. Zero (up to tol) certifies a global optimum because the
    objective is convex.
    """
    x1 = np.asarray(x1, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    w = np.asarray(w, dtype=float)
    feas = abs(w.sum() - 1.0)
    neg = max(0.0, float(-(w.min())))
    grad = X0.T @ (X0 @ w - x1)  # gradient of 0.5 ||x1 - X0 w||^2
    active = w > tol
    if active.any():
        mu = float(grad[active].mean())
    else:
        mu = float(grad.min())
    stat = float(np.abs(grad[active] - mu).max()) if active.any() else 0.0
    slack = float(max(0.0, (mu - grad[~active]).max())) if (~active).any() else 0.0
    return max(feas, neg, stat, slack)
