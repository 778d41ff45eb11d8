"""Independent reference computations used by the tests.

None of these share code with the package beyond numpy/scipy/mpmath.
"""

import itertools

import mpmath
import numpy as np


def kkt_check(y, x, e, beta, gamma, theta):
    """Stationarity of the joint problem from the raw (unpartialled) residual.

    Returns the largest violation: active ``|2 e_j'r - theta sign|``,
    inactive ``max(|2 e_j'r| - theta, 0)`` and free-block ``|2 x_j'r|``.
    """
    y = np.asarray(y, float)
    x = np.asarray(x, float).reshape(y.size, -1)
    e = np.asarray(e, float).reshape(y.size, -1)
    r = y - x @ beta - e @ gamma
    g = 2.0 * e.T @ r
    act = gamma != 0
    v = [0.0]
    if act.any():
        v.append(np.max(np.abs(g[act] - theta * np.sign(gamma[act]))))
    if (~act).any():
        v.append(np.max(np.maximum(np.abs(g[~act]) - theta, 0.0)))
    if x.shape[1]:
        v.append(np.max(np.abs(2.0 * x.T @ r)))
    return float(max(v))


def joint_objective(y, x, e, beta, gamma, theta):
    r = y - x @ beta - e @ gamma
    return float(r @ r + theta * np.abs(gamma).sum())


def sign_pattern_oracle(y, x, e, theta):
    """Exact minimizer by enumerating all 3^p sign patterns.

    For each pattern the stationarity equations of the joint problem are a
    linear system; a solution whose signs match the pattern and whose
    inactive gradients are within ``theta`` is a global minimizer.
    Returns ``(objective, beta, gamma)`` of the best feasible pattern.
    """
    n, k = x.shape
    p = e.shape[1]
    best = None
    for pattern in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(pattern, dtype=float)
        act = np.flatnonzero(s)
        g = np.column_stack([x, e[:, act]])
        rhs = g.T @ y
        rhs[k:] -= theta * s[act] / 2.0
        gram = g.T @ g
        if gram.size and np.linalg.matrix_rank(gram) < gram.shape[0]:
            continue
        sol = np.linalg.solve(gram, rhs) if gram.size else np.zeros(0)
        beta, ga = sol[:k], sol[k:]
        if np.any(np.sign(ga) != s[act]):
            continue
        gamma = np.zeros(p)
        gamma[act] = ga
        r = y - x @ beta - e @ gamma
        inact = np.setdiff1d(np.arange(p), act)
        if inact.size and np.max(np.abs(2.0 * e[:, inact].T @ r)) > theta * (1 + 1e-9):
            continue
        obj = joint_objective(y, x, e, beta, gamma, theta)
        if best is None or obj < best[0]:
            best = (obj, beta, gamma)
    return best


def normal_equations_ols(g, y):
    """Coefficients, plain and HC1 standard errors via explicit inverses."""
    g = np.asarray(g, float)
    n, p = g.shape
    inv = np.linalg.inv(g.T @ g)
    b = inv @ (g.T @ y)
    r = y - g @ b
    s2 = (r @ r) / (n - p)
    plain = np.sqrt(np.diag(inv) * s2)
    meat = g.T @ np.diag(r**2) @ g
    hc1 = np.sqrt(np.diag(inv @ meat @ inv) * n / (n - p))
    return b, plain, hc1


def chun_count_mp(m, n_pos, dps=50):
    """The Chun et al. eigenvector-count rule in high precision."""
    with mpmath.workdps(dps):
        m = mpmath.mpf(m)
        a = (m + mpmath.mpf("0.6")) ** mpmath.mpf("0.1742")
        expo = mpmath.mpf("2.1480") - mpmath.mpf("6.1808") * a / mpmath.power(n_pos, mpmath.mpf("0.1298")) \
            + mpmath.mpf("3.3534") / a
        return n_pos / (1 + mpmath.exp(expo))
