"""Independent oracles the tests check the package against.

Everything here is implemented from first principles (normal equations,
textbook Newton, dense-grid quadrature, closed-form Gaussian marginals) and
never calls into the package's own numerical paths.
"""

import numpy as np
from scipy import optimize


def ols_normal_equations(X, y):
    return np.linalg.solve(X.T @ X, X.T @ y)


def newton_logistic(X, y, tol=1e-12, max_iter=200):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        grad = X.T @ (y - p)
        H = -(X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(-H, grad)
        beta = beta + step
        if np.max(np.abs(grad)) < tol:
            break
    return beta


def fd_gradient(f, x, h=None):
    x = np.asarray(x, dtype=float)
    h = h if h is not None else 3e-6 * np.maximum(1.0, np.abs(x))
    g = np.zeros_like(x)
    for j in range(len(x)):
        hi, lo = x.copy(), x.copy()
        hi[j] += h[j]
        lo[j] -= h[j]
        g[j] = (f(hi) - f(lo)) / (2 * h[j])
    return g


def fd_hessian(f, x, h=None):
    x = np.asarray(x, dtype=float)
    h = h if h is not None else 2e-4 * np.maximum(1.0, np.abs(x))
    n = len(x)
    H = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        for j in range(i, n):
            xpp, xpm, xmp, xmm = (x.copy() for _ in range(4))
            xpp[i] += h[i]; xpp[j] += h[j]
            xpm[i] += h[i]; xpm[j] -= h[j]
            xmp[i] -= h[i]; xmp[j] += h[j]
            xmm[i] -= h[i]; xmm[j] -= h[j]
            H[i, j] = H[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4 * h[i] * h[j])
    return H


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / denom


# ---------------------------------------------------------------------------
# Closed-form Gaussian observed-data log likelihood for the replication
# design with a linear outcome: (Y, X*1[, X*2]) | Z is multivariate normal.

def mvn_replication_loglik(params, y, x1, x2, Z):
    """params: dict with alpha, beta_x, beta_z (vector), sigma2_y, sigma2_u,
    gamma0, gamma_z (vector), sigma2_x. x2 may contain NaN for r=0 rows."""
    alpha, bx = params["alpha"], params["beta_x"]
    bz = np.atleast_1d(params["beta_z"])
    s2y, s2u, s2x = params["sigma2_y"], params["sigma2_u"], params["sigma2_x"]
    g0 = params["gamma0"]
    gz = np.atleast_1d(params["gamma_z"])
    mz = g0 + Z @ gz
    mu_y = alpha + bx * mz + Z @ bz
    have2 = ~np.isnan(x2)
    total = 0.0
    for pattern, mask in (("both", have2), ("one", ~have2)):
        if not mask.any():
            continue
        ry = y[mask] - mu_y[mask]
        r1 = x1[mask] - mz[mask]
        if pattern == "both":
            r2 = x2[mask] - mz[mask]
            R = np.column_stack([ry, r1, r2])
            cov = np.array([
                [bx**2 * s2x + s2y, bx * s2x, bx * s2x],
                [bx * s2x, s2x + s2u, s2x],
                [bx * s2x, s2x, s2x + s2u],
            ])
        else:
            R = np.column_stack([ry, r1])
            cov = np.array([
                [bx**2 * s2x + s2y, bx * s2x],
                [bx * s2x, s2x + s2u],
            ])
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            return -np.inf
        sol = np.linalg.solve(cov, R.T)
        quad = float(np.sum(R.T * sol))
        d = cov.shape[0]
        total += -0.5 * (mask.sum() * (d * np.log(2 * np.pi) + logdet) + quad)
    return total


def maximize_mvn_replication(y, x1, x2, Z, start):
    """Maximize the closed-form likelihood over the same free parameters the
    package optimizes (variances on the log scale)."""
    q = Z.shape[1]

    def unpack(v):
        return {
            "alpha": v[0], "beta_x": v[1], "beta_z": v[2:2 + q],
            "sigma2_y": np.exp(v[2 + q]), "sigma2_u": np.exp(v[3 + q]),
            "gamma0": v[4 + q], "gamma_z": v[5 + q:5 + 2 * q],
            "sigma2_x": np.exp(v[5 + 2 * q]),
        }

    def neg(v):
        return -mvn_replication_loglik(unpack(v), y, x1, x2, Z)

    res = optimize.minimize(neg, start, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 40000,
                                     "maxfev": 40000})
    res = optimize.minimize(neg, res.x, method="Nelder-Mead",
                            options={"xatol": 1e-11, "fatol": 1e-13, "maxiter": 40000,
                                     "maxfev": 40000})
    return -res.fun, unpack(res.x)


def grid_logpdf_moments(grid, logpdf):
    """Mean/variance of a density known up to a constant on a fine grid."""
    w = np.exp(logpdf - logpdf.max())
    w /= np.trapezoid(w, grid)
    mean = np.trapezoid(grid * w, grid)
    var = np.trapezoid((grid - mean) ** 2 * w, grid)
    return mean, var


def ks_distance(samples, grid, logpdf):
    """KS distance between an empirical sample and a grid-normalized density."""
    w = np.exp(logpdf - logpdf.max())
    cdf = np.cumsum((w[1:] + w[:-1]) * 0.5 * np.diff(grid))
    cdf = np.concatenate([[0.0], cdf])
    cdf /= cdf[-1]
    samples = np.sort(np.asarray(samples))
    target = np.interp(samples, grid, cdf)
    n = len(samples)
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    return float(max(np.max(np.abs(emp_hi - target)), np.max(np.abs(emp_lo - target))))
