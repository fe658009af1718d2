"""Gaussian-process Bayesian optimization of the embedding fed to a frozen forward model.

Inputs are rescaled to the unit box and objective values standardized before
the surrogate sees them.  Kernel hyperparameters come from a marginal
likelihood grid search: an isotropic sweep first, then one coordinate sweep
per length scale.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm

from .dynamics import EmbeddingBounds

log = logging.getLogger(__name__)

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
MAX_OBJECTIVE_ROWS = 50_000


class SingularKernelError(np.linalg.LinAlgError):
    """Kernel matrix not positive definite even at the largest jitter."""


def rbf_kernel(x1, x2, lengthscales, signal_var):
    d = (x1[:, None, :] - x2[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))


@dataclass
class GPConfig:
    lengthscale_grid: tuple = (0.03, 0.06, 0.12, 0.25, 0.5, 1.0, 2.0)
    signal_var_grid: tuple = (0.1, 0.3, 1.0, 3.0, 10.0)
    noise_var_grid: tuple = (1e-10, 1e-6, 1e-4, 1e-2)
    per_dimension: bool = True
    normalize: bool = True
    # when set, skip the grid and use these directly
    lengthscales: object = None
    signal_var: float = None
    noise_var: float = None


@dataclass
class GPSurrogate:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    y_mean: float
    y_scale: float
    chol: np.ndarray
    weights: np.ndarray  # (K + noise I)^-1 (y - mean) / scale
    jitter: float
    log_marginal_likelihood: float

    def predict(self, Xq, return_var=True):
        """Posterior mean and variance in the original objective units."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        Ks = rbf_kernel(Xq, self.X, self.lengthscales, self.signal_var)
        mu = Ks @ self.weights
        mean = self.y_mean + self.y_scale * mu
        if not return_var:
            return mean
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 0.0)
        return mean, var * self.y_scale ** 2


def _factor(X, yn, lengthscales, signal_var, noise_var):
    K = rbf_kernel(X, X, lengthscales, signal_var)
    n = len(X)
    for jitter in JITTERS:
        try:
            L = cholesky(K + (noise_var + jitter) * np.eye(n), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        w = cho_solve((L, True), yn, check_finite=False)
        lml = -0.5 * yn @ w - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
        return L, w, jitter, float(lml)
    raise SingularKernelError(f"kernel matrix singular for {n} points even with jitter {JITTERS[-1]}")


def gp_fit(points, values, config=None):
    """Exact GP regression with grid-searched hyperparameters."""
    config = config or GPConfig()
    X = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(values, dtype=float).ravel()
    if len(X) == 0 or len(X) != len(y):
        raise ValueError("need at least one point and one value per point")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("points and values must be finite")
    d = X.shape[1]
    if config.normalize:
        y_mean = float(y.mean())
        y_scale = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    yn = (y - y_mean) / y_scale

    def attempt(ls, sv, nv):
        try:
            return _factor(X, yn, ls, sv, nv)
        except SingularKernelError:
            return None

    if config.lengthscales is not None:
        ls = np.broadcast_to(np.asarray(config.lengthscales, dtype=float), (d,)).copy()
        sv, nv = config.signal_var, config.noise_var
        res = _factor(X, yn, ls, sv, nv)
    else:
        best = None
        for l in config.lengthscale_grid:
            for sv in config.signal_var_grid:
                for nv in config.noise_var_grid:
                    r = attempt(np.full(d, l), sv, nv)
                    if r is not None and (best is None or r[3] > best[0][3]):
                        best = (r, np.full(d, l), sv, nv)
        if best is None:
            raise SingularKernelError("no grid point gave a positive definite kernel matrix")
        if config.per_dimension and d > 1:
            for j in range(d):
                for l in config.lengthscale_grid:
                    ls = best[1].copy()
                    ls[j] = l
                    r = attempt(ls, best[2], best[3])
                    if r is not None and r[3] > best[0][3]:
                        best = (r, ls, best[2], best[3])
        res, ls, sv, nv = best
    L, w, jitter, lml = res
    return GPSurrogate(X, y, ls, float(sv), float(nv), y_mean, y_scale, L, w, jitter, lml)


def expected_improvement(surrogate, alpha, best_so_far):
    """EI for minimization; falls back to max(0, best - mu) when sigma < 1e-12."""
    mu, var = surrogate.predict(alpha)
    return ei_from_moments(mu, np.sqrt(var), best_so_far)


def ei_from_moments(mu, sigma, best):
    mu, sigma = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float))
    imp = best - mu
    ok = sigma >= 1e-12
    safe = np.where(ok, sigma, 1.0)
    z = imp / safe
    val = imp * norm.cdf(z) + safe * norm.pdf(z)
    return np.where(ok, np.maximum(val, 0.0), np.maximum(imp, 0.0))


@dataclass
class BOConfig:
    budget: int = 500  # total objective evaluations, initial design included
    n_candidates: int = 1000
    n_refine: int = 5
    transform: str = "log"  # or "raw"
    gp: GPConfig = field(default_factory=GPConfig)


@dataclass
class BOResult:
    best_alpha: np.ndarray
    best_value: float
    history_alpha: np.ndarray
    history_value: np.ndarray
    iterations: int
    failures: list = field(default_factory=list)
    rows: np.ndarray = None  # target rows the objective was evaluated on

    def incumbent(self):
        return np.minimum.accumulate(self.history_value)

    def write_trace(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        inc = self.incumbent()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration"] + [f"alpha{i}" for i in range(self.history_alpha.shape[1])]
                       + ["objective", "incumbent"])
            for i, (a, v, b) in enumerate(zip(self.history_alpha, self.history_value, inc)):
                w.writerow([i] + [repr(float(x)) for x in a] + [repr(float(v)), repr(float(b))])


def bayes_opt(objective, bounds, config=None, seed=0):
    """Minimize a black-box objective over a box by GP + EI.

    Failed evaluations (exceptions or non-finite values) are logged and
    skipped but still count against the budget.
    """
    config = config or BOConfig()
    if config.budget < 1:
        raise ValueError("budget must be at least 1")
    if config.transform not in ("log", "raw"):
        raise ValueError(f"unknown transform {config.transform!r}")
    rng = np.random.default_rng(seed)
    lo, width = bounds.low, bounds.high - bounds.low
    d = bounds.dim
    n_init = min(max(10, 2 * d), config.budget)
    xs, ys, failures = [], [], []

    def evaluate(u):
        alpha = lo + width * u
        try:
            v = float(objective(alpha))
        except Exception as exc:  # noqa: BLE001 - objective is user code
            log.warning("objective failed at %s: %s", alpha, exc)
            failures.append((alpha, repr(exc)))
            return
        if not np.isfinite(v):
            log.warning("objective non-finite at %s", alpha)
            failures.append((alpha, "non-finite"))
            return
        xs.append(u)
        ys.append(v)

    def fit_target(y):
        y = np.asarray(y)
        return np.log(np.maximum(y, 1e-300)) if config.transform == "log" else y

    for u in rng.random((n_init, d)):
        evaluate(u)
    for _ in range(config.budget - n_init):
        if len(xs) == 0:
            evaluate(rng.random(d))
            continue
        X = np.array(xs)
        t = fit_target(ys)
        gp = gp_fit(X, t, config.gp)
        best_t = t.min()
        cand = rng.random((config.n_candidates, d))
        ei = expected_improvement(gp, cand, best_t)
        starts = cand[np.argsort(-ei, kind="stable")[:config.n_refine]]
        best_u, best_ei = cand[int(np.argmax(ei))], float(ei.max())
        for s in starts:
            res = minimize(lambda u: -float(expected_improvement(gp, u[None, :], best_t)[0]), s,
                           method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
            if -res.fun > best_ei:
                best_u, best_ei = np.clip(res.x, 0.0, 1.0), -float(res.fun)
        evaluate(best_u)
    if not xs:
        raise RuntimeError("every objective evaluation failed")
    X = lo + width * np.array(xs)
    y = np.array(ys)
    i = int(np.argmin(y))  # argmin keeps the earliest of tied minima
    return BOResult(X[i], float(y[i]), X, y, config.budget, failures)


def objective_rows(dataset, rng, limit=MAX_OBJECTIVE_ROWS):
    """Fixed subsample of at most ``limit`` transitions, in original order."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty target dataset")
    if n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng(rng).choice(n, size=limit, replace=False))


def embedding_objective(model, dataset, alpha, rows=None):
    """Mean squared one-step prediction error over the target transitions at ``alpha``."""
    if len(dataset) == 0:
        raise ValueError("empty target dataset")
    if rows is None:
        rows = slice(None)
    return model.prediction_mse(dataset.obs[rows], dataset.act[rows], dataset.next_obs[rows], alpha)


def fit_embedding(model, dataset, bounds, budget=500, seed=0, config=None):
    """Identify the embedding that best explains a target dataset under a frozen model."""
    if len(dataset) == 0:
        raise ValueError("empty target dataset")
    config = config or BOConfig()
    config = BOConfig(budget, config.n_candidates, config.n_refine, config.transform, config.gp)
    rng = np.random.default_rng(seed)
    rows = objective_rows(dataset, rng.integers(2 ** 32))
    obs, act, nxt = dataset.obs[rows], dataset.act[rows], dataset.next_obs[rows]
    res = bayes_opt(lambda a: model.prediction_mse(obs, act, nxt, a), bounds, config,
                    seed=rng.integers(2 ** 32))
    res.rows = rows
    return res


__all__ = [
    "EmbeddingBounds", "GPConfig", "GPSurrogate", "gp_fit", "expected_improvement", "ei_from_moments",
    "BOConfig", "BOResult", "bayes_opt", "fit_embedding", "embedding_objective", "objective_rows",
    "SingularKernelError", "rbf_kernel",
]
