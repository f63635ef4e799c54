"""Bayesian optimisation of the learning rate and cycle length.

A Gaussian process with a Matern-5/2 kernel, constant mean and a noise term
is fitted by maximising the log marginal likelihood; the next point is the
argmax of expected improvement over a quasi-random grid, polished with a
bounded local search.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import qmc

SQRT5 = math.sqrt(5.0)


class GPFitError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# search space


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    log: bool = False
    integer: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"{self.name}: need low < high, got [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise ValueError(f"{self.name}: log-scaled bounds must be positive")

    def decode(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self.log:
            v = 10 ** (math.log10(self.low) + u * (math.log10(self.high) - math.log10(self.low)))
        else:
            v = self.low + u * (self.high - self.low)
        return int(round(v)) if self.integer else v

    def encode(self, v: float) -> float:
        if self.log:
            lo, hi = math.log10(self.low), math.log10(self.high)
            return (math.log10(v) - lo) / (hi - lo)
        return (v - self.low) / (self.high - self.low)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @classmethod
    def default(cls, lr=(1e-5, 1e-1), cycle_len=(10, 100)) -> SearchSpace:
        return cls((Dimension("lr", lr[0], lr[1], log=True),
                    Dimension("cycle_len", cycle_len[0], cycle_len[1], integer=True)))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def decode(self, u) -> dict[str, float]:
        return {d.name: d.decode(x) for d, x in zip(self.dims, u)}


@dataclass
class Observation:
    point: list[float]            # normalised to [0, 1]^d
    value: float
    params: dict = field(default_factory=dict)
    seed: int = 0
    wall_time: float = 0.0
    failed: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# Gaussian process


def matern52(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray, amplitude: float) -> np.ndarray:
    d = np.sqrt(np.maximum((((x1[:, None, :] - x2[None, :, :]) / lengthscales) ** 2).sum(-1), 0))
    return amplitude * (1 + SQRT5 * d + 5.0 / 3.0 * d * d) * np.exp(-SQRT5 * d)


@dataclass
class GaussianProcess:
    x: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    amplitude: float
    noise: float
    mean: float
    y_shift: float
    y_scale: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray

    def predict(self, xs) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function, in objective units."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ks = matern52(xs, self.x, self.lengthscales, self.amplitude)
        mu = self.mean + ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = np.maximum(self.amplitude - (v * v).sum(axis=0), 0.0)
        return mu * self.y_scale + self.y_shift, var * self.y_scale ** 2

    @property
    def noise_variance(self) -> float:
        """Observation noise in objective units, diagonal jitter included."""
        return (self.noise + self.jitter) * self.y_scale ** 2


def _unpack(theta: np.ndarray, d: int):
    return np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]), theta[d + 2]


def _neg_log_marginal(theta: np.ndarray, x: np.ndarray, y: np.ndarray, jitter: float):
    n, d = x.shape
    ls, amp, noise, c = _unpack(theta, d)
    diff2 = ((x[:, None, :] - x[None, :, :]) / ls) ** 2          # [n, n, d]
    dist = np.sqrt(diff2.sum(-1))
    e = np.exp(-SQRT5 * dist)
    k0 = (1 + SQRT5 * dist + 5.0 / 3.0 * dist * dist) * e
    k = amp * k0 + (noise + jitter) * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    r = y - c
    alpha = cho_solve((chol, True), r, check_finite=False)
    nll = 0.5 * r @ alpha + np.log(np.diag(chol)).sum() + 0.5 * n * math.log(2 * math.pi)
    w = np.outer(alpha, alpha) - cho_solve((chol, True), np.eye(n), check_finite=False)
    grad = np.empty_like(theta)
    dk_dls = amp * 5.0 / 3.0 * (1 + SQRT5 * dist) * e       # times diff2_i for each dim
    for i in range(d):
        grad[i] = -0.5 * (w * dk_dls * diff2[:, :, i]).sum()
    grad[d] = -0.5 * (w * amp * k0).sum()
    grad[d + 1] = -0.5 * np.trace(w) * noise
    grad[d + 2] = -alpha.sum()
    return nll, grad


def gp_fit(observations, noise: float | None = None, seed: int = 0, restarts: int = 1,
           jitter: float = 1e-10, max_jitter: float = 1e-4, warm_start: np.ndarray | None = None
           ) -> GaussianProcess:
    """Fit a GP to observations (or ``(x, y)`` arrays) by maximum marginal likelihood.

    ``noise`` fixes the noise variance (in standardised units); ``None`` fits it.
    """
    if isinstance(observations, tuple):
        x, y = observations
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
    else:
        obs = list(observations)
        if not obs:
            raise ValueError("gp_fit needs at least one observation")
        x = np.array([o.point for o in obs], dtype=float)
        y = np.array([o.value for o in obs], dtype=float)
    if x.ndim == 2 and x.shape[0] != y.size:
        x = x.T if x.shape[1] == y.size else x
    n, d = x.shape
    if n < 1:
        raise ValueError("gp_fit needs at least one observation")
    if not np.isfinite(y).all():
        raise ValueError("observation values must be finite")
    shift = float(y.mean())
    scale = float(y.std()) if n > 1 and y.std() > 0 else 1.0
    ys = (y - shift) / scale

    log_noise_bounds = (math.log(1e-10), math.log(1.0))
    bounds = [(math.log(1e-2), math.log(10.0))] * d + [(math.log(1e-2), math.log(1e2)), log_noise_bounds,
                                                       (-5.0, 5.0)]
    if noise is not None:
        bounds[d + 1] = (math.log(noise), math.log(noise))
    rng = np.random.default_rng(seed)
    starts = [np.r_[np.full(d, math.log(0.3)), 0.0, math.log(noise if noise is not None else 1e-9), 0.0]]
    if warm_start is not None and warm_start.shape == starts[0].shape:
        # the previous optimum stands in for the random restarts
        starts.insert(0, np.clip(warm_start, [b[0] for b in bounds], [b[1] for b in bounds]))
        restarts = 0
    for _ in range(restarts):
        starts.append(np.array([rng.uniform(lo, hi) if lo < hi else lo for lo, hi in bounds]))
        starts[-1][d + 2] = rng.normal(0, 0.5)

    cur_jitter = jitter
    while True:
        best_theta, best_val = None, np.inf
        for s in starts:
            res = minimize(_neg_log_marginal, s, args=(x, ys, cur_jitter), jac=True, method="L-BFGS-B",
                           bounds=bounds, options={"maxiter": 100})
            if res.fun < best_val:
                best_val, best_theta = float(res.fun), res.x
        ls, amp, nz, c = _unpack(best_theta, d)
        k = amp * matern52(x, x, ls, 1.0) + (nz + cur_jitter) * np.eye(n)
        try:
            chol = cholesky(k, lower=True)
            break
        except np.linalg.LinAlgError:
            cur_jitter *= 10
            if cur_jitter > max_jitter:
                raise GPFitError("kernel matrix singular even with maximum jitter") from None
    alpha = cho_solve((chol, True), ys - c)
    gp = GaussianProcess(x, ys, ls, amp, nz, c, shift, scale, cur_jitter, chol, alpha)
    gp.theta = best_theta  # reused as a warm start by optimize()
    return gp


# ---------------------------------------------------------------------------
# acquisition


def expected_improvement(gp: GaussianProcess, xs, best: float) -> np.ndarray:
    """EI for maximisation.

    Zero wherever the posterior variance does not exceed the fitted noise
    variance (with a little slack for roundoff): such points are already
    observed as well as the noise allows.
    """
    mu, var = gp.predict(xs)
    sd = np.sqrt(var)
    out = np.zeros_like(mu)
    pos = var > 1.5 * gp.noise_variance
    z = (mu[pos] - best) / sd[pos]
    out[pos] = (mu[pos] - best) * ndtr(z) + sd[pos] * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return np.maximum(out, 0.0)


def candidate_grid(d: int, n: int = 2048, seed: int = 0) -> np.ndarray:
    return qmc.Sobol(d, scramble=True, seed=seed).random(n)


def suggest_next(gp: GaussianProcess, best_so_far: float, seed: int = 0, n_grid: int = 2048,
                 n_refine: int = 1) -> np.ndarray:
    grid = candidate_grid(gp.x.shape[1], n_grid, seed)
    ei = expected_improvement(gp, grid, best_so_far)
    if not (ei > 0).any():
        _, var = gp.predict(grid)
        return grid[int(np.argmax(var))]
    best_x, best_ei = grid[int(np.argmax(ei))], float(ei.max())
    d = grid.shape[1]
    for i in np.argsort(-ei)[:n_refine]:
        res = minimize(lambda z: -expected_improvement(gp, z[None, :], best_so_far)[0], grid[i],
                       method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
        if -res.fun > best_ei:
            best_x, best_ei = np.clip(res.x, 0, 1), float(-res.fun)
    return best_x


# ---------------------------------------------------------------------------
# driver


@dataclass
class OptimizeResult:
    best: Observation
    trace: list[Observation]

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate([o.value for o in self.trace]))


def _dedupe(point: np.ndarray, seen: list[list[float]], rng: np.random.Generator) -> np.ndarray:
    for s in seen:
        if np.max(np.abs(point - np.asarray(s))) < 1e-9:
            return np.clip(point + rng.uniform(-1e-6, 1e-6, point.shape), 0, 1)
    return point


def optimize(objective: Callable[[dict], float], space: SearchSpace, budget: int, seed: int = 0,
             n_initial: int = 3, initial_trace: list[Observation] | None = None,
             on_observation: Callable[[Observation], None] | None = None) -> OptimizeResult:
    """Maximise ``objective`` over ``space`` with exactly ``budget`` evaluations.

    A failing evaluation (exception or non-finite value) is recorded with the
    worst value seen so far and the loop carries on. ``initial_trace`` resumes
    a previous run; its observations count towards the budget.
    """
    if budget < n_initial:
        raise ValueError(f"budget must be >= {n_initial} (the initial design)")
    rng = np.random.default_rng(seed)
    trace: list[Observation] = list(initial_trace or [])[:budget]
    init = qmc.Halton(space.ndim, scramble=True, seed=seed).random(n_initial)
    theta = None

    while len(trace) < budget:
        i = len(trace)
        if i < n_initial:
            point = init[i]
        else:
            good = [o for o in trace]
            gp = gp_fit(good, seed=seed + i, warm_start=theta)
            theta = getattr(gp, "theta", None)
            point = suggest_next(gp, max(o.value for o in trace), seed=seed + i)
            point = _dedupe(point, [o.point for o in trace], rng)
        params = space.decode(point)
        t0 = time.perf_counter()
        failed = False
        try:
            value = float(objective(params))
            if not math.isfinite(value):
                raise FloatingPointError("objective returned a non-finite value")
        except Exception:  # objective failures are data, not fatal
            failed = True
            finite = [o.value for o in trace if not o.failed]
            value = min(finite) if finite else 0.0
        obs = Observation([float(p) for p in point], value, params, seed + i,
                          time.perf_counter() - t0, failed)
        trace.append(obs)
        if on_observation is not None:
            on_observation(obs)
    best = max(trace, key=lambda o: o.value)
    return OptimizeResult(best, trace)


def random_search(objective: Callable[[dict], float], space: SearchSpace, budget: int,
                  seed: int = 0) -> OptimizeResult:
    rng = np.random.default_rng(seed)
    trace = []
    for i in range(budget):
        point = rng.random(space.ndim)
        params = space.decode(point)
        trace.append(Observation(point.tolist(), float(objective(params)), params, seed + i))
    return OptimizeResult(max(trace, key=lambda o: o.value), trace)


def write_trace(path, trace: list[Observation]) -> None:
    Path(path).write_text("".join(o.to_json() + "\n" for o in trace))


def read_trace(path) -> list[Observation]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Observation(**json.loads(line)))
    return out
