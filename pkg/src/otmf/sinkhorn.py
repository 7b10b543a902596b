"""Entropic optimal transport on feature clouds.

Solves min_P <P, C> - eps * H(P) over couplings with fixed marginals,
where H(P) = -sum P_ij (log P_ij - 1). Two solver paths are provided:
the classical diagonal-scaling updates on K = exp(-C/eps) and a
log-domain path with epsilon annealing that stays stable down to
eps ~ 1e-3. The lambda of the d^lambda parameterization is 1/eps.

The gradient of the optimal value with respect to the input clouds is
the fixed-plan (Danskin) gradient; it is exact for the regularized
objective and is the quantity validated against finite differences.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeMismatchError

# Annealing schedule for the log-domain path: start near max(C), halve
# until the target eps, a few burn-in updates per stage.
_ANNEAL_FACTOR = 0.5
_ANNEAL_BURNIN = 10


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    tolerance: float = 1e-6
    log_domain: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")

    @property
    def regularization_strength(self) -> float:
        """The lambda of the lambda-parameterized formulation (= 1/epsilon)."""
        return 1.0 / self.epsilon


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatchError(f"cost matrix must be 2-D, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)):
            raise NumericalError("cost matrix contains non-finite entries")
        if np.any(v < 0):
            raise NumericalError("cost matrix contains negative entries")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Marginals:
    r: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        for name, v in (("r", r), ("c", c)):
            if v.ndim != 1:
                raise ShapeMismatchError(f"marginal {name} must be 1-D")
            if np.any(v <= 0):
                raise DataError(f"marginal {name} has a non-positive entry")
            if abs(v.sum() - 1.0) > 1e-12:
                raise DataError(f"marginal {name} sums to {v.sum()}, not 1")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "c", c)

    @classmethod
    def uniform(cls, n: int, m: int) -> "Marginals":
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m))


@dataclass
class TransportPlan:
    plan: np.ndarray
    u: np.ndarray  # positive scalings in direct mode, exp(f/eps) in log mode
    v: np.ndarray
    log_u: np.ndarray
    log_v: np.ndarray
    epsilon: float
    transport_cost: float  # <P, C>
    reg_objective: float  # <P, C> - eps * H(P); the differentiable loss
    marginal_error: float
    iterations_used: int
    converged: bool


def pairwise_cost(X: np.ndarray, Y: np.ndarray) -> CostMatrix:
    """Squared-Euclidean cost C[i, j] = ||x_i - y_j||^2."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ShapeMismatchError("feature clouds must be 2-D (samples x dims)")
    if X.shape[1] != Y.shape[1]:
        raise ShapeMismatchError(
            f"feature dimension mismatch: {X.shape[1]} vs {Y.shape[1]}"
        )
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise DataError("feature cloud is empty")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NumericalError("feature cloud contains non-finite values")
    diff = X[:, None, :] - Y[None, :, :]
    values = np.einsum("ijk,ijk->ij", diff, diff)
    # einsum can produce tiny negatives only through rounding of exact zeros
    np.maximum(values, 0.0, out=values)
    return CostMatrix(values)


def _marginal_error(P: np.ndarray, r: np.ndarray, c: np.ndarray) -> float:
    return max(
        float(np.abs(P.sum(axis=1) - r).max()),
        float(np.abs(P.sum(axis=0) - c).max()),
    )


def _entropy(P: np.ndarray) -> float:
    mask = P > 0
    return float(-(P[mask] * (np.log(P[mask]) - 1.0)).sum())


def _finish(P, log_u, log_v, C, eps, it, converged, r, c) -> TransportPlan:
    cost = float((P * C).sum())
    # u/v are diagnostics; at tiny eps the scalings can overflow to inf
    # even though the plan itself is finite
    with np.errstate(over="ignore"):
        u, v = np.exp(log_u), np.exp(log_v)
    return TransportPlan(
        plan=P,
        u=u,
        v=v,
        log_u=log_u,
        log_v=log_v,
        epsilon=eps,
        transport_cost=cost,
        reg_objective=cost - eps * _entropy(P),
        marginal_error=_marginal_error(P, r, c),
        iterations_used=it,
        converged=converged,
    )


def _sinkhorn_direct(C, r, c, cfg: SinkhornConfig) -> TransportPlan:
    K = np.exp(-C / cfg.epsilon)
    if np.any(K.sum(axis=1) == 0.0) or np.any(K.sum(axis=0) == 0.0):
        raise NumericalError(
            "kernel exp(-C/epsilon) underflowed to zero; retry with log_domain=True"
        )
    u = np.ones_like(r)
    v = np.ones_like(c)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        u = r / (K @ v)
        v = c / (K.T @ u)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericalError(
                "scaling vectors diverged; retry with log_domain=True"
            )
        P = u[:, None] * K * v[None, :]
        if _marginal_error(P, r, c) <= cfg.tolerance:
            converged = True
            break
    P = u[:, None] * K * v[None, :]
    with np.errstate(divide="ignore"):
        return _finish(P, np.log(u), np.log(v), C, cfg.epsilon, it, converged, r, c)


def _logsumexp(Z: np.ndarray, axis: int) -> np.ndarray:
    zmax = Z.max(axis=axis, keepdims=True)
    return np.squeeze(
        zmax + np.log(np.exp(Z - zmax).sum(axis=axis, keepdims=True)), axis=axis
    )


def _sinkhorn_log(C, r, c, cfg: SinkhornConfig) -> TransportPlan:
    log_r = np.log(r)
    log_c = np.log(c)
    f = np.zeros_like(r)
    g = np.zeros_like(c)

    cmax = float(C.max())
    stages = []
    e = max(cfg.epsilon, cmax)
    while e > cfg.epsilon:
        stages.append(e)
        e *= _ANNEAL_FACTOR
    stages.append(cfg.epsilon)

    it = 0
    converged = False
    for e in stages[:-1]:
        for _ in range(_ANNEAL_BURNIN):
            f = f + e * (log_r - _logsumexp((f[:, None] + g[None, :] - C) / e, 1))
            g = g + e * (log_c - _logsumexp((f[:, None] + g[None, :] - C) / e, 0))
    e = stages[-1]
    for it in range(1, cfg.max_iters + 1):
        f = f + e * (log_r - _logsumexp((f[:, None] + g[None, :] - C) / e, 1))
        g = g + e * (log_c - _logsumexp((f[:, None] + g[None, :] - C) / e, 0))
        P = np.exp((f[:, None] + g[None, :] - C) / e)
        if _marginal_error(P, r, c) <= cfg.tolerance:
            converged = True
            break
    P = np.exp((f[:, None] + g[None, :] - C) / e)
    # diag(u) K diag(v) with K = exp(-C/eps) corresponds to log_u = f/eps
    return _finish(P, f / e, g / e, C, e, it, converged, r, c)


def sinkhorn_plan(C: CostMatrix, marg: Marginals, cfg: SinkhornConfig) -> TransportPlan:
    """Run Sinkhorn-Knopp until the marginal error meets cfg.tolerance."""
    if marg.r.shape[0] != C.n or marg.c.shape[0] != C.m:
        raise ShapeMismatchError(
            f"marginals ({marg.r.shape[0]}, {marg.c.shape[0]}) do not match "
            f"cost matrix ({C.n}, {C.m})"
        )
    if cfg.log_domain:
        return _sinkhorn_log(C.values, marg.r, marg.c, cfg)
    return _sinkhorn_direct(C.values, marg.r, marg.c, cfg)


def sinkhorn_distance(
    X: np.ndarray, Y: np.ndarray, cfg: SinkhornConfig
) -> tuple[float, TransportPlan]:
    """Entropic OT alignment between two feature clouds, uniform weights.

    Returns the transport cost <P, C> (the reported shift value) together
    with the full plan; plan.reg_objective carries the differentiable
    regularized value.
    """
    C = pairwise_cost(X, Y)
    plan = sinkhorn_plan(C, Marginals.uniform(C.n, C.m), cfg)
    return plan.transport_cost, plan


def exact_ot_oracle(C: CostMatrix) -> float:
    """Exact OT cost for uniform marginals by permutation enumeration.

    For square cost matrices with uniform marginals the LP optimum is
    attained at a permutation, so the minimum over all n! assignments is
    exact. Deliberately brute force; serves as the solver's test oracle.
    """
    if C.n != C.m:
        raise ShapeMismatchError(f"oracle needs a square matrix, got {C.n}x{C.m}")
    if C.n > 8:
        raise DataError(f"oracle limited to n <= 8, got n={C.n}")
    values = C.values
    best = math.inf
    for perm in itertools.permutations(range(C.n)):
        total = sum(values[i, perm[i]] for i in range(C.n))
        if total < best:
            best = total
    return best / C.n


def sinkhorn_grad_features(
    X: np.ndarray, Y: np.ndarray, plan: TransportPlan
) -> np.ndarray:
    """Fixed-plan gradient of the OT objective with respect to X.

    d/dx_i = sum_j P_ij * 2 (x_i - y_j). Exact for the regularized
    objective by the envelope theorem; also the gradient used for mask
    training.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    P = plan.plan
    if P.shape != (X.shape[0], Y.shape[0]):
        raise ShapeMismatchError(
            f"plan shape {P.shape} does not match clouds "
            f"({X.shape[0]}, {Y.shape[0]})"
        )
    if X.shape[1] != Y.shape[1]:
        raise ShapeMismatchError("feature dimension mismatch between clouds")
    return 2.0 * (P.sum(axis=1)[:, None] * X - P @ Y)
