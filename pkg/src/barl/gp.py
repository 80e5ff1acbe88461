"""Independent-output GP model of the state-change function.

Each state dimension of ``s' - s`` gets its own zero-mean GP with a squared
exponential ARD kernel over the concatenated ``(s, a)`` input. Targets are
standardized per dimension; kernel hyperparameters live in standardized
units and every public prediction is returned in original units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from barl.errors import ContractError, FactorizationError, FitError

NOISE_FLOOR = 1e-6  # relative to the signal variance
JITTER_START = 1e-8
JITTER_MAX = 1e-4
LOG_2PI_E = np.log(2 * np.pi * np.e)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray


class Dataset:
    """Append-only sequence of transitions sharing one (d, n_a) signature."""

    def __init__(self, state_dim: int, action_dim: int, transitions=()):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._s: list[np.ndarray] = []
        self._a: list[np.ndarray] = []
        self._sn: list[np.ndarray] = []
        for t in transitions:
            self.append(t.s, t.a, t.s_next)

    def append(self, s, a, s_next) -> None:
        s = np.array(s, dtype=float).reshape(-1)
        a = np.array(a, dtype=float).reshape(-1)
        s_next = np.array(s_next, dtype=float).reshape(-1)
        if s.size != self.state_dim or s_next.size != self.state_dim or a.size != self.action_dim:
            raise ContractError(
                f"transition shapes {s.size}/{a.size}/{s_next.size} do not match "
                f"dataset signature ({self.state_dim}, {self.action_dim})"
            )
        self._s.append(s)
        self._a.append(a)
        self._sn.append(s_next)

    def copy(self) -> "Dataset":
        out = Dataset(self.state_dim, self.action_dim)
        out._s, out._a, out._sn = list(self._s), list(self._a), list(self._sn)
        return out

    def __len__(self) -> int:
        return len(self._s)

    def __iter__(self):
        for s, a, sn in zip(self._s, self._a, self._sn):
            yield Transition(s, a, sn)

    def _stack(self, rows, width):
        return np.array(rows, dtype=float).reshape(len(rows), width)

    @property
    def states(self) -> np.ndarray:
        return self._stack(self._s, self.state_dim)

    @property
    def actions(self) -> np.ndarray:
        return self._stack(self._a, self.action_dim)

    @property
    def next_states(self) -> np.ndarray:
        return self._stack(self._sn, self.state_dim)

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.states, self.actions])


@dataclass(frozen=True)
class KernelParams:
    """Per-output SE-ARD hyperparameters (standardized target units).

    lengthscales has shape (d_out, d_in); the variances have shape (d_out,).
    """

    lengthscales: np.ndarray
    signal_variance: np.ndarray
    noise_variance: np.ndarray

    def __post_init__(self):
        ls = np.atleast_2d(np.asarray(self.lengthscales, dtype=float))
        sf2 = np.atleast_1d(np.asarray(self.signal_variance, dtype=float))
        sn2 = np.atleast_1d(np.asarray(self.noise_variance, dtype=float))
        if not (ls.shape[0] == sf2.size == sn2.size):
            raise ContractError("kernel parameter arrays disagree on output dimension")
        if np.any(ls <= 0) or np.any(sf2 <= 0) or np.any(sn2 <= 0):
            raise ContractError("kernel parameters must be strictly positive")
        sn2 = np.maximum(sn2, NOISE_FLOOR * sf2)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", sf2)
        object.__setattr__(self, "noise_variance", sn2)

    @property
    def output_dim(self) -> int:
        return self.signal_variance.size

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[1]

    @classmethod
    def isotropic(cls, output_dim, input_dim, lengthscale=1.0, signal_variance=1.0,
                  noise_variance=1e-3):
        return cls(np.full((output_dim, input_dim), float(lengthscale)),
                   np.full(output_dim, float(signal_variance)),
                   np.full(output_dim, float(noise_variance)))


def kernel_eval(x, x2, lengthscales, signal_variance) -> float:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    ls = np.asarray(lengthscales, dtype=float)
    if x.shape != x2.shape or x.shape != ls.shape:
        raise ContractError(f"kernel input shapes {x.shape}, {x2.shape}, {ls.shape} differ")
    r2 = np.sum(((x - x2) / ls) ** 2)
    return float(signal_variance * np.exp(-0.5 * r2))


def se_ard(X1, X2, lengthscales, signal_variance):
    """Squared exponential ARD Gram matrix, broadcasting over leading dims of X1."""
    A = X1 / lengthscales
    B = X2 / lengthscales
    r2 = (np.sum(A * A, axis=-1)[..., :, None] + np.sum(B * B, axis=-1)[None, :]
          - 2.0 * A @ B.T)
    return signal_variance * np.exp(-0.5 * np.maximum(r2, 0.0))


def stable_cholesky(K, signal_variance, dim=None, jitter_start=JITTER_START):
    """Cholesky of ``K + jitter*I`` with x10 jitter escalation.

    Returns (L, jitter). Raises FactorizationError once jitter would exceed
    JITTER_MAX * signal_variance.
    """
    jitter = jitter_start * signal_variance
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * signal_variance * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError(
        f"kernel matrix not positive definite after jitter escalation (output dim {dim})",
        dim=dim,
    )


def standardize_targets(deltas):
    """Per-dimension (mean, std) of delta targets; std falls back to 1."""
    d = deltas.shape[1]
    if deltas.shape[0] == 0:
        return np.zeros(d), np.ones(d)
    mean = deltas.mean(axis=0)
    std = deltas.std(axis=0) if deltas.shape[0] > 1 else np.ones(d)
    std = np.where(std > 1e-8, std, 1.0)
    return mean, std


def delta_targets(data: Dataset, periodic=None):
    diff = data.next_states - data.states
    if periodic is not None and np.any(periodic):
        diff[:, periodic] = (diff[:, periodic] + np.pi) % (2 * np.pi) - np.pi
    return diff


class GpModel:
    """Exact GP posterior over the delta-state function.

    Immutable after construction: the Cholesky factor of the regularized
    kernel matrix is cached per output dimension.
    """

    def __init__(self, params: KernelParams, data: Dataset | None = None, periodic=None):
        self.params = params
        d, D = params.output_dim, params.input_dim
        if data is None:
            data = Dataset(d, D - d)
        if data.state_dim != d or data.state_dim + data.action_dim != D:
            raise ContractError("dataset signature does not match kernel parameters")
        self.data = data
        self.state_dim = d
        self.input_dim = D
        self.periodic = (np.zeros(d, dtype=bool) if periodic is None
                         else np.asarray(periodic, dtype=bool))
        self.X = data.inputs
        deltas = delta_targets(data, self.periodic)
        self.y_mean, self.y_std = standardize_targets(deltas)
        self.Y = (deltas - self.y_mean) / self.y_std
        n = len(data)
        self.chol = np.zeros((d, n, n))
        self.alpha = np.zeros((d, n))
        self.jitter = JITTER_START * params.signal_variance.copy()
        for j in range(d):
            if n == 0:
                continue
            K = self._gram(j, self.X, self.X) + params.noise_variance[j] * np.eye(n)
            L, jit = stable_cholesky(K, params.signal_variance[j], dim=j)
            self.chol[j] = L
            self.jitter[j] = jit
            self.alpha[j] = cho_solve((L, True), self.Y[:, j])

    def __len__(self):
        return len(self.data)

    def _gram(self, j, A, B):
        return se_ard(A, B, self.params.lengthscales[j], self.params.signal_variance[j])

    @property
    def noise_variance(self) -> np.ndarray:
        """Observation noise variance per state dimension, original units."""
        return self.params.noise_variance * self.y_std ** 2

    @property
    def jitter_variance(self) -> np.ndarray:
        return self.jitter * self.y_std ** 2

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise ContractError(f"expected input dim {self.input_dim}, got {X.shape[-1]}")
        return X

    def predict_delta_std(self, X):
        """Standardized latent mean and variance, each (q, d)."""
        X = np.atleast_2d(self._check(X))
        q, d = X.shape[0], self.state_dim
        mean = np.zeros((q, d))
        var = np.tile(self.params.signal_variance, (q, 1))
        if len(self) == 0:
            return mean, var
        for j in range(d):
            Kxq = self._gram(j, self.X, X)
            mean[:, j] = Kxq.T @ self.alpha[j]
            V = solve_triangular(self.chol[j], Kxq, lower=True, check_finite=False)
            var[:, j] -= np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)

    def predict_batch(self, X):
        """Posterior predictive for many inputs.

        Returns (mean, variance), each (q, d). The mean is in next-state
        coordinates; variance is latent (excludes observation noise).
        """
        X = np.atleast_2d(self._check(X))
        m, v = self.predict_delta_std(X)
        return X[:, :self.state_dim] + self.y_mean + self.y_std * m, v * self.y_std ** 2

    def predict(self, x):
        x = self._check(x)
        if x.ndim != 1:
            raise ContractError("predict expects a single input vector")
        m, v = self.predict_batch(x[None, :])
        return m[0], v[0]

    def mean_step(self, S, A):
        """Posterior-mean next state for batched states/actions (..., d)."""
        S = np.asarray(S, dtype=float)
        X = np.concatenate([S, np.asarray(A, dtype=float)], axis=-1)
        flat = X.reshape(-1, self.input_dim)
        delta = np.tile(self.y_mean, (flat.shape[0], 1))
        if len(self):
            for j in range(self.state_dim):
                delta[:, j] += self.y_std[j] * (self._gram(j, flat, self.X) @ self.alpha[j])
        return S + delta.reshape(S.shape)

    # -- hypothetical noiseless conditioning ---------------------------------

    def query_terms(self, Q):
        """Per-dimension whitened cross-covariances and prior-conditioned variance.

        Returns (W, var) where W[j] = L_j^{-1} K(X, Q) with shape (N, q) and
        var has shape (q, d) in standardized units.
        """
        Q = np.atleast_2d(self._check(Q))
        d, n = self.state_dim, len(self)
        W = np.zeros((d, n, Q.shape[0]))
        var = np.tile(self.params.signal_variance, (Q.shape[0], 1))
        for j in range(d):
            if n:
                W[j] = solve_triangular(self.chol[j], self._gram(j, self.X, Q), lower=True,
                                        check_finite=False)
                var[:, j] -= np.sum(W[j] * W[j], axis=0)
        return W, np.maximum(var, 0.0)

    def conditioned_reduction(self, Z, Q, W):
        """Variance reduction at Q from noiseless observations at Z.

        ``W`` is the first output of :meth:`query_terms` for the same Q.
        Returns (reduction (q, d), jitter (d,)) in standardized units. Only
        input locations enter; targets are never read.
        """
        Z = np.atleast_2d(self._check(Z))
        Q = np.atleast_2d(Q)
        d, n = self.state_dim, len(self)
        red = np.zeros((Q.shape[0], d))
        jitters = np.zeros(d)
        if Z.shape[0] == 0:
            return red, jitters
        for j in range(d):
            Kzz = self._gram(j, Z, Z)
            Kzq = self._gram(j, Z, Q)
            if n:
                A = solve_triangular(self.chol[j], self._gram(j, self.X, Z), lower=True,
                                     check_finite=False)
                S = Kzz - A.T @ A
                C = Kzq - A.T @ W[j]
            else:
                S, C = Kzz, Kzq
            S = 0.5 * (S + S.T)
            Ls, jitters[j] = stable_cholesky(S, self.params.signal_variance[j], dim=j)
            G = solve_triangular(Ls, C, lower=True, check_finite=False)
            red[:, j] = np.sum(G * G, axis=0)
        return red, jitters

    def condition_variance_batch(self, extra_inputs, Q):
        """Latent variance at Q (q, d) after noiselessly observing extra_inputs."""
        Q = np.atleast_2d(self._check(Q))
        W, var = self.query_terms(Q)
        Z = np.asarray(extra_inputs, dtype=float).reshape(-1, self.input_dim)
        if Z.shape[0] == 0:
            return var * self.y_std ** 2
        red, _ = self.conditioned_reduction(Z, Q, W)
        return np.maximum(var - red, 0.0) * self.y_std ** 2

    def condition_variance(self, extra_inputs, x):
        x = self._check(x)
        return self.condition_variance_batch(extra_inputs, x[None, :])[0]


def predict(model: GpModel, x):
    return model.predict(x)


def condition_variance(model: GpModel, extra_inputs, x):
    return model.condition_variance(extra_inputs, x)


def predictive_entropy(variance, noise):
    """Differential entropy of independent Gaussians with variance + noise.

    Reduces over the last axis.
    """
    variance = np.asarray(variance, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if np.any(variance <= 0) or np.any(noise <= 0):
        raise ContractError("predictive_entropy needs strictly positive variances")
    return 0.5 * np.sum(LOG_2PI_E + np.log(variance + noise), axis=-1)


# -- hyperparameter fitting ----------------------------------------------------


def _unpack(theta, D):
    ls = np.exp(theta[:D])
    sf2 = np.exp(theta[D])
    ratio = np.exp(theta[D + 1])
    return ls, sf2, sf2 * ratio


def log_marginal_likelihood(theta, X, y):
    """Log marginal likelihood and its gradient in log-parameter space.

    ``theta = (log lengthscales..., log signal_variance, log noise_ratio)``
    with ``noise_variance = signal_variance * noise_ratio``.
    """
    n, D = X.shape
    ls, sf2, sn2 = _unpack(theta, D)
    Xs = X / ls
    diff2 = (Xs[:, None, :] - Xs[None, :, :]) ** 2  # (n, n, D)
    Kf = sf2 * np.exp(-0.5 * diff2.sum(-1))
    K = Kf + sn2 * np.eye(n)
    L = np.linalg.cholesky(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2 * np.pi)
    Kinv = cho_solve((L, True), np.eye(n))
    inner = np.outer(alpha, alpha) - Kinv
    grad = np.empty(D + 2)
    for k in range(D):
        grad[k] = 0.5 * np.sum(inner * Kf * diff2[:, :, k])
    grad[D] = 0.5 * np.sum(inner * K)
    grad[D + 1] = 0.5 * sn2 * np.trace(inner)
    return lml, grad


def _bounds(scale, D):
    lo = np.concatenate([np.log(0.05 * scale), [np.log(1e-2), np.log(NOISE_FLOOR)]])
    hi = np.concatenate([np.log(100.0 * scale), [np.log(1e2), np.log(1.0)]])
    return list(zip(lo, hi))


def fit_hyperparams(data: Dataset, restarts: int = 5, rng: np.random.Generator | None = None,
                    periodic=None, input_scale=None) -> KernelParams:
    """Type-II maximum likelihood per output dimension.

    Optimizes in log space with L-BFGS-B from ``restarts`` initial points;
    the first uses the data-driven defaults, the rest are log-normal
    perturbations drawn from ``rng``. ``input_scale`` replaces degenerate
    per-coordinate input standard deviations (e.g. for a single point).
    """
    if len(data) == 0:
        raise ContractError("cannot fit hyperparameters on an empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    X = data.inputs
    n, D = X.shape
    deltas = delta_targets(data, periodic)
    mean, std = standardize_targets(deltas)
    Y = (deltas - mean) / std
    d = Y.shape[1]

    scale = X.std(axis=0) if n > 1 else np.zeros(D)
    fallback = np.ones(D) if input_scale is None else np.asarray(input_scale, dtype=float)
    scale = np.where(scale > 1e-6, scale, fallback)
    y_var = np.where(Y.var(axis=0) > 1e-12, Y.var(axis=0), 1.0)

    ls_out = np.tile(scale, (d, 1))
    sf2_out = y_var.copy()
    sn2_out = 1e-3 * y_var
    if n < 2:
        return KernelParams(ls_out, sf2_out, sn2_out)

    bounds = _bounds(scale, D)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    perturb = rng.standard_normal((d, max(restarts, 1), D + 2))

    def objective(theta, y):
        try:
            v, g = log_marginal_likelihood(theta, X, y)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        return -v, -g

    for j in range(d):
        theta0 = np.concatenate([np.log(scale), [np.log(y_var[j]), np.log(1e-3)]])
        best = None
        for r in range(max(restarts, 1)):
            start = theta0 if r == 0 else theta0 + perturb[j, r] * np.r_[np.ones(D), 0.5, 1.5]
            start = np.clip(start, lo, hi)
            res = minimize(objective, start, args=(Y[:, j],), jac=True, method="L-BFGS-B",
                           bounds=bounds)
            if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise FitError(f"hyperparameter fit failed for output dim {j}", dim=j)
        ls, sf2, sn2 = _unpack(best.x, D)
        ls_out[j], sf2_out[j], sn2_out[j] = ls, sf2, sn2
    return KernelParams(ls_out, sf2_out, sn2_out)
