"""Strongly convex quadratic clients for checking the convergence guarantees.

Client ``i`` minimises ``f_i(w) = 0.5 w^T A_i w - b_i^T w`` with the spectrum
of ``A_i`` pinned to ``[mu, L]``.  Branch iterates take ``E`` SGD steps with
step size ``2 / (mu (t + lam))`` and are mixed toward their mean whenever
``(t + 1) % E == 0``; the global objective is ``F = mean_i f_i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from korea_sfl import rng as rngs
from korea_sfl.engine import ContractError, DivergenceError


@dataclass(frozen=True)
class QuadraticClient:
    A: np.ndarray
    b: np.ndarray

    def value(self, w: np.ndarray) -> float:
        return float(0.5 * w @ self.A @ w - self.b @ w)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w - self.b

    @property
    def optimum(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)

    @property
    def min_value(self) -> float:
        return float(-0.5 * self.b @ self.optimum)


@dataclass(frozen=True)
class OptimalPoint:
    w_star: np.ndarray
    F_star: float


@dataclass(frozen=True)
class QuadraticSuite:
    clients: tuple[QuadraticClient, ...]
    optimum: OptimalPoint
    mu: float
    L: float
    gamma: float  # F* - mean_i f_i*

    @property
    def N(self) -> int:
        return len(self.clients)

    @property
    def d(self) -> int:
        return self.optimum.w_star.shape[0]

    def F(self, w: np.ndarray) -> float:
        return float(np.mean([c.value(w) for c in self.clients]))

    def grad_F(self, w: np.ndarray) -> np.ndarray:
        return np.mean([c.grad(w) for c in self.clients], axis=0)


@dataclass(frozen=True)
class BoundParams:
    mu: float
    L_smooth: float
    E: int
    G_sq: float
    Gamma: float
    sigma_sq: float | None = None  # recorded only; the bound below does not use it

    @property
    def B(self) -> float:
        return 10 * self.L_smooth * self.Gamma + 4 * (self.E - 1) ** 2 * self.G_sq

    @property
    def lambda_sched(self) -> float:
        return max(10 * self.L_smooth / self.mu, self.E) - 1

    def eta(self, t) -> np.ndarray | float:
        return 2.0 / (self.mu * (np.asarray(t, dtype=np.float64) + self.lambda_sched))

    def rate_bound(self, t, delta_1: float) -> np.ndarray | float:
        """Upper bound on ``F(w_bar_t) - F*`` at step ``t``."""
        lam, mu = self.lambda_sched, self.mu
        t = np.asarray(t, dtype=np.float64)
        return self.L_smooth / (2 * mu * (t + lam)) * (4 * self.B / mu + mu * (lam + 1) / 2 * delta_1)


def schedule_lambda(mu: float, L_smooth: float, E: int) -> float:
    return max(10 * L_smooth / mu, E) - 1


def make_quadratic_suite(N: int, d: int, mu: float, L_smooth: float, heterogeneity: float, seed: int,
                         w_target: np.ndarray | None = None) -> QuadraticSuite:
    """Random rotated quadratics sharing the global minimiser ``w_target``.

    ``b_i = A_i w_target + heterogeneity * e_i`` with ``sum_i e_i = 0``, so
    ``sum_i (A_i w_target - b_i) = 0`` and the global optimum is ``w_target``
    while each client's own optimum is displaced.
    """
    if not 0 < mu <= L_smooth:
        raise ContractError(f"need 0 < mu <= L_smooth, got mu={mu}, L={L_smooth}")
    if N < 1 or d < 1:
        raise ContractError("N and d must be positive")
    gen = rngs.stream(seed, "suite")
    if w_target is None:
        w_target = gen.standard_normal(d)
    offsets = gen.standard_normal((N, d))
    offsets -= offsets.mean(axis=0)
    clients = []
    for i in range(N):
        q, r = np.linalg.qr(gen.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        eig = gen.uniform(mu, L_smooth, d)
        eig[0] = mu
        if d > 1:
            eig[-1] = L_smooth
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        clients.append(QuadraticClient(A, A @ w_target + heterogeneity * offsets[i]))
    return suite_from_clients(clients, mu, L_smooth)


def suite_from_clients(clients, mu: float, L_smooth: float) -> QuadraticSuite:
    """Solve ``(sum A_i) w* = sum b_i`` and compute ``Gamma`` for explicit clients."""
    clients = tuple(QuadraticClient(np.atleast_2d(np.asarray(c.A, float)), np.atleast_1d(np.asarray(c.b, float)))
                    for c in clients)
    if not clients:
        raise ContractError("a suite needs at least one client")
    A_sum = sum(c.A for c in clients)
    b_sum = sum(c.b for c in clients)
    w_star = np.linalg.solve(A_sum, b_sum)
    F_star = float(np.mean([c.value(w_star) for c in clients]))
    gamma = F_star - float(np.mean([c.min_value for c in clients]))
    return QuadraticSuite(clients, OptimalPoint(w_star, F_star), mu, L_smooth, max(gamma, 0.0))


@dataclass
class Trajectory:
    t: np.ndarray            # steps 1..T
    delta: np.ndarray        # ||w_bar_t - w*||^2
    gap: np.ndarray          # F(w_bar_t) - F*
    eta: np.ndarray
    E: int
    G_sq: float
    drift: np.ndarray        # mean_i ||w_t^i - w_{t0}^i||^2 within the current window
    window_start: np.ndarray  # t0 of the window each t belongs to
    iterates: list[np.ndarray] = field(default_factory=list)  # [N, d] at each t when kept

    def bounds(self, suite: QuadraticSuite) -> BoundParams:
        return BoundParams(suite.mu, suite.L, self.E, self.G_sq, suite.gamma)

    def bound_rhs(self, suite: QuadraticSuite) -> np.ndarray:
        return self.bounds(suite).rate_bound(self.t, float(self.delta[0]))


def run_schedule(suite: QuadraticSuite, E: int, steps: int, lambda_mix: float, batch_noise: float,
                 seed: int, w_init: np.ndarray | None = None, keep_iterates: bool = False) -> Trajectory:
    """Run ``steps`` SGD steps of all branches with decaying step size and periodic mixing.

    Stochastic gradients add ``N(0, batch_noise)`` noise per coordinate.
    """
    if E < 1 or steps < 1:
        raise ContractError("E and steps must be positive")
    if not 0.0 <= lambda_mix <= 1.0:
        raise ContractError("lambda_mix must lie in [0, 1]")
    lam = schedule_lambda(suite.mu, suite.L, E)
    gen = rngs.stream(seed, "noise")
    N, d = suite.N, suite.d
    if w_init is None:
        w_init = suite.optimum.w_star + rngs.stream(seed, "init", 0).standard_normal(d)
    w = np.tile(np.asarray(w_init, dtype=np.float64), (N, 1))
    w_t0 = w.copy()
    t0 = 1
    A = np.stack([c.A for c in suite.clients])
    b = np.stack([c.b for c in suite.clients])
    w_star = suite.optimum.w_star
    noise_sd = np.sqrt(batch_noise)

    ts = np.arange(1, steps + 1)
    delta = np.empty(steps)
    gap = np.empty(steps)
    drift = np.empty(steps)
    starts = np.empty(steps, dtype=np.int64)
    etas = 2.0 / (suite.mu * (ts + lam))
    iterates = []
    G_sq = 0.0
    for j, t in enumerate(ts):
        w_bar = w.mean(axis=0)
        delta[j] = float(np.sum((w_bar - w_star) ** 2))
        if not np.isfinite(delta[j]):
            last = float(delta[j - 1]) if j else float("nan")
            raise DivergenceError(f"iterates diverged at t={t}", {"t": int(t), "last_delta": last})
        gap[j] = suite.F(w_bar) - suite.optimum.F_star
        drift[j] = float(np.mean(np.sum((w - w_t0) ** 2, axis=1)))
        starts[j] = t0
        if keep_iterates:
            iterates.append(w.copy())
        g = np.einsum("nij,nj->ni", A, w) - b
        if batch_noise > 0:
            g = g + noise_sd * gen.standard_normal((N, d))
        G_sq = max(G_sq, float(np.max(np.sum(g * g, axis=1))))
        v = w - etas[j] * g
        if (t + 1) % E == 0:
            w = lambda_mix * v + (1.0 - lambda_mix) * v.mean(axis=0)
            w_t0 = w.copy()
            t0 = t + 1
        else:
            w = v
    return Trajectory(ts, delta, gap, etas, E, G_sq, drift, starts, iterates)


def one_step_slack(w_t: np.ndarray, w_t0: np.ndarray, eta_t: float, suite: QuadraticSuite) -> float:
    """``lhs - rhs`` of the one-step inequality with exact (noise-free) gradients.

    lhs is ``||v_bar_{t+1} - w*||^2`` after one SGD step from ``w_t``; rhs is
    ``(1 - mu eta) mean_i ||w_t^i - w*||^2 + mean_i ||w_t^i - w_t0^i||^2 + 10 eta^2 L Gamma``.
    """
    if eta_t > 1.0 / (4 * suite.L):
        raise ContractError(f"eta_t={eta_t} exceeds 1/(4L)={1.0 / (4 * suite.L)}")
    w_star = suite.optimum.w_star
    v = np.stack([w_t[i] - eta_t * c.grad(w_t[i]) for i, c in enumerate(suite.clients)])
    lhs = float(np.sum((v.mean(axis=0) - w_star) ** 2))
    rhs = ((1 - suite.mu * eta_t) * float(np.mean(np.sum((w_t - w_star) ** 2, axis=1)))
           + float(np.mean(np.sum((w_t - w_t0) ** 2, axis=1)))
           + 10 * eta_t ** 2 * suite.L * suite.gamma)
    return lhs - rhs


def drift_bound(traj: Trajectory) -> np.ndarray:
    """Drift bound ``4 eta_t^2 (E-1)^2 G^2`` at each step."""
    return 4 * traj.eta ** 2 * (traj.E - 1) ** 2 * traj.G_sq


def loglog_slope(t: np.ndarray, y: np.ndarray, lo: float, hi: float) -> float:
    mask = (t >= lo) & (t <= hi)
    slope, _ = np.polyfit(np.log(t[mask]), np.log(y[mask]), 1)
    return float(slope)


def write_trajectory_csv(path, traj: Trajectory, suite: QuadraticSuite) -> Path:
    path = Path(path)
    rhs = traj.bound_rhs(suite)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "delta_t", "bound_rhs"])
        for t, dlt, b in zip(traj.t, traj.delta, rhs):
            writer.writerow([int(t), repr(float(dlt)), repr(float(b))])
    return path
