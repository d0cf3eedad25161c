"""Few-shot linear probing: multinomial logistic regression under L-BFGS.

The optimizer is a standard limited-memory BFGS with two-loop recursion
and a strong-Wolfe line search; the regularization strength is selected
on a held-out fold over a 96-point log-spaced grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError

GRID_STEPS = 96


def default_reg_grid() -> np.ndarray:
    return np.logspace(-6.0, 6.0, GRID_STEPS)


@dataclass(frozen=True)
class ProbeConfig:
    shots: int = 5
    reg_grid: tuple[float, ...] = field(default_factory=lambda: tuple(default_reg_grid()))
    max_iterations: int = 1000
    history: int = 10
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigError("shots must be at least 1")
        grid = np.asarray(self.reg_grid)
        if grid.ndim != 1 or len(grid) < 1 or np.any(np.diff(grid) <= 0):
            raise ConfigError("regularization grid must be strictly increasing")


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class LbfgsResult:
    x: np.ndarray
    objective_history: list[float]
    iterations: int
    converged: bool


def _strong_wolfe(
    fun_grad: Callable,
    x: np.ndarray,
    direction: np.ndarray,
    f0: float,
    g0: np.ndarray,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_evals: int = 30,
):
    """Line search satisfying the strong Wolfe conditions (bracket + zoom)."""
    dphi0 = float(g0 @ direction)
    if dphi0 >= 0:
        raise ContractError("line search requires a descent direction")

    def phi(alpha):
        f, g = fun_grad(x + alpha * direction)
        return f, g, float(g @ direction)

    def zoom(lo, f_lo, dphi_lo, hi, f_hi):
        for _ in range(max_evals):
            alpha = 0.5 * (lo + hi)
            f, g, dphi = phi(alpha)
            if f > f0 + c1 * alpha * dphi0 or f >= f_lo:
                hi, f_hi = alpha, f
            else:
                if abs(dphi) <= -c2 * dphi0:
                    return alpha, f, g
                if dphi * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, dphi_lo = alpha, f, dphi
            if abs(hi - lo) < 1e-16:
                break
        f, g, _ = phi(lo)
        return lo, f, g

    alpha_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    alpha = 1.0
    f = f0
    g = g0
    for i in range(max_evals):
        f, g, dphi = phi(alpha)
        if f > f0 + c1 * alpha * dphi0 or (i > 0 and f >= f_prev):
            return zoom(alpha_prev, f_prev, dphi_prev, alpha, f)
        if abs(dphi) <= -c2 * dphi0:
            return alpha, f, g
        if dphi >= 0:
            return zoom(alpha, f, dphi, alpha_prev, f_prev)
        alpha_prev, f_prev, dphi_prev = alpha, f, dphi
        alpha *= 2.0
    return alpha, f, g


def lbfgs_minimize(
    fun_grad: Callable,
    x0: np.ndarray,
    max_iterations: int = 1000,
    history: int = 10,
    grad_tol: float = 1e-9,
    objective_tol: float = 0.0,
) -> LbfgsResult:
    """Minimize fun_grad (returning (f, grad)) from x0.

    The objective history records f at every accepted iterate and is
    strictly decreasing: iteration stops once a Wolfe step no longer
    strictly improves f (beyond ``objective_tol`` relative), or the
    gradient norm falls under ``grad_tol``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_grad(x)
    objective_history = [float(f)]
    s_list: list[np.ndarray] = []
    y_list: list[np.ndarray] = []
    rho_list: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, max_iterations + 1):
        if np.linalg.norm(g) <= grad_tol:
            converged = True
            iterations -= 1
            break

        # Two-loop recursion for H @ g.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_list:
            last_s, last_y = s_list[-1], y_list[-1]
            q *= (last_s @ last_y) / (last_y @ last_y)
        for s, y, rho, a in zip(s_list, y_list, rho_list, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q

        if float(g @ direction) >= 0:
            direction = -g  # restart from steepest descent

        alpha, f_new, g_new = _strong_wolfe(fun_grad, x, direction, f, g)
        if not f_new < f - objective_tol * max(1.0, abs(f)):
            converged = True
            iterations -= 1
            break
        step = alpha * direction
        y_vec = g_new - g
        sy = float(step @ y_vec)
        if sy > 1e-12:
            s_list.append(step)
            y_list.append(y_vec)
            rho_list.append(1.0 / sy)
            if len(s_list) > history:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        x = x + step
        f, g = f_new, g_new
        objective_history.append(float(f))

    return LbfgsResult(x=x, objective_history=objective_history, iterations=iterations, converged=converged)


# ---------------------------------------------------------------------------
# multinomial logistic regression


def logistic_loss_grad(flat: np.ndarray, features: np.ndarray, labels: np.ndarray, n_classes: int, reg: float):
    """Mean cross-entropy + (reg/2)||W||^2; bias is unregularized."""
    n, dim = features.shape
    w = flat[: dim * n_classes].reshape(dim, n_classes)
    b = flat[dim * n_classes :]
    logits = features @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    log_probs = logits - log_z
    loss = -log_probs[np.arange(n), labels].mean() + 0.5 * reg * float((w * w).sum())
    probs = np.exp(log_probs)
    probs[np.arange(n), labels] -= 1.0
    probs /= n
    grad_w = features.T @ probs + reg * w
    grad_b = probs.sum(axis=0)
    return loss, np.concatenate([grad_w.ravel(), grad_b])


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    reg: float,
    max_iterations: int = 1000,
    history: int = 10,
) -> tuple[np.ndarray, np.ndarray, LbfgsResult]:
    """Train W, b by L-BFGS from zero initialization."""
    dim = features.shape[1]
    x0 = np.zeros(dim * n_classes + n_classes)
    result = lbfgs_minimize(
        lambda x: logistic_loss_grad(x, features, labels, n_classes, reg),
        x0,
        max_iterations=max_iterations,
        history=history,
    )
    w = result.x[: dim * n_classes].reshape(dim, n_classes)
    b = result.x[dim * n_classes :]
    return w, b, result


def predict_logistic(w: np.ndarray, b: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.argmax(features @ w + b, axis=1)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predictions == labels))


@dataclass
class ProbeOutcome:
    test_accuracy: float
    chosen_reg: float
    holdout_accuracy: float


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    cfg: ProbeConfig,
) -> ProbeOutcome:
    """Grid-searched logistic probe: fit on a sub-fold, select reg, refit.

    The holdout fold takes ``holdout_fraction`` of the few-shot training
    set (at least one example); the best grid point by holdout accuracy
    (lowest reg on ties) is refit on the full training set.
    """
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    present = np.unique(train_labels)
    if len(present) != n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ConfigError(f"classes {missing} missing from the probe training set")

    n = len(train_labels)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_holdout = max(1, round(cfg.holdout_fraction * n)) if n > 1 else 0
    holdout_idx = order[:n_holdout]
    fit_idx = order[n_holdout:]
    if len(fit_idx) == 0:
        fit_idx = order

    best = (-1.0, 0)
    for gi, reg in enumerate(cfg.reg_grid):
        w, b, _ = fit_logistic(
            train_features[fit_idx], train_labels[fit_idx], n_classes, reg,
            max_iterations=cfg.max_iterations, history=cfg.history,
        )
        if len(holdout_idx):
            score = accuracy(predict_logistic(w, b, train_features[holdout_idx]),
                             train_labels[holdout_idx])
        else:
            score = accuracy(predict_logistic(w, b, train_features), train_labels)
        if score > best[0]:
            best = (score, gi)

    chosen_reg = float(cfg.reg_grid[best[1]])
    w, b, _ = fit_logistic(
        train_features, train_labels, n_classes, chosen_reg,
        max_iterations=cfg.max_iterations, history=cfg.history,
    )
    test_acc = accuracy(predict_logistic(w, b, test_features), test_labels)
    return ProbeOutcome(test_accuracy=test_acc, chosen_reg=chosen_reg, holdout_accuracy=best[0])
