"""Limited-memory BFGS with a strong Wolfe line search.

Two-loop recursion over the last ``memory`` curvature pairs; the line search
is bracket-and-zoom with cubic interpolation. Non-finite trial evaluations
are treated as "step too far" and the bracket shrinks; curvature pairs with
non-positive s.y are skipped so the inverse-Hessian estimate stays positive
definite. Every accepted step records whether both Wolfe conditions held.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsSettings:
    memory: int = 10
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8      # sup-norm of the gradient
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search: int = 30

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1 or self.max_iterations < 1:
            raise ValueError("memory and iteration budget must be positive")


@dataclass
class WolfeStep:
    alpha: float
    sufficient_decrease: bool
    curvature: bool


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    status: str
    f_history: list = field(default_factory=list)
    wolfe_trace: list = field(default_factory=list)


def _cubic_step(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    """Minimizer of the cubic through both endpoint values and slopes."""
    if a_lo == a_hi:
        return a_lo
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - g_lo * g_hi
    if disc < 0:
        return 0.5 * (a_lo + a_hi)
    d2 = np.sign(a_hi - a_lo) * np.sqrt(disc)
    denom = g_hi - g_lo + 2.0 * d2
    if denom == 0:
        return 0.5 * (a_lo + a_hi)
    alpha = a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    span = hi - lo
    # keep strictly interior so the bracket always shrinks
    if not (lo + 0.05 * span <= alpha <= hi - 0.05 * span):
        alpha = 0.5 * (a_lo + a_hi)
    return alpha


class _LineEval:
    """phi(alpha) = f(x + alpha d) with the latest gradient kept around."""

    def __init__(self, func, x, direction):
        self.func = func
        self.x = x
        self.d = direction
        self.g = None
        self.f = None

    def __call__(self, alpha):
        f, g = self.func(self.x + alpha * self.d)
        self.f, self.g = f, g
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return None
        return f, float(g @ self.d)


def _zoom(line, a_lo, f_lo, g_lo, a_hi, f_hi, g_hi, f0, dphi0, c1, c2, budget):
    for _ in range(budget):
        alpha = _cubic_step(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        res = line(alpha)
        if res is None:
            # non-finite: pull the far end toward the known-good end
            a_hi, f_hi, g_hi = a_lo + 0.3 * (alpha - a_lo), None, None
            res = line(a_hi)
            if res is None:
                return None
            f_hi, g_hi = res
            continue
        f, dphi = res
        if f > f0 + c1 * alpha * dphi0 or f >= f_lo:
            a_hi, f_hi, g_hi = alpha, f, dphi
        else:
            if abs(dphi) <= -c2 * dphi0:
                return alpha, f, line.g, dphi
            if dphi * (a_hi - a_lo) >= 0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = alpha, f, dphi
        if abs(a_hi - a_lo) < 1e-16:
            return None
    return None


def _strong_wolfe(func, x, f0, grad0, direction, settings, alpha0=1.0):
    """Returns (alpha, f, grad, dphi) or None on failure."""
    c1, c2 = settings.wolfe_c1, settings.wolfe_c2
    dphi0 = float(grad0 @ direction)
    if dphi0 >= 0:
        return None
    line = _LineEval(func, x, direction)
    a_prev, f_prev, g_prev = 0.0, f0, dphi0
    alpha = alpha0
    for i in range(settings.max_line_search):
        res = line(alpha)
        if res is None:
            alpha = 0.5 * (a_prev + alpha)
            continue
        f, dphi = res
        if f > f0 + c1 * alpha * dphi0 or (i > 0 and f >= f_prev):
            return _zoom(line, a_prev, f_prev, g_prev, alpha, f, dphi,
                         f0, dphi0, c1, c2, settings.max_line_search)
        if abs(dphi) <= -c2 * dphi0:
            return alpha, f, line.g, dphi
        if dphi >= 0:
            return _zoom(line, alpha, f, dphi, a_prev, f_prev, g_prev,
                         f0, dphi0, c1, c2, settings.max_line_search)
        a_prev, f_prev, g_prev = alpha, f, dphi
        alpha *= 2.0
    return None


def lbfgs_minimize(func, x0, settings: LbfgsSettings | None = None,
                   iteration_hook=None) -> LbfgsResult:
    """Minimize f given ``func(x) -> (f, grad)``.

    ``iteration_hook(iteration, x, f, grad)`` runs after each accepted step;
    if it returns True the objective is considered revised and f/grad are
    re-evaluated at the current point before continuing.
    """
    settings = settings or LbfgsSettings()
    x = np.asarray(x0, dtype=np.float64).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite start point")
    f, g = func(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError(f"objective non-finite at start: f={f}")

    s_mem: list[np.ndarray] = []
    y_mem: list[np.ndarray] = []
    rho_mem: list[float] = []
    result = LbfgsResult(x, float(f), g, 0, False, "max-iterations")
    result.f_history.append(float(f))

    for it in range(settings.max_iterations):
        if np.max(np.abs(g)) < settings.gradient_tolerance:
            result.converged = True
            result.status = "gradient"
            break

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_mem), reversed(y_mem), reversed(rho_mem)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_mem:
            gamma = (s_mem[-1] @ y_mem[-1]) / (y_mem[-1] @ y_mem[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_mem, y_mem, rho_mem), reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        direction = -q

        if g @ direction >= 0:
            # inverse-Hessian estimate went bad: restart from steepest descent
            s_mem, y_mem, rho_mem = [], [], []
            direction = -g

        alpha0 = 1.0 if y_mem else min(1.0, 1.0 / max(1.0, np.max(np.abs(g))))
        hit = _strong_wolfe(func, x, f, g, direction, settings, alpha0)
        if hit is None:
            result.status = "line-search"
            break
        alpha, f_new, g_new, dphi = hit
        if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
            result.status = "non-finite"
            break

        dphi0 = float(g @ direction)
        result.wolfe_trace.append(WolfeStep(
            alpha,
            bool(f_new <= f + settings.wolfe_c1 * alpha * dphi0 + 1e-15 * abs(f)),
            bool(abs(dphi) <= -settings.wolfe_c2 * dphi0),
        ))

        step = alpha * direction
        y_vec = g_new - g
        sy = float(step @ y_vec)
        if sy > 1e-10 * np.linalg.norm(step) * np.linalg.norm(y_vec):
            s_mem.append(step)
            y_mem.append(y_vec)
            rho_mem.append(1.0 / sy)
            if len(s_mem) > settings.memory:
                s_mem.pop(0)
                y_mem.pop(0)
                rho_mem.pop(0)

        x = x + step
        f, g = f_new, g_new
        result.iterations = it + 1
        result.f_history.append(float(f))

        if iteration_hook is not None and iteration_hook(it, x, f, g):
            f, g = func(x)
            if not (np.isfinite(f) and np.all(np.isfinite(g))):
                result.status = "non-finite"
                break
            result.f_history[-1] = float(f)
    else:
        if np.max(np.abs(g)) < settings.gradient_tolerance:
            result.converged = True
            result.status = "gradient"

    result.x, result.f, result.grad = x, float(f), g
    return result
