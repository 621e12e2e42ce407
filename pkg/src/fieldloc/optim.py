"""Adam and limited-memory BFGS over a flat parameter vector.

Both optimizers are written against a loss/gradient callback and are bitwise
deterministic given identical inputs. L-BFGS keeps only the most recent
(parameter-change, gradient-change) pairs and builds the search direction
with the two-loop recursion; steps are chosen by backtracking Armijo line
search, so accepted iterations never increase the loss.
"""

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class NonFiniteGradient(Exception):
    """A gradient contained NaN or infinity."""


class NonFiniteLoss(Exception):
    """The objective evaluated to NaN or infinity."""


@dataclass(frozen=True)
class AdamState:
    """Moment estimates plus hyperparameters for one optimized vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"decay rates must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.step_count < 0:
            raise ValueError("step count must be non-negative")

    @classmethod
    def fresh(cls, n_params: int, **hyper) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), **hyper)


def adam_step(state: AdamState, theta, gradient):
    """One bias-corrected Adam update; returns (new_state, new_theta)."""
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"gradient has non-finite entries at step {state.step_count + 1}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_theta = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, first_moment=m, second_moment=v, step_count=t), new_theta


@dataclass(frozen=True)
class LbfgsConfig:
    history_size: int = 50
    step_scale: float = 10.0  # initial line-search trial step
    grad_tol: float = 1e-12  # on the max-norm of the gradient
    change_tol: float = 1e-12  # on the absolute loss change per iteration
    max_iterations: int = 500
    armijo_c1: float = 1e-4
    max_backtracks: int = 40
    curvature_floor: float = 1e-10  # reject pairs with s.y <= floor*|s||y|


@dataclass
class LbfgsState:
    """Ring of (s_k, y_k) pairs: parameter changes and gradient changes."""

    config: LbfgsConfig = field(default_factory=LbfgsConfig)
    pairs: deque = field(default_factory=deque)

    def push_pair(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a curvature pair unless it fails the positive-curvature guard."""
        sy = float(s @ y)
        if sy <= self.config.curvature_floor * float(np.linalg.norm(s) * np.linalg.norm(y)):
            return False
        self.pairs.append((s, y))
        while len(self.pairs) > self.config.history_size:
            self.pairs.popleft()
        return True


class TerminationReason(Enum):
    GRADIENT_TOLERANCE = "gradient_tolerance"
    CHANGE_TOLERANCE = "change_tolerance"
    LINE_SEARCH_FAILURE = "line_search_failure"
    MAX_ITERATIONS = "max_iterations"


def lbfgs_direction(state: LbfgsState, gradient) -> np.ndarray:
    """Two-loop recursion for -H*grad with gamma-scaled initial Hessian.

    With an empty history this is steepest descent. The implicit H is the
    recursive inverse-Hessian update applied over the stored pairs, seeded
    with gamma*I where gamma = s.y/y.y of the newest pair.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if not state.pairs:
        return -g
    q = g.copy()
    rhos, alphas = [], []
    for s, y in reversed(state.pairs):
        rho = 1.0 / float(y @ s)
        alpha = rho * float(s @ q)
        q -= alpha * y
        rhos.append(rho)
        alphas.append(alpha)
    s_new, y_new = state.pairs[-1]
    gamma = float(s_new @ y_new) / float(y_new @ y_new)
    r = gamma * q
    for (s, y), rho, alpha in zip(state.pairs, reversed(rhos), reversed(alphas)):
        beta = rho * float(y @ r)
        r += (alpha - beta) * s
    return -r


def lbfgs_minimize(theta0, loss_and_grad, config: LbfgsConfig | None = None,
                   loss_fn=None, callback=None):
    """Full-batch L-BFGS with backtracking Armijo line search.

    loss_and_grad(theta) -> (loss, gradient) must be deterministic for the
    duration of the run. loss_fn, if given, is a cheaper loss-only callback
    used for rejected line-search trials. callback(iteration, theta, loss,
    gradient) fires after each accepted step.

    Returns (theta, TerminationReason). The first trial step of iteration 0
    is min(step_scale, 1/|grad|); later iterations start from step_scale.
    Non-finite trial losses are treated as rejected steps; a non-finite loss
    at the current iterate raises NonFiniteLoss.
    """
    cfg = config or LbfgsConfig()
    if loss_fn is None:
        loss_fn = lambda th: loss_and_grad(th)[0]
    theta = np.asarray(theta0, dtype=np.float64).copy()
    f, g = loss_and_grad(theta)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteLoss(f"objective non-finite at the starting point (loss={f})")
    state = LbfgsState(cfg)
    if float(np.max(np.abs(g))) <= cfg.grad_tol:
        return theta, TerminationReason.GRADIENT_TOLERANCE
    for iteration in range(cfg.max_iterations):
        d = lbfgs_direction(state, g)
        slope = float(g @ d)
        if slope >= 0.0:
            # Stale curvature produced an ascent direction; fall back to
            # steepest descent with a fresh history.
            state.pairs.clear()
            d = -g
            slope = -float(g @ g)
        grad_norm = float(np.linalg.norm(g))
        t = min(cfg.step_scale, 1.0 / grad_norm) if iteration == 0 else cfg.step_scale
        accepted = False
        for backtrack in range(cfg.max_backtracks + 1):
            trial = theta + t * d
            f_trial = loss_fn(trial)
            if math.isfinite(f_trial) and f_trial <= f + cfg.armijo_c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return theta, TerminationReason.LINE_SEARCH_FAILURE
        f_new, g_new = loss_and_grad(trial)
        if not (math.isfinite(f_new) and np.all(np.isfinite(g_new))):
            raise NonFiniteLoss(f"objective non-finite at accepted step (loss={f_new})")
        state.push_pair(trial - theta, g_new - g)
        loss_change = abs(f_new - f)
        theta, f, g = trial, f_new, g_new
        if callback is not None:
            callback(iteration, theta, f, g)
        if float(np.max(np.abs(g))) <= cfg.grad_tol:
            return theta, TerminationReason.GRADIENT_TOLERANCE
        if loss_change <= cfg.change_tol:
            return theta, TerminationReason.CHANGE_TOLERANCE
    return theta, TerminationReason.MAX_ITERATIONS
