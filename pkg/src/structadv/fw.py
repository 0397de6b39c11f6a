"""Attack optimizers: vanilla Frank-Wolfe over a distortion ball centered at
the original image, plus PGD and FGSM baselines.

All three work against a loss oracle ``oracle(x) -> (loss, grad)`` where the
loss is the negated classification loss, so every method *descends*.  Iterates
live in perturbation coordinates (delta = x - x_ori); the box constraint is
applied once, to the returned image only.
"""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .distortion import DistortionBall, LINF, ball_norm, lmo, project
from .linalg import inner_product


@dataclass(frozen=True)
class ShortStep:
    """gamma = clip_[0,1](gap / (L * ||s - x||^2)); L estimated if omitted."""

    lipschitz: Optional[float] = None


@dataclass(frozen=True)
class Decaying:
    """gamma = 2 / (t + 2)."""


@dataclass(frozen=True)
class Backtracking:
    """Halve gamma from 1 until loss(x + gamma d) <= loss(x) - 0.5 gamma gap."""

    shrink: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class IterRecord:
    loss: float
    fw_gap: float
    gamma: float
    selected_group: Optional[int] = None
    selected_channel: Optional[int] = None


@dataclass
class FwTrace:
    """Per-iteration log plus the final (pre-clamp) perturbation."""

    records: list = field(default_factory=list)
    delta: Optional[np.ndarray] = None
    adversarial: Optional[np.ndarray] = None
    converged_reason: str = "max_iters"
    first_success_iter: Optional[int] = None
    lipschitz: Optional[float] = None
    lipschitz_estimated: bool = False


class OracleError(RuntimeError):
    """The loss oracle returned a non-finite loss or gradient."""


def _evaluate(oracle, x):
    loss, grad = oracle(x)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise OracleError(f"oracle returned non-finite output (loss={loss})")
    if grad.shape != x.shape:
        raise OracleError(f"gradient shape {grad.shape} does not match input shape {x.shape}")
    return float(loss), grad


def random_feasible_delta(ball, shape, rng):
    """Uniformly scaled random point of the ball: a random direction's LMO
    vertex shrunk by u ~ U[0,1] (feasible by convexity)."""
    direction = rng.standard_normal(shape)
    vert = lmo(ball, direction)
    return float(rng.uniform()) * vert.delta


def estimate_lipschitz(oracle, x_ori, ball, seed=0, pairs=50, floor=1e-6):
    """Gradient-Lipschitz estimate: 2x the max observed slope over random
    in-ball pairs.  A config-supplied constant is always preferred."""
    rng = np.random.default_rng(seed)
    x_ori = np.asarray(x_ori, dtype=np.float64)
    best = 0.0
    for _ in range(pairs):
        a = x_ori + random_feasible_delta(ball, x_ori.shape, rng)
        b = x_ori + random_feasible_delta(ball, x_ori.shape, rng)
        gap = np.linalg.norm(a - b)
        if gap == 0.0:
            continue
        _, ga = _evaluate(oracle, a)
        _, gb = _evaluate(oracle, b)
        best = max(best, float(np.linalg.norm(ga - gb)) / gap)
    return max(2.0 * best, floor)


def frank_wolfe(oracle, x_ori, ball, step, max_iters, gap_tol=0.0,
                random_start=False, channel_subsample=False, seed=0,
                success_fn: Optional[Callable] = None, stop_on_success=False,
                initial_delta=None):
    """Vanilla Frank-Wolfe attack over ``ball`` centered at ``x_ori``.

    Each iteration calls the LMO on the current gradient, measures the FW gap
    <-grad, s - x>, steps by the configured rule, and keeps the iterate as a
    convex combination of vertices (hence ball-feasible throughout).
    ``success_fn`` is evaluated on the box-clamped image each iteration to
    record the first misclassification; with ``stop_on_success`` it also stops
    the run.  Intermediate iterates are never clamped; only the returned
    adversarial image is.
    """
    x_ori = np.asarray(x_ori, dtype=np.float64)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    trace = FwTrace()

    delta = np.zeros_like(x_ori)
    if initial_delta is not None:
        delta = np.asarray(initial_delta, dtype=np.float64).copy()
    elif random_start:
        delta = random_feasible_delta(ball, x_ori.shape, rng)
    if initial_delta is not None or random_start:
        norm = ball_norm(ball, delta)
        if norm > ball.radius * (1 + 1e-7):
            raise ValueError(f"infeasible start: norm {norm} > radius {ball.radius}")

    lipschitz = None
    if isinstance(step, ShortStep):
        if step.lipschitz is not None:
            lipschitz = float(step.lipschitz)
        else:
            lipschitz = estimate_lipschitz(oracle, x_ori, ball, seed=seed)
            trace.lipschitz_estimated = True
        if lipschitz <= 0:
            raise ValueError("Lipschitz constant must be positive")
        trace.lipschitz = lipschitz

    trace.converged_reason = "max_iters"
    for t in range(max_iters):
        x = x_ori + delta
        loss, grad = _evaluate(oracle, x)

        if success_fn is not None and trace.first_success_iter is None:
            if success_fn(np.clip(x, 0.0, 1.0)):
                trace.first_success_iter = t
                if stop_on_success:
                    trace.records.append(IterRecord(loss, 0.0, 0.0))
                    trace.converged_reason = "success_stop"
                    break

        channels = None
        if channel_subsample:
            n_ch = x_ori.shape[0]
            mask = rng.uniform(size=n_ch) < 0.5
            if not mask.any():
                mask[rng.integers(n_ch)] = True
            channels = np.flatnonzero(mask)

        vert = lmo(ball, grad, channels=channels)
        diff = vert.delta - delta
        gap = -inner_product(grad, diff)
        record = IterRecord(loss, gap, 0.0, vert.selected_group, vert.selected_channel)

        if gap <= gap_tol:
            trace.records.append(record)
            trace.converged_reason = "gap_tol"
            break

        if isinstance(step, ShortStep):
            denom = lipschitz * float(np.sum(diff * diff))
            gamma = min(1.0, max(0.0, gap / denom)) if denom > 0 else 1.0
        elif isinstance(step, Decaying):
            gamma = 2.0 / (t + 2.0)
        elif isinstance(step, Backtracking):
            gamma = 1.0
            for _ in range(step.max_halvings):
                trial_loss, _ = _evaluate(oracle, x_ori + delta + gamma * diff)
                if trial_loss <= loss - 0.5 * gamma * gap:
                    break
                gamma *= step.shrink
        else:
            raise TypeError(f"unknown step rule {step!r}")

        record.gamma = gamma
        trace.records.append(record)
        delta = delta + gamma * diff

    trace.delta = delta
    trace.adversarial = np.clip(x_ori + delta, 0.0, 1.0)
    return trace


def fgsm(oracle, x_ori, epsilon):
    """One signed step of size epsilon, descending the (negated) loss, then
    box-clamped."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x_ori = np.asarray(x_ori, dtype=np.float64)
    _, grad = _evaluate(oracle, x_ori)
    return np.clip(x_ori - epsilon * np.sign(grad), 0.0, 1.0)


def pgd(oracle, x_ori, epsilon, alpha, iters, random_start=False, seed=0):
    """Iterated signed-gradient descent projected onto the l-inf ball, with a
    box clamp every step; runs exactly ``iters`` steps."""
    if epsilon <= 0 or alpha <= 0:
        raise ValueError("epsilon and alpha must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if alpha > 2 * epsilon:
        warnings.warn(f"pgd step size {alpha} exceeds 2*epsilon={2 * epsilon}", stacklevel=2)
    x_ori = np.asarray(x_ori, dtype=np.float64)
    ball = DistortionBall(LINF, epsilon)
    delta = np.zeros_like(x_ori)
    if random_start:
        rng = np.random.default_rng(seed)
        delta = rng.uniform(-epsilon, epsilon, size=x_ori.shape)
        delta = np.clip(x_ori + delta, 0.0, 1.0) - x_ori
    for _ in range(iters):
        _, grad = _evaluate(oracle, x_ori + delta)
        delta = project(ball, delta - alpha * np.sign(grad))
        delta = np.clip(x_ori + delta, 0.0, 1.0) - x_ori
    return x_ori + delta
