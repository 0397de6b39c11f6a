"""Self-check batteries runnable from the CLI: LMO optimality against sampled
feasible points, and finite-difference gradient checks for every layer kind.
"""

from dataclasses import dataclass

import numpy as np

from . import net
from .distortion import (DistortionBall, GroupPartition, GROUP_NUCLEAR, L1, L2,
                         LINF, NUCLEAR, WEIGHTED_GROUP_NUCLEAR, ball_norm, lmo)
from .linalg import full_svd_small, inner_product


@dataclass
class LmoSelftestResult:
    max_violation: float          # worst lmo objective minus best sampled objective
    max_nuclear_value_error: float  # relative error vs -rho * max_c sigma1
    max_feasibility_excess: float   # ball_norm(delta)/radius - 1, positive part
    directions: int
    sampled_points: int


def _make_balls(shape, rng):
    partition = GroupPartition.grid(shape, 2)
    weights = tuple(rng.uniform(0.5, 2.0, size=len(partition)))
    return [
        DistortionBall(NUCLEAR, 1.5),
        DistortionBall(GROUP_NUCLEAR, 1.5, partition=partition),
        DistortionBall(WEIGHTED_GROUP_NUCLEAR, 1.5, partition=partition, weights=weights),
        DistortionBall(LINF, 0.5),
        DistortionBall(L2, 1.0),
        DistortionBall(L1, 1.0),
    ]


def sample_feasible(ball, shape, n, rng):
    """n random feasible points, each a random tensor rescaled to a uniformly
    drawn fraction of the ball radius."""
    raw = rng.standard_normal((n,) + tuple(shape))
    scale = rng.uniform(size=n)
    out = np.empty_like(raw)
    for i in range(n):
        norm = ball_norm(ball, raw[i])
        out[i] = raw[i] * (ball.radius * scale[i] / norm) if norm > 0 else 0.0
    return out


def lmo_selftest(seed=0, shape=(3, 8, 8), n_directions=200, n_samples=10_000):
    """For every ball kind, check lmo(d) against n_samples sampled feasible
    points on n_directions random directions, plus the closed-form value
    identity for the nuclear ball."""
    rng = np.random.default_rng(seed)
    balls = _make_balls(shape, rng)
    flat_dim = int(np.prod(shape))

    max_violation = -np.inf
    max_value_err = 0.0
    max_feas = 0.0
    for ball in balls:
        pool = sample_feasible(ball, shape, n_samples, rng).reshape(n_samples, flat_dim)
        for _ in range(n_directions):
            d = rng.standard_normal(shape)
            vert = lmo(ball, d)
            obj = inner_product(d, vert.delta)
            sampled_min = float((pool @ d.ravel()).min())
            max_violation = max(max_violation, obj - sampled_min)
            max_feas = max(max_feas, ball_norm(ball, vert.delta) / ball.radius - 1.0)
            if ball.kind == NUCLEAR:
                sigma_max = max(full_svd_small(d[c])[1][0] for c in range(shape[0]))
                expected = -ball.radius * sigma_max
                max_value_err = max(max_value_err, abs(obj - expected) / abs(expected))
    return LmoSelftestResult(max_violation, max_value_err, max_feas,
                             n_directions, n_samples)


def gradient_check(seed=0, h=1e-5, n_coords=40):
    """Central finite-difference check of input and parameter gradients for a
    net exercising every layer kind; returns the max relative error."""
    rng = np.random.default_rng(seed)
    spec = net.NetSpec((net.Conv(3), net.Relu(), net.MaxPool(), net.Flatten(),
                        net.Dense(5)), (2, 6, 6), 5)
    params = net.init_params(spec, seed=seed)
    x = rng.uniform(0.05, 0.95, size=spec.input_shape)
    y = int(rng.integers(spec.num_classes))

    def loss_at(xv, pv):
        loss, _, _ = net.loss_and_grads(spec, pv, xv[None], np.array([y]))
        return loss

    loss, grads, dx = net.loss_and_grads(spec, params, x[None], np.array([y]))
    dx = dx[0]
    worst = 0.0

    flat_idx = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    for i in flat_idx:
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[i] += h
        xm[i] -= h
        fd = (loss_at(xp.reshape(x.shape), params) - loss_at(xm.reshape(x.shape), params)) / (2 * h)
        denom = max(abs(fd), abs(dx.ravel()[i]), 1e-6)
        worst = max(worst, abs(fd - dx.ravel()[i]) / denom)

    for li, p in enumerate(params):
        if p is None:
            continue
        for key in ("w", "b"):
            arr = p[key]
            idx = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
            for i in idx:
                pp = net._clone_params(params)
                pm = net._clone_params(params)
                pp[li][key].ravel()[i] += h
                pm[li][key].ravel()[i] -= h
                fd = (loss_at(x, pp) - loss_at(x, pm)) / (2 * h)
                g = grads[li][key].ravel()[i]
                denom = max(abs(fd), abs(g), 1e-6)
                worst = max(worst, abs(fd - g) / denom)
    return worst
