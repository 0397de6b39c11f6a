"""Distortion sets: ball norms, linear minimization oracles, Euclidean
projections for the l-inf/l2 baselines, and variance-based group weights.

Sign convention: ``lmo(ball, d)`` minimizes <d, v> over the ball.  The
optimizer passes the gradient of the (already negated) adversarial loss, so no
extra sign juggling happens anywhere else.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import top_singular_pair, vector_norms

LMO_TOL = 1e-10
LMO_MAX_ITERS = 2000

NUCLEAR = "nuclear"
GROUP_NUCLEAR = "group_nuclear"
WEIGHTED_GROUP_NUCLEAR = "weighted_group_nuclear"
LINF = "linf"
L2 = "l2"
L1 = "l1"

_GROUP_KINDS = (GROUP_NUCLEAR, WEIGHTED_GROUP_NUCLEAR)
_ALL_KINDS = (NUCLEAR, GROUP_NUCLEAR, WEIGHTED_GROUP_NUCLEAR, LINF, L2, L1)


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint cover of a (c, h, w) tensor by single-channel boxes.

    Each group is a half-open box (c0, c1, r0, r1, k0, k1) with c1 == c0 + 1:
    a rank-one atom needs a plain 2-d rectangle, so groups never span channels.
    """

    shape: tuple
    groups: tuple

    def __post_init__(self):
        c, h, w = self.shape
        cover = np.zeros(self.shape, dtype=np.int64)
        for i, (c0, c1, r0, r1, k0, k1) in enumerate(self.groups):
            if c1 != c0 + 1:
                raise ValueError(f"group {i} spans channels [{c0},{c1}); one channel per group")
            if not (0 <= c0 < c1 <= c and 0 <= r0 < r1 <= h and 0 <= k0 < k1 <= w):
                raise ValueError(f"group {i} box {(c0, c1, r0, r1, k0, k1)} escapes shape {self.shape}")
            cover[c0:c1, r0:r1, k0:k1] += 1
        if cover.max(initial=0) > 1:
            raise ValueError("groups overlap")
        if cover.min(initial=2) < 1:
            raise ValueError("groups do not cover every pixel coordinate")

    def __len__(self):
        return len(self.groups)

    def slices(self, i):
        c0, c1, r0, r1, k0, k1 = self.groups[i]
        return c0, slice(r0, r1), slice(k0, k1)

    def block(self, x, i):
        c0, rs, ks = self.slices(i)
        return x[c0, rs, ks]

    @classmethod
    def grid(cls, shape, tiles):
        """Regular tiles x tiles tiling of each channel; last tile absorbs remainders."""
        c, h, w = shape
        if tiles < 1 or tiles > min(h, w):
            raise ValueError(f"grid size {tiles} invalid for shape {shape}")
        row_edges = [min(i * (h // tiles), h) for i in range(tiles)] + [h]
        col_edges = [min(i * (w // tiles), w) for i in range(tiles)] + [w]
        groups = []
        for ch in range(c):
            for i in range(tiles):
                for j in range(tiles):
                    groups.append((ch, ch + 1, row_edges[i], row_edges[i + 1],
                                   col_edges[j], col_edges[j + 1]))
        return cls(tuple(shape), tuple(groups))

    @classmethod
    def from_config(cls, obj, shape):
        """Build from the JSON config form: {"grid": t} or a list of boxes."""
        if isinstance(obj, dict) and set(obj) == {"grid"}:
            return cls.grid(shape, int(obj["grid"]))
        if isinstance(obj, list):
            return cls(tuple(shape), tuple(tuple(int(v) for v in box) for box in obj))
        raise ValueError("partition must be {'grid': t} or a list of boxes")


@dataclass(frozen=True)
class DistortionBall:
    """Feasible-set description: kind, radius, and group data where relevant.

    ``select_by_full_nuclear`` switches the group argmax from the top singular
    value (exact dual of the l1-aggregated group norm) to the full per-group
    nuclear norm; see ``lmo``.
    """

    kind: str
    radius: float
    partition: Optional[GroupPartition] = None
    weights: Optional[tuple] = None
    select_by_full_nuclear: bool = False

    def __post_init__(self):
        if self.kind not in _ALL_KINDS:
            raise ValueError(f"unknown ball kind {self.kind!r}")
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise ValueError(f"radius must be positive and finite, got {self.radius}")
        if self.kind in _GROUP_KINDS and self.partition is None:
            raise ValueError(f"{self.kind} ball requires a partition")
        if self.kind == WEIGHTED_GROUP_NUCLEAR:
            if self.weights is None:
                raise ValueError("weighted_group_nuclear ball requires weights")
            w = np.asarray(self.weights, dtype=np.float64)
            if len(w) != len(self.partition):
                raise ValueError(f"{len(w)} weights for {len(self.partition)} groups")
            if not np.all(w > 0):
                raise ValueError("weights must be strictly positive")


@dataclass(frozen=True)
class Vertex:
    """An LMO output: a ball-feasible perturbation centered at zero."""

    delta: np.ndarray
    selected_group: Optional[int] = None
    selected_channel: Optional[int] = None


def _check_tensor(x, ball):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a (c, h, w) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite entries")
    if ball.partition is not None and tuple(x.shape) != tuple(ball.partition.shape):
        raise ValueError(f"tensor shape {x.shape} does not match partition shape {ball.partition.shape}")
    return x


def ball_norm(ball, x):
    """Norm of ``x`` in the ball's geometry (the gauge times the radius is feasibility)."""
    x = _check_tensor(x, ball)
    if ball.kind == NUCLEAR:
        return float(sum(np.linalg.svd(x[c], compute_uv=False).sum() for c in range(x.shape[0])))
    if ball.kind == GROUP_NUCLEAR:
        return float(sum(np.linalg.svd(ball.partition.block(x, i), compute_uv=False).sum()
                         for i in range(len(ball.partition))))
    if ball.kind == WEIGHTED_GROUP_NUCLEAR:
        return float(sum(w * np.linalg.svd(ball.partition.block(x, i), compute_uv=False).sum()
                         for i, w in enumerate(ball.weights)))
    l1, l2, linf = vector_norms(x)
    return {LINF: linf, L2: l2, L1: l1}[ball.kind]


def _group_channels(partition):
    return [g[0] for g in partition.groups]


def lmo(ball, d, channels=None):
    """argmin over the ball of <d, v>, returned as a feasible Vertex.

    ``channels`` optionally restricts the channel/group argmax to a subset (the
    optimizer's channel-subsampling hook).  A zero direction yields the zero
    vertex so the iterate is left unchanged.
    """
    d = _check_tensor(d, ball)
    delta = np.zeros_like(d)
    if not np.any(d):
        return Vertex(delta)
    if channels is not None:
        channels = frozenset(int(c) for c in channels)
        if not channels:
            raise ValueError("channel restriction must be nonempty")

    if ball.kind == NUCLEAR:
        best = None
        for c in range(d.shape[0]):
            if channels is not None and c not in channels:
                continue
            trip = top_singular_pair(d[c], tol=LMO_TOL, max_iters=LMO_MAX_ITERS)
            if best is None or trip.sigma > best[1].sigma:
                best = (c, trip)
        c, trip = best
        if trip.sigma == 0.0:
            return Vertex(delta)
        delta[c] = -ball.radius * np.outer(trip.u, trip.v)
        return Vertex(delta, selected_channel=c)

    if ball.kind in _GROUP_KINDS:
        part = ball.partition
        group_ch = _group_channels(part)
        best = None
        for i in range(len(part)):
            if channels is not None and group_ch[i] not in channels:
                continue
            block = part.block(d, i)
            trip = top_singular_pair(block, tol=LMO_TOL, max_iters=LMO_MAX_ITERS)
            if ball.select_by_full_nuclear:
                stat = float(np.linalg.svd(block, compute_uv=False).sum())
            else:
                stat = trip.sigma
            if ball.kind == WEIGHTED_GROUP_NUCLEAR:
                stat /= ball.weights[i]
            if best is None or stat > best[1]:
                best = (i, stat, trip)
        if best is None:
            raise ValueError("channel restriction excludes every group")
        i, stat, trip = best
        if trip.sigma == 0.0:
            return Vertex(delta)
        radius = ball.radius
        if ball.kind == WEIGHTED_GROUP_NUCLEAR:
            radius /= ball.weights[i]
        c0, rs, ks = part.slices(i)
        delta[c0, rs, ks] = -radius * np.outer(trip.u, trip.v)
        return Vertex(delta, selected_group=i, selected_channel=c0)

    if ball.kind == LINF:
        return Vertex(-ball.radius * np.sign(d))
    if ball.kind == L2:
        return Vertex(-ball.radius * d / np.linalg.norm(d))
    # L1: one signed coordinate at the largest |d_i|, lowest flat index on ties
    flat = np.abs(d).ravel()
    i = int(np.argmax(flat))
    out = delta.ravel()
    out[i] = -ball.radius * np.sign(d.ravel()[i])
    return Vertex(out.reshape(d.shape))


def project(ball, x):
    """Euclidean projection onto the ball; l-inf and l2 kinds only."""
    x = _check_tensor(x, ball)
    if ball.kind == LINF:
        return np.clip(x, -ball.radius, ball.radius)
    if ball.kind == L2:
        n = np.linalg.norm(x)
        if n > ball.radius:
            return x * (ball.radius / n)
        return x.copy()
    raise ValueError(f"projection unsupported for ball kind {ball.kind!r}")


def variance_weights(x_ori, partition, delta_reg=1e-3):
    """Per-group weights inversely correlated with pixel-intensity spread.

    w_g = mean_h(s_h) / (s_g + delta_reg) with s_g the empirical standard
    deviation inside group g, then rescaled to mean weight 1.  A constant image
    yields uniform weights.
    """
    if delta_reg <= 0:
        raise ValueError("delta_reg must be positive")
    x = np.asarray(x_ori, dtype=np.float64)
    if tuple(x.shape) != tuple(partition.shape):
        raise ValueError(f"image shape {x.shape} does not match partition shape {partition.shape}")
    s = np.array([float(np.std(partition.block(x, i))) for i in range(len(partition))])
    w = s.mean() / (s + delta_reg)
    mean_w = w.mean()
    if mean_w == 0.0:
        return np.ones(len(partition))
    return w / mean_w
