"""Point-set losses and sampling: Chamfer, exact and auction EMD, FPS, diagonal KL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .util import DataError, assert_finite


@dataclass
class PointCloud:
    """Positions in scene units with optional per-point RGB in [0, 1]."""

    points: torch.Tensor
    colors: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.points.dim() != 2 or self.points.shape[-1] != 3 or self.points.shape[0] == 0:
            raise DataError(f"point cloud must be non-empty (N, 3), got {tuple(self.points.shape)}")
        assert_finite(self.points, "point cloud")
        if self.colors is not None and self.colors.shape != self.points.shape:
            raise DataError("colors must match points shape")

    def __len__(self) -> int:
        return self.points.shape[0]


def _pts(x: PointCloud | torch.Tensor) -> torch.Tensor:
    t = x.points if isinstance(x, PointCloud) else x
    if t.dim() != 2 or t.shape[-1] != 3 or t.shape[0] == 0:
        raise DataError(f"expected non-empty (N, 3) points, got {tuple(t.shape)}")
    return t


def _pairwise_sq_dists(p: torch.Tensor, q: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    """(n, m) squared Euclidean distances, computed as literal (p - q)^2 sums.

    Chunked over rows of p so training-scale clouds do not allocate the full
    (n, m, 3) difference tensor at once.
    """
    rows = []
    for start in range(0, p.shape[0], chunk):
        diff = p[start:start + chunk, None, :] - q[None, :, :]
        rows.append((diff * diff).sum(dim=-1))
    return torch.cat(rows, dim=0)


def chamfer(p: PointCloud | torch.Tensor, q: PointCloud | torch.Tensor,
            squared: bool = True) -> torch.Tensor:
    """Symmetric mean nearest-neighbor distance between two point sets.

    Default uses squared distances with mean reduction in both directions;
    ``squared=False`` switches both terms to plain Euclidean distance.
    """
    a, b = _pts(p), _pts(q)
    d2 = _pairwise_sq_dists(a, b)
    if not squared:
        d2 = torch.sqrt(d2.clamp_min(1e-30))
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def emd_exact(p: PointCloud | torch.Tensor, q: PointCloud | torch.Tensor) -> float:
    """Optimal mean matched Euclidean distance via the Hungarian algorithm.

    Forward only; serves as the reference for ``emd_approx``.
    """
    a, b = _pts(p).detach(), _pts(q).detach()
    if a.shape[0] != b.shape[0]:
        raise DataError(f"EMD needs equal sizes, got {a.shape[0]} vs {b.shape[0]}")
    cost = torch.cdist(a.double(), b.double()).numpy()
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def auction_assignment(cost: np.ndarray, rel_accuracy: float = 0.01,
                       start_eps_frac: float = 0.25,
                       scale_factor: float = 5.0) -> np.ndarray:
    """Minimum-cost perfect matching by epsilon-scaling auction.

    Returns ``perm`` with row i matched to column perm[i]. Scaling continues
    until the n*eps optimality gap is below ``rel_accuracy`` of the found
    cost (or an absolute floor for degenerate zero-cost instances).
    """
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise DataError("auction needs a square cost matrix")
    if n == 1:
        return np.zeros(1, dtype=np.int64)

    values = -cost.astype(np.float64)
    prices = np.zeros(n)
    span = float(cost.max() - cost.min())
    if span <= 0.0:
        return np.arange(n, dtype=np.int64)
    eps = span * start_eps_frac
    eps_floor = span * 1e-9 / n

    assigned = np.full(n, -1, dtype=np.int64)   # person -> object
    while True:
        assigned[:] = -1
        owner = np.full(n, -1, dtype=np.int64)  # object -> person
        while True:
            unassigned = np.where(assigned < 0)[0]
            if unassigned.size == 0:
                break
            vals = values[unassigned] - prices[None, :]
            best = np.argmax(vals, axis=1)
            rows = np.arange(unassigned.size)
            v1 = vals[rows, best]
            vals[rows, best] = -np.inf
            v2 = np.max(vals, axis=1)
            bids = prices[best] + (v1 - v2) + eps
            # ascending sort + fancy assignment: the largest bid per object
            # is written last and wins the round
            order = np.argsort(bids, kind="stable")
            win_bid = np.full(n, -np.inf)
            win_bidder = np.full(n, -1, dtype=np.int64)
            win_bid[best[order]] = bids[order]
            win_bidder[best[order]] = unassigned[order]
            contested = np.where(win_bidder >= 0)[0]
            previous = owner[contested]
            assigned[previous[previous >= 0]] = -1
            owner[contested] = win_bidder[contested]
            assigned[win_bidder[contested]] = contested
            prices[contested] = win_bid[contested]
        found = float(cost[np.arange(n), assigned].sum())
        gap = n * eps
        if gap <= rel_accuracy * max(found - gap, 0.0) or eps <= eps_floor:
            return assigned.copy()
        eps /= scale_factor


def emd_approx(p: PointCloud | torch.Tensor, q: PointCloud | torch.Tensor,
               rel_accuracy: float = 0.01) -> torch.Tensor:
    """Auction-matched mean Euclidean distance, differentiable in positions.

    The matching itself is treated as a constant; gradients flow through the
    matched pair distances only.
    """
    a, b = _pts(p), _pts(q)
    if a.shape[0] != b.shape[0]:
        raise DataError(f"EMD needs equal sizes, got {a.shape[0]} vs {b.shape[0]}")
    with torch.no_grad():
        cost = torch.cdist(a.double(), b.double()).numpy()
    perm = auction_assignment(cost, rel_accuracy=rel_accuracy)
    matched = a - b[torch.from_numpy(perm)]
    return torch.linalg.vector_norm(matched, dim=-1).mean()


def farthest_point_sampling(p: PointCloud | torch.Tensor, k: int) -> torch.Tensor:
    """Greedy max-min subset of k indices, seeded at index 0; deterministic.

    Ties resolve to the lowest index; already-selected points can never be
    re-selected (their running distance is forced below any candidate's).
    """
    pts = _pts(p).detach()
    n = pts.shape[0]
    if k < 1 or k > n:
        raise DataError(f"k must be in [1, {n}], got {k}")
    idx = torch.empty(k, dtype=torch.long)
    dist = torch.full((n,), float("inf"), dtype=pts.dtype)
    current = 0
    for i in range(k):
        idx[i] = current
        delta = pts - pts[current]
        dist = torch.minimum(dist, (delta * delta).sum(dim=-1))
        dist[current] = float("-inf")
        current = int(torch.argmax(dist))
    return idx


def kl_diag_gaussian(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) as a mean over elements."""
    if mean.shape != logvar.shape:
        raise DataError(f"shape mismatch {tuple(mean.shape)} vs {tuple(logvar.shape)}")
    return 0.5 * (torch.exp(logvar) + mean * mean - 1.0 - logvar).mean()
