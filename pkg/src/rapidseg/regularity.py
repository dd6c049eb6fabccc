"""Size regularity through constrained merging.

When relabeling a block would leave its superpixel at or below
``l * InitSize``, the whole superpixel is merged into the neighbor that adds
the least energy, provided the result stays within ``u * InitSize`` of the
neighbor.  The engines run this inside the compiled loop; the functions here
are the same rules over an explicit adjacency index.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Optional

import numpy as np

from .energy import EnergyParams, SuperpixelStats
from .grid import INIT, N


class ContractError(ValueError):
    pass


class AdjacencyIndex:
    """Symmetric 4-adjacency between superpixels with shared boundary lengths.

    ``length(a, b)`` is the number of unordered pixel edges separating a and b.
    """

    def __init__(self):
        self._nbrs: dict[int, dict[int, int]] = defaultdict(dict)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "AdjacencyIndex":
        adj = cls()
        pairs = []
        for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
            diff = a != b
            lo = np.minimum(a[diff], b[diff]).astype(np.int64)
            hi = np.maximum(a[diff], b[diff]).astype(np.int64)
            pairs.append(np.stack([lo, hi], axis=1))
        allp = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
        if len(allp):
            uniq, counts = np.unique(allp, axis=0, return_counts=True)
            for (a, b), c in zip(uniq.tolist(), counts.tolist()):
                adj._nbrs[a][b] = c
                adj._nbrs[b][a] = c
        return adj

    def neighbors(self, sp: int) -> list:
        return sorted(self._nbrs.get(sp, {}))

    def length(self, a: int, b: int) -> int:
        return self._nbrs.get(a, {}).get(b, 0)

    def adjacent(self, a: int, b: int) -> bool:
        return b in self._nbrs.get(a, {})

    def pairs(self) -> dict:
        return {(a, b): n for a, d in self._nbrs.items() for b, n in d.items() if a < b}

    def merge(self, victim: int, target: int) -> None:
        """Re-point the victim's adjacencies to the target and drop the victim."""
        vn = self._nbrs.pop(victim, {})
        self._nbrs[target].pop(victim, None)
        for nb, n in vn.items():
            self._nbrs[nb].pop(victim, None)
            if nb == target:
                continue
            total = self._nbrs[target].get(nb, 0) + n
            self._nbrs[target][nb] = total
            self._nbrs[nb][target] = total


def ward_merge_delta(
    a: int, b: int, stats: SuperpixelStats, params: EnergyParams, boundary_len: int
) -> float:
    """Energy change of pooling superpixels a and b.

    The pooled squared deviations grow by ``n_a n_b / (n_a + n_b) |m_a - m_b|^2``
    for each of color and position; the shared boundary's ordered-pair
    contribution disappears.
    """
    if a == b:
        raise ContractError("cannot merge a superpixel with itself")
    na, nb = stats.size[a], stats.size[b]
    dc = stats.mean_color[a] - stats.mean_color[b]
    dp = stats.mean_position[a] - stats.mean_position[b]
    w = na * nb / (na + nb)
    spread = dc @ dc / params.color_norm**2 + params.lambda_pos * (dp @ dp) / params.pos_norm**2
    return float(w * spread - params.lambda_b * 2.0 * boundary_len)


def merge_candidate(
    victim: int, stats: SuperpixelStats, adj: AdjacencyIndex, params: EnergyParams
) -> Optional[int]:
    """Neighbor of ``victim`` with the least merge energy among those whose
    merged size stays within ``u * InitSize``; None if all are too big."""
    nbrs = [n for n in adj.neighbors(victim) if stats.alive[n]]
    if not nbrs:
        raise ContractError(f"superpixel {victim} has no alive neighbors")
    best, best_d = None, None
    for t in nbrs:
        if stats.size[t] + stats.size[victim] > params.u * stats.init_size[t]:
            continue
        d = ward_merge_delta(t, victim, stats, params, adj.length(victim, t))
        if best is None or d < best_d:
            best, best_d = t, d
    return best


def apply_merge(
    victim: int, target: int, labels: np.ndarray, stats: SuperpixelStats, adj: AdjacencyIndex
) -> None:
    """Relabel the victim into the target and pool their sums; the target keeps its InitSize."""
    if not adj.adjacent(victim, target):
        raise ContractError(f"superpixels {victim} and {target} are not adjacent")
    labels[labels == victim] = target
    cols = [c for c in range(stats.table.shape[1]) if c != INIT]
    stats.table[target, cols] += stats.table[victim, cols]
    stats.table[victim, cols] = 0.0
    stats.alive[victim] = False
    adj.merge(victim, target)


def size_ratio(stats: SuperpixelStats) -> np.ndarray:
    """Size / InitSize of every alive superpixel."""
    alive = stats.alive & (stats.init_size > 0)
    return stats.table[alive, N] / stats.table[alive, INIT]
