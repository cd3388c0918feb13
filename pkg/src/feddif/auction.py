"""Bidding, edge weights, Kuhn-Munkres matching and FCFS bandwidth allocation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from feddif import channel
from feddif.dist import DiffusionChain, DistanceMetric, Dol, Dsi, decrement, dol_update


@dataclass(frozen=True)
class Bid:
    """Per-PUE valuations of one model, with the links from its holder."""

    model_id: int
    holder: int
    valuations: np.ndarray
    link_states: list

    def __post_init__(self):
        object.__setattr__(self, "valuations", np.asarray(self.valuations, dtype=float))
        if len(self.valuations) != len(self.link_states):
            raise ValueError("valuations and link_states must cover the same PUEs")


@dataclass(frozen=True)
class AuctionRules:
    model_bits: int
    gamma_min: float = 1.0
    rate_product: float = 1.0
    max_outage: float = channel.MAX_OUTAGE
    allow_retrain: bool = False
    # With the decrement rule lifted, weights use ``v + valuation_offset``.
    enforce_decrement: bool = True
    valuation_offset: float = 0.0


@dataclass
class Matching:
    pairs: list = field(default_factory=list)  # sorted (model_id, pue_id)
    total_weight: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.pairs)


@dataclass(frozen=True)
class Award:
    model_id: int
    pue_id: int
    weight: float
    valuation: float
    resource: float
    second_price: float


def valuation(prev_dol: Dol, candidate: Dsi, metric=DistanceMetric.W1L2) -> float:
    """Expected IID-distance drop if ``candidate`` trains the model next."""
    if prev_dol.is_empty:
        raise ValueError("valuation needs a model that has trained at least once")
    return decrement(prev_dol, dol_update(prev_dol, candidate), metric)


def edge_weight(v: float, resource: float, constraints_ok: bool, offset: float = 0.0) -> float:
    """``v / resource`` for admissible pairs, else 0.

    A positive ``offset`` replaces the non-negative-valuation rule: the
    weight becomes ``(v + offset) / resource`` so worsening moves stay
    selectable but still rank below improving ones.
    """
    if not constraints_ok:
        return 0.0
    if offset > 0:
        return max(v + offset, 0.0) / resource
    if v < 0:
        return 0.0
    return v / resource


def make_bid(model_id: int, holder: int, dol: Dol, dsis, links, metric) -> Bid:
    vals = [valuation(dol, d, metric) for d in dsis]
    return Bid(model_id, holder, np.array(vals), list(links))


def constraints_hold(bid: Bid, chain: DiffusionChain, pue: int, rules: AuctionRules) -> bool:
    """Non-negative valuation, no retraining, and the link QoS gate."""
    if pue == bid.holder:
        return False
    if rules.enforce_decrement and bid.valuations[pue] < 0:
        return False
    if not rules.allow_retrain and pue in chain:
        return False
    return channel.gate_link(bid.link_states[pue], rules.gamma_min,
                             rules.rate_product, rules.max_outage)


def weight_matrix(bids, chains, rules: AuctionRules):
    """Edge weights ``c(m, i)`` and the resources ``S / gamma`` behind them."""
    n_models = len(bids)
    n_pues = len(bids[0].valuations) if bids else 0
    weights = np.zeros((n_models, n_pues))
    resources = np.full((n_models, n_pues), np.inf)
    for r, (bid, chain) in enumerate(zip(bids, chains)):
        for i in range(n_pues):
            if not constraints_hold(bid, chain, i, rules):
                continue
            res = channel.required_resource(rules.model_bits, bid.link_states[i].spectral_eff)
            resources[r, i] = res
            offset = 0.0 if rules.enforce_decrement else rules.valuation_offset
            weights[r, i] = edge_weight(bid.valuations[i], res, True, offset)
    return weights, resources


def _exact_integers(w: np.ndarray) -> list:
    """Rows of integers proportional to ``w`` with no rounding.

    Finite floats are dyadic rationals, so scaling by the largest
    denominator is exact.
    """
    ratios = [[float(x).as_integer_ratio() for x in row] for row in w]
    scale = max(den for row in ratios for _, den in row)
    return [[num * (scale // den) for num, den in row] for row in ratios]


def _hungarian_min(cost) -> np.ndarray:
    """Assignment minimising ``cost`` on a square matrix; returns row -> col.

    Shortest augmenting paths with dual potentials, O(n^3). With integer
    costs every step is exact.
    """
    n = len(cost)
    inf = float("inf")
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    col_owner = [0] * (n + 1)  # 1-based row matched to each column
    way = [0] * (n + 1)
    for row in range(1, n + 1):
        col_owner[0] = row
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            crow = cost[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = crow[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    assign = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assign[col_owner[j] - 1] = j - 1
    return assign


def kuhn_munkres(weights) -> Matching:
    """Maximum-weight bipartite matching of rows (models) to columns (PUEs).

    The matrix is padded square with zeros; zero-weight pairs are dropped
    from the result, so an all-zero matrix yields the empty matching.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    if w.size == 0:
        return Matching()
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    n = max(w.shape)
    padded = np.zeros((n, n))
    padded[: w.shape[0], : w.shape[1]] = w
    # Exact integer costs: in floats the potentials absorb weights far below the largest.
    assign = _hungarian_min([[-x for x in row] for row in _exact_integers(padded)])
    pairs = [
        (r, int(c)) for r, c in enumerate(assign)
        if r < w.shape[0] and c < w.shape[1] and w[r, c] > 0
    ]
    return Matching(pairs, math.fsum(w[r, c] for r, c in pairs))


def select_winners(bids, chains, budget: float, rules: AuctionRules):
    """Winner selection for one diffusion round.

    Matches models to PUEs by maximum total weight, then funds the matched
    pairs first-come-first-served in descending weight order (ties by
    ``(model_id, pue_id)``); a pair whose resource no longer fits in the
    remaining budget is dropped.

    Returns ``(Matching, allocations, awards)`` where ``allocations[r]`` is
    the Hz*s granted to the model in row ``r``.
    """
    allocations = np.zeros(len(bids))
    if not bids or budget <= 0:
        return Matching(), allocations, []
    weights, resources = weight_matrix(bids, chains, rules)
    matched = kuhn_munkres(weights)
    order = sorted(matched.pairs, key=lambda p: (-weights[p], bids[p[0]].model_id, p[1]))
    remaining = budget
    awards = []
    for r, i in order:
        res = resources[r, i]
        if res > remaining:
            continue
        remaining -= res
        allocations[r] = res
        rivals = np.delete(weights[:, i], r)
        awards.append(Award(
            model_id=bids[r].model_id,
            pue_id=i,
            weight=float(weights[r, i]),
            valuation=float(bids[r].valuations[i]),
            resource=float(res),
            second_price=float(rivals.max()) if rivals.size else 0.0,
        ))
    funded = sorted((bids[r].model_id, i) for r, i in matched.pairs if allocations[r] > 0)
    row_of = {b.model_id: r for r, b in enumerate(bids)}
    total = 0.0
    for m, i in funded:
        total += weights[row_of[m], i]
    return Matching(funded, total), allocations, awards
