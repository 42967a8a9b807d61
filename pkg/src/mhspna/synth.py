"""Synthetic grid towns and planted-model count data for testing."""

from __future__ import annotations

import numpy as np

from .errors import MhspnaError
from .network import Link, SpatialNetwork

__all__ = ["grid_network", "apply_weight_plan", "planted_counts", "link_midpoint", "WEIGHT_PLANS"]

WEIGHT_PLANS = ("none", "table1")


def grid_network(n: int, m: int, spacing: float = 100.0, weights: str = "none", seed: int = 0) -> SpatialNetwork:
    """``n`` x ``m`` junction grid of straight links ``spacing`` metres long.

    >>> net = grid_network(3, 3)
    >>> len(net), len(net.junctions)
    (12, 9)
    """
    if n < 2 or m < 2:
        raise MhspnaError(f"grid dimensions must be at least 2 x 2, got {n} x {m}")
    if not spacing > 0:
        raise MhspnaError("grid spacing must be positive")
    w = len(str(max(n, m)))
    links = []
    for r in range(n):
        for c in range(m):
            x, y = c * spacing, r * spacing
            if c + 1 < m:
                links.append(Link(f"h{r:0{w}d}_{c:0{w}d}", [(x, y), (x + spacing, y)]))
            if r + 1 < n:
                links.append(Link(f"v{r:0{w}d}_{c:0{w}d}", [(x, y), (x, y + spacing)]))
    net = SpatialNetwork(links)
    if weights != "none":
        net = apply_weight_plan(net, weights, seed)
    return net


def link_midpoint(link: Link) -> tuple:
    """Point halfway along the polyline."""
    pts = np.asarray(link.geometry)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    half = 0.5 * seg.sum()
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    k = min(int(np.searchsorted(cum, half, side="right")) - 1, len(seg) - 1)
    t = (half - cum[k]) / seg[k]
    p = pts[k] + t * (pts[k + 1] - pts[k])
    return float(p[0]), float(p[1])


def apply_weight_plan(net: SpatialNetwork, plan: str, seed: int = 0) -> SpatialNetwork:
    """Sprinkle land-use weights over a network.

    ``table1`` adds ``retail_m2`` (floor area, concentrated in the centre),
    ``carpark`` (three peripheral car parks), ``parking_north`` (on-street
    parking along the northern edge) and one link each for
    ``station_queen_street`` (north-east) and ``station_central`` (south).
    """
    if plan not in WEIGHT_PLANS:
        raise MhspnaError(f"unknown weight plan {plan!r}; choose from {WEIGHT_PLANS}")
    if plan == "none":
        return net
    rng = np.random.default_rng(seed)
    ids = net.link_ids
    mids = np.array([link_midpoint(net.links[i]) for i in ids])
    lo, hi = mids.min(axis=0), mids.max(axis=0)
    centre = (lo + hi) / 2
    extent = float(np.max(hi - lo)) or 1.0
    rel = (mids - centre) / extent  # roughly in [-0.5, 0.5]
    dist = np.hypot(rel[:, 0], rel[:, 1])

    retail = np.where((dist < 0.3) & (rng.random(len(ids)) < 0.6),
                      np.round(rng.uniform(50, 2000, len(ids))), 0.0)
    carpark = np.zeros(len(ids))
    periphery = np.flatnonzero((dist > 0.3) & (dist < 0.45))
    carpark[rng.choice(periphery, size=min(3, len(periphery)), replace=False)] = 1.0
    north = np.where((rel[:, 1] > 0.35) & (rng.random(len(ids)) < 0.7), 1.0, 0.0)
    queen = np.zeros(len(ids))
    queen[int(np.argmin(np.hypot(rel[:, 0] - 0.25, rel[:, 1] - 0.3)))] = 1.0
    central = np.zeros(len(ids))
    central[int(np.argmin(np.hypot(rel[:, 0] + 0.05, rel[:, 1] + 0.35)))] = 1.0

    plan_weights = {"retail_m2": retail, "carpark": carpark, "parking_north": north,
                    "station_queen_street": queen, "station_central": central}
    links = []
    for i, lid in enumerate(ids):
        old = net.links[lid]
        w = dict(old.weights)
        w.update({k: float(v[i]) for k, v in plan_weights.items() if v[i] != 0.0})
        links.append(Link(lid, old.geometry, w))
    fields = set(net.weight_field_names) | set(plan_weights)
    return SpatialNetwork(links, weight_fields=fields, tolerance=net.tolerance)


def planted_counts(net: SpatialNetwork, fields, coefficients: dict, intercept: float, n_points: int,
                   noise: float = 0.0, seed: int = 0, year: str = "t1", links=None) -> list[tuple]:
    """Counts generated from a known linear model of the flow columns.

    Returns ``(point_id, x, y, year, flow)`` rows at the midpoints of
    ``n_points`` randomly chosen links (or of ``links`` if given), with
    optional lognormal multiplicative noise of relative size ``noise``.
    """
    rng = np.random.default_rng(seed)
    by_name = {f.name: f for f in fields}
    missing = set(coefficients) - set(by_name)
    if missing:
        raise MhspnaError(f"planted coefficients for unknown columns: {sorted(missing)}")
    if links is None:
        if n_points > len(net):
            raise MhspnaError(f"cannot place {n_points} count points on {len(net)} links")
        links = [net.link_ids[i] for i in sorted(rng.choice(len(net), size=n_points, replace=False))]
    rows = []
    for k, lid in enumerate(links):
        flow = intercept + sum(coefficients[c] * by_name[c][lid] for c in sorted(coefficients))
        if noise > 0:
            flow *= float(np.exp(noise * rng.standard_normal()))
        if not flow > 0:
            raise MhspnaError(f"planted flow at {lid!r} is not positive ({flow}); raise the intercept")
        x, y = link_midpoint(net.links[lid])
        rows.append((f"P{k:03d}", x, y, year, flow))
    return rows
