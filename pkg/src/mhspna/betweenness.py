"""Radius-constrained weighted betweenness flows.

Betweenness of link ``x`` sums, over origins ``y`` and destinations ``z``
within a network-Euclidean distance band of ``y``, the trip weight
``W(y, z)`` times the share of that trip credited to ``x``: 1 for links
strictly inside the chosen route, 1/2 for the origin and destination links,
1/3 for a trip from a link to itself.

Three trip weightings are supported:

``elastic``
    ``W(y, z) = W(y) * W(z)``; more reachable opportunity, more trips.
``two_phase``
    ``W(y, z) = W(y) * W(z) / sum(W(z) in band)``; each origin emits exactly
    ``W(y)`` trips, shared among reachable destinations.
``single_origin``
    Elastic with one origin link of weight 1.

Routes follow the randomized hybrid metric; each oversample iteration redraws
the random factors and the reported flow is the mean over iterations.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit

from .errors import ConfigError, NetworkError
from .metric import MetricParams
from .network import EVERYWHERE, SpatialNetwork
from .routing import _parents_first, _route_precedes, _tree, compile_network

logger = logging.getLogger(__name__)

__all__ = [
    "ELASTIC",
    "TWO_PHASE",
    "SINGLE_ORIGIN",
    "AnalysisSpec",
    "FlowField",
    "BatteryDiagnostics",
    "od_contribution",
    "elastic_betweenness",
    "two_phase_betweenness",
    "single_origin_betweenness",
    "run_battery",
    "compute_flows",
    "table1_battery",
    "column_name",
    "parse_column_name",
]

ELASTIC = "elastic"
TWO_PHASE = "two_phase"
SINGLE_ORIGIN = "single_origin"
BTYPES = (ELASTIC, TWO_PHASE, SINGLE_ORIGIN)

CONSERVATION_TOL = 1e-9
DEFAULT_CHUNK = 32


def column_name(key: str, rmin: float, rmax: float) -> str:
    """Column label ``key@rmax`` (``key@rmin-rmax`` for an inner radius)."""
    def fmt(r):
        if math.isinf(r):
            return "inf"
        return str(int(r)) if float(r).is_integer() else repr(float(r))
    return f"{key}@{fmt(rmax)}" if rmin == 0 else f"{key}@{fmt(rmin)}-{fmt(rmax)}"


def parse_column_name(name: str) -> tuple[str, float, float]:
    """Inverse of :func:`column_name`: ``(key, rmin, rmax)``."""
    key, sep, band = name.rpartition("@")
    if not sep or not key:
        raise ConfigError(f"not a flow column name: {name!r}")
    lo, dash, hi = band.partition("-")
    try:
        rmin, rmax = (float(lo), float(hi)) if dash else (0.0, float(lo))
    except ValueError:
        raise ConfigError(f"not a flow column name: {name!r}") from None
    return key, rmin, rmax


@dataclass(frozen=True)
class AnalysisSpec:
    """One betweenness variable, evaluated at one or more radii.

    ``origin`` names the origin weight field; for ``single_origin`` it is
    either a link id or a weight field carried by exactly one link.
    """

    key: str
    btype: str
    origin: str
    destination: str
    radii: tuple
    continuous: bool = False

    def __post_init__(self):
        if self.btype not in BTYPES:
            raise ConfigError(f"analysis {self.key!r}: unknown betweenness type {self.btype!r}")
        radii = []
        for r in self.radii:
            rmin, rmax = (0.0, float(r)) if np.isscalar(r) else (float(r[0]), float(r[1]))
            if not 0 <= rmin < rmax:
                raise ConfigError(f"analysis {self.key!r}: radius band ({rmin}, {rmax}) needs 0 <= rmin < rmax")
            radii.append((rmin, rmax))
        if not radii:
            raise ConfigError(f"analysis {self.key!r}: radii must be non-empty")
        object.__setattr__(self, "radii", tuple(radii))

    @property
    def columns(self) -> list[str]:
        return [column_name(self.key, rmin, rmax) for rmin, rmax in self.radii]

    def to_dict(self) -> dict:
        radii = [r[1] if r[0] == 0 else [r[0], r[1]] for r in self.radii]
        return {"key": self.key, "type": self.btype, "origin": self.origin,
                "destination": self.destination, "radii": radii, "continuous": self.continuous}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisSpec":
        allowed = {"key", "type", "origin", "destination", "radii", "continuous"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown analysis keys: {sorted(unknown)}")
        missing = {"key", "type", "origin", "destination", "radii"} - set(d)
        if missing:
            raise ConfigError(f"analysis missing keys: {sorted(missing)}")
        return cls(str(d["key"]), d["type"], str(d["origin"]), str(d["destination"]),
                   tuple(d["radii"]), bool(d.get("continuous", False)))


def table1_battery(retail="retail_m2", queen_street="station_queen_street", central="station_central",
                   carpark="carpark", north="parking_north") -> list[AnalysisSpec]:
    """The six-variable battery: 13 columns across the stated radii."""
    return [
        AnalysisSpec("e2s", ELASTIC, EVERYWHERE, retail, (400, 800, 1200)),
        AnalysisSpec("s2s", TWO_PHASE, retail, retail, (200, 400), continuous=True),
        AnalysisSpec("sq2s", SINGLE_ORIGIN, queen_street, retail, (600, 1000)),
        AnalysisSpec("sc2s", SINGLE_ORIGIN, central, retail, (600, 1000)),
        AnalysisSpec("p2s", ELASTIC, carpark, retail, (600, 1000)),
        AnalysisSpec("n2s", ELASTIC, north, retail, (600, 1000)),
    ]


@dataclass
class FlowField:
    """Per-link betweenness for one (analysis, radius) column."""

    key: str
    radius: tuple  # (rmin, rmax)
    link_ids: list
    values: np.ndarray

    @property
    def name(self) -> str:
        return column_name(self.key, *self.radius)

    def __getitem__(self, link_id):
        return float(self.values[self._index()[link_id]])

    def _index(self):
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = self.__dict__["_idx"] = {lid: i for i, lid in enumerate(self.link_ids)}
        return idx

    def as_dict(self) -> dict:
        return dict(zip(self.link_ids, map(float, self.values)))


@dataclass
class BatteryDiagnostics:
    """Per-column trip accounting gathered during a battery run."""

    columns: list
    trip_total: np.ndarray  # sum of trip weights over OD pairs
    activity_total: np.ndarray  # independent total from origin weights and reachable destinations
    zero_destination_origins: np.ndarray
    max_origin_error: np.ndarray  # two-phase: max |sum_z W(y,z) - W(y)|
    extra: dict = field(default_factory=dict)


def od_contribution(x, y, z, path) -> Fraction:
    """Share of trip ``y -> z`` credited to link ``x`` given the chosen ``path``."""
    if x == y == z:
        return Fraction(1, 3)
    if y != z and (x == y or x == z):
        return Fraction(1, 2)
    if x in path[1:-1]:
        return Fraction(1)
    return Fraction(0)


# --------------------------------------------------------------------------
# kernel

_ELASTIC_MODE = 0
_TWO_PHASE_MODE = 1


@njit(cache=True, nogil=True)
def _band_fraction(d_near, length, rmin, rmax, is_origin):
    if is_origin:
        half = 0.5 * length
        return (min(rmax, half) - min(rmin, half)) / half
    hi = min(max(rmax - d_near, 0.0), length)
    lo = min(max(rmin - d_near, 0.0), length)
    return (hi - lo) / length


@njit(cache=True, nogil=True)
def _in_band(d, rmin, rmax):
    return d <= rmax and (d > rmin or rmin == 0.0)


@njit(cache=True, nogil=True)
def _battery_chunk(origins, ptr, target, angle, lengths, curvatures, keys,
                   a, sigma, lo, hi, seed, oversample,
                   w_orig, w_dest, rmin, rmax, mode, cont,
                   endpoint, interior, trips, dest_total, zero_dest):
    n = lengths.shape[0]
    n2 = 2 * n
    ncol = w_orig.shape[0]
    entry = np.full(n2, np.inf)
    pred = np.full(n2, -1, dtype=np.int64)
    settled = np.zeros(n2, dtype=np.bool_)
    order = np.empty(n2, dtype=np.int64)
    link_done = np.zeros(n, dtype=np.bool_)
    cap = target.shape[0] + 2
    hc = np.empty(cap)
    hs = np.empty(cap, dtype=np.int64)
    no_target = np.zeros(n, dtype=np.bool_)
    is_target = np.zeros(n, dtype=np.bool_)
    d_near = np.full(n, np.inf)
    reached = np.empty(n, dtype=np.int64)
    dw = np.zeros((n, ncol))
    first = np.full(n, -1, dtype=np.int64)
    own = np.zeros((n2, ncol))
    sub = np.zeros((n2, ncol))
    active = np.empty(ncol, dtype=np.int64)
    head = np.full(n2, -1, dtype=np.int64)
    nxt = np.empty(n2, dtype=np.int64)
    topo = np.empty(n2, dtype=np.int64)

    for y in origins:
        na = 0
        limit = 0.0
        for c in range(ncol):
            if w_orig[c, y] > 0.0:
                active[na] = c
                na += 1
                limit = max(limit, rmax[c])
        if na == 0:
            continue

        # network-Euclidean distances to the nearer end of each reachable link
        entry[:] = np.inf
        pred[:] = -1
        settled[:] = False
        link_done[:] = False
        nset = _tree(y, ptr, target, angle, lengths, curvatures, 0.0, 0.0, lo, hi, seed, 0, 0,
                     limit, no_target, 0, entry, pred, settled, order, link_done, hc, hs)
        nr = 0
        for i in range(nset):
            z = order[i] >> 1
            if d_near[z] == np.inf:
                d_near[z] = 0.0 if z == y else entry[order[i]]
                reached[nr] = z
                nr += 1

        n_targets = 0
        for j in range(na):
            c = active[j]
            total = 0.0
            for r in range(nr):
                z = reached[r]
                if cont[c]:
                    frac = _band_fraction(d_near[z], lengths[z], rmin[c], rmax[c], z == y)
                else:
                    dc = 0.0 if z == y else d_near[z] + 0.5 * lengths[z]
                    frac = 1.0 if _in_band(dc, rmin[c], rmax[c]) else 0.0
                base = w_dest[c, z] * frac
                dw[z, c] = base
                total += base
            dest_total[c, y] = total
            wy = w_orig[c, y]
            tsum = 0.0
            if mode[c] == _TWO_PHASE_MODE:
                if total == 0.0:
                    zero_dest[c] += 1
                    for r in range(nr):
                        dw[reached[r], c] = 0.0
                    continue
                for r in range(nr):
                    z = reached[r]
                    dw[z, c] = wy * dw[z, c] / total
                    tsum += dw[z, c]
            else:
                for r in range(nr):
                    z = reached[r]
                    dw[z, c] = wy * dw[z, c]
                    tsum += dw[z, c]
            trips[c, y] = tsum
            others = 0.0
            for r in range(nr):
                z = reached[r]
                if z != y:
                    endpoint[c, z] += 0.5 * dw[z, c]
                    others += dw[z, c]
            endpoint[c, y] += 0.5 * others + dw[y, c] / 3.0
            for r in range(nr):
                z = reached[r]
                if z != y and dw[z, c] != 0.0 and not is_target[z]:
                    is_target[z] = True
                    n_targets += 1

        if n_targets > 0:
            for it in range(oversample):
                entry[:] = np.inf
                pred[:] = -1
                settled[:] = False
                link_done[:] = False
                nset = _tree(y, ptr, target, angle, lengths, curvatures, a, sigma, lo, hi, seed, keys[y], it,
                             np.inf, is_target, n_targets, entry, pred, settled, order, link_done, hc, hs)
                for i in range(nset):
                    s = order[i]
                    z = s >> 1
                    f = first[z]
                    if f < 0 or entry[s] < entry[f] or (entry[s] == entry[f] and _route_precedes(s, f, pred)):
                        first[z] = s
                _parents_first(order, nset, pred, head, nxt, topo)
                for i in range(nset):
                    s = topo[i]
                    z = s >> 1
                    if first[z] == s and is_target[z]:
                        for j in range(na):
                            own[s, active[j]] = dw[z, active[j]]
                for i in range(nset - 1, -1, -1):
                    s = topo[i]
                    p = pred[s]
                    if p >= 0:
                        for j in range(na):
                            c = active[j]
                            sub[p, c] += sub[s, c] + own[s, c]
                for i in range(nset):
                    s = order[i]
                    x = s >> 1
                    if x == y:
                        continue
                    nonzero = False
                    for j in range(na):
                        if sub[s, active[j]] != 0.0:
                            nonzero = True
                            break
                    if not nonzero:
                        continue
                    # a link counts once per route even if traversed in both directions
                    o = s ^ 1
                    dup = False
                    if settled[o]:
                        cur = pred[s]
                        while cur >= 0 and entry[cur] >= entry[o]:
                            if cur == o:
                                dup = True
                                break
                            cur = pred[cur]
                    if dup:
                        continue
                    for j in range(na):
                        c = active[j]
                        interior[c, x] += sub[s, c]
                for i in range(nset):
                    s = order[i]
                    first[s >> 1] = -1
                    for j in range(na):
                        c = active[j]
                        sub[s, c] = 0.0
                        own[s, c] = 0.0

        for r in range(nr):
            z = reached[r]
            d_near[z] = np.inf
            is_target[z] = False
            for j in range(na):
                dw[z, active[j]] = 0.0


# --------------------------------------------------------------------------
# driver


def _origin_vector(net: SpatialNetwork, spec: AnalysisSpec) -> np.ndarray:
    if spec.btype != SINGLE_ORIGIN:
        return net.weights(spec.origin)
    vec = np.zeros(len(net))
    if spec.origin in net.index:
        vec[net.index[spec.origin]] = 1.0
        return vec
    if spec.origin in net.weight_field_names or spec.origin == EVERYWHERE:
        w = net.weights(spec.origin)
        hits = np.flatnonzero(w > 0)
        if len(hits) != 1:
            raise NetworkError(f"analysis {spec.key!r}: single origin field {spec.origin!r} "
                               f"must be positive on exactly one link, found {len(hits)}")
        vec[hits[0]] = 1.0
        return vec
    raise NetworkError(f"analysis {spec.key!r}: origin link {spec.origin!r} missing from network")


def _check_fields(net: SpatialNetwork, specs):
    known = set(net.weight_field_names) | {EVERYWHERE}
    missing = set()
    for spec in specs:
        if spec.destination not in known:
            missing.add(spec.destination)
        if spec.btype != SINGLE_ORIGIN and spec.origin not in known:
            missing.add(spec.origin)
    if missing:
        raise NetworkError(f"unknown weight fields: {sorted(missing)}")


def _neumaier_add(total, comp, x):
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp += np.where(big, (total - t) + x, (x - t) + total)
    return t, comp


def compute_flows(net: SpatialNetwork, specs, params: MetricParams, n_jobs: int | None = None,
                  chunk_size: int = DEFAULT_CHUNK):
    """Run every (spec, radius) column; return ``(fields, diagnostics)``.

    Origins are processed in fixed chunks whose partial sums are reduced in
    chunk order, so the result does not depend on ``n_jobs``.
    """
    specs = list(specs)
    _check_fields(net, specs)
    if not specs or len(net) == 0:
        return [], BatteryDiagnostics([], np.zeros(0), np.zeros(0), np.zeros(0, int), np.zeros(0))
    cn = compile_network(net)
    n = len(net)
    names, w_orig, w_dest, rmin, rmax, mode, cont, keys = [], [], [], [], [], [], [], []
    for spec in specs:
        wo = _origin_vector(net, spec)
        wd = net.weights(spec.destination)
        if spec.btype == ELASTIC and not np.any(wo > 0):
            warnings.warn(f"analysis {spec.key!r}: no origins with positive weight; flows are zero")
        for lo_r, hi_r in spec.radii:
            names.append(column_name(spec.key, lo_r, hi_r))
            keys.append((spec.key, (lo_r, hi_r)))
            w_orig.append(wo)
            w_dest.append(wd)
            rmin.append(lo_r)
            rmax.append(hi_r)
            mode.append(_TWO_PHASE_MODE if spec.btype == TWO_PHASE else _ELASTIC_MODE)
            cont.append(spec.continuous)
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate analysis columns: {sorted({x for x in names if names.count(x) > 1})}")
    w_orig = np.ascontiguousarray(w_orig, dtype=np.float64)
    w_dest = np.ascontiguousarray(w_dest, dtype=np.float64)
    rmin = np.array(rmin, dtype=np.float64)
    rmax = np.array(rmax, dtype=np.float64)
    mode = np.array(mode, dtype=np.int64)
    cont = np.array(cont, dtype=np.bool_)
    ncol = len(names)

    origins = np.flatnonzero(np.any(w_orig > 0, axis=0)).astype(np.int64)
    chunks = [origins[i:i + chunk_size] for i in range(0, len(origins), chunk_size)]

    def work(chunk):
        endpoint = np.zeros((ncol, n))
        interior = np.zeros((ncol, n))
        trips = np.zeros((ncol, n))
        dest_total = np.zeros((ncol, n))
        zero_dest = np.zeros(ncol, dtype=np.int64)
        _battery_chunk(chunk, cn.ptr, cn.target, cn.angle, cn.lengths, cn.curvatures, cn.keys,
                       params.a, params.sigma, params.clamp_lo, params.clamp_hi, params.seed,
                       params.oversample, w_orig, w_dest, rmin, rmax, mode, cont,
                       endpoint, interior, trips, dest_total, zero_dest)
        return endpoint, interior, trips, dest_total, zero_dest

    acc = [np.zeros((ncol, n)) for _ in range(2)]
    comp = [np.zeros((ncol, n)) for _ in range(2)]
    trips = np.zeros((ncol, n))
    dest_total = np.zeros((ncol, n))
    zero_dest = np.zeros(ncol, dtype=np.int64)
    workers = max(1, int(n_jobs or 1))
    if workers == 1:
        results = map(work, chunks)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        results = pool.map(work, chunks)
    try:
        for endpoint, interior, t, dt, zd in results:
            for k, part in enumerate((endpoint, interior)):
                acc[k], comp[k] = _neumaier_add(acc[k], comp[k], part)
            # each origin lives in exactly one chunk
            trips += t
            dest_total += dt
            zero_dest += zd
    finally:
        if workers > 1:
            pool.shutdown()
    endpoint = acc[0] + comp[0]
    interior = acc[1] + comp[1]
    values = endpoint + interior / params.oversample

    diag = _diagnostics(names, w_orig, mode, trips, dest_total, zero_dest)
    fields = [FlowField(k, r, list(net.link_ids), values[i]) for i, (k, r) in enumerate(keys)]
    return fields, diag


def _diagnostics(names, w_orig, mode, trips, dest_total, zero_dest):
    trip_total = np.array([math.fsum(row) for row in trips])
    activity = np.zeros(len(names))
    max_err = np.zeros(len(names))
    for c in range(len(names)):
        if mode[c] == _TWO_PHASE_MODE:
            live = dest_total[c] > 0
            activity[c] = math.fsum(w_orig[c][live])
            if np.any(live):
                max_err[c] = float(np.max(np.abs(trips[c][live] - w_orig[c][live])))
        else:
            activity[c] = math.fsum(w_orig[c] * dest_total[c])
    return BatteryDiagnostics(names, trip_total, activity, zero_dest, max_err)


def _check_conservation(diag: BatteryDiagnostics, w_scale=None):
    for c, name in enumerate(diag.columns):
        expected = diag.activity_total[c]
        got = diag.trip_total[c]
        if abs(got - expected) > CONSERVATION_TOL * max(1.0, abs(expected)):
            raise AssertionError(f"{name}: trip total {got!r} != activity {expected!r}")
        if diag.max_origin_error[c] > CONSERVATION_TOL * max(1.0, abs(expected)):
            raise AssertionError(f"{name}: per-origin trip total off by {diag.max_origin_error[c]!r}")
        if diag.zero_destination_origins[c]:
            logger.info("%s: %d origins with no reachable destinations", name, diag.zero_destination_origins[c])


def run_battery(net: SpatialNetwork, specs, params: MetricParams, n_jobs: int | None = None) -> list[FlowField]:
    """One FlowField per (spec, radius), deterministic given ``params.seed``.

    Trip totals are checked against the origin weights on every run.
    """
    fields, diag = compute_flows(net, specs, params, n_jobs=n_jobs)
    _check_conservation(diag)
    return fields


def _single(net, spec, params, radius, btype):
    if spec.btype != btype:
        raise ConfigError(f"analysis {spec.key!r} is {spec.btype}, expected {btype}")
    if np.isscalar(radius):
        radius = (0.0, float(radius))
    one = AnalysisSpec(spec.key, spec.btype, spec.origin, spec.destination, (tuple(radius),), spec.continuous)
    return run_battery(net, [one], params)[0]


def elastic_betweenness(net, spec, params, radius) -> FlowField:
    return _single(net, spec, params, radius, ELASTIC)


def two_phase_betweenness(net, spec, params, radius) -> FlowField:
    return _single(net, spec, params, radius, TWO_PHASE)


def single_origin_betweenness(net, spec, params, radius) -> FlowField:
    return _single(net, spec, params, radius, SINGLE_ORIGIN)
