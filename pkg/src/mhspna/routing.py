"""Shortest paths on the link/junction dual graph.

Routing runs over *states*: a state is a link together with the end it was
entered from, so each undirected link yields two states and turn costs attach
to state transitions. U-turns at junctions are not allowed.

Distances between links are measured centre to centre: half the origin's
cost, full costs of intermediate links and turns, half the destination's
cost. Among equal-cost routes the one whose sequence of link ids, read
from the destination backwards, is lexicographically smallest wins; the
entry state ``2 * link_index + entry_end`` settles any remaining tie. Link
indices follow sorted link ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .metric import MetricParams, origin_key, rand_factor
from .network import SpatialNetwork

__all__ = [
    "CompiledNetwork",
    "compile_network",
    "PathTree",
    "RadiusSet",
    "shortest_path_tree",
    "radius_set",
    "radius_distances",
    "fraction_within_radius",
    "in_radius",
]

_EUCLIDEAN = MetricParams(a=0.0, sigma=0.0, oversample=1)


def _bearing_vector(geom, end, leaving):
    """Unit direction of travel at ``end`` of a polyline, leaving or entering it."""
    if end == 1:
        p, q = geom[-2], geom[-1]  # travel towards end 1
    else:
        p, q = geom[1], geom[0]  # travel towards end 0
    v = np.subtract(q, p) if leaving else np.subtract(p, q)
    return v / math.hypot(*v)


def turn_angle(u, v) -> float:
    """Absolute change of direction between unit vectors ``u`` and ``v`` in degrees."""
    cross = u[0] * v[1] - u[1] * v[0]
    dot = u[0] * v[0] + u[1] * v[1]
    return abs(math.degrees(math.atan2(cross, dot)))


@dataclass
class CompiledNetwork:
    """Array form of a network for the routing kernels."""

    n_links: int
    lengths: np.ndarray
    curvatures: np.ndarray
    keys: np.ndarray  # per-link random substream keys
    ptr: np.ndarray  # CSR over states: transitions of state s are ptr[s]:ptr[s+1]
    target: np.ndarray  # target state of each transition
    angle: np.ndarray  # turn angle of each transition, degrees

    def transition(self, s: int, t: int) -> int:
        ks = np.flatnonzero(self.target[self.ptr[s]:self.ptr[s + 1]] == t)
        if len(ks) == 0:
            raise KeyError(f"no transition {s} -> {t}")
        return int(self.ptr[s] + ks[0])


def compile_network(net: SpatialNetwork) -> CompiledNetwork:
    if net._compiled is not None:
        return net._compiled
    n = len(net)
    geoms = [net.links[lid].geometry for lid in net.link_ids]
    ptr = np.zeros(2 * n + 1, dtype=np.int64)
    targets, angles = [], []
    for s in range(2 * n):
        link, entry = divmod(s, 2)
        exit_end = 1 - entry
        junction = net.junctions[net.link_ends[link, exit_end]]
        out_dir = _bearing_vector(geoms[link], exit_end, leaving=True)
        trans = []
        for other_id, f in junction.incident_ends:
            m = net.index[other_id]
            if m == link and f == exit_end:
                continue
            in_dir = _bearing_vector(geoms[m], f, leaving=False)
            trans.append((2 * m + f, turn_angle(out_dir, in_dir)))
        trans.sort()
        targets.extend(t for t, _ in trans)
        angles.extend(a for _, a in trans)
        ptr[s + 1] = len(targets)
    compiled = CompiledNetwork(
        n_links=n,
        lengths=net.lengths,
        curvatures=net.curvatures,
        keys=np.array([origin_key(lid) for lid in net.link_ids], dtype=np.int64),
        ptr=ptr,
        target=np.array(targets, dtype=np.int64),
        angle=np.array(angles, dtype=np.float64),
    )
    net._compiled = compiled
    return compiled


# --------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _heap_less(hc, hs, i, j):
    return hc[i] < hc[j] or (hc[i] == hc[j] and hs[i] < hs[j])


@njit(cache=True, nogil=True)
def _heap_push(hc, hs, size, c, s):
    i = size
    hc[i] = c
    hs[i] = s
    while i > 0:
        p = (i - 1) >> 1
        if _heap_less(hc, hs, i, p):
            hc[i], hc[p] = hc[p], hc[i]
            hs[i], hs[p] = hs[p], hs[i]
            i = p
        else:
            break
    return size + 1


@njit(cache=True, nogil=True)
def _heap_pop(hc, hs, size):
    c, s = hc[0], hs[0]
    size -= 1
    hc[0] = hc[size]
    hs[0] = hs[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        m = l
        if l + 1 < size and _heap_less(hc, hs, l + 1, l):
            m = l + 1
        if _heap_less(hc, hs, m, i):
            hc[i], hc[m] = hc[m], hc[i]
            hs[i], hs[m] = hs[m], hs[i]
            i = m
        else:
            break
    return c, s, size


@njit(cache=True, nogil=True)
def _link_cost(link, lengths, curvatures, a, sigma, lo, hi, seed, key, iteration):
    r = rand_factor(seed, key, iteration, link, sigma, lo, hi)
    return (a * curvatures[link] + (1.0 - a) * lengths[link]) * r


@njit(cache=True, nogil=True)
def _turn_cost(k, n_links, angle, a, sigma, lo, hi, seed, key, iteration):
    r = rand_factor(seed, key, iteration, n_links + k, sigma, lo, hi)
    return a * angle[k] * r


@njit(cache=True, nogil=True)
def _route_precedes(s1, s2, pred):
    """Whether the route into ``s1`` beats the equal-cost route into ``s2``:
    smaller reversed link sequence, then smaller state index."""
    a, b = s1, s2
    while a >= 0 and b >= 0:
        la, lb = a >> 1, b >> 1
        if la != lb:
            return la < lb
        a, b = pred[a], pred[b]
    if a != b:
        return a < 0
    return s1 < s2


@njit(cache=True, nogil=True)
def _parents_first(order, n_set, pred, head, nxt, out):
    """Settled states reordered so each follows its predecessor (breadth first).

    Settle order already has this property unless zero-cost moves let a
    later-settled state become a predecessor. ``head`` must arrive filled
    with -1 and is left that way.
    """
    k = 0
    for i in range(n_set - 1, -1, -1):
        s = order[i]
        p = pred[s]
        if p >= 0:
            nxt[s] = head[p]
            head[p] = s
        else:
            k += 1
    j = k
    for i in range(n_set):
        s = order[i]
        if pred[s] < 0:
            k -= 1
            out[j - 1 - k] = s
    i = 0
    while i < j:
        s = out[i]
        c = head[s]
        while c >= 0:
            out[j] = c
            j += 1
            c = nxt[c]
        head[s] = -1
        i += 1
    return j


@njit(cache=True, nogil=True)
def _tree(origin, ptr, target, angle, lengths, curvatures, a, sigma, lo, hi, seed, key, iteration,
          limit, is_target, n_targets, entry, pred, settled, order, link_done, hc, hs):
    """Dijkstra from the centre of ``origin`` over states.

    Fills ``entry`` (cost at the point of entering each state's link),
    ``pred`` and ``order`` (settle order); returns the number of settled
    states. Stops once every target link has a settled state (if
    ``n_targets > 0``, after draining states tied with the last one) or
    when the next entry cost exceeds ``limit``.
    Work arrays must arrive reset: entry=inf, pred=-1, settled/link_done
    False.
    """
    n_links = lengths.shape[0]
    size = 0
    n_set = 0
    for e in range(2):
        s0 = 2 * origin + e
        entry[s0] = 0.0
        size = _heap_push(hc, hs, size, 0.0, s0)
    remaining = n_targets
    origin_half = 0.5 * _link_cost(origin, lengths, curvatures, a, sigma, lo, hi, seed, key, iteration)
    while size > 0:
        d, s, size = _heap_pop(hc, hs, size)
        if settled[s]:
            continue
        if d > limit:
            break
        settled[s] = True
        order[n_set] = s
        n_set += 1
        link = s >> 1
        if not link_done[link]:
            link_done[link] = True
            if n_targets > 0 and is_target[link]:
                remaining -= 1
                if remaining == 0:
                    limit = d
        if link == origin:
            ex = origin_half
        else:
            ex = d + _link_cost(link, lengths, curvatures, a, sigma, lo, hi, seed, key, iteration)
        for k in range(ptr[s], ptr[s + 1]):
            t = target[k]
            if (t >> 1) == origin:
                continue
            nd = ex + _turn_cost(k, n_links, angle, a, sigma, lo, hi, seed, key, iteration)
            if settled[t]:
                # zero-cost moves (a = 1 on straight links) can tie with a settled state
                if nd == entry[t] and s < pred[t]:
                    pred[t] = s
                continue
            if nd < entry[t]:
                entry[t] = nd
                pred[t] = s
                size = _heap_push(hc, hs, size, nd, t)
            elif nd == entry[t] and s < pred[t]:
                pred[t] = s
    return n_set


class _Workspace:
    """Reusable kernel work arrays for one network."""

    def __init__(self, cn: CompiledNetwork):
        n2 = 2 * cn.n_links
        self.entry = np.full(n2, np.inf)
        self.pred = np.full(n2, -1, dtype=np.int64)
        self.settled = np.zeros(n2, dtype=np.bool_)
        self.order = np.empty(n2, dtype=np.int64)
        self.link_done = np.zeros(cn.n_links, dtype=np.bool_)
        cap = len(cn.target) + 2
        self.hc = np.empty(cap)
        self.hs = np.empty(cap, dtype=np.int64)
        self.no_targets = np.zeros(cn.n_links, dtype=np.bool_)

    def reset(self):
        self.entry[:] = np.inf
        self.pred[:] = -1
        self.settled[:] = False
        self.link_done[:] = False


def _run_tree(cn, ws, origin, params, iteration, limit=np.inf):
    ws.reset()
    n_set = _tree(origin, cn.ptr, cn.target, cn.angle, cn.lengths, cn.curvatures,
                  params.a, params.sigma, params.clamp_lo, params.clamp_hi, params.seed,
                  cn.keys[origin], iteration, limit, ws.no_targets, 0,
                  ws.entry, ws.pred, ws.settled, ws.order, ws.link_done, ws.hc, ws.hs)
    return ws.order[:n_set].copy()


def _first_states(order, entry, pred):
    """Chosen entry state per reached link: cheapest, ties by route order."""
    first = {}
    for s in order:
        s = int(s)
        f = first.get(s >> 1)
        if f is None or entry[s] < entry[f] or (entry[s] == entry[f] and _route_precedes(s, f, pred)):
            first[s >> 1] = s
    return first


# --------------------------------------------------------------------------
# public API


@dataclass
class PathTree:
    """Shortest-path tree from one origin link's centre.

    ``cost`` maps each reached link id to its centre-to-centre routing cost
    (0 for the origin). ``pred`` maps a link to the ``(link id, entry end)``
    state it was reached from, ``None`` for links entered straight from the
    origin. ``route_length`` is the network-Euclidean length of the chosen
    route; ``radius_distance`` the true shortest network-Euclidean distance.
    """

    origin: str
    cost: dict
    pred: dict
    route_length: dict
    radius_distance: dict
    state_entry: dict = field(repr=False, default_factory=dict)
    state_pred: dict = field(repr=False, default_factory=dict)
    chosen_state: dict = field(repr=False, default_factory=dict)

    def path(self, link_id) -> list:
        """Link ids from origin to ``link_id`` along the chosen route."""
        if link_id == self.origin:
            return [self.origin]
        out = []
        s = self.chosen_state[link_id]
        while s is not None:
            out.append(s[0])
            s = self.state_pred.get(s)
        out.append(self.origin)
        return out[::-1]


def shortest_path_tree(net: SpatialNetwork, origin: str, params: MetricParams, rand_iteration: int = 0) -> PathTree:
    """Single-source routing tree under the hybrid randomized metric."""
    if origin not in net.index:
        raise KeyError(f"unknown origin link {origin!r}")
    cn = compile_network(net)
    ws = _Workspace(cn)
    y = net.index[origin]
    order = _run_tree(cn, ws, y, params, rand_iteration)
    entry, pred = ws.entry.copy(), ws.pred.copy()
    ids = net.link_ids
    key = int(cn.keys[y])
    sid = lambda s: (ids[s >> 1], s & 1)  # noqa: E731

    state_entry, state_pred = {}, {}
    for s in order:
        s = int(s)
        if (s >> 1) == y:
            continue
        state_entry[sid(s)] = float(entry[s])
        p = int(pred[s])
        state_pred[sid(s)] = None if (p >> 1) == y else sid(p)
    first = _first_states(order, entry, pred)
    cost, preds, chosen = {origin: 0.0}, {origin: None}, {}
    for link, s in first.items():
        if link == y:
            continue
        c = _link_cost(link, cn.lengths, cn.curvatures, params.a, params.sigma, params.clamp_lo,
                       params.clamp_hi, params.seed, key, rand_iteration)
        cost[ids[link]] = float(entry[s] + 0.5 * c)
        chosen[ids[link]] = sid(s)
        preds[ids[link]] = state_pred[sid(s)]

    tree = PathTree(origin, cost, preds, {}, {}, state_entry, state_pred, chosen)
    lengths = cn.lengths
    for lid in cost:
        route = tree.path(lid)
        if len(route) == 1:
            tree.route_length[lid] = 0.0
            continue
        total = 0.5 * lengths[y]
        for mid in route[1:-1]:
            total += lengths[net.index[mid]]
        tree.route_length[lid] = float(total + 0.5 * lengths[net.index[lid]])
    tree.radius_distance = radius_distances(net, origin)
    return tree


def radius_distances(net: SpatialNetwork, origin: str, limit: float = np.inf, near_end: bool = False) -> dict:
    """Shortest network-Euclidean distances from the centre of ``origin``.

    Centre to centre by default; with ``near_end`` the distance to the nearer
    end of each link instead (the origin itself maps to 0 either way). Links
    whose nearer end lies beyond ``limit`` are omitted.
    """
    cn = compile_network(net)
    ws = _Workspace(cn)
    y = net.index[origin]
    order = _run_tree(cn, ws, y, _EUCLIDEAN, 0, limit)
    out = {origin: 0.0}
    for link, s in _first_states(order, ws.entry, ws.pred).items():
        if link == y:
            continue
        d = float(ws.entry[s])
        out[net.link_ids[link]] = d if near_end else float(d + 0.5 * cn.lengths[link])
    return out


def in_radius(d: float, rmin: float, rmax: float) -> bool:
    """Band membership: ``rmin < d <= rmax``; distance 0 counts when ``rmin == 0``."""
    return d <= rmax and (d > rmin or rmin == 0.0)


@dataclass
class RadiusSet:
    origin: str
    rmin: float
    rmax: float
    members: dict  # link id -> centre-to-centre network-Euclidean distance

    def __contains__(self, link_id):
        return link_id in self.members

    def __len__(self):
        return len(self.members)


def radius_set(net: SpatialNetwork, origin: str, rmin: float, rmax: float) -> RadiusSet:
    """Links whose centre lies in the distance band ``(rmin, rmax]`` of the origin."""
    if not 0 <= rmin < rmax:
        raise ValueError(f"radius band must satisfy 0 <= rmin < rmax, got ({rmin}, {rmax})")
    dist = radius_distances(net, origin, limit=rmax)
    members = {lid: d for lid, d in dist.items() if in_radius(d, rmin, rmax)}
    return RadiusSet(origin, rmin, rmax, members)


def band_fraction(d_near: float, length: float, rmin: float, rmax: float, is_origin: bool = False) -> float:
    """Fraction of a link's length whose distance from the origin centre lies in ``(rmin, rmax]``.

    Distance grows linearly along the link from its nearer end. For the
    origin link itself distance grows from its centre towards both ends.
    """
    if is_origin:
        half = 0.5 * length
        return (min(rmax, half) - min(rmin, half)) / half
    hi = min(max(rmax - d_near, 0.0), length)
    lo = min(max(rmin - d_near, 0.0), length)
    return (hi - lo) / length


def fraction_within_radius(net: SpatialNetwork, origin: str, target: str, rmax: float, rmin: float = 0.0) -> float:
    """Share of ``target``'s length within ``rmax`` of the origin's centre, along the network."""
    if target == origin:
        return band_fraction(0.0, net.links[target].length, rmin, rmax, is_origin=True)
    near = radius_distances(net, origin, near_end=True)
    if target not in near:
        return 0.0
    return band_fraction(near[target], net.links[target].length, rmin, rmax)
