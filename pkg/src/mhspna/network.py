"""Pedestrian network ingestion, preparation and count-point snapping.

A network is a set of polyline links whose endpoints are merged into
junctions when they fall within a snap tolerance. Links are the unit of
analysis: weights (retail floor area, car parks, stations, ...) are attached
to links at face value, and betweenness flows are reported per link.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import NetworkError, SnapError

__all__ = [
    "EVERYWHERE",
    "DEFAULT_SNAP_TOLERANCE",
    "Link",
    "Junction",
    "SpatialNetwork",
    "CountPoint",
    "CountRecord",
    "PrepareReport",
    "compute_link_metrics",
    "load_network",
    "save_network",
    "network_to_geojson",
    "network_from_geojson",
    "numeric_properties",
    "read_geojson",
    "prepare_network",
    "snap_count_points",
    "read_counts_csv",
    "write_counts_csv",
]

#: Synthetic weight field equal to 1 on every link ("everywhere" origins).
EVERYWHERE = "everywhere"
DEFAULT_SNAP_TOLERANCE = 0.5
AMBIGUITY_TOLERANCE = 1e-6

_GEOGRAPHIC_CRS_TOKENS = ("CRS84", "EPSG::4326", "EPSG:4326", "EPSG::4258", "EPSG::4269")


def compute_link_metrics(geometry) -> tuple[float, float]:
    """Return ``(length, angular_curvature)`` of a polyline.

    Length is the sum of segment lengths in metres. Angular curvature is the
    sum of absolute bearing changes at interior vertices, in degrees, so a
    straight two-point link has curvature 0 and collinear interior vertices
    add nothing.

    Examples
    --------
    >>> compute_link_metrics([(0, 0), (50, 0), (50, 50)])
    (100.0, 90.0)
    """
    pts = np.asarray(geometry, dtype=float)
    seg = np.diff(pts, axis=0)
    length = float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))
    if len(seg) < 2:
        return length, 0.0
    a, b = seg[:-1], seg[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.sum(a * b, axis=1)
    turns = np.degrees(np.abs(np.arctan2(cross, dot)))
    return length, float(np.sum(turns))


@dataclass
class Link:
    id: str
    geometry: tuple
    weights: dict = field(default_factory=dict)
    length: float = field(init=False)
    angular_curvature: float = field(init=False)

    def __post_init__(self):
        geom = tuple((float(x), float(y)) for x, y in self.geometry)
        if len(geom) < 2:
            raise NetworkError(f"malformed geometry: link {self.id!r} has fewer than 2 points")
        for p, q in zip(geom[:-1], geom[1:]):
            if p == q:
                raise NetworkError(f"malformed geometry: link {self.id!r} repeats point {p}")
        if not all(math.isfinite(c) for p in geom for c in p):
            raise NetworkError(f"malformed geometry: link {self.id!r} has non-finite coordinates")
        for k, v in self.weights.items():
            if not math.isfinite(v) or v < 0:
                raise NetworkError(f"weight {k!r} on link {self.id!r} must be finite and nonnegative, got {v}")
        self.geometry = geom
        self.length, self.angular_curvature = compute_link_metrics(geom)

    @property
    def start(self):
        return self.geometry[0]

    @property
    def end(self):
        return self.geometry[-1]


@dataclass
class Junction:
    position: tuple
    incident_ends: list  # [(link id, end)], end 0 = first vertex, 1 = last vertex

    @property
    def degree(self):
        return len(self.incident_ends)


class SpatialNetwork:
    """Undirected link/junction network.

    Links are stored in lexicographic id order; that order defines link
    indices and is the tie-break order used by routing.

    Parameters
    ----------
    links : iterable of Link
    weight_fields : iterable of str, optional
        Weight field names carried by the network. Links missing a field
        read it as 0. Defaults to the union of the links' weight keys.
    tolerance : float
        Endpoints closer than this (metres) share a junction.
    """

    def __init__(self, links: Iterable[Link], weight_fields=None, tolerance: float = DEFAULT_SNAP_TOLERANCE):
        links = sorted(links, key=lambda l: l.id)
        ids = [l.id for l in links]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate link ids: {dup}")
        if tolerance < 0:
            raise NetworkError("snap tolerance must be nonnegative")
        if weight_fields is None:
            weight_fields = {k for l in links for k in l.weights}
        self.weight_field_names = frozenset(weight_fields) - {EVERYWHERE}
        self.tolerance = float(tolerance)
        self.links = {l.id: l for l in links}
        self.link_ids = ids
        self.index = {lid: i for i, lid in enumerate(ids)}
        self._build_junctions()
        self._compiled = None

    def _build_junctions(self):
        n = len(self.link_ids)
        pts = np.empty((2 * n, 2))
        for i, lid in enumerate(self.link_ids):
            link = self.links[lid]
            pts[2 * i] = link.start
            pts[2 * i + 1] = link.end
        if n == 0:
            self.junctions = []
            self.link_ends = np.empty((0, 2), dtype=np.int64)
            return
        if self.tolerance > 0:
            pairs = cKDTree(pts).query_pairs(self.tolerance, output_type="ndarray")
            graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(2 * n, 2 * n))
            _, labels = connected_components(graph, directed=False)
        else:
            # exact coincidence only
            _, labels = np.unique(pts, axis=0, return_inverse=True)
            labels = labels.ravel()
        # renumber junctions by first endpoint occurrence for a stable order
        _, first = np.unique(labels, return_index=True)
        order = np.argsort(first)
        remap = np.empty_like(order)
        remap[order] = np.arange(len(order))
        labels = remap[labels]
        self.link_ends = labels.reshape(n, 2).astype(np.int64)
        junctions = []
        for j in range(len(order)):
            members = np.flatnonzero(labels == j)
            pos = pts[members].mean(axis=0)
            ends = [(self.link_ids[m // 2], int(m % 2)) for m in members]
            junctions.append(Junction((float(pos[0]), float(pos[1])), ends))
        self.junctions = junctions

    def __len__(self):
        return len(self.link_ids)

    def __iter__(self):
        return (self.links[i] for i in self.link_ids)

    def __eq__(self, other):
        if not isinstance(other, SpatialNetwork):
            return NotImplemented
        if self.link_ids != other.link_ids or self.weight_field_names != other.weight_field_names:
            return False
        for lid in self.link_ids:
            a, b = self.links[lid], other.links[lid]
            if a.geometry != b.geometry:
                return False
            if any(a.weights.get(k, 0.0) != b.weights.get(k, 0.0) for k in self.weight_field_names):
                return False
        return True

    def __repr__(self):
        return f"SpatialNetwork({len(self)} links, {len(self.junctions)} junctions)"

    @property
    def lengths(self) -> np.ndarray:
        return np.array([self.links[i].length for i in self.link_ids])

    @property
    def curvatures(self) -> np.ndarray:
        return np.array([self.links[i].angular_curvature for i in self.link_ids])

    def weights(self, name: str) -> np.ndarray:
        """Per-link weight vector for ``name`` in link order."""
        if name == EVERYWHERE:
            return np.ones(len(self))
        if name not in self.weight_field_names:
            raise NetworkError(f"unknown weight field {name!r}")
        return np.array([float(self.links[i].weights.get(name, 0.0)) for i in self.link_ids])

    def neighbours(self, link_id):
        """Ids of links sharing a junction with ``link_id``."""
        i = self.index[link_id]
        out = set()
        for j in self.link_ends[i]:
            out.update(lid for lid, _ in self.junctions[j].incident_ends)
        out.discard(link_id)
        return sorted(out)

    def components(self) -> list[list[str]]:
        """Connected components as sorted link id lists, largest first."""
        n = len(self)
        if n == 0:
            return []
        nj = len(self.junctions)
        ends = self.link_ends
        graph = coo_matrix((np.ones(n), (ends[:, 0], ends[:, 1])), shape=(nj, nj))
        _, jlab = connected_components(graph, directed=False)
        lab = jlab[ends[:, 0]]
        comps = {}
        for i, c in enumerate(lab):
            comps.setdefault(c, []).append(self.link_ids[i])
        return sorted(comps.values(), key=lambda c: (-len(c), c[0]))

    def total_length(self) -> float:
        return math.fsum(l.length for l in self)


@dataclass
class CountPoint:
    id: str
    position: tuple
    link_id: str
    observations: dict  # year label -> flow

    def __post_init__(self):
        for year, flow in self.observations.items():
            if not flow > 0:
                raise SnapError(
                    f"count point {self.id!r} year {year}: flow {flow} is not > 0; "
                    "observation weights y**(lambda_w - 1) require strictly positive counts",
                    [self.id],
                )


@dataclass
class CountRecord:
    """A raw count-point row group from CSV, before snapping."""

    id: str
    position: tuple
    observations: dict


def _is_geographic(doc, coords):
    crs = doc.get("crs")
    if crs is not None:
        name = json.dumps(crs).upper()
        if any(tok in name for tok in _GEOGRAPHIC_CRS_TOKENS):
            return True
        return False
    if not coords:
        return False
    arr = np.array(coords)
    if np.all(np.abs(arr[:, 0]) <= 180) and np.all(np.abs(arr[:, 1]) <= 90):
        extent = np.hypot(*(arr.max(axis=0) - arr.min(axis=0)))
        # a lon/lat town centre spans well under a degree; a metric one spans metres
        return extent < 1.0
    return False


def load_network(path, weight_fields: Sequence[str] = (), tolerance: float = DEFAULT_SNAP_TOLERANCE) -> SpatialNetwork:
    """Read a GeoJSON FeatureCollection of LineStrings.

    Every feature needs a string ``id`` property. Only the named weight
    fields are read; a field absent from a feature reads as 0, a present but
    non-numeric value is an error.
    """
    return network_from_geojson(read_geojson(path), weight_fields, tolerance, source=str(path))


def network_from_geojson(doc, weight_fields=(), tolerance=DEFAULT_SNAP_TOLERANCE, source="<geojson>"):
    if doc.get("type") != "FeatureCollection":
        raise NetworkError(f"{source}: expected a GeoJSON FeatureCollection")
    weight_fields = [w for w in weight_fields if w != EVERYWHERE]
    links, coords = [], []
    for n, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        if geom.get("type") != "LineString":
            raise NetworkError(f"{source}: feature {n}: malformed geometry (expected LineString, got {geom.get('type')})")
        if "id" not in props:
            raise NetworkError(f"{source}: feature {n}: missing 'id' property")
        lid = str(props["id"])
        pts = geom.get("coordinates") or []
        try:
            pts = [(float(p[0]), float(p[1])) for p in pts]
        except (TypeError, ValueError, IndexError):
            raise NetworkError(f"{source}: link {lid!r}: malformed geometry (bad coordinates)") from None
        weights = {}
        for w in weight_fields:
            v = props.get(w)
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise NetworkError(f"{source}: link {lid!r}: weight field {w!r} is not numeric ({v!r})")
            weights[w] = float(v)
        links.append(Link(lid, pts, weights))
        coords.extend(pts)
    if _is_geographic(doc, coords):
        raise NetworkError(f"{source}: geographic (lon/lat) coordinates detected; reproject to a planar metric CRS first")
    return SpatialNetwork(links, weight_fields=weight_fields, tolerance=tolerance)


def numeric_properties(doc) -> set:
    """Names of properties (other than ``id``) holding a number on some feature."""
    names = set()
    for feat in doc.get("features", []):
        for k, v in (feat.get("properties") or {}).items():
            if k != "id" and isinstance(v, (int, float)) and not isinstance(v, bool):
                names.add(k)
    return names


def read_geojson(path) -> dict:
    """Parse a GeoJSON file, reporting the line of any syntax error."""
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise NetworkError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None


def network_to_geojson(net: SpatialNetwork, extra: Mapping[str, Sequence[float]] | None = None,
                       meta: dict | None = None) -> dict:
    """GeoJSON document for ``net``.

    ``extra`` maps property name to per-link values; ``meta`` is stored as a
    top-level ``mhspna`` member.
    """
    fields = sorted(net.weight_field_names)
    features = []
    for i, lid in enumerate(net.link_ids):
        link = net.links[lid]
        props = {"id": lid}
        for w in fields:
            props[w] = link.weights.get(w, 0.0)
        if extra:
            for k, vals in extra.items():
                props[k] = float(vals[i])
        features.append({
            "type": "Feature",
            "properties": props,
            "geometry": {"type": "LineString", "coordinates": [list(p) for p in link.geometry]},
        })
    doc = {"type": "FeatureCollection", "features": features}
    if meta is not None:
        doc["mhspna"] = meta
    return doc


def save_network(net: SpatialNetwork, path, extra=None, meta=None) -> None:
    with Path(path).open("w") as fh:
        json.dump(network_to_geojson(net, extra, meta), fh, indent=1)
        fh.write("\n")


# --------------------------------------------------------------------------
# preparation


@dataclass
class PrepareReport:
    duplicates_removed: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    components_flagged: list = field(default_factory=list)
    islands_removed: bool = True
    length_before: float = 0.0
    length_after: float = 0.0

    @property
    def is_empty(self):
        return not (self.duplicates_removed or self.splits or self.components_flagged)

    @property
    def length_removed(self):
        dup = math.fsum(d["length"] for d in self.duplicates_removed)
        isl = math.fsum(c["length"] for c in self.components_flagged) if self.islands_removed else 0.0
        return dup + isl

    def to_dict(self):
        return {
            "schema_version": 1,
            "duplicates_removed": self.duplicates_removed,
            "splits": self.splits,
            "components_flagged": self.components_flagged,
            "islands_removed": self.islands_removed,
            "length_before": self.length_before,
            "length_after": self.length_after,
        }


def _project_on_polyline(pts, q):
    """Nearest point on polyline ``pts`` to ``q``: (distance, segment index, t, arc length)."""
    a, b = pts[:-1], pts[1:]
    d = b - a
    seglen2 = np.sum(d * d, axis=1)
    t = np.clip(np.sum((q - a) * d, axis=1) / seglen2, 0.0, 1.0)
    proj = a + t[:, None] * d
    dist = np.hypot(*(proj - q).T)
    k = int(np.argmin(dist))
    seglen = np.sqrt(seglen2)
    arc = float(np.sum(seglen[:k]) + t[k] * seglen[k])
    return float(dist[k]), k, float(t[k]), arc


def _split_link(link: Link, cuts):
    """Split ``link`` at ``cuts`` = sorted [(arc, seg, t)]; weights prorated by length."""
    pts = [np.array(p) for p in link.geometry]
    pieces, current = [], [pts[0]]
    cut_iter = iter(cuts)
    cut = next(cut_iter, None)
    for k in range(len(pts) - 1):
        a, b = pts[k], pts[k + 1]
        while cut is not None and cut[1] == k:
            p = a + cut[2] * (b - a)
            if not np.array_equal(p, current[-1]):
                current.append(p)
            pieces.append(current)
            current = [p]
            cut = next(cut_iter, None)
        if not np.array_equal(b, current[-1]):
            current.append(b)
    pieces.append(current)
    pieces = [pc for pc in pieces if len(pc) >= 2]
    out = []
    for n, pc in enumerate(pieces, start=1):
        geom = [tuple(map(float, p)) for p in pc]
        piece_len, _ = compute_link_metrics(geom)
        frac = piece_len / link.length
        weights = {k: v * frac for k, v in link.weights.items()}
        out.append(Link(f"{link.id}.{n}", geom, weights))
    return out


def _find_splits(net: SpatialNetwork):
    tol = net.tolerance
    jpos = np.array([j.position for j in net.junctions])
    tree = cKDTree(jpos)
    plan = {}
    for i, lid in enumerate(net.link_ids):
        link = net.links[lid]
        pts = np.asarray(link.geometry)
        # candidate junctions near the link's bounding box
        lo, hi = pts.min(axis=0) - tol, pts.max(axis=0) + tol
        centre, radius = (lo + hi) / 2, float(np.hypot(*(hi - lo)) / 2)
        own = set(net.link_ends[i].tolist())
        cuts = []
        for j in tree.query_ball_point(centre, radius):
            if j in own:
                continue
            dist, seg, t, arc = _project_on_polyline(pts, jpos[j])
            if dist <= tol and tol < arc < link.length - tol:
                cuts.append((arc, seg, t, j))
        if cuts:
            plan[lid] = sorted(cuts)
    return plan


def prepare_network(net: SpatialNetwork, keep_islands: bool = False) -> tuple[SpatialNetwork, PrepareReport]:
    """Split links at mid-geometry junctions, drop duplicates, flag islands.

    Returns the prepared network and a report. A clean network comes back
    unchanged with an empty report; applying the function twice gives the
    same result as applying it once.
    """
    report = PrepareReport(islands_removed=not keep_islands, length_before=net.total_length())
    links = {lid: net.links[lid] for lid in net.link_ids}

    plan = _find_splits(net) if len(net) else {}
    for lid, cuts in sorted(plan.items()):
        pieces = _split_link(links.pop(lid), [(c[0], c[1], c[2]) for c in cuts])
        for p in pieces:
            if p.id in links:
                raise NetworkError(f"split of {lid!r} collides with existing id {p.id!r}")
            links[p.id] = p
        report.splits.append({
            "link": lid,
            "pieces": [p.id for p in pieces],
            "at": [list(net.junctions[c[3]].position) for c in cuts],
        })

    seen = {}
    for lid in sorted(links):
        geom = links[lid].geometry
        key = min(geom, geom[::-1])
        if key in seen:
            report.duplicates_removed.append({"removed": lid, "kept": seen[key], "length": links[lid].length})
            del links[lid]
        else:
            seen[key] = lid

    out = SpatialNetwork(links.values(), weight_fields=net.weight_field_names, tolerance=net.tolerance)
    comps = out.components()
    if len(comps) > 1:
        for comp in comps[1:]:
            length = math.fsum(out.links[i].length for i in comp)
            report.components_flagged.append({"links": comp, "length": length})
        if not keep_islands:
            keep = set(comps[0])
            out = SpatialNetwork((out.links[i] for i in out.link_ids if i in keep),
                                 weight_fields=net.weight_field_names, tolerance=net.tolerance)
    if report.is_empty:
        out = net
    report.length_after = out.total_length()
    return out, report


# --------------------------------------------------------------------------
# count points


def _segments(net: SpatialNetwork):
    a, b, owner = [], [], []
    for i, lid in enumerate(net.link_ids):
        pts = np.asarray(net.links[lid].geometry)
        a.append(pts[:-1])
        b.append(pts[1:])
        owner.append(np.full(len(pts) - 1, i))
    return np.vstack(a), np.vstack(b), np.concatenate(owner)


def snap_count_points(net: SpatialNetwork, points: Sequence, tolerance: float) -> list[CountPoint]:
    """Resolve each ``(id, position, observations)`` to its nearest link.

    Raises :class:`SnapError` listing every point with no link within
    ``tolerance``, or with two links equally near (within 1e-6 m).
    """
    if not tolerance > 0:
        raise SnapError("snap tolerance must be > 0")
    a, b, owner = _segments(net)
    d = b - a
    seglen2 = np.sum(d * d, axis=1)
    n = len(net)
    unresolved, ambiguous, out = [], [], []
    for rec in points:
        if isinstance(rec, CountRecord):
            pid, pos, obs = rec.id, rec.position, rec.observations
        else:
            pid, pos, obs = rec
        q = np.asarray(pos, dtype=float)
        t = np.clip(np.sum((q - a) * d, axis=1) / seglen2, 0.0, 1.0)
        dist = np.hypot(*(a + t[:, None] * d - q).T)
        per_link = np.full(n, np.inf)
        np.minimum.at(per_link, owner, dist)
        order = np.argsort(per_link, kind="stable")
        best = per_link[order[0]]
        if best > tolerance:
            unresolved.append(pid)
            continue
        if n > 1 and per_link[order[1]] - best <= AMBIGUITY_TOLERANCE:
            ambiguous.append(pid)
            continue
        out.append(CountPoint(str(pid), (float(q[0]), float(q[1])), net.link_ids[order[0]], dict(obs)))
    if unresolved:
        raise SnapError(f"unresolved count points (no link within {tolerance} m): {unresolved}", unresolved)
    if ambiguous:
        raise SnapError(f"ambiguous count points (equidistant links): {ambiguous}", ambiguous)
    return out


def read_counts_csv(path) -> list[CountRecord]:
    """Read ``point_id,x,y,year,flow`` rows grouped by point, in file order."""
    path = Path(path)
    records: dict[str, CountRecord] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["point_id", "x", "y", "year", "flow"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise NetworkError(f"{path}: expected header {','.join(expected)}, got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                pid = row["point_id"].strip()
                x, y = float(row["x"]), float(row["y"])
                year = row["year"].strip()
                flow = float(row["flow"])
            except (TypeError, ValueError, AttributeError):
                raise NetworkError(f"{path}:{line}: malformed row {row}") from None
            rec = records.get(pid)
            if rec is None:
                rec = records[pid] = CountRecord(pid, (x, y), {})
            elif rec.position != (x, y):
                raise NetworkError(f"{path}:{line}: point {pid!r} has inconsistent coordinates")
            if year in rec.observations:
                raise NetworkError(f"{path}:{line}: duplicate observation for point {pid!r} year {year}")
            rec.observations[year] = flow
    return list(records.values())


def write_counts_csv(path, rows: Iterable[tuple]) -> None:
    """Write ``(point_id, x, y, year, flow)`` tuples in counts CSV format."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point_id", "x", "y", "year", "flow"])
        for pid, x, y, year, flow in rows:
            w.writerow([pid, repr(float(x)), repr(float(y)), year, repr(float(flow))])
