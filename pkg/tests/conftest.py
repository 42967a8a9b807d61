import json

import pytest
from hypothesis import HealthCheck, settings

from mhspna.network import Link, SpatialNetwork

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def straight(lid, p, q, **weights):
    return Link(lid, [p, q], weights)


@pytest.fixture
def path_abc():
    """Three straight 100 m links in a row, all weights 1."""
    w = {"o": 1.0, "d": 1.0}
    return SpatialNetwork(
        [Link("A", [(0, 0), (100, 0)], w), Link("B", [(100, 0), (200, 0)], w), Link("C", [(200, 0), (300, 0)], w)],
        weight_fields={"o", "d"},
    )


@pytest.fixture
def cross_geojson(tmp_path):
    feats = []
    for lid, end in [("N", (0, 100)), ("E", (100, 0)), ("S", (0, -100)), ("W", (-100, 0))]:
        feats.append({"type": "Feature", "properties": {"id": lid, "retail_m2": 10 if lid == "N" else None},
                      "geometry": {"type": "LineString", "coordinates": [[0, 0], list(end)]}})
    path = tmp_path / "cross.geojson"
    path.write_text(json.dumps({"type": "FeatureCollection", "features": feats}))
    return path
