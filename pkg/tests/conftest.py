"""Shared fixtures: small handcrafted graphs with known geometry."""
import numpy as np
import pytest

from routeloc import Location, MapGraph


@pytest.fixture
def path_graph():
    """Five locations in a straight east-west line, 10 m apart.

    0 - 1 - 2 - 3 - 4, all collinear, so every turn pattern is all zeros.
    """
    locs = [
        Location(id=i, position=(10.0 * i, 0.0), heading=0.0,
                 neighbors=tuple(j for j in (i - 1, i + 1) if 0 <= j <= 4))
        for i in range(5)
    ]
    return MapGraph(locs)


@pytest.fixture
def tee_graph():
    """A T junction with known tags and latents.

        3
        |
    0 - 1 - 2

    Location 1 is the junction; 3 sits due north of it.
    """
    latents = np.arange(8, dtype=np.float64).reshape(4, 2)
    locs = [
        Location(0, (0.0, 0.0), 90.0, (1,), frozenset({"gap_left"}), latents[0]),
        Location(1, (10.0, 0.0), 0.0, (0, 2, 3),
                 frozenset({"junction_ahead", "junction_behind"}), latents[1]),
        Location(2, (20.0, 0.0), 180.0, (1,), frozenset({"tunnel"}), latents[2]),
        Location(3, (10.0, 10.0), 270.0, (1,), frozenset(), latents[3]),
    ]
    return MapGraph(locs)


def brute_force_routes(g, m, exclusions=()):
    """Independent route oracle: plain recursive walk enumeration."""
    excl = frozenset(exclusions)
    allowed = {loc.id for loc in g.locations() if not (loc.tags & excl)}

    found = set()

    def walk(path):
        if len(path) == m:
            found.add(tuple(path))
            return
        for nb in g.neighbors_of(path[-1]):
            if nb in allowed and nb not in path:
                walk(path + [nb])

    for start in allowed:
        walk([start])
    return found
