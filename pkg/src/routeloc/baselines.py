"""Hand-crafted localization baselines.

Binary semantic descriptors (BSD) condense each location into four bits read
from its semantic tags; routes are ranked by summed Hamming distance with
the same turn filtering and tie-breaking as the descriptor search.  The
turn-only baseline matches routes purely on their binary turn pattern.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .localizer import LocalizerConfig, _lex_order
from .world import DEFAULT_TURN_THRESHOLD, MapGraph, Route, TurnPattern, turn_pattern, turn_pattern_matrix

# Bit order of a BSD code.
BSD_TAG_ORDER = ("junction_ahead", "junction_behind", "gap_left", "gap_right")

BsdCode = tuple[int, int, int, int]


@dataclass(frozen=True)
class BsdNoise:
    """Per-bit flip probabilities for simulating an imperfect image classifier.

    Defaults are calibrated so that simulated junction and gap detections
    show roughly the precision/recall of a real classifier on street-level
    imagery (junction bits flip more often than gap bits).
    """

    p_junction: float = 0.3
    p_gap: float = 0.23

    def __post_init__(self):
        for p in (self.p_junction, self.p_gap):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability must be in [0, 1], got {p}")

    def per_bit(self) -> np.ndarray:
        return np.array([self.p_junction, self.p_junction, self.p_gap, self.p_gap])


def bsd_from_map(loc_id: int, g: MapGraph) -> BsdCode:
    """Ground-truth BSD code of a location, read off its semantic tags."""
    tags = g.location(loc_id).tags
    return tuple(1 if t in tags else 0 for t in BSD_TAG_ORDER)


def map_code_matrix(g: MapGraph) -> np.ndarray:
    """BSD codes for every location, shape (N, 4) uint8 in graph row order."""
    from .world import TAG_NAMES

    cols = [TAG_NAMES.index(t) for t in BSD_TAG_ORDER]
    g._build_index()
    return g._tags[:, cols].astype(np.uint8)


def simulate_query_codes(route: Route, g: MapGraph, noise: BsdNoise, rng) -> list:
    """Noisy query-side BSD codes along a route (each bit flips independently)."""
    p = noise.per_bit()
    out = []
    for loc_id in route:
        code = np.array(bsd_from_map(loc_id, g), dtype=np.uint8)
        flips = rng.random(4) < p
        out.append(tuple(int(b) for b in np.where(flips, 1 - code, code)))
    return out


def hamming_cost_vector(codes: np.ndarray, query_code) -> np.ndarray:
    """Hamming distance from one query code to every map code, float64."""
    qc = np.asarray(query_code, dtype=np.uint8)
    if qc.shape != (codes.shape[1],):
        raise ValueError(f"query code must have {codes.shape[1]} bits, got {qc.shape}")
    return (codes != qc[None, :]).sum(axis=1).astype(np.float64)


def bsd_localize(query_codes: Sequence[BsdCode], routes, g: MapGraph,
                 turns: TurnPattern | None = None,
                 cfg: LocalizerConfig = LocalizerConfig()) -> list:
    """Rank candidate routes by total Hamming distance between BSD sequences.

    Mirrors the descriptor-based full search: same optional turn filtering,
    same (distance, lexicographic) ordering, same ``top_k`` cut.  Query
    noise, when wanted, is injected by the caller (see simulate_query_codes);
    the ranking itself is deterministic.
    """
    m = len(query_codes)
    if m < 1:
        raise ValueError("need at least one query code")
    route_list = sorted(routes)
    if not route_list:
        return []
    if any(len(r) != m for r in route_list):
        raise ValueError(f"all candidate routes must have the query length {m}")
    matrix = np.asarray(route_list, dtype=np.int64)

    if cfg.use_turns and turns is not None:
        if m < 2:
            raise ValueError("turn filtering needs routes of length >= 2")
        tq = np.asarray(turns, dtype=np.uint8)
        if tq.shape != (m - 1,):
            raise ValueError(f"turn pattern must have {m - 1} bits, got {tq.shape}")
        patterns = turn_pattern_matrix(matrix, g, cfg.turn_threshold)
        keep = (patterns == tq[None, :]).all(axis=1)
        matrix = matrix[keep]
        if len(matrix) == 0:
            return []

    codes = map_code_matrix(g)
    dists = np.zeros(len(matrix), dtype=np.float64)
    for i in range(m):
        cost = hamming_cost_vector(codes, query_codes[i])
        dists += cost[g.rows_of(matrix[:, i])]

    order = _lex_order(matrix, dists)
    if cfg.top_k is not None:
        order = order[:cfg.top_k]
    return [(tuple(int(v) for v in matrix[j]), float(dists[j])) for j in order]


def turn_only_localize(turns: TurnPattern, routes, g: MapGraph,
                       threshold: float = DEFAULT_TURN_THRESHOLD) -> list:
    """All candidate routes whose map-side turn pattern equals the query pattern.

    Matches carry no further ranking signal; the list is returned in
    lexicographic order for determinism.
    """
    tq = tuple(int(b) for b in turns)
    out = []
    for r in sorted(routes):
        if len(r) != len(tq) + 1:
            raise ValueError(
                f"route length {len(r)} does not fit a {len(tq)}-bit turn pattern"
            )
        if turn_pattern(r, g, threshold) == tq:
            out.append(tuple(r))
    return out
