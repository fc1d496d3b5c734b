"""Experiment harness: route simulation, accuracy sweeps and report files.

An experiment simulates ground-truth routes on a world, localizes each one
incrementally with a chosen method, and records top-1/top-5 success per
route-prefix length.  Success means the estimate agrees with the truth on
the last ``success_window`` locations.  Methods:

  ES      descriptor search over trained embeddings
  ES+T    descriptor search with turn filtering
  BSD     binary semantic descriptor matching (Hamming)
  BSD+T   BSD with turn filtering
  T-only  turn-pattern matching alone

Reports serialize as CSV (length, top1, top5) plus a JSON metadata sidecar
carrying the config echo and the per-length sets of localized route indices.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import BsdNoise, hamming_cost_vector, map_code_matrix, simulate_query_codes
from .embedding import (
    AugmentationConfig,
    Encoder,
    LossConfig,
    WorldViews,
    encode_batch,
    train_encoders,
)
from .localizer import LocalizerConfig, advance_candidates, check_success, start_candidates
from .synth import SyntheticWorldConfig, generate_synthetic_world
from .world import MapGraph, load_graph, turn_pattern

METHODS = ("ES", "ES+T", "BSD", "BSD+T", "T-only")

DEFAULT_EXCLUSIONS = ("tunnel", "motorway")


class SimulationError(RuntimeError):
    """Raised when route simulation cannot reach the requested count."""


@dataclass
class TrainParams:
    """Encoder training knobs used when a method needs embeddings."""

    epochs: int = 10
    lr: float = 0.2
    n_b: int = 10
    k: int = 5
    jitter_sigma: float = 0.05


@dataclass
class NoiseParams:
    """Query-side noise: latent perturbation, BSD bit flips, turn-bit flips.

    Latent noise is per-route heteroscedastic: every query location gets
    gaussian noise of scale ``sigma``, and with probability ``outlier_prob``
    a whole route is a degraded capture whose scale is multiplied by
    ``outlier_scale``.  The default (outlier_prob 0) is plain homoscedastic
    noise.
    """

    sigma: float = 0.0
    bsd: BsdNoise = field(default_factory=BsdNoise)
    turn_flip_prob: float = 0.0
    outlier_prob: float = 0.0
    outlier_scale: float = 20.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.turn_flip_prob <= 1.0:
            raise ValueError(f"turn_flip_prob must be in [0, 1], got {self.turn_flip_prob}")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError(f"outlier_prob must be in [0, 1], got {self.outlier_prob}")
        if self.outlier_scale < 1.0:
            raise ValueError(f"outlier_scale must be >= 1, got {self.outlier_scale}")


@dataclass
class ExperimentConfig:
    """Full description of one accuracy sweep."""

    world: SyntheticWorldConfig | str
    method: str = "ES"
    route_count: int = 500
    max_length: int = 20
    exclusions: tuple = DEFAULT_EXCLUSIONS
    success_window: int = 5
    noise: NoiseParams = field(default_factory=NoiseParams)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    train: TrainParams = field(default_factory=TrainParams)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.route_count < 1:
            raise ValueError(f"route_count must be >= 1, got {self.route_count}")
        if self.max_length < self.success_window:
            raise ValueError(
                f"max_length {self.max_length} must be >= success_window {self.success_window}"
            )
        if self.success_window < 1:
            raise ValueError(f"success_window must be >= 1, got {self.success_window}")


@dataclass
class AccuracyReport:
    """Per-length localization accuracy plus the sets of localized routes."""

    method: str
    lengths: list
    top1: dict
    top5: dict
    localized_top1: dict  # length -> frozenset of route indices
    localized_top5: dict
    meta: dict = field(default_factory=dict)

    def localized(self, length: int, k: int = 1) -> frozenset:
        table = self.localized_top1 if k == 1 else self.localized_top5
        return table[length]

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length", "top1", "top5"])
            for m in self.lengths:
                w.writerow([m, "%.17g" % self.top1[m], "%.17g" % self.top5[m]])

    def write_meta(self, path) -> None:
        payload = {
            "method": self.method,
            "lengths": self.lengths,
            "top1": {str(m): self.top1[m] for m in self.lengths},
            "top5": {str(m): self.top5[m] for m in self.lengths},
            "localized_top1": {str(m): sorted(self.localized_top1[m]) for m in self.lengths},
            "localized_top5": {str(m): sorted(self.localized_top5[m]) for m in self.lengths},
            "meta": self.meta,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def read_meta(cls, path) -> "AccuracyReport":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        lengths = [int(m) for m in payload["lengths"]]
        return cls(
            method=payload["method"],
            lengths=lengths,
            top1={m: float(payload["top1"][str(m)]) for m in lengths},
            top5={m: float(payload["top5"][str(m)]) for m in lengths},
            localized_top1={m: frozenset(payload["localized_top1"][str(m)]) for m in lengths},
            localized_top5={m: frozenset(payload["localized_top5"][str(m)]) for m in lengths},
            meta=payload.get("meta", {}),
        )


def difference_score(set_a, set_b) -> float:
    """Fraction of set_a missing from set_b: |a \\ b| / |a|.  Rejects empty a."""
    a, b = frozenset(set_a), frozenset(set_b)
    if not a:
        raise ValueError("difference score is undefined for an empty first set")
    return len(a - b) / len(a)


def simulate_routes(g: MapGraph, count: int = 500, max_length: int = 20,
                    exclusions=DEFAULT_EXCLUSIONS, seed: int = 0) -> list:
    """Sample ground-truth routes by seeded random walk.

    Walks start uniformly over non-excluded locations and extend uniformly
    over legal next locations; walks that dead-end before ``max_length`` are
    discarded and retried.  Raises SimulationError with a diagnostic when
    the attempt budget (200 per requested route) runs out.
    """
    if count < 1 or max_length < 1:
        raise ValueError(f"count and max_length must be positive, got ({count}, {max_length})")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    excl = frozenset(exclusions)
    allowed_ids = [loc.id for loc in g.locations() if not (loc.tags & excl)]
    if not allowed_ids:
        raise SimulationError("no locations remain after applying exclusions")
    allowed = set(allowed_ids)
    routes = []
    budget = count * 200
    attempts = 0
    while len(routes) < count:
        if attempts >= budget:
            raise SimulationError(
                f"exhausted {budget} attempts while simulating routes "
                f"({len(routes)}/{count} found; max_length={max_length} may be "
                f"unreachable under exclusions {sorted(excl)})"
            )
        attempts += 1
        start = allowed_ids[int(rng.integers(len(allowed_ids)))]
        path = [start]
        visited = {start}
        while len(path) < max_length:
            options = [nb for nb in g.neighbors_of(path[-1])
                       if nb in allowed and nb not in visited]
            if not options:
                break
            nxt = options[int(rng.integers(len(options)))]
            path.append(nxt)
            visited.add(nxt)
        if len(path) == max_length:
            routes.append(tuple(path))
    return routes


def run_experiment(cfg: ExperimentConfig, *, graph: MapGraph | None = None,
                   views: WorldViews | None = None,
                   encoders: tuple[Encoder, Encoder] | None = None) -> AccuracyReport:
    """Run one accuracy sweep and aggregate per-length results.

    ``graph``, ``views`` and ``encoders`` may be supplied to reuse expensive
    artifacts across experiments; anything missing is built from the config
    (encoders are trained only for embedding-based methods).
    """
    t0 = time.monotonic()
    if graph is None:
        if isinstance(cfg.world, SyntheticWorldConfig):
            graph = generate_synthetic_world(cfg.world)
        else:
            graph = load_graph(cfg.world)
    g = graph

    use_embeddings = cfg.method in ("ES", "ES+T")
    use_bsd = cfg.method in ("BSD", "BSD+T")
    use_turns = cfg.method in ("ES+T", "BSD+T", "T-only")
    loc_cfg = dataclasses.replace(cfg.localizer, use_turns=use_turns)
    loss_cfg = LossConfig()

    store_matrix = None
    f_enc = None
    if use_embeddings:
        if views is None:
            views = WorldViews.from_graph(g)
        if encoders is None:
            aug = AugmentationConfig(jitter_sigma=cfg.train.jitter_sigma)
            g_enc, f_enc = train_encoders(
                g, loss_cfg, aug, epochs=cfg.train.epochs, lr=cfg.train.lr,
                seed=cfg.seed, n_b=cfg.train.n_b, k=cfg.train.k, views=views,
            )
        else:
            g_enc, f_enc = encoders
        # Map-side reference store over S1 tiles, aligned to graph rows.
        store_matrix = encode_batch(views.map_s1, g_enc, loss_cfg)

    codes = map_code_matrix(g) if use_bsd else None
    zero_costs = np.zeros(len(g))

    routes = simulate_routes(g, cfg.route_count, cfg.max_length, cfg.exclusions, cfg.seed)

    lengths = list(range(cfg.success_window, cfg.max_length + 1))
    hits1 = {m: set() for m in lengths}
    hits5 = {m: set() for m in lengths}

    for idx, truth in enumerate(routes):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 23, idx]))
        qbits = np.array(turn_pattern(truth, g, loc_cfg.turn_threshold), dtype=np.uint8)
        if cfg.noise.turn_flip_prob > 0:
            flips = rng.random(len(qbits)) < cfg.noise.turn_flip_prob
            flips[0] = False  # bit 0 is fixed by convention
            qbits = np.where(flips, 1 - qbits, qbits)

        if use_embeddings:
            lat = views.image[views.rows_of(np.asarray(truth))]
            if cfg.noise.sigma > 0:
                scale = cfg.noise.sigma
                if cfg.noise.outlier_prob > 0 and rng.random() < cfg.noise.outlier_prob:
                    scale *= cfg.noise.outlier_scale
                lat = lat + scale * rng.standard_normal(lat.shape)
            qdesc = encode_batch(lat, f_enc, loss_cfg)
            cost_seq = [np.linalg.norm(store_matrix - qdesc[i], axis=1)
                        for i in range(cfg.max_length)]
        elif use_bsd:
            qcodes = simulate_query_codes(truth, g, cfg.noise.bsd, rng)
            cost_seq = [hamming_cost_vector(codes, qc) for qc in qcodes]
        else:
            cost_seq = [zero_costs] * cfg.max_length

        def record(state, m):
            top5 = state.top(5)
            if not top5:
                return
            prefix = truth[:m]
            if check_success(top5[0][0], prefix, cfg.success_window):
                hits1[m].add(idx)
            if any(check_success(r, prefix, cfg.success_window) for r, _ in top5):
                hits5[m].add(idx)

        state = start_candidates(g, cost_seq[0], cfg.exclusions, loc_cfg)
        if 1 >= cfg.success_window:
            record(state, 1)
        for m in range(2, cfg.max_length + 1):
            state = advance_candidates(state, cost_seq[m - 1], int(qbits[m - 2]), loc_cfg)
            if m >= cfg.success_window:
                record(state, m)

    n = len(routes)
    report = AccuracyReport(
        method=cfg.method,
        lengths=lengths,
        top1={m: len(hits1[m]) / n for m in lengths},
        top5={m: len(hits5[m]) / n for m in lengths},
        localized_top1={m: frozenset(hits1[m]) for m in lengths},
        localized_top5={m: frozenset(hits5[m]) for m in lengths},
        meta={
            "route_count": n,
            "max_length": cfg.max_length,
            "success_window": cfg.success_window,
            "seed": cfg.seed,
            "sigma": cfg.noise.sigma,
            "outlier_prob": cfg.noise.outlier_prob,
            "exclusions": sorted(cfg.exclusions),
            "turn_filter_mode": loc_cfg.turn_filter_mode,
            "cull_fraction": loc_cfg.cull_fraction,
            "cull_floor": loc_cfg.cull_floor,
            "world_size": len(g),
            "runtime_s": None,
        },
    )
    report.meta["runtime_s"] = round(time.monotonic() - t0, 3)
    return report
