"""Synthetic retweet streams with planted structure.

Scenarios plant: K communities (each user retweets its own cluster's
influencer pool with probability ``p_in`` and any other cluster's with the
complementary mass, so ``p_in + (K-1) * p_out = 1`` per draw); a Zipf
(exponent 1.2) influencer-popularity skew inside every pool; an optional
structural drift that rotates one cluster's pool preference from a source
cluster's pool to its own (own-pool weight ``sin^2(theta)``, theta sweeping
0..degrees linearly over the drift days); and a per-cluster toxicity mean
process (AR(1) deviations around a base rate, additive shocks, lagged
cross-cluster couplings) from which every post's score is a Beta draw.

Audience realism knobs (all default to 0 = off): ``zipf_skew`` spreads the
popularity exponent linearly across pools (cluster 0 the most
celebrity-concentrated, the last the most dialogue-like); ``rate_skew``
spreads the base activity rate linearly across clusters (cluster 0
busiest) so cluster audiences are not interchangeable; ``burst_sd`` sets
the amplitude of per-day per-cluster news-cycle surges that lift the
cluster's rate one-sidedly above baseline (attention spikes up, not
down), with ``burst_skew`` spreading the amplitudes across clusters
(cluster 0 the most reactive) and ``burst_persistence`` giving the
underlying factors AR(1) memory so stories run for days instead of
flaring for one;
``zipf_gain`` couples each pool's own factor multiplicatively to its
popularity skew (surge traffic piles onto top influencers, flattening
back off-peak, proportionally to how celebrity-like the pool already
is); ``casualness_sd`` gives
every user a persistent personal offset to the Zipf exponent
(mainstream-leaning vs long-tail readers).  Effective per-event exponents
are clipped to [0.05, 8].  ``cycle_amp`` adds a deterministic sinusoidal
attention cycle of ``cycle_period`` days to every cluster's rate, with
cluster phases spread evenly over the cycle (communities take turns
dominating the conversation); unlike the stochastic bursts this
modulation is identical across seeds.

Population shape knobs: ``cluster_sizes`` sets per-cluster user counts
(overriding the uniform ``users_per_cluster``) and ``pool_sizes`` sets
per-cluster influencer-pool sizes (overriding the uniform
``influencers_per_cluster``).

Generation is single-threaded and fully vectorized per day; identical
(spec, seed) pairs produce byte-identical output files.  The emitted files
are exactly what the ingest stage consumes: ``events.csv``,
``toxicity.csv``, ``terms.txt``, plus ``truth.json`` with the planted
labels, drift schedule, coupling graph, and per-day toxicity means.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError
from .ingest import EventStore, ParseSummary, SECONDS_PER_DAY

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scenario specification
# ---------------------------------------------------------------------------


@dataclass
class Shock:
    cluster: int
    day: int
    size: float


@dataclass
class Coupling:
    source: int
    target: int
    lag: int
    coef: float


@dataclass
class ToxicityProcess:
    base: tuple[float, ...] | float = 0.3
    ar: float = 0.8
    noise_sd: float = 0.02
    concentration: float = 30.0
    shocks: list[Shock] = field(default_factory=list)
    couplings: list[Coupling] = field(default_factory=list)

    def base_vector(self, k: int) -> np.ndarray:
        if isinstance(self.base, (int, float)):
            return np.full(k, float(self.base))
        vec = np.asarray(self.base, dtype=np.float64)
        if vec.shape[0] != k:
            raise ConfigError(f"toxicity.base needs {k} entries, got {vec.shape[0]}")
        return vec


@dataclass
class DriftSpec:
    cluster: int = 1
    source: int = 0
    start_day: int = 0
    end_day: int | None = None
    degrees: float = 90.0


@dataclass
class ScenarioSpec:
    name: str = "scenario"
    seed: int = 0
    days: int = 60
    clusters: int = 2
    users_per_cluster: int = 500
    cluster_sizes: tuple[int, ...] | None = None
    pool_sizes: tuple[int, ...] | None = None
    influencers_per_cluster: int = 30
    events_per_user_day: float = 2.0
    p_in: float = 0.95
    zipf_exponent: float = 1.2
    zipf_skew: float = 0.0
    rate_skew: float = 0.0
    burst_sd: float = 0.0
    burst_skew: float = 0.0
    burst_persistence: float = 0.0
    zipf_gain: float = 0.0
    casualness_sd: float = 0.0
    cycle_amp: float = 0.0
    cycle_period: float = 13.5
    cycle_phase: float = 0.0
    posts_per_influencer_day: int = 3
    tags_per_cluster: int = 8
    term_rate: float = 0.3
    marker_term: str = "ideology"
    start_day: int = 18628  # 2021-01-01
    toxicity: ToxicityProcess = field(default_factory=ToxicityProcess)
    drift: DriftSpec | None = None

    @property
    def p_out(self) -> float:
        """Per-other-cluster affinity; p_in + (K-1) * p_out = 1 by design."""
        if self.clusters == 1:
            return 0.0
        return (1.0 - self.p_in) / (self.clusters - 1)

    @property
    def sizes(self) -> tuple[int, ...]:
        """Per-cluster user counts; ``cluster_sizes`` overrides the uniform default."""
        if self.cluster_sizes is not None:
            return tuple(self.cluster_sizes)
        return (self.users_per_cluster,) * self.clusters

    @property
    def n_users(self) -> int:
        return sum(self.sizes)

    @property
    def pools(self) -> tuple[int, ...]:
        """Per-cluster influencer counts; ``pool_sizes`` overrides the uniform default."""
        if self.pool_sizes is not None:
            return tuple(self.pool_sizes)
        return (self.influencers_per_cluster,) * self.clusters

    @property
    def n_influencers(self) -> int:
        return sum(self.pools)

    def violations(self) -> list[str]:
        v = []
        if self.days < 1:
            v.append(f"days must be >= 1, got {self.days}")
        if not 1 <= self.clusters <= 10:
            v.append(f"clusters must be in [1, 10], got {self.clusters}")
        if self.users_per_cluster < 1:
            v.append(f"users_per_cluster must be >= 1, got {self.users_per_cluster}")
        if self.cluster_sizes is not None:
            if len(self.cluster_sizes) != self.clusters:
                v.append(
                    f"cluster_sizes must list one count per cluster "
                    f"({self.clusters}), got {len(self.cluster_sizes)}"
                )
            elif any(s < 1 for s in self.cluster_sizes):
                v.append(f"cluster_sizes entries must be >= 1, got {self.cluster_sizes}")
        if self.pool_sizes is not None:
            if len(self.pool_sizes) != self.clusters:
                v.append(
                    f"pool_sizes must list one influencer count per cluster "
                    f"({self.clusters}), got {len(self.pool_sizes)}"
                )
            elif any(s < 1 for s in self.pool_sizes):
                v.append(f"pool_sizes entries must be >= 1, got {self.pool_sizes}")
        if self.influencers_per_cluster < 1:
            v.append(f"influencers_per_cluster must be >= 1 (zero influencers is infeasible), got {self.influencers_per_cluster}")
        if self.events_per_user_day <= 0:
            v.append(f"events_per_user_day must be positive, got {self.events_per_user_day}")
        if not 0.0 < self.p_in <= 1.0:
            v.append(f"p_in must be in (0, 1], got {self.p_in}")
        if self.clusters == 1 and self.p_in != 1.0:
            v.append("with a single cluster p_in must be 1")
        if self.zipf_exponent <= 0:
            v.append(f"zipf_exponent must be positive, got {self.zipf_exponent}")
        if not 0.0 <= self.zipf_skew < 2.0:
            v.append(f"zipf_skew must be in [0, 2), got {self.zipf_skew}")
        if not 0.0 <= self.rate_skew < 1.0:
            v.append(f"rate_skew must be in [0, 1), got {self.rate_skew}")
        if not 0.0 <= self.burst_sd <= 2.0:
            v.append(f"burst_sd must be in [0, 2], got {self.burst_sd}")
        if not 0.0 <= self.burst_skew < 2.0:
            v.append(f"burst_skew must be in [0, 2), got {self.burst_skew}")
        if not 0.0 <= self.burst_persistence < 1.0:
            v.append(f"burst_persistence must be in [0, 1), got {self.burst_persistence}")
        if not -3.0 <= self.zipf_gain <= 3.0:
            v.append(f"zipf_gain must be in [-3, 3], got {self.zipf_gain}")
        if not 0.0 <= self.casualness_sd <= 2.0:
            v.append(f"casualness_sd must be in [0, 2], got {self.casualness_sd}")
        if not 0.0 <= self.cycle_amp < 1.0:
            v.append(f"cycle_amp must be in [0, 1), got {self.cycle_amp}")
        if self.cycle_period <= 2.0:
            v.append(f"cycle_period must exceed 2 days, got {self.cycle_period}")
        if not 1 <= self.posts_per_influencer_day <= 10:
            v.append(f"posts_per_influencer_day must be in [1, 10], got {self.posts_per_influencer_day}")
        if self.tags_per_cluster < 1:
            v.append(f"tags_per_cluster must be >= 1, got {self.tags_per_cluster}")
        if not 0.0 <= self.term_rate <= 1.0:
            v.append(f"term_rate must be in [0, 1], got {self.term_rate}")
        if self.n_influencers >= 10000:
            v.append("total influencers must stay below 10000 (fixed-width post ids)")
        if self.days >= 10000:
            v.append("days must stay below 10000 (fixed-width post ids)")
        if not 0.0 <= self.toxicity.ar < 1.0:
            v.append(f"toxicity.ar must be in [0, 1), got {self.toxicity.ar}")
        if self.toxicity.noise_sd < 0:
            v.append(f"toxicity.noise_sd must be >= 0, got {self.toxicity.noise_sd}")
        if self.toxicity.concentration <= 0:
            v.append(f"toxicity.concentration must be positive, got {self.toxicity.concentration}")
        try:
            base = self.toxicity.base_vector(self.clusters)
            if np.any((base <= 0) | (base >= 1)):
                v.append("toxicity.base rates must lie strictly inside (0, 1)")
        except ConfigError as exc:
            v.append(str(exc))
        for s in self.toxicity.shocks:
            if not 0 <= s.cluster < self.clusters:
                v.append(f"shock cluster {s.cluster} out of range")
            if not 0 <= s.day < self.days:
                v.append(f"shock day {s.day} out of range")
        for c in self.toxicity.couplings:
            if c.lag < 1:
                v.append(f"coupling lag must be >= 1, got {c.lag}")
            if not (0 <= c.source < self.clusters and 0 <= c.target < self.clusters):
                v.append(f"coupling endpoints ({c.source}->{c.target}) out of range")
            if c.source == c.target:
                v.append("coupling source and target must differ")
        if self.drift is not None:
            d = self.drift
            if not 0 <= d.cluster < self.clusters:
                v.append(f"drift cluster {d.cluster} out of range")
            if not 0 <= d.source < self.clusters:
                v.append(f"drift source {d.source} out of range")
            if d.cluster == d.source:
                v.append("drift cluster and source must differ")
            end = d.end_day if d.end_day is not None else self.days - 1
            if not 0 <= d.start_day <= end <= self.days - 1:
                v.append(f"drift window [{d.start_day}, {end}] invalid for {self.days} days")
            if d.degrees <= 0 or d.degrees > 90:
                v.append(f"drift degrees must be in (0, 90], got {d.degrees}")
        return v

    def validate(self) -> "ScenarioSpec":
        v = self.violations()
        if v:
            raise ConfigError("invalid scenario: " + "; ".join(v))
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        scenario = dict(data.pop("scenario", {}))
        tox_raw = dict(data.pop("toxicity", {}))
        drift_raw = data.pop("drift", None)
        if data:
            raise ConfigError(f"unknown top-level scenario sections: {', '.join(sorted(data))}")
        try:
            shocks = [Shock(**s) for s in tox_raw.pop("shocks", [])]
            couplings = [Coupling(**c) for c in tox_raw.pop("couplings", [])]
        except TypeError as exc:
            raise ConfigError(f"invalid toxicity shocks/couplings: {exc}")
        base = tox_raw.pop("base", 0.3)
        if isinstance(base, list):
            base = tuple(float(b) for b in base)
        allowed_tox = {"ar", "noise_sd", "concentration"}
        bad = set(tox_raw) - allowed_tox
        if bad:
            raise ConfigError(f"unknown toxicity keys: {', '.join(sorted(bad))}")
        tox = ToxicityProcess(base=base, shocks=shocks, couplings=couplings, **tox_raw)
        drift = None
        if drift_raw is not None:
            try:
                drift = DriftSpec(**dict(drift_raw))
            except TypeError as exc:
                raise ConfigError(f"invalid drift section: {exc}")
        allowed = {f.name for f in cls.__dataclass_fields__.values()} - {"toxicity", "drift"}
        bad = set(scenario) - allowed
        if bad:
            raise ConfigError(f"unknown scenario keys: {', '.join(sorted(bad))}")
        try:
            spec = cls(**scenario, toxicity=tox, drift=drift)
        except TypeError as exc:
            raise ConfigError(f"invalid scenario: {exc}")
        return spec.validate()

    @classmethod
    def from_toml(cls, path) -> "ScenarioSpec":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse scenario file {path}: {exc}")
        return cls.from_dict(data)

    def as_dict(self) -> dict:
        out = asdict(self)
        if isinstance(out["toxicity"]["base"], tuple):
            out["toxicity"]["base"] = list(out["toxicity"]["base"])
        return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    user_names: list[str]
    user_cluster: np.ndarray
    influencer_names: list[str]
    influencer_cluster: np.ndarray
    toxicity_means: np.ndarray  # (days, K)
    drift_weights: np.ndarray | None  # own-pool weight per day for the drifted cluster
    marker_term: str


@dataclass
class GeneratedScenario:
    spec: ScenarioSpec
    store: EventStore
    scores: dict[str, float]
    terms: list[str]
    truth: GroundTruth

    def write(self, out_dir: str) -> dict[str, str]:
        """Write events.csv / toxicity.csv / terms.txt / truth.json.
        Byte-identical for identical (spec, seed)."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "events": os.path.join(out_dir, "events.csv"),
            "toxicity": os.path.join(out_dir, "toxicity.csv"),
            "terms": os.path.join(out_dir, "terms.txt"),
            "truth": os.path.join(out_dir, "truth.json"),
        }
        store = self.store
        with open(paths["events"], "w", encoding="utf-8", newline="") as fh:
            fh.write("timestamp,retweeter,influencer,post,hashtags\n")
            chunk = 200_000
            n = store.n_events
            users = store.users
            infl = store.influencers
            posts = store.posts
            tags = store.tags
            offs = store.tag_offsets
            tag_ids = store.tag_ids
            for lo in range(0, n, chunk):
                hi = min(lo + chunk, n)
                rows = []
                for i in range(lo, hi):
                    hs = ";".join(tags[t] for t in tag_ids[offs[i] : offs[i + 1]])
                    rows.append(
                        f"{store.ts[i]},{users[store.retweeter[i]]},{infl[store.influencer[i]]},"
                        f"{posts[store.post[i]]},{hs}"
                    )
                fh.write("\n".join(rows))
                fh.write("\n")
        with open(paths["toxicity"], "w", encoding="utf-8", newline="") as fh:
            fh.write("post,score\n")
            for post in sorted(self.scores):
                fh.write(f"{post},{'%.17g' % self.scores[post]}\n")
        with open(paths["terms"], "w", encoding="utf-8") as fh:
            for term in self.terms:
                fh.write(term + "\n")
        truth = {
            "labels": {name: int(c) for name, c in zip(self.truth.user_names, self.truth.user_cluster)},
            "influencer_clusters": {
                name: int(c) for name, c in zip(self.truth.influencer_names, self.truth.influencer_cluster)
            },
            "toxicity_means": [[float(x) for x in row] for row in self.truth.toxicity_means],
            "drift_weights": None
            if self.truth.drift_weights is None
            else [float(x) for x in self.truth.drift_weights],
            "couplings": [asdict(c) for c in self.spec.toxicity.couplings],
            "marker_term": self.truth.marker_term,
            "spec": self.spec.as_dict(),
        }
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            json.dump(truth, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return paths

    def labels_for(self, users: list[str]) -> np.ndarray:
        """Planted labels aligned to an arbitrary user-id ordering."""
        lookup = {name: int(c) for name, c in zip(self.truth.user_names, self.truth.user_cluster)}
        return np.array([lookup[u] for u in users], dtype=np.int64)


def _toxicity_means(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    k = spec.clusters
    tox = spec.toxicity
    base = tox.base_vector(k)
    eps = rng.normal(0.0, tox.noise_sd, size=(spec.days, k)) if tox.noise_sd > 0 else np.zeros((spec.days, k))
    shocks = np.zeros((spec.days, k))
    for s in tox.shocks:
        shocks[s.day, s.cluster] += s.size
    dev = np.zeros((spec.days, k))
    for d in range(spec.days):
        prev = dev[d - 1] if d > 0 else np.zeros(k)
        dev[d] = tox.ar * prev + shocks[d] + eps[d]
        for c in tox.couplings:
            if d - c.lag >= 0:
                dev[d, c.target] += c.coef * dev[d - c.lag, c.source]
    return np.clip(base[None, :] + dev, 0.02, 0.98)


def _drift_weights(spec: ScenarioSpec) -> np.ndarray | None:
    if spec.drift is None:
        return None
    d = spec.drift
    end = d.end_day if d.end_day is not None else spec.days - 1
    days = np.arange(spec.days, dtype=np.float64)
    frac = np.clip((days - d.start_day) / max(end - d.start_day, 1), 0.0, 1.0)
    theta = np.radians(d.degrees) * frac
    return np.sin(theta) ** 2


def generate(spec: ScenarioSpec) -> GeneratedScenario:
    """Generate one scenario deterministically from its seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.clusters
    ppd = spec.posts_per_influencer_day
    tpc = spec.tags_per_cluster
    n_users = spec.n_users
    days = spec.days

    sizes = np.asarray(spec.sizes, dtype=np.int64)
    user_cluster = np.repeat(np.arange(k, dtype=np.int32), sizes)
    user_names = [f"u{c}_{i:05d}" for c in range(k) for i in range(int(sizes[c]))]
    psizes = np.asarray(spec.pools, dtype=np.int64)
    pool_base = np.concatenate(([0], np.cumsum(psizes[:-1])))
    infl_cluster = np.repeat(np.arange(k, dtype=np.int32), psizes)
    infl_names = [f"i{c}_{j:03d}" for c in range(k) for j in range(int(psizes[c]))]
    tag_names = [f"c{c}tag{t:02d}" for c in range(k) for t in range(tpc)]
    marker_id = len(tag_names)
    tag_names.append(spec.marker_term)

    max_pool = int(psizes.max())
    uniform_pools = bool(np.all(psizes == max_pool))
    log_ranks = np.log(np.arange(1, max_pool + 1, dtype=np.float64))

    means = _toxicity_means(spec, rng)
    drift_w = _drift_weights(spec)
    casual = rng.standard_normal(n_users) * spec.casualness_sd
    burst_z = rng.standard_normal((days, k))
    if spec.burst_persistence > 0.0:
        # AR(1) news cycles with unit marginal variance: stories run for
        # 1/(1-phi) days instead of flaring for one
        phi = spec.burst_persistence
        innov = burst_z * math.sqrt(1.0 - phi**2)
        for d in range(1, days):
            burst_z[d] = phi * burst_z[d - 1] + innov[d]
    if k > 1:
        spread = 0.5 - np.arange(k) / (k - 1)
        cluster_rate = spec.events_per_user_day * (1.0 + spec.rate_skew * spread)
        pool_exponent = spec.zipf_exponent * (1.0 + spec.zipf_skew * spread)
        response = spec.burst_sd * (1.0 + spec.burst_skew * spread)
    else:
        cluster_rate = np.full(1, spec.events_per_user_day)
        pool_exponent = np.full(1, spec.zipf_exponent)
        response = np.full(1, spec.burst_sd)
    # one-sided surge multiplier per (day, cluster): quiet days run at the
    # baseline rate, news days lift it; attention spikes up, not down
    burst_mult = np.exp(response[None, :] * np.maximum(burst_z, 0.0))
    if spec.cycle_amp > 0.0:
        phase = spec.cycle_phase + 2.0 * np.pi * np.arange(k) / k
        day_angle = 2.0 * np.pi * np.arange(days)[:, None] / spec.cycle_period
        burst_mult = burst_mult * (1.0 + spec.cycle_amp * np.sin(day_angle + phase[None, :]))
    start_epoch = spec.start_day * SECONDS_PER_DAY

    ts_parts = []
    rt_parts = []
    in_parts = []
    po_parts = []
    tag_parts = []
    marker_parts = []

    all_users = np.arange(n_users, dtype=np.int64)
    user_rate = cluster_rate[user_cluster]
    for d in range(days):
        counts = rng.poisson(user_rate * burst_mult[d, user_cluster])
        total = int(counts.sum())
        if total == 0:
            continue
        retweeter = np.repeat(all_users, counts)
        rcluster = user_cluster[retweeter].astype(np.int64)

        in_draw = rng.random(total)
        other_draw = rng.integers(0, max(k - 1, 1), total)
        drift_draw = rng.random(total)
        rank_draw = rng.random(total)
        post_draw = rng.integers(0, ppd, total)
        sec_draw = rng.integers(0, SECONDS_PER_DAY, total)
        base_tag_draw = rng.integers(0, tpc, total)
        marker_draw = rng.random(total)

        stay = in_draw < spec.p_in
        other = other_draw + (other_draw >= rcluster)
        pool = np.where(stay, rcluster, other)
        if drift_w is not None:
            redirect = stay & (rcluster == spec.drift.cluster) & (drift_draw >= drift_w[d])
            pool = np.where(redirect, spec.drift.source, pool)
        # per-event Zipf exponent: pool base scaled by its news cycle, plus
        # reader casualness; multiplicative coupling keeps dialogue-like
        # (low-exponent) pools from turning celebrity-like on surge days
        expo = pool_exponent[pool] * (1.0 + spec.zipf_gain * burst_z[d, pool])
        expo += casual[retweeter]
        np.clip(expo, 0.05, 8.0, out=expo)
        weights = np.exp(-expo[:, None] * log_ranks[None, :])
        if not uniform_pools:
            weights *= np.arange(max_pool)[None, :] < psizes[pool][:, None]
        cdf = np.cumsum(weights, axis=1)
        cdf /= cdf[:, -1:]
        rank = (cdf <= rank_draw[:, None]).sum(axis=1)
        rank = np.minimum(rank, psizes[pool] - 1)
        influencer = pool_base[pool] + rank
        post = (influencer * days + d) * ppd + post_draw

        ts_parts.append(start_epoch + np.int64(d) * SECONDS_PER_DAY + sec_draw.astype(np.int64))
        rt_parts.append(retweeter.astype(np.int32))
        in_parts.append(influencer.astype(np.int32))
        po_parts.append(post.astype(np.int32))
        tag_parts.append((rcluster * tpc + base_tag_draw).astype(np.int32))
        marker_parts.append(marker_draw < spec.term_rate)

    if not ts_parts:
        raise ConfigError("scenario generated no events; raise events_per_user_day")
    ts = np.concatenate(ts_parts)
    retweeter = np.concatenate(rt_parts)
    influencer = np.concatenate(in_parts)
    post = np.concatenate(po_parts)
    base_tag = np.concatenate(tag_parts)
    marker = np.concatenate(marker_parts)

    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    retweeter = retweeter[order]
    influencer = influencer[order]
    post = post[order]
    base_tag = base_tag[order]
    marker = marker[order]

    n = ts.shape[0]
    tag_counts = 1 + marker.astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(tag_counts)))
    flat = np.empty(int(offsets[-1]), dtype=np.int32)
    starts = offsets[:-1]
    flat[starts] = base_tag
    flat[starts[marker] + 1] = marker_id

    # full post grid: scores drawn for every (influencer, day, slot) cell so
    # the stream draws above never shift the score stream
    n_infl = spec.n_influencers
    grid = n_infl * days * ppd
    g = np.arange(grid, dtype=np.int64)
    g_infl = g // (days * ppd)
    g_day = (g // ppd) % days
    g_mean = means[g_day, infl_cluster[g_infl]]
    conc = spec.toxicity.concentration
    g_scores = rng.beta(g_mean * conc, (1.0 - g_mean) * conc)
    post_names = [
        f"p{i:04d}_{di:04d}_{j}" for i in range(n_infl) for di in range(days) for j in range(ppd)
    ]

    store = EventStore(
        ts,
        retweeter,
        influencer,
        post,
        flat,
        offsets,
        user_names,
        infl_names,
        post_names,
        tag_names,
        summary=ParseSummary(rows_total=n, rows_parsed=n),
    )
    used_posts = np.unique(post)
    scores = {post_names[p]: float(g_scores[p]) for p in used_posts}
    store = store.subset(np.ones(n, dtype=bool), reintern=True)

    truth = GroundTruth(
        user_names=user_names,
        user_cluster=user_cluster,
        influencer_names=infl_names,
        influencer_cluster=infl_cluster,
        toxicity_means=means,
        drift_weights=drift_w,
        marker_term=spec.marker_term,
    )
    logger.info("generated %d events over %d days (%d users, %d influencers)", n, days, n_users, spec.n_influencers)
    return GeneratedScenario(spec=spec, store=store, scores=scores, terms=[spec.marker_term], truth=truth)


# ---------------------------------------------------------------------------
# evaluation helpers (oracles for tests)
# ---------------------------------------------------------------------------


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected partition agreement; labels compared as given (an
    outlier label like -1 acts as one more group)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ConfigError("label arrays must align")
    n = a.shape[0]
    if n == 0:
        raise ConfigError("empty labelings")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n_a = ai.max() + 1
    n_b = bi.max() + 1
    cont = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(cont, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total else 0.0
    top = sum_ij - expected
    bottom = 0.5 * (sum_a + sum_b) - expected
    if bottom == 0.0:
        return 1.0
    return float(top / bottom)


def sphere_blobs(
    n_per: int,
    centers: int = 2,
    dim: int = 4,
    spread: float = 0.1,
    separation_deg: float = 90.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Tight unit-sphere blobs at the requested pairwise angular separation
    (centers live in coordinate planes; needs dim >= centers for 90 degrees)."""
    if centers > dim:
        raise ConfigError(f"need dim >= centers for orthogonal placement, got {centers} > {dim}")
    rng = np.random.default_rng(seed)
    theta = math.radians(separation_deg)
    axes = np.eye(dim)
    mus = [axes[0]]
    for c in range(1, centers):
        mus.append(math.cos(theta) * axes[0] + math.sin(theta) * axes[c])
    points = []
    labels = []
    for c in range(centers):
        raw = mus[c][None, :] + rng.normal(0.0, spread, size=(n_per, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        points.append(raw)
        labels.append(np.full(n_per, c, dtype=np.int64))
    return np.vstack(points), np.concatenate(labels)


def uniform_sphere(n: int, dim: int = 4, seed: int = 0) -> np.ndarray:
    """Uniform directions on the unit sphere."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)
