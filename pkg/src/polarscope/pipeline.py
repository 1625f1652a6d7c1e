"""Staged run orchestration: ingest -> embed -> cluster -> series -> stats.

Each stage writes its artifacts under its own subdirectory of the run
directory and records a manifest keyed by a configuration hash.  The hashes
chain (a stage's hash folds in its upstream stage's hash), so changing any
parameter invalidates exactly the stages that consume it; unchanged stages
are served from cache.  A JSON run report is emitted for every invocation,
success or failure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, PolarscopeError
from . import ingest as ing
from . import spectral as spec
from . import clustering as clu
from . import dynamics as dyn
from . import stats as sts

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "embed", "cluster", "series", "stats")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Effective configuration of one pipeline run.

    Defaults are the production setup: trailing 7-day windows anchored at
    every calendar day, 30 retained window dimensions, 4 sample-space
    components, activity threshold tau = 10, a 10-retweet floor for
    toxicity eligibility, a 30-observation rolling detrend, lag scans to
    155 with the joint record clipped to its first 500 observations, and a
    family-wise alpha of 0.05.
    """

    events: str | None = None
    toxicity: str | None = None
    terms: str | None = None
    out_dir: str = "run"
    start_day: int | None = None
    end_day: int | None = None
    malformed_tolerance: float = 0.01
    min_matches: int = 7
    window_days: int = 7
    k_window: int = 30
    k_sample: int = 4
    tau: float = 10.0
    aggregation: str = "sum"
    min_cluster_size: int | None = None
    min_samples: int = 10
    top_hashtags: int = 10
    min_retweets: int = 10
    smoothing_sigma: float = 3.0
    detrend_window: int = 30
    day_of_week: bool = False
    max_lag: int = 155
    clip: int | None = 500
    alpha: float = 0.05
    seed: int = 0
    svd_tol: float = 1e-8
    svd_max_iter: int = 1000

    def as_dict(self) -> dict:
        return asdict(self)


#: Documented defaults (paths and the output directory excluded).
DEFAULTS = {k: v for k, v in asdict(RunConfig()).items() if k not in ("events", "toxicity", "terms", "out_dir")}

#: Named parameter bundles for the two production corpus shapes.
PRESETS: dict[str, dict] = {
    "covid": {"min_matches": 7, "max_lag": 155, "clip": 500},
    "ukraine": {"min_matches": 28, "max_lag": 85, "clip": None},
}


def validate_config(config: RunConfig) -> list[str]:
    """Return every violation at once (empty list means valid)."""
    v: list[str] = []
    c = config
    if c.window_days < 1:
        v.append(f"window_days must be >= 1, got {c.window_days}")
    if c.k_window < 1:
        v.append(f"k_window must be >= 1, got {c.k_window}")
    if c.k_sample < 1:
        v.append(f"k_sample must be >= 1, got {c.k_sample}")
    if c.k_sample >= 1 and c.k_window >= 1 and c.k_sample > c.k_window:
        v.append(f"k_sample ({c.k_sample}) cannot exceed k_window ({c.k_window})")
    if c.tau <= 0:
        v.append(f"tau must be positive, got {c.tau}")
    if c.aggregation not in ("sum", "mean"):
        v.append(f"aggregation must be 'sum' or 'mean', got {c.aggregation!r}")
    if c.min_cluster_size is not None and c.min_cluster_size < 2:
        v.append(f"min_cluster_size must be >= 2, got {c.min_cluster_size}")
    if c.min_samples < 1:
        v.append(f"min_samples must be >= 1, got {c.min_samples}")
    if c.top_hashtags < 1:
        v.append(f"top_hashtags must be >= 1, got {c.top_hashtags}")
    if c.min_retweets < 1:
        v.append(f"min_retweets must be >= 1, got {c.min_retweets}")
    if c.min_matches < 1:
        v.append(f"min_matches must be >= 1, got {c.min_matches}")
    if c.smoothing_sigma <= 0:
        v.append(f"smoothing_sigma must be positive, got {c.smoothing_sigma}")
    if c.detrend_window < 3:
        v.append(f"detrend_window must be >= 3, got {c.detrend_window}")
    if c.max_lag < 1:
        v.append(f"max_lag must be >= 1, got {c.max_lag}")
    if c.clip is not None and c.clip < 1:
        v.append(f"clip must be >= 1 or omitted, got {c.clip}")
    if not 0.0 < c.alpha < 1.0:
        v.append(f"alpha must be in (0, 1), got {c.alpha}")
    if not 0.0 <= c.malformed_tolerance <= 1.0:
        v.append(f"malformed_tolerance must be in [0, 1], got {c.malformed_tolerance}")
    if c.seed < 0:
        v.append(f"seed must be >= 0, got {c.seed}")
    if c.svd_tol <= 0:
        v.append(f"svd_tol must be positive, got {c.svd_tol}")
    if c.svd_max_iter < 1:
        v.append(f"svd_max_iter must be >= 1, got {c.svd_max_iter}")
    if c.start_day is not None and c.end_day is not None and c.start_day > c.end_day:
        v.append(f"start_day ({c.start_day}) must not exceed end_day ({c.end_day})")
    return v


def load_run_config(
    path: str | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Merge defaults < preset < config file < explicit overrides and
    validate; every violation is reported at once."""
    violations: list[str] = []
    merged = asdict(RunConfig())
    file_data: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                file_data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse config file {path}: {exc}")
        if preset is None:
            preset = file_data.pop("preset", None)
        else:
            file_data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            violations.append(f"unknown preset {preset!r} (choose from {', '.join(sorted(PRESETS))})")
        else:
            merged.update(PRESETS[preset])
    known = set(merged)
    for key, value in file_data.items():
        if key not in known:
            violations.append(f"unknown config key {key!r}")
        else:
            merged[key] = value
    for key, value in (overrides or {}).items():
        if key not in known:
            violations.append(f"unknown config override {key!r}")
        else:
            merged[key] = value
    if violations:
        exc = ConfigError("invalid configuration: " + "; ".join(violations))
        exc.violations = violations
        raise exc
    config = RunConfig(**merged)
    violations = validate_config(config)
    if violations:
        exc = ConfigError("invalid configuration: " + "; ".join(violations))
        exc.violations = violations
        raise exc
    return config


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------


def _digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_hashes(config: RunConfig) -> dict[str, str]:
    """Chained per-stage configuration hashes.  Input files enter by content
    digest, so editing a file in place invalidates its consumers too."""
    c = config
    events_d = file_digest(c.events) if c.events and os.path.exists(c.events) else c.events
    terms_d = file_digest(c.terms) if c.terms and os.path.exists(c.terms) else c.terms
    tox_d = file_digest(c.toxicity) if c.toxicity and os.path.exists(c.toxicity) else c.toxicity
    h: dict[str, str] = {}
    h["ingest"] = _digest_of(
        {
            "stage": "ingest",
            "version": 1,
            "events": events_d,
            "terms": terms_d,
            "start_day": c.start_day,
            "end_day": c.end_day,
            "malformed_tolerance": c.malformed_tolerance,
            "min_matches": c.min_matches,
        }
    )
    h["embed"] = _digest_of(
        {
            "stage": "embed",
            "upstream": h["ingest"],
            "window_days": c.window_days,
            "k_window": c.k_window,
            "seed": c.seed,
            "svd_tol": c.svd_tol,
            "svd_max_iter": c.svd_max_iter,
        }
    )
    h["cluster"] = _digest_of(
        {
            "stage": "cluster",
            "upstream": h["embed"],
            "k_sample": c.k_sample,
            "tau": c.tau,
            "aggregation": c.aggregation,
            "min_cluster_size": c.min_cluster_size,
            "min_samples": c.min_samples,
            "top_hashtags": c.top_hashtags,
        }
    )
    h["series"] = _digest_of(
        {
            "stage": "series",
            "upstream": h["cluster"],
            "toxicity": tox_d,
            "min_retweets": c.min_retweets,
            "smoothing_sigma": c.smoothing_sigma,
        }
    )
    h["stats"] = _digest_of(
        {
            "stage": "stats",
            "upstream": h["series"],
            "detrend_window": c.detrend_window,
            "day_of_week": c.day_of_week,
            "max_lag": c.max_lag,
            "clip": c.clip,
            "alpha": c.alpha,
        }
    )
    return h


# ---------------------------------------------------------------------------
# run report
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class RunReport:
    """Run log: per-stage status and timings, counts, flags, config echo.
    Written on success and on failure alike."""

    version: str = __version__
    success: bool = False
    started_at: str = ""
    finished_at: str = ""
    config: dict = field(default_factory=dict)
    config_hashes: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    error: dict | None = None

    def flag(self, stage: str, kind: str, detail: str) -> None:
        self.flags.append({"stage": stage, "kind": kind, "detail": detail})

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


class RunLock:
    """Exclusive ownership of a run directory via a pid lock file."""

    def __init__(self, out_dir: str) -> None:
        self.path = os.path.join(out_dir, "run.lock")
        self.acquired = False

    def __enter__(self) -> "RunLock":
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = None
            try:
                with open(self.path, "r", encoding="utf-8") as fh:
                    pid = int(fh.read().strip())
            except (OSError, ValueError):
                pid = None
            if pid is not None and _pid_alive(pid):
                raise ConfigError(
                    f"run directory is locked by live process {pid} ({self.path}); "
                    "one run owns its output directory exclusively"
                )
            logger.warning("replacing stale lock file %s", self.path)
            os.unlink(self.path)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc_info) -> None:
        if self.acquired and os.path.exists(self.path):
            os.unlink(self.path)
        self.acquired = False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunPaths:
    def __init__(self, out_dir: str) -> None:
        self.out_dir = out_dir
        self.report = os.path.join(out_dir, "report.json")

    def stage_dir(self, stage: str) -> str:
        return os.path.join(self.out_dir, stage)

    def manifest(self, stage: str) -> str:
        return os.path.join(self.out_dir, "stages", f"{stage}.json")

    def of(self, stage: str, name: str) -> str:
        return os.path.join(self.out_dir, stage, name)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Executes the stage chain over one run directory.

    Stages are computed lazily: a stage whose manifest matches the current
    configuration hash (and whose outputs exist) is reported as ``cached``
    and only loaded back from disk if a later stage needs its objects.
    """

    def __init__(self, config: RunConfig) -> None:
        violations = validate_config(config)
        if violations:
            exc = ConfigError("invalid configuration: " + "; ".join(violations))
            exc.violations = violations
            raise exc
        self.config = config
        self.paths = RunPaths(config.out_dir)
        self.report = RunReport(config=config.as_dict())
        # lazily populated objects
        self._store: ing.EventStore | None = None
        self._index: ing.UserIndex | None = None
        self._decomps: spec.DecompositionSet | None = None
        self._stack: spec.SampleStack | None = None
        self._space: spec.SampleSpace | None = None
        self._vectors: spec.UserVectors | None = None
        self._labels: np.ndarray | None = None
        self._n_clusters: int | None = None
        self._posts: ing.PostTable | None = None
        self._table: dyn.SeriesTable | None = None

    # -- public entry point --------------------------------------------------

    def run(self, upto: str = "stats") -> RunReport:
        if upto not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {upto!r}")
        if self.config.events is None:
            raise ConfigError("an events file is required (config key 'events')")
        self.report.started_at = _utc_now()
        self.report.config_hashes = stage_hashes(self.config)
        wanted = STAGE_ORDER[: STAGE_ORDER.index(upto) + 1]
        os.makedirs(self.paths.out_dir, exist_ok=True)
        os.makedirs(os.path.join(self.paths.out_dir, "stages"), exist_ok=True)
        try:
            with RunLock(self.paths.out_dir):
                for stage in wanted:
                    self._run_stage(stage)
            self.report.success = True
        except BaseException as exc:
            stage = getattr(exc, "_stage", None) or "setup"
            self.report.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
            raise
        finally:
            self.report.finished_at = _utc_now()
            try:
                self.report.write(self.paths.report)
            except OSError:  # pragma: no cover - report writing best effort
                logger.exception("could not write run report")
        return self.report

    # -- stage plumbing -------------------------------------------------------

    def _run_stage(self, stage: str) -> None:
        expected = self.report.config_hashes[stage]
        if self._cache_valid(stage, expected):
            manifest = self._read_manifest(stage)
            self.report.stages[stage] = {
                "status": "cached",
                "seconds": 0.0,
                "counts": manifest.get("counts", {}),
            }
            for f in manifest.get("flags", []):
                self.report.flags.append(f)
            logger.info("stage %s: cached", stage)
            return
        t0 = time.perf_counter()
        stage_dir = self.paths.stage_dir(stage)
        shutil.rmtree(stage_dir, ignore_errors=True)
        os.makedirs(stage_dir, exist_ok=True)
        if os.path.exists(self.paths.manifest(stage)):
            os.unlink(self.paths.manifest(stage))
        flags_before = len(self.report.flags)
        try:
            counts, outputs = getattr(self, f"_stage_{stage}")()
        except BaseException as exc:
            exc._stage = stage
            raise
        seconds = time.perf_counter() - t0
        new_flags = self.report.flags[flags_before:]
        manifest = {
            "hash": expected,
            "completed_at": _utc_now(),
            "outputs": outputs,
            "counts": _jsonable(counts),
            "flags": _jsonable(new_flags),
        }
        with open(self.paths.manifest(stage), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        self.report.stages[stage] = {"status": "ok", "seconds": seconds, "counts": _jsonable(counts)}
        logger.info("stage %s: done in %.2fs", stage, seconds)

    def _cache_valid(self, stage: str, expected: str) -> bool:
        manifest = self._read_manifest(stage)
        if manifest is None or manifest.get("hash") != expected:
            return False
        return all(os.path.exists(self.paths.of(stage, name)) for name in manifest.get("outputs", []))

    def _read_manifest(self, stage: str) -> dict | None:
        path = self.paths.manifest(stage)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except (OSError, json.JSONDecodeError):
            return None

    # -- ingest ---------------------------------------------------------------

    def _stage_ingest(self) -> tuple[dict, list[str]]:
        c = self.config
        raw = ing.load_events(
            c.events,
            start_day=c.start_day,
            end_day=c.end_day,
            malformed_tolerance=c.malformed_tolerance,
        )
        if c.terms is not None:
            terms = ing.load_terms(c.terms)
            index, store = ing.filter_users(raw, terms, c.min_matches)
        else:
            logger.warning("no terms file configured; retaining every user")
            store = raw.subset(np.ones(raw.n_events, dtype=bool), reintern=True)
            event_counts = np.bincount(store.retweeter, minlength=len(store.users)).astype(np.int64)
            index = ing.UserIndex(store.users, event_counts, np.zeros(len(store.users), dtype=np.int64))
        self._store, self._index = store, index
        np.savez(
            self.paths.of("ingest", "store.npz"),
            ts=store.ts,
            retweeter=store.retweeter,
            influencer=store.influencer,
            post=store.post,
            tag_ids=store.tag_ids,
            tag_offsets=store.tag_offsets,
            event_counts=index.event_counts,
            match_counts=index.match_counts,
        )
        with open(self.paths.of("ingest", "ingest.json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "users": store.users,
                    "influencers": store.influencers,
                    "posts": store.posts,
                    "tags": store.tags,
                    "summary": store.summary.as_dict(),
                },
                fh,
                sort_keys=True,
            )
            fh.write("\n")
        s = store.summary
        counts = {
            "rows_total": s.rows_total,
            "rows_parsed": s.rows_parsed,
            "rows_malformed": s.rows_malformed,
            "self_retweets_dropped": s.self_retweets_dropped,
            "out_of_range_dropped": s.out_of_range_dropped,
            "events": store.n_events,
            "users": len(store.users),
            "influencers": len(store.influencers),
            "posts": len(store.posts),
            "span_days": store.span_days,
        }
        return counts, ["store.npz", "ingest.json"]

    def _ensure_store(self) -> tuple[ing.EventStore, ing.UserIndex]:
        if self._store is None:
            arrays = np.load(self.paths.of("ingest", "store.npz"))
            with open(self.paths.of("ingest", "ingest.json"), "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            summary = ing.ParseSummary(
                rows_total=meta["summary"]["rows_total"],
                rows_parsed=meta["summary"]["rows_parsed"],
                rows_malformed=meta["summary"]["rows_malformed"],
                self_retweets_dropped=meta["summary"]["self_retweets_dropped"],
                out_of_range_dropped=meta["summary"]["out_of_range_dropped"],
                offenders=[tuple(o) for o in meta["summary"]["offenders"]],
            )
            self._store = ing.EventStore(
                arrays["ts"],
                arrays["retweeter"],
                arrays["influencer"],
                arrays["post"],
                arrays["tag_ids"],
                arrays["tag_offsets"],
                meta["users"],
                meta["influencers"],
                meta["posts"],
                meta["tags"],
                summary=summary,
            )
            self._index = ing.UserIndex(meta["users"], arrays["event_counts"], arrays["match_counts"])
        return self._store, self._index

    # -- embed ----------------------------------------------------------------

    def _stage_embed(self) -> tuple[dict, list[str]]:
        c = self.config
        store, _ = self._ensure_store()
        windows = ing.build_windows(store, c.window_days)
        if windows.degenerate:
            self.report.flag("embed", "degenerate_span", "sample span shorter than the window length")
        decomps = spec.decompose_windows(
            store, windows, c.k_window, tol=c.svd_tol, max_iter=c.svd_max_iter, seed=c.seed
        )
        self._decomps = decomps
        for anchor, reason in decomps.skipped:
            self.report.flag("embed", "degenerate_window", f"anchor day {anchor}: {reason}")
        padded = sum(1 for d in decomps.windows if d.padded)
        if padded:
            self.report.flag("embed", "padded_window", f"{padded} windows retained fewer than k_window dimensions")
        digest = bytes.fromhex(self.report.config_hashes["embed"])
        spec.save_decompositions(self.paths.of("embed", "decomps.bin"), decomps, digest)
        counts = {
            "windows": len(windows),
            "decomposed": len(decomps.windows),
            "skipped": len(decomps.skipped),
            "padded": padded,
            "sample_rows": int(sum(d.n_users for d in decomps.windows)),
        }
        return counts, ["decomps.bin"]

    def _ensure_decomps(self) -> spec.DecompositionSet:
        if self._decomps is None:
            digest = bytes.fromhex(self.report.config_hashes["embed"])
            self._decomps = spec.load_decompositions(self.paths.of("embed", "decomps.bin"), digest)
        return self._decomps

    def _ensure_embedding(self) -> tuple[spec.SampleStack, spec.SampleSpace]:
        if self._stack is None or self._space is None:
            decomps = self._ensure_decomps()
            self._stack = spec.assemble_sample_matrix(decomps)
            self._space = spec.sample_pca(self._stack, self.config.k_sample)
        return self._stack, self._space

    # -- cluster ----------------------------------------------------------------

    def _stage_cluster(self) -> tuple[dict, list[str]]:
        c = self.config
        store, index = self._ensure_store()
        stack, space = self._ensure_embedding()
        if stack.zero_sd.any():
            self.report.flag(
                "cluster", "constant_column", f"{int(stack.zero_sd.sum())} constant sample columns left unscaled"
            )
        if space.k_sample < c.k_sample:
            self.report.flag(
                "cluster", "rank_reduced", f"sample rank {space.k_sample} below requested k_sample {c.k_sample}"
            )
        vectors = spec.user_vectors(stack, space, len(store.users), c.aggregation)
        self._vectors = vectors
        model = clu.fit_clusters(vectors, c.tau, c.min_cluster_size, c.min_samples)
        if model.fallback:
            self.report.flag("cluster", "root_fallback", "no cluster beat the root; whole fit kept as one cluster")
        assignment = clu.predict_clusters(model, vectors)
        self._labels = assignment.labels
        self._n_clusters = model.n_clusters
        summary = clu.cluster_summary(assignment, store, index)
        log_odds = sts.hashtag_log_odds(summary, top_n=c.top_hashtags)

        np.savez(
            self.paths.of("cluster", "model.npz"),
            labels=assignment.labels,
            provenance=assignment.provenance,
            raw=vectors.raw,
            norms=vectors.norms,
            window_counts=vectors.window_counts,
            fit_rows=model.fit_rows,
            fit_labels=model.fit_labels,
            exemplar_vectors=model.exemplar_vectors,
            exemplar_clusters=model.exemplar_clusters,
            admission_radius=model.admission_radius,
            stability=model.stability,
            rotation=space.rotation,
            singular_values=space.singular_values,
            explained_variance_ratio=space.explained_variance_ratio,
        )
        with open(self.paths.of("cluster", "assignments.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("user,cluster,provenance\n")
            for user, label, prov in assignment.as_rows(store.users):
                fh.write(f"{user},{label},{prov}\n")
        with open(self.paths.of("cluster", "hashtags.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("cluster,tag,log_odds,users_in,users_out,prevalence_in,prevalence_out\n")
            for e in log_odds:
                fh.write(
                    f"{e.cluster},{e.tag},{dyn.format_value(e.log_odds)},{e.users_in},{e.users_out},"
                    f"{dyn.format_value(e.prevalence_in)},{dyn.format_value(e.prevalence_out)}\n"
                )
        with open(self.paths.of("cluster", "cluster.json"), "w", encoding="utf-8") as fh:
            json.dump(
                _jsonable(
                    {
                        "n_clusters": model.n_clusters,
                        "sizes": summary.sizes,
                        "n_outliers": summary.n_outliers,
                        "event_counts": summary.event_counts,
                        "outlier_event_count": summary.outlier_event_count,
                        "top_users": summary.top_users,
                        "tau": c.tau,
                        "min_cluster_size": model.min_cluster_size,
                        "min_samples": model.min_samples,
                        "fallback": model.fallback,
                        "excluded_users": vectors.excluded,
                        "k_sample_effective": space.k_sample,
                    }
                ),
                fh,
                sort_keys=True,
                indent=1,
            )
            fh.write("\n")
        counts = {
            "fit_rows": int(model.fit_rows.shape[0]),
            "n_clusters": model.n_clusters,
            "sizes": summary.sizes,
            "outliers": summary.n_outliers,
            "excluded_users": vectors.excluded,
        }
        return counts, ["model.npz", "assignments.csv", "hashtags.csv", "cluster.json"]

    def _ensure_cluster(self) -> tuple[np.ndarray, int]:
        if self._labels is None or self._n_clusters is None:
            arrays = np.load(self.paths.of("cluster", "model.npz"))
            with open(self.paths.of("cluster", "cluster.json"), "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            self._labels = arrays["labels"]
            self._n_clusters = int(meta["n_clusters"])
        return self._labels, self._n_clusters

    # -- series -----------------------------------------------------------------

    def _ensure_posts(self) -> ing.PostTable:
        if self._posts is None:
            if self.config.toxicity is None:
                raise DataError(
                    "join_toxicity requires a toxicity score table, but none is configured; "
                    "set the 'toxicity' path to run the series/stats stages"
                )
            store, _ = self._ensure_store()
            self._posts = ing.join_toxicity(store, self.config.toxicity, self.config.min_retweets)
        return self._posts

    def _stage_series(self) -> tuple[dict, list[str]]:
        c = self.config
        store, _ = self._ensure_store()
        posts = self._ensure_posts()
        stack, space = self._ensure_embedding()
        labels, n_clusters = self._ensure_cluster()
        windows = ing.build_windows(store, c.window_days)
        table = dyn.build_series(
            stack, space, labels, windows.anchors, store, posts, c.window_days, n_clusters, c.smoothing_sigma
        )
        self._table = table
        files = dyn.write_series(table, self.paths.stage_dir("series"))
        np.savez(
            self.paths.of("series", "series.npz"),
            anchors=table.anchors,
            toxicity=table.toxicity,
            toxicity_mask=table.toxicity_mask,
            toxicity_smooth=table.toxicity_smooth,
            divergence=table.divergence,
            divergence_mask=table.divergence_mask,
            divergence_smooth=table.divergence_smooth,
            joint=table.joint,
            joint_mask=table.joint_mask,
            joint_smooth=table.joint_smooth,
            window_present=table.window_present,
        )
        with open(self.paths.of("series", "series.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable({"coverage": posts.coverage.as_dict(), "n_days": table.anchors.shape[0]}), fh, sort_keys=True, indent=1)
            fh.write("\n")
        if posts.coverage.eligible and posts.coverage.fraction < 1.0:
            self.report.flag(
                "series",
                "toxicity_coverage",
                f"{posts.coverage.scored} of {posts.coverage.eligible} eligible posts scored",
            )
        gaps_t = int((~table.toxicity_mask).sum())
        if n_clusters > 1:
            iu = np.triu_indices(n_clusters, 1)
            gaps_d = int((~table.divergence_mask[:, iu[0], iu[1]]).sum())
        else:
            gaps_d = 0
        counts = {
            "days": int(table.anchors.shape[0]),
            "clusters": n_clusters,
            "toxicity_gaps": gaps_t,
            "divergence_gaps": gaps_d,
        }
        outputs = [os.path.basename(f) for f in files] + ["series.npz", "series.json"]
        return counts, outputs

    def _ensure_series(self) -> dyn.SeriesTable:
        if self._table is None:
            arrays = np.load(self.paths.of("series", "series.npz"))
            self._table = dyn.SeriesTable(
                anchors=arrays["anchors"],
                n_clusters=int(arrays["toxicity"].shape[1]),
                toxicity=arrays["toxicity"],
                toxicity_mask=arrays["toxicity_mask"],
                toxicity_smooth=arrays["toxicity_smooth"],
                divergence=arrays["divergence"],
                divergence_mask=arrays["divergence_mask"],
                divergence_smooth=arrays["divergence_smooth"],
                joint=arrays["joint"],
                joint_mask=arrays["joint_mask"],
                joint_smooth=arrays["joint_smooth"],
                window_present=arrays["window_present"],
            )
        return self._table

    # -- stats ------------------------------------------------------------------

    def _stage_stats(self) -> tuple[dict, list[str]]:
        c = self.config
        table = self._ensure_series()
        store, _ = self._ensure_store()
        posts = self._ensure_posts()
        labels, n_clusters = self._ensure_cluster()
        suite = sts.run_granger_suite(
            table,
            detrend_window=c.detrend_window,
            day_of_week=c.day_of_week,
            max_lag=c.max_lag,
            clip=c.clip,
            alpha=c.alpha,
        )

        numeric_errors = 0
        benign_errors = 0
        significant = 0
        for pair in suite.pairs:
            for scan in pair.scans.values():
                for row in scan.rows:
                    if row.error is None:
                        if suite.significant(row.p_value):
                            significant += 1
                    elif row.error.startswith(("NumericError", "RankDeficientError")):
                        numeric_errors += 1
                    else:
                        benign_errors += 1
        if numeric_errors:
            self.report.flag("stats", "numeric", f"{numeric_errors} lag tests failed numerically")
        if suite.m == 0:
            self.report.flag("stats", "untestable", "no Granger test could be executed")

        # retweet-level toxicity rank tests between clusters
        ev_label = labels[store.retweeter]
        ev_scored = posts.scored_eligible[store.post] & (ev_label >= 0)
        scores_by_cluster = [
            posts.scores[store.post[ev_scored & (ev_label == k)]] for k in range(n_clusters)
        ]
        rank_report = None
        try:
            rank_report = sts.toxicity_rank_tests(scores_by_cluster)
        except DataError as exc:
            self.report.flag("stats", "untestable", f"rank tests skipped: {exc}")

        with open(self.paths.of("stats", "granger.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("c1,c2,kind,direction,lag,f_stat,p_value,n_obs,error\n")
            for pair in suite.pairs:
                for kind in ("toxicity", "structure"):
                    for row in pair.scans[kind].rows:
                        f_s = "" if row.f_stat is None else dyn.format_value(row.f_stat)
                        p_s = "" if row.p_value is None else dyn.format_value(row.p_value)
                        n_s = "" if row.nobs is None else str(row.nobs)
                        e_s = (row.error or "").replace(",", ";")
                        fh.write(f"{pair.c1},{pair.c2},{kind},{row.direction},{row.lag},{f_s},{p_s},{n_s},{e_s}\n")

        payload = {
            "alpha": suite.alpha,
            "m": suite.m,
            "threshold": suite.threshold,
            "detrend_window": suite.detrend_window,
            "day_of_week": c.day_of_week,
            "max_lag": suite.max_lag,
            "clip": suite.clip,
            "pairs": [
                {
                    "c1": pair.c1,
                    "c2": pair.c2,
                    "tests": {
                        kind: {
                            "n_joint": scan.n_joint,
                            "n_executed": scan.n_executed,
                            "best": {
                                direction: {
                                    "lag": row.lag,
                                    "f_stat": row.f_stat,
                                    "p_value": row.p_value,
                                    "n_obs": row.nobs,
                                    "significant": suite.significant(row.p_value),
                                }
                                for direction, row in scan.best.items()
                            },
                        }
                        for kind, scan in pair.scans.items()
                    },
                }
                for pair in suite.pairs
            ],
            "rank_tests": None
            if rank_report is None
            else {
                "order": rank_report.order,
                "comparisons": [
                    {
                        "higher": hi,
                        "lower": lo,
                        "u_stat": comp.u_stat,
                        "auc": comp.auc,
                        "p_value": comp.p_value,
                        "method": comp.method,
                        "n_higher": comp.n1,
                        "n_lower": comp.n2,
                    }
                    for hi, lo, comp in rank_report.comparisons
                ],
            },
        }
        with open(self.paths.of("stats", "stats.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(payload), fh, sort_keys=True, indent=1)
            fh.write("\n")
        counts = {
            "m": suite.m,
            "significant_rows": significant,
            "numeric_errors": numeric_errors,
            "skipped_lags": benign_errors,
            "threshold": suite.threshold,
        }
        return counts, ["granger.csv", "stats.json"]


def run_pipeline(config: RunConfig, upto: str = "stats") -> RunReport:
    """Validate, lock the run directory, execute stages through ``upto``."""
    return Pipeline(config).run(upto)


def load_report(out_dir: str) -> dict:
    path = os.path.join(out_dir, "report.json")
    if not os.path.exists(path):
        raise DataError(f"no run report found under {out_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def format_report(report: dict) -> str:
    """Human-readable run summary (one line per stage, then flags)."""
    lines = []
    lines.append(f"polarscope {report.get('version', '?')} run report")
    lines.append(f"status: {'ok' if report.get('success') else 'FAILED'}")
    lines.append(f"started: {report.get('started_at', '?')}  finished: {report.get('finished_at', '?')}")
    err = report.get("error")
    if err:
        lines.append(f"error: stage {err['stage']}: {err['type']}: {err['message']}")
    lines.append("stages:")
    for stage in STAGE_ORDER:
        info = report.get("stages", {}).get(stage)
        if info is None:
            continue
        extra = ""
        counts = info.get("counts", {})
        if counts:
            keys = sorted(counts)[:6]
            extra = "  (" + ", ".join(f"{k}={counts[k]}" for k in keys) + ")"
        lines.append(f"  {stage}: {info['status']} [{info.get('seconds', 0.0):.2f}s]{extra}")
    flags = report.get("flags", [])
    if flags:
        lines.append("flags:")
        for f in flags:
            lines.append(f"  [{f['stage']}] {f['kind']}: {f['detail']}")
    else:
        lines.append("flags: none")
    return "\n".join(lines)
