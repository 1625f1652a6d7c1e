"""Event-stream ingestion: parsing, user filtering, toxicity joins, windows.

The pipeline consumes retweet event logs with the schema
``timestamp, retweeter, influencer, post, hashtags`` where ``hashtags`` is a
``;``-separated list (possibly empty).  Two source formats are supported:

* CSV with a header row naming at least the five schema columns (any order,
  extra columns ignored),
* JSON-lines with one object per line using the schema names; ``hashtags``
  may be a list of strings or a ``;``-separated string.

Timestamps are integer epoch seconds or ISO-8601 strings (naive timestamps
are taken as UTC).  Days are epoch days, ``timestamp // 86400``.

Everything downstream operates on the columnar :class:`EventStore`; dense
integer ids for users, influencers, posts, and hashtags are interned here
once and reused throughout the pipeline.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400

#: Required input columns, in schema order.
SCHEMA_COLUMNS = ("timestamp", "retweeter", "influencer", "post", "hashtags")

_MAX_OFFENDERS = 10
_MISSING_SAMPLE = 20
_FLUSH_ROWS = 1_000_000


@dataclass(frozen=True)
class RetweetEvent:
    """One parsed retweet: who amplified whose post, when, with which tags."""

    timestamp: int
    retweeter: str
    influencer: str
    post: str
    hashtags: tuple[str, ...]

    @property
    def day(self) -> int:
        return self.timestamp // SECONDS_PER_DAY


@dataclass
class ParseSummary:
    """Row accounting for one parse pass."""

    rows_total: int = 0
    rows_parsed: int = 0
    rows_malformed: int = 0
    self_retweets_dropped: int = 0
    out_of_range_dropped: int = 0
    offenders: list[tuple[int, str]] = field(default_factory=list)

    @property
    def malformed_fraction(self) -> float:
        if self.rows_total == 0:
            return 0.0
        return self.rows_malformed / self.rows_total

    def as_dict(self) -> dict:
        return {
            "rows_total": self.rows_total,
            "rows_parsed": self.rows_parsed,
            "rows_malformed": self.rows_malformed,
            "self_retweets_dropped": self.self_retweets_dropped,
            "out_of_range_dropped": self.out_of_range_dropped,
            "offenders": [list(o) for o in self.offenders],
        }


class EventStore:
    """Columnar retweet log, sorted by timestamp.

    Attributes
    ----------
    ts, day : int64 arrays, one entry per event (day = ts // 86400).
    retweeter, influencer, post : int32 dense-id arrays.
    tag_ids, tag_offsets : flattened hashtag ids; event ``i`` carries
        ``tag_ids[tag_offsets[i]:tag_offsets[i+1]]``.
    users, influencers, posts, tags : dense id -> external string.
    """

    def __init__(
        self,
        ts: np.ndarray,
        retweeter: np.ndarray,
        influencer: np.ndarray,
        post: np.ndarray,
        tag_ids: np.ndarray,
        tag_offsets: np.ndarray,
        users: list[str],
        influencers: list[str],
        posts: list[str],
        tags: list[str],
        summary: ParseSummary | None = None,
    ) -> None:
        self.ts = np.asarray(ts, dtype=np.int64)
        self.retweeter = np.asarray(retweeter, dtype=np.int32)
        self.influencer = np.asarray(influencer, dtype=np.int32)
        self.post = np.asarray(post, dtype=np.int32)
        self.tag_ids = np.asarray(tag_ids, dtype=np.int32)
        self.tag_offsets = np.asarray(tag_offsets, dtype=np.int64)
        self.users = list(users)
        self.influencers = list(influencers)
        self.posts = list(posts)
        self.tags = list(tags)
        self.summary = summary if summary is not None else ParseSummary()
        self.day = self.ts // SECONDS_PER_DAY

    # -- basic accessors ---------------------------------------------------

    @property
    def n_events(self) -> int:
        return int(self.ts.shape[0])

    @property
    def day_min(self) -> int:
        return int(self.day[0])

    @property
    def day_max(self) -> int:
        return int(self.day[-1])

    @property
    def span_days(self) -> int:
        return self.day_max - self.day_min + 1

    def event_tags(self, i: int) -> list[str]:
        lo, hi = self.tag_offsets[i], self.tag_offsets[i + 1]
        return [self.tags[t] for t in self.tag_ids[lo:hi]]

    def tag_event_index(self) -> np.ndarray:
        """Event index for every entry of ``tag_ids`` (repeat by tag count)."""
        counts = np.diff(self.tag_offsets)
        return np.repeat(np.arange(self.n_events, dtype=np.int64), counts)

    # -- transformations ---------------------------------------------------

    def subset(self, mask: np.ndarray, reintern: bool = True) -> "EventStore":
        """Restrict to events where ``mask`` holds.

        With ``reintern`` (the default) all four id spaces are compacted to
        the surviving entities and re-ordered lexicographically by external
        id, keeping dense ids deterministic regardless of event order.
        """
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        counts = np.diff(self.tag_offsets)
        new_counts = counts[idx]
        starts = self.tag_offsets[:-1][idx]
        flat_idx = np.repeat(starts, new_counts) + _within_segment(new_counts)
        new_tag_ids = self.tag_ids[flat_idx]
        new_offsets = np.concatenate(([0], np.cumsum(new_counts, dtype=np.int64)))

        store = EventStore(
            self.ts[idx],
            self.retweeter[idx],
            self.influencer[idx],
            self.post[idx],
            new_tag_ids,
            new_offsets,
            self.users,
            self.influencers,
            self.posts,
            self.tags,
            summary=self.summary,
        )
        if reintern:
            store._compact_vocabs()
        return store

    def _compact_vocabs(self) -> None:
        self.retweeter, self.users = _compact(self.retweeter, self.users)
        self.influencer, self.influencers = _compact(self.influencer, self.influencers)
        self.post, self.posts = _compact(self.post, self.posts)
        self.tag_ids, self.tags = _compact(self.tag_ids, self.tags)


def _compact(ids: np.ndarray, vocab: list[str]) -> tuple[np.ndarray, list[str]]:
    """Re-intern ``ids`` over the entities actually present, sorted by name."""
    if ids.size == 0:
        return ids.astype(np.int32), []
    old = np.unique(ids)
    names = [vocab[i] for i in old]
    order = np.argsort(np.asarray(names, dtype=object), kind="stable")
    new_vocab = [names[j] for j in order]
    remap = np.full(len(vocab), -1, dtype=np.int32)
    remap[old[order]] = np.arange(old.shape[0], dtype=np.int32)
    return remap[ids], new_vocab


# ---------------------------------------------------------------------------
# normalization helpers
# ---------------------------------------------------------------------------


def normalize_tag(raw: str) -> str | None:
    """Canonical hashtag/term form: trimmed, de-``#``-ed, lower-cased,
    internal whitespace removed (so compound terms match single-token tags).
    Returns ``None`` for strings that normalize to nothing."""
    t = raw.strip().lstrip("#").lower()
    if " " in t or "\t" in t:
        t = "".join(t.split())
    return t or None


def parse_day(value: str | int) -> int:
    """Epoch day from an integer day, integer/float epoch seconds string,
    or ``YYYY-MM-DD`` date string (UTC midnight)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    s = str(value).strip()
    try:
        return int(s)
    except ValueError:
        pass
    try:
        dt = datetime.strptime(s, "%Y-%m-%d").replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise ConfigError(f"cannot interpret {value!r} as a date (want YYYY-MM-DD or epoch day)") from exc
    return int(dt.timestamp()) // SECONDS_PER_DAY


def _ts_seconds(s) -> int | None:
    """Epoch seconds from an int/float/ISO-8601 value; None if unparseable."""
    if isinstance(s, (int, np.integer)):
        return int(s)
    if isinstance(s, float):
        return int(math.floor(s)) if math.isfinite(s) else None
    try:
        return int(s)
    except (ValueError, TypeError):
        pass
    if not isinstance(s, str):
        return None
    try:
        f = float(s)
    except ValueError:
        try:
            dt = datetime.fromisoformat(s.strip().replace("Z", "+00:00"))
        except ValueError:
            return None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(math.floor(dt.timestamp()))
    return int(math.floor(f)) if math.isfinite(f) else None


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _open_source(source, fmt: str):
    """Resolve (text-file handle, format, should_close)."""
    if hasattr(source, "read"):
        handle = source
        close = False
        name = getattr(source, "name", "")
    else:
        name = str(source)
        if not os.path.exists(name):
            raise DataError(f"event source not found: {name}")
        handle = open(name, "r", encoding="utf-8", newline="")
        close = True
    if fmt == "auto":
        lower = name.lower()
        if lower.endswith((".jsonl", ".ndjson", ".json")):
            fmt = "jsonl"
        elif lower.endswith(".csv"):
            fmt = "csv"
        else:
            head = handle.read(1)
            if hasattr(handle, "seek"):
                handle.seek(0)
            fmt = "jsonl" if head == "{" else "csv"
    if fmt not in ("csv", "jsonl"):
        if close:
            handle.close()
        raise ConfigError(f"unknown event format {fmt!r} (want csv or jsonl)")
    return handle, fmt, close


def _csv_rows(handle) -> Iterator[tuple[int, tuple]]:
    """Yield (data_row_number, raw field tuple) from a CSV source."""
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("event CSV is empty (no header row)")
    cols = {name.strip().lower(): i for i, name in enumerate(header)}
    missing = [c for c in SCHEMA_COLUMNS if c not in cols]
    if missing:
        raise DataError(f"event CSV is missing required columns: {', '.join(missing)}")
    take = tuple(cols[c] for c in SCHEMA_COLUMNS)
    need = max(take) + 1
    rownum = 0
    for fields in reader:
        rownum += 1
        if len(fields) < need:
            yield rownum, None
            continue
        yield rownum, (fields[take[0]], fields[take[1]], fields[take[2]], fields[take[3]], fields[take[4]])


def _jsonl_rows(handle) -> Iterator[tuple[int, tuple]]:
    rownum = 0
    for line in handle:
        line = line.strip()
        if not line:
            continue
        rownum += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            yield rownum, None
            continue
        if not isinstance(obj, dict):
            yield rownum, None
            continue
        tags = obj.get("hashtags", "")
        if isinstance(tags, list):
            tags = ";".join(str(t) for t in tags)
        yield rownum, (
            obj.get("timestamp"),
            obj.get("retweeter"),
            obj.get("influencer"),
            obj.get("post"),
            tags,
        )


def _coerce(raw) -> tuple | str:
    """Validate one raw schema tuple -> (ts, rt, infl, post, tags_str) or a
    reason string describing why the row is malformed."""
    ts = _ts_seconds(raw[0])
    if ts is None:
        return "unparseable timestamp"
    rt = raw[1].strip() if isinstance(raw[1], str) else raw[1]
    if not rt or not isinstance(rt, str):
        return "empty retweeter id"
    infl = raw[2].strip() if isinstance(raw[2], str) else raw[2]
    if not infl or not isinstance(infl, str):
        return "empty influencer id"
    post = raw[3].strip() if isinstance(raw[3], str) else raw[3]
    if not post or not isinstance(post, str):
        return "empty post id"
    tags = raw[4] if isinstance(raw[4], str) else ""
    return (ts, rt, infl, post, tags)


def iter_events(source, fmt: str = "auto") -> Iterator[RetweetEvent]:
    """Stream :class:`RetweetEvent` records from a CSV/JSONL source.

    Malformed rows are skipped (and logged); self-retweets are not dropped
    here — this is the raw record stream.  Use :func:`load_events` for the
    tolerance-checked columnar load the pipeline runs on.
    """
    handle, fmt, close = _open_source(source, fmt)
    rows = _csv_rows(handle) if fmt == "csv" else _jsonl_rows(handle)
    try:
        for rownum, raw in rows:
            if raw is None:
                logger.debug("skipping malformed row %d", rownum)
                continue
            got = _coerce(raw)
            if isinstance(got, str):
                logger.debug("skipping malformed row %d: %s", rownum, got)
                continue
            ts, rt, infl, post, tags_str = got
            tags = []
            if tags_str:
                for piece in tags_str.split(";"):
                    t = normalize_tag(piece)
                    if t is not None:
                        tags.append(t)
            yield RetweetEvent(ts, rt, infl, post, tuple(tags))
    finally:
        if close:
            handle.close()


def load_events(
    source,
    fmt: str = "auto",
    *,
    start_day: int | None = None,
    end_day: int | None = None,
    malformed_tolerance: float = 0.01,
) -> EventStore:
    """Parse an event log into a timestamp-sorted :class:`EventStore`.

    Rows that cannot be coerced to the schema count as malformed; if their
    fraction exceeds ``malformed_tolerance`` the load aborts with the first
    ten offending data-row numbers.  Self-retweets (retweeter == influencer)
    are dropped and counted, not treated as malformed.  ``start_day`` /
    ``end_day`` (inclusive epoch days) drop out-of-range events with a count.
    """
    if not 0.0 <= malformed_tolerance <= 1.0:
        raise ConfigError(f"malformed_tolerance must be in [0, 1], got {malformed_tolerance}")
    handle, fmt, close = _open_source(source, fmt)
    rows = _csv_rows(handle) if fmt == "csv" else _jsonl_rows(handle)

    summary = ParseSummary()
    users: dict[str, int] = {}
    influencers: dict[str, int] = {}
    posts: dict[str, int] = {}
    tags: dict[str, int] = {}
    tag_cache: dict[str, int] = {}  # raw piece -> tag id (or -1 when dropped)

    ts_buf: list[int] = []
    rt_buf: list[int] = []
    in_buf: list[int] = []
    po_buf: list[int] = []
    nt_buf: list[int] = []
    flat_tags: list[int] = []
    chunks: list[tuple[np.ndarray, ...]] = []

    def flush() -> None:
        if not ts_buf:
            return
        n = len(ts_buf)
        chunks.append(
            (
                np.fromiter(ts_buf, dtype=np.int64, count=n),
                np.fromiter(rt_buf, dtype=np.int32, count=n),
                np.fromiter(in_buf, dtype=np.int32, count=n),
                np.fromiter(po_buf, dtype=np.int32, count=n),
                np.fromiter(nt_buf, dtype=np.int32, count=n),
                np.fromiter(flat_tags, dtype=np.int32, count=len(flat_tags)),
            )
        )
        ts_buf.clear()
        rt_buf.clear()
        in_buf.clear()
        po_buf.clear()
        nt_buf.clear()
        flat_tags.clear()

    lo_ts = None if start_day is None else start_day * SECONDS_PER_DAY
    hi_ts = None if end_day is None else (end_day + 1) * SECONDS_PER_DAY

    try:
        for rownum, raw in rows:
            summary.rows_total += 1
            if raw is None:
                summary.rows_malformed += 1
                if len(summary.offenders) < _MAX_OFFENDERS:
                    summary.offenders.append((rownum, "wrong field count or undecodable"))
                continue
            got = _coerce(raw)
            if isinstance(got, str):
                summary.rows_malformed += 1
                if len(summary.offenders) < _MAX_OFFENDERS:
                    summary.offenders.append((rownum, got))
                continue
            ts, rt, infl, post, tags_str = got
            if rt == infl:
                summary.self_retweets_dropped += 1
                continue
            if (lo_ts is not None and ts < lo_ts) or (hi_ts is not None and ts >= hi_ts):
                summary.out_of_range_dropped += 1
                continue

            ui = users.get(rt)
            if ui is None:
                ui = users[rt] = len(users)
            vi = influencers.get(infl)
            if vi is None:
                vi = influencers[infl] = len(influencers)
            pi = posts.get(post)
            if pi is None:
                pi = posts[post] = len(posts)

            ntags = 0
            if tags_str:
                for piece in tags_str.split(";"):
                    ti = tag_cache.get(piece)
                    if ti is None:
                        norm = normalize_tag(piece)
                        if norm is None:
                            ti = -1
                        else:
                            ti = tags.get(norm)
                            if ti is None:
                                ti = tags[norm] = len(tags)
                        tag_cache[piece] = ti
                    if ti >= 0:
                        flat_tags.append(ti)
                        ntags += 1

            ts_buf.append(ts)
            rt_buf.append(ui)
            in_buf.append(vi)
            po_buf.append(pi)
            nt_buf.append(ntags)
            summary.rows_parsed += 1
            if len(ts_buf) >= _FLUSH_ROWS:
                flush()
        flush()
    finally:
        if close:
            handle.close()

    if summary.rows_total == 0:
        raise DataError("event source contains no data rows")
    if summary.malformed_fraction > malformed_tolerance:
        head = ", ".join(f"row {r} ({why})" for r, why in summary.offenders)
        raise DataError(
            f"{summary.rows_malformed} of {summary.rows_total} rows are malformed "
            f"({summary.malformed_fraction:.2%} > tolerance {malformed_tolerance:.2%}); "
            f"first offenders: {head}"
        )
    if summary.rows_malformed:
        logger.warning(
            "parsed %d rows; %d malformed rows skipped (%.3f%%)",
            summary.rows_parsed,
            summary.rows_malformed,
            100.0 * summary.malformed_fraction,
        )
    if summary.rows_parsed == 0:
        raise DataError("no events survived parsing (all rows malformed, self-retweets, or out of range)")

    ts_arr = np.concatenate([c[0] for c in chunks])
    rt_arr = np.concatenate([c[1] for c in chunks])
    in_arr = np.concatenate([c[2] for c in chunks])
    po_arr = np.concatenate([c[3] for c in chunks])
    nt_arr = np.concatenate([c[4] for c in chunks])
    tg_arr = np.concatenate([c[5] for c in chunks]) if chunks else np.empty(0, np.int32)
    del chunks

    order = np.argsort(ts_arr, kind="stable")
    offsets = np.concatenate(([0], np.cumsum(nt_arr, dtype=np.int64)))
    if not np.array_equal(order, np.arange(order.shape[0])):
        counts = nt_arr[order]
        flat_idx = np.repeat(offsets[:-1][order], counts) + _within_segment(counts)
        tg_arr = tg_arr[flat_idx]
        offsets = np.concatenate(([0], np.cumsum(counts, dtype=np.int64)))
        ts_arr = ts_arr[order]
        rt_arr = rt_arr[order]
        in_arr = in_arr[order]
        po_arr = po_arr[order]

    return EventStore(
        ts_arr,
        rt_arr,
        in_arr,
        po_arr,
        tg_arr,
        offsets,
        _vocab_list(users),
        _vocab_list(influencers),
        _vocab_list(posts),
        _vocab_list(tags),
        summary=summary,
    )


def _vocab_list(interner: dict[str, int]) -> list[str]:
    out = [""] * len(interner)
    for name, i in interner.items():
        out[i] = name
    return out


def _within_segment(counts: np.ndarray) -> np.ndarray:
    """[0..c0), [0..c1), ... concatenated — offsets within variable segments."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    ends = np.cumsum(counts)
    return np.arange(total, dtype=np.int64) - np.repeat(ends - counts, counts)


# ---------------------------------------------------------------------------
# user filtering
# ---------------------------------------------------------------------------


@dataclass
class UserIndex:
    """Dense index over retained users (ids are 0..N-1, lexicographic)."""

    users: list[str]
    event_counts: np.ndarray
    match_counts: np.ndarray

    def __post_init__(self) -> None:
        self.forward = {u: i for i, u in enumerate(self.users)}

    @property
    def n(self) -> int:
        return len(self.users)

    def __len__(self) -> int:
        return len(self.users)


def load_terms(source) -> list[str]:
    """Read an ideological-term file: one term per line, ``#`` comments and
    blank lines ignored."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        if not os.path.exists(str(source)):
            raise DataError(f"terms file not found: {source}")
        with open(str(source), "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    terms = []
    for line in lines:
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        terms.append(s)
    return terms


def filter_users(
    store: EventStore,
    terms: Iterable[str],
    min_matches: int,
) -> tuple[UserIndex, EventStore]:
    """Retain users with at least ``min_matches`` events carrying one of the
    ideological ``terms``, and restrict the store to their events.

    Matching is case-insensitive whole-token comparison against each event's
    hashtag list; compound terms have internal whitespace removed so
    ``"vaccine mandate"`` matches the tag ``vaccinemandate``.  Raises
    :class:`DataError` for an empty term list and :class:`ConfigError` for
    ``min_matches < 1`` (either would retain everyone).
    """
    term_list = [t for t in (normalize_tag(str(r)) for r in terms) if t is not None]
    if not term_list:
        raise DataError("term list is empty after normalization; refusing to retain all users")
    if min_matches < 1:
        raise ConfigError(f"min_matches must be >= 1, got {min_matches}")

    tag_index = {t: i for i, t in enumerate(store.tags)}
    term_ids = np.array(sorted({tag_index[t] for t in term_list if t in tag_index}), dtype=np.int32)

    n = store.n_events
    if term_ids.size == 0:
        matched = np.zeros(n, dtype=bool)
    else:
        hit = np.isin(store.tag_ids, term_ids)
        ev_idx = store.tag_event_index()
        matched = np.bincount(ev_idx[hit], minlength=n).astype(bool)

    per_user_matches = np.bincount(store.retweeter[matched], minlength=len(store.users))
    keep_user = per_user_matches >= min_matches
    n_keep = int(keep_user.sum())
    if n_keep == 0:
        raise DataError(
            f"no user meets the inclusion criterion ({min_matches} matching events); "
            f"matched events: {int(matched.sum())} of {n}"
        )

    keep_event = keep_user[store.retweeter]
    filtered = store.subset(keep_event, reintern=True)

    event_counts = np.bincount(filtered.retweeter, minlength=len(filtered.users)).astype(np.int64)
    # recompute matches against the filtered store's tag ids
    f_tag_index = {t: i for i, t in enumerate(filtered.tags)}
    f_term_ids = np.array(sorted({f_tag_index[t] for t in term_list if t in f_tag_index}), dtype=np.int32)
    f_hit = np.isin(filtered.tag_ids, f_term_ids) if f_term_ids.size else np.zeros(filtered.tag_ids.shape, bool)
    f_matched = np.bincount(filtered.tag_event_index()[f_hit], minlength=filtered.n_events).astype(bool)
    match_counts = np.bincount(filtered.retweeter[f_matched], minlength=len(filtered.users)).astype(np.int64)

    index = UserIndex(filtered.users, event_counts, match_counts)
    logger.info(
        "retained %d of %d users (>= %d term matches); %d of %d events kept",
        n_keep,
        len(store.users),
        min_matches,
        filtered.n_events,
        n,
    )
    return index, filtered


# ---------------------------------------------------------------------------
# toxicity join
# ---------------------------------------------------------------------------


@dataclass
class ToxicityCoverage:
    eligible: int
    scored: int
    missing_sample: list[str]
    extra_scores: int
    min_retweets: int

    @property
    def fraction(self) -> float:
        return 1.0 if self.eligible == 0 else self.scored / self.eligible

    def as_dict(self) -> dict:
        return {
            "eligible": self.eligible,
            "scored": self.scored,
            "fraction": self.fraction,
            "missing_sample": list(self.missing_sample),
            "extra_scores": self.extra_scores,
            "min_retweets": self.min_retweets,
        }


@dataclass
class PostTable:
    """Per-post retweet counts and toxicity scores over a store's post ids."""

    retweet_counts: np.ndarray
    scores: np.ndarray  # NaN where unscored
    eligible: np.ndarray  # counts >= min_retweets
    coverage: ToxicityCoverage

    @property
    def scored_eligible(self) -> np.ndarray:
        return self.eligible & np.isfinite(self.scores)


def read_score_table(source) -> dict[str, float]:
    """Read a ``post,score`` CSV into a dict, validating ranges/duplicates."""
    if hasattr(source, "read"):
        handle, close = source, False
    else:
        if not os.path.exists(str(source)):
            raise DataError(f"toxicity file not found: {source}")
        handle, close = open(str(source), "r", encoding="utf-8", newline=""), True
    scores: dict[str, float] = {}
    try:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("toxicity CSV is empty")
        cols = {name.strip().lower(): i for i, name in enumerate(header)}
        if "post" not in cols or "score" not in cols:
            raise DataError("toxicity CSV must have 'post' and 'score' columns")
        pi, si = cols["post"], cols["score"]
        need = max(pi, si) + 1
        for rownum, fields in enumerate(reader, start=1):
            if len(fields) < need:
                raise DataError(f"toxicity CSV row {rownum}: wrong field count")
            post = fields[pi].strip()
            try:
                score = float(fields[si])
            except ValueError:
                raise DataError(f"toxicity CSV row {rownum}: unparseable score {fields[si]!r}")
            if not 0.0 <= score <= 1.0 or not math.isfinite(score):
                raise DataError(f"toxicity CSV row {rownum}: score {score} outside [0, 1]")
            prev = scores.get(post)
            if prev is not None and prev != score:
                raise DataError(f"toxicity CSV row {rownum}: post {post!r} has conflicting scores {prev} and {score}")
            scores[post] = score
    finally:
        if close:
            handle.close()
    return scores


def join_toxicity(
    store: EventStore,
    scores,
    min_retweets: int = 10,
) -> PostTable:
    """Join per-post toxicity scores onto the store's dense post ids.

    ``scores`` is a path/file (``post,score`` CSV) or a mapping.  Posts with
    fewer than ``min_retweets`` retweets in the store are marked ineligible
    and never aggregated.  Eligible posts lacking a score are reported in the
    coverage summary, not imputed.
    """
    if min_retweets < 1:
        raise ConfigError(f"min_retweets must be >= 1, got {min_retweets}")
    table = scores if isinstance(scores, dict) else read_score_table(scores)

    n_posts = len(store.posts)
    counts = np.bincount(store.post, minlength=n_posts).astype(np.int64)
    vals = np.full(n_posts, np.nan)
    post_index = {p: i for i, p in enumerate(store.posts)}
    extra = 0
    for post, score in table.items():
        i = post_index.get(post)
        if i is None:
            extra += 1
        else:
            vals[i] = score
    eligible = counts >= min_retweets
    scored = eligible & np.isfinite(vals)
    missing_ids = np.flatnonzero(eligible & ~np.isfinite(vals))
    missing_sample = [store.posts[i] for i in missing_ids[:_MISSING_SAMPLE]]
    cov = ToxicityCoverage(
        eligible=int(eligible.sum()),
        scored=int(scored.sum()),
        missing_sample=missing_sample,
        extra_scores=extra,
        min_retweets=min_retweets,
    )
    if cov.eligible and cov.fraction < 1.0:
        logger.warning(
            "toxicity coverage %.1f%% (%d of %d eligible posts scored); unscored posts are excluded",
            100.0 * cov.fraction,
            cov.scored,
            cov.eligible,
        )
    return PostTable(retweet_counts=counts, scores=vals, eligible=eligible, coverage=cov)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    """One trailing window: events in days [anchor-(W-1), anchor], stored as
    the half-open index range [start, stop) into the sorted event arrays."""

    anchor_day: int
    start: int
    stop: int

    @property
    def n_events(self) -> int:
        return self.stop - self.start


@dataclass
class WindowSet:
    window_days: int
    anchors: np.ndarray
    starts: np.ndarray
    stops: np.ndarray
    degenerate: bool = False

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def __iter__(self) -> Iterator[WindowSpec]:
        for i in range(len(self)):
            yield WindowSpec(int(self.anchors[i]), int(self.starts[i]), int(self.stops[i]))

    def __getitem__(self, i: int) -> WindowSpec:
        return WindowSpec(int(self.anchors[i]), int(self.starts[i]), int(self.stops[i]))

    @property
    def event_counts(self) -> np.ndarray:
        return self.stops - self.starts


def build_windows(store: EventStore, window_days: int = 7) -> WindowSet:
    """Trailing ``window_days``-day windows, one anchored at every calendar
    day of the sample span (the first ``window_days - 1`` are partial).

    A span shorter than the window length degenerates to a single window
    covering everything, with a warning.
    """
    if window_days < 1:
        raise ConfigError(f"window_days must be >= 1, got {window_days}")
    if store.n_events == 0:
        raise DataError("cannot build windows over an empty event store")
    day = store.day
    d0, d1 = int(day[0]), int(day[-1])
    span = d1 - d0 + 1
    if span < window_days:
        logger.warning(
            "sample span (%d days) is shorter than the window length (%d); emitting a single degenerate window",
            span,
            window_days,
        )
        return WindowSet(
            window_days=window_days,
            anchors=np.array([d1], dtype=np.int64),
            starts=np.array([0], dtype=np.int64),
            stops=np.array([store.n_events], dtype=np.int64),
            degenerate=True,
        )
    anchors = np.arange(d0, d1 + 1, dtype=np.int64)
    starts = np.searchsorted(day, anchors - (window_days - 1), side="left")
    stops = np.searchsorted(day, anchors, side="right")
    return WindowSet(
        window_days=window_days,
        anchors=anchors,
        starts=starts.astype(np.int64),
        stops=stops.astype(np.int64),
    )
