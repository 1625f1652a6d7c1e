"""Shared fixtures and small builders for the test suite."""

import io
import json

import numpy as np
import pytest

from polarscope import ingest
from polarscope.synth import ScenarioSpec, generate

DAY = 86400
DAY0 = 18628  # 2021-01-01

CSV_HEADER = "timestamp,retweeter,influencer,post,hashtags"


def csv_text(rows):
    """Build an event CSV from (day_offset, retweeter, influencer, post, tags) tuples.

    ``tags`` is a ``;``-joined string (may be empty).  Timestamps land at
    noon of ``DAY0 + day_offset`` so day arithmetic is unambiguous.
    """
    lines = [CSV_HEADER]
    for day_off, rt, infl, post, tags in rows:
        ts = (DAY0 + day_off) * DAY + 43200
        lines.append(f"{ts},{rt},{infl},{post},{tags}")
    return "\n".join(lines) + "\n"


def load_csv(rows, **kwargs):
    """Load a store from event tuples via the CSV parser."""
    return ingest.load_events(io.StringIO(csv_text(rows)), **kwargs)


def jsonl_text(rows):
    """Build the JSONL equivalent of :func:`csv_text`."""
    lines = []
    for day_off, rt, infl, post, tags in rows:
        ts = (DAY0 + day_off) * DAY + 43200
        rec = {
            "timestamp": ts,
            "retweeter": rt,
            "influencer": infl,
            "post": post,
            "hashtags": tags.split(";") if tags else [],
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def simple_rows(n_days=12, tag="topic"):
    """A deterministic little event log: two users, two influencers."""
    rows = []
    for d in range(n_days):
        rows.append((d, "alice", "inf_a", f"p{d}a", tag))
        rows.append((d, "bob", "inf_b", f"p{d}b", tag))
        rows.append((d, "alice", "inf_b", f"p{d}b", ""))
    return rows


@pytest.fixture(scope="session")
def cli_scenario(tmp_path_factory):
    """A generated scenario dense enough for the full pipeline at small tau.

    Returns ``(paths, flags)`` where ``flags`` are the CLI options that make
    the default pipeline fit this small dataset.
    """
    out = tmp_path_factory.mktemp("scenario")
    spec = ScenarioSpec(
        name="clitest",
        seed=3,
        days=45,
        clusters=2,
        users_per_cluster=40,
        influencers_per_cluster=25,
        events_per_user_day=6.0,
    )
    paths = generate(spec).write(str(out))
    flags = [
        "--tau", "2.0",
        "--min-cluster-size", "15",
        "--min-samples", "5",
        "--min-retweets", "3",
    ]
    return paths, flags
