"""Parsing, filtering, toxicity joining, and window construction."""

import io

import numpy as np
import pytest

from polarscope import ingest
from polarscope.errors import ConfigError, DataError

from conftest import DAY, DAY0, csv_text, jsonl_text, load_csv, simple_rows


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def test_csv_row_field_mapping():
    text = 'timestamp,retweeter,influencer,post,hashtags\n2021-01-05T00:00:00Z,u1,i1,p1,"covid;vaccine"\n'
    events = list(ingest.iter_events(io.StringIO(text), fmt="csv"))
    assert len(events) == 1
    ev = events[0]
    assert ev.timestamp == 1609804800
    assert ev.retweeter == "u1"
    assert ev.influencer == "i1"
    assert ev.post == "p1"
    assert ev.hashtags == ("covid", "vaccine")


def test_self_retweet_dropped_and_counted():
    rows = [(0, "u1", "u1", "p1", ""), (0, "u1", "i1", "p2", "")]
    store = load_csv(rows)
    assert store.n_events == 1
    assert store.summary.self_retweets_dropped == 1
    assert store.summary.rows_malformed == 0


def test_empty_stream_yields_nothing():
    assert list(ingest.iter_events(io.StringIO("timestamp,retweeter,influencer,post,hashtags\n"), fmt="csv")) == []


def test_empty_file_rejected_by_loader():
    with pytest.raises(DataError):
        ingest.load_events(io.StringIO("timestamp,retweeter,influencer,post,hashtags\n"))


def test_malformed_rows_counted_below_tolerance():
    lines = [csv_text(simple_rows()).rstrip("\n"), "not-a-timestamp,u,i,p,"]
    store = ingest.load_events(io.StringIO("\n".join(lines) + "\n"), malformed_tolerance=0.5)
    assert store.summary.rows_malformed == 1
    assert len(store.summary.offenders) == 1
    row_no, reason = store.summary.offenders[0]
    assert row_no == len(simple_rows()) + 1
    assert "timestamp" in reason


def test_malformed_above_tolerance_aborts_with_offenders():
    rows = csv_text([(0, "u1", "i1", "p1", "")]).rstrip("\n")
    bad = "\n".join(["bad-ts,u,i,p,"] * 3)
    with pytest.raises(DataError) as exc:
        ingest.load_events(io.StringIO(rows + "\n" + bad + "\n"), malformed_tolerance=0.01)
    msg = str(exc.value)
    assert "2" in msg and "3" in msg and "4" in msg  # offending data-row numbers


def test_offender_list_capped_at_ten():
    good = csv_text([(0, "u1", "i1", "p1", "")]).rstrip("\n")
    bad = "\n".join(["bad-ts,u,i,p,"] * 25)
    store = ingest.load_events(io.StringIO(good + "\n" + bad + "\n"), malformed_tolerance=1.0)
    assert store.summary.rows_malformed == 25
    assert len(store.summary.offenders) == 10


def test_tolerance_out_of_range_rejected():
    with pytest.raises(ConfigError):
        ingest.load_events(io.StringIO(csv_text(simple_rows())), malformed_tolerance=1.5)


def test_jsonl_matches_csv():
    rows = simple_rows()
    a = load_csv(rows)
    b = ingest.load_events(io.StringIO(jsonl_text(rows)))
    assert a.users == b.users
    assert a.influencers == b.influencers
    assert a.posts == b.posts
    assert a.tags == b.tags
    np.testing.assert_array_equal(a.ts, b.ts)
    np.testing.assert_array_equal(a.retweeter, b.retweeter)
    np.testing.assert_array_equal(a.tag_ids, b.tag_ids)
    np.testing.assert_array_equal(a.tag_offsets, b.tag_offsets)


def test_jsonl_hashtags_string_form():
    ts = DAY0 * DAY
    text = '{"timestamp": %d, "retweeter": "u", "influencer": "i", "post": "p", "hashtags": "a;b"}\n' % ts
    events = list(ingest.iter_events(io.StringIO(text), fmt="jsonl"))
    assert events[0].hashtags == ("a", "b")


def test_csv_header_reordered_with_extra_columns():
    text = (
        "post,extra,influencer,timestamp,retweeter,hashtags\n"
        f"p1,junk,i1,{DAY0 * DAY},u1,covid\n"
    )
    store = ingest.load_events(io.StringIO(text))
    assert store.users == ["u1"]
    assert store.posts == ["p1"]
    assert store.tags == ["covid"]


def test_csv_missing_header_rejected():
    with pytest.raises(DataError):
        ingest.load_events(io.StringIO(f"{DAY0 * DAY},u1,i1,p1,covid\n"))


def test_short_row_is_malformed():
    text = csv_text([(0, "u1", "i1", "p1", "")]).rstrip("\n") + "\n123,u2\n"
    store = ingest.load_events(io.StringIO(text), malformed_tolerance=1.0)
    assert store.summary.rows_malformed == 1


def test_empty_retweeter_is_malformed():
    text = csv_text([(0, "u1", "i1", "p1", "")]).rstrip("\n") + f"\n{DAY0 * DAY},,i1,p9,\n"
    store = ingest.load_events(io.StringIO(text), malformed_tolerance=1.0)
    assert store.summary.rows_malformed == 1


def test_day_range_inclusive_bounds():
    rows = [(d, "u1", "i1", f"p{d}", "") for d in range(10)]
    store = load_csv(rows, start_day=DAY0 + 2, end_day=DAY0 + 7)
    assert store.n_events == 6
    assert store.day_min == DAY0 + 2
    assert int(store.day.max()) == DAY0 + 7
    assert store.summary.out_of_range_dropped == 4


def test_all_rows_out_of_range_is_error():
    rows = [(0, "u1", "i1", "p1", "")]
    with pytest.raises(DataError):
        load_csv(rows, start_day=DAY0 + 100)


def test_events_sorted_stably_with_tag_slices():
    ts0 = DAY0 * DAY
    text = (
        "timestamp,retweeter,influencer,post,hashtags\n"
        f"{ts0 + 50},u_late,i1,p_late,late1;late2\n"
        f"{ts0 + 10},u_a,i1,p_a,first\n"
        f"{ts0 + 50},u_tie,i2,p_tie,tie\n"
    )
    store = ingest.load_events(io.StringIO(text))
    names = [store.users[i] for i in store.retweeter]
    assert names == ["u_a", "u_late", "u_tie"]  # sorted; equal ts keeps file order
    def tags_of(i):
        lo, hi = store.tag_offsets[i], store.tag_offsets[i + 1]
        return [store.tags[t] for t in store.tag_ids[lo:hi]]
    assert tags_of(0) == ["first"]
    assert tags_of(1) == ["late1", "late2"]
    assert tags_of(2) == ["tie"]


def test_interning_round_trip():
    store = load_csv(simple_rows())
    for i in range(store.n_events):
        user = store.users[store.retweeter[i]]
        assert store.retweeter[i] == store.users.index(user)
    assert store.users == sorted(store.users)
    assert store.influencers == sorted(store.influencers)


def test_normalize_tag():
    assert ingest.normalize_tag("#COVID ") == "covid"
    assert ingest.normalize_tag("Vaccine Mandate") == "vaccinemandate"
    assert ingest.normalize_tag("") is None
    assert ingest.normalize_tag("#") is None


def test_parse_day():
    assert ingest.parse_day("2021-01-01") == DAY0
    assert ingest.parse_day(DAY0) == DAY0
    with pytest.raises(ConfigError):
        ingest.parse_day("not-a-date")


def test_load_terms_skips_blanks_and_comments():
    text = "covid\n\n# a comment\nVaccine Mandate\n"
    assert ingest.load_terms(io.StringIO(text)) == ["covid", "Vaccine Mandate"]


# ---------------------------------------------------------------------------
# user filtering
# ---------------------------------------------------------------------------


def _match_rows():
    rows = []
    for d in range(7):
        rows.append((d, "heavy", "i1", f"hp{d}", "covid"))
    for d in range(3):
        rows.append((d, "light", "i1", f"lp{d}", "covid"))
    rows.append((0, "heavy", "i2", "off", ""))  # non-matching event of a retained user
    rows.append((1, "silent", "i2", "sp", "other"))
    return rows


def test_filter_users_boundary_inclusive():
    store = load_csv(_match_rows())
    index, sub = ingest.filter_users(store, ["covid"], min_matches=7)
    assert index.users == ["heavy"]
    # all events of retained users survive, matching or not
    assert sub.n_events == 8


def test_filter_users_zero_matches_excluded():
    store = load_csv(_match_rows())
    index, _ = ingest.filter_users(store, ["covid"], min_matches=1)
    assert "silent" not in index.users
    assert index.users == ["heavy", "light"]


def test_filter_users_case_insensitive_compound():
    rows = [(d, "u1", "i1", f"p{d}", "VaccineMandate") for d in range(3)]
    store = load_csv(rows)
    index, _ = ingest.filter_users(store, ["Vaccine Mandate"], min_matches=3)
    assert index.users == ["u1"]


def test_filter_users_whole_token_not_substring():
    rows = [(0, "u1", "i1", "p1", "covidiots")]
    store = load_csv(rows)
    with pytest.raises(DataError):
        # "covid" must not match the token "covidiots", so nobody is retained
        ingest.filter_users(store, ["covid"], min_matches=1)


def test_filter_users_monotone_in_min_matches():
    rng = np.random.default_rng(7)
    rows = []
    for u in range(12):
        k = int(rng.integers(0, 6))
        for j in range(k):
            rows.append((j, f"u{u:02d}", "i1", f"p{u}_{j}", "covid"))
        rows.append((0, f"u{u:02d}", "i2", f"q{u}", ""))
    store = load_csv(rows)
    retained = {}
    for mm in (1, 2, 3):
        index, _ = ingest.filter_users(store, ["covid"], min_matches=mm)
        retained[mm] = set(index.users)
    assert retained[3] <= retained[2] <= retained[1]


def test_filter_users_errors():
    store = load_csv(_match_rows())
    with pytest.raises(DataError):
        ingest.filter_users(store, [], min_matches=1)
    with pytest.raises(ConfigError):
        ingest.filter_users(store, ["covid"], min_matches=0)
    with pytest.raises(DataError):
        ingest.filter_users(store, ["nosuchtag"], min_matches=1)


def test_filter_users_restricts_and_reinterns():
    store = load_csv(_match_rows())
    index, sub = ingest.filter_users(store, ["covid"], min_matches=7)
    assert sub.users == ["heavy"]
    assert set(sub.retweeter.tolist()) == {0}
    # reinterned vocabularies stay lexicographic
    assert sub.influencers == sorted(sub.influencers)
    assert sub.posts == sorted(sub.posts)


# ---------------------------------------------------------------------------
# toxicity join
# ---------------------------------------------------------------------------


def _retweet_counts_store():
    rows = []
    for j in range(10):
        rows.append((0, f"u{j}", "i1", "popular", ""))
    for j in range(9):
        rows.append((1, f"u{j}", "i1", "mid", ""))
    for j in range(15):
        rows.append((2, f"u{j}", "i1", "unscored", ""))
    return load_csv(rows)


def test_join_toxicity_boundary_and_missing():
    store = _retweet_counts_store()
    posts = ingest.join_toxicity(store, {"popular": 0.4, "mid": 0.9}, min_retweets=10)
    pid = store.posts.index("popular")
    mid = store.posts.index("mid")
    uid = store.posts.index("unscored")
    assert posts.eligible[pid] and posts.scores[pid] == 0.4
    assert not posts.eligible[mid]  # 9 < 10
    assert posts.eligible[uid] and np.isnan(posts.scores[uid])
    assert not posts.scored_eligible[mid] and not posts.scored_eligible[uid]
    assert posts.scored_eligible[pid]
    cov = posts.coverage
    assert cov.eligible == 2 and cov.scored == 1
    assert "unscored" in cov.missing_sample
    assert cov.fraction == 0.5


def test_join_toxicity_extra_scores_counted():
    store = _retweet_counts_store()
    posts = ingest.join_toxicity(store, {"popular": 0.4, "nonexistent": 0.2}, min_retweets=10)
    assert posts.coverage.extra_scores == 1


def test_join_toxicity_min_retweets_validation():
    store = _retweet_counts_store()
    with pytest.raises(ConfigError):
        ingest.join_toxicity(store, {"popular": 0.4}, min_retweets=0)


def test_read_score_table_validation():
    good = "post,score\np1,0.5\np1,0.5\n"
    table = ingest.read_score_table(io.StringIO(good))
    assert table == {"p1": 0.5}
    with pytest.raises(DataError):
        ingest.read_score_table(io.StringIO("post,score\np1,1.5\n"))
    with pytest.raises(DataError):
        ingest.read_score_table(io.StringIO("post,score\np1,0.5\np1,0.6\n"))
    with pytest.raises(DataError):
        ingest.read_score_table(io.StringIO("post,wrong\np1,0.5\n"))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def test_build_windows_ten_day_sample():
    rows = [(d, "u1", "i1", f"p{d}", "") for d in range(10)]
    store = load_csv(rows)
    ws = ingest.build_windows(store, window_days=7)
    assert len(ws) == 10
    assert not ws.degenerate
    np.testing.assert_array_equal(ws.anchors, np.arange(DAY0, DAY0 + 10))
    # first 6 windows are partial, from the 7th on they're full
    np.testing.assert_array_equal(ws.event_counts, np.minimum(np.arange(1, 11), 7))


def test_build_windows_event_membership_arithmetic():
    rows = [(d, "u1", "i1", f"p{d}", "") for d in range(10)]
    store = load_csv(rows)
    ws = ingest.build_windows(store, window_days=7)
    # event at day d appears in windows anchored d .. d+6 clipped at the end
    d1 = DAY0 + 9
    expected_total = sum(min(7, d1 - (DAY0 + d) + 1) for d in range(10))
    assert int(ws.event_counts.sum()) == expected_total


def test_build_windows_content_brute_force():
    rng = np.random.default_rng(11)
    rows = []
    for i in range(200):
        d = int(rng.integers(0, 25))
        rows.append((d, f"u{rng.integers(5)}", f"i{rng.integers(3)}", f"p{i}", ""))
    store = load_csv(rows)
    ws = ingest.build_windows(store, window_days=7)
    assert len(ws) == int(store.day.max() - store.day.min()) + 1
    for w in ws:
        inside = (store.day >= w.anchor_day - 6) & (store.day <= w.anchor_day)
        np.testing.assert_array_equal(np.flatnonzero(inside), np.arange(w.start, w.stop))


def test_build_windows_short_span_degenerate():
    rows = [(d, "u1", "i1", f"p{d}", "") for d in range(3)]
    store = load_csv(rows)
    ws = ingest.build_windows(store, window_days=7)
    assert ws.degenerate
    assert len(ws) == 1
    assert ws[0].n_events == 3


def test_build_windows_validation():
    store = load_csv(simple_rows())
    with pytest.raises(ConfigError):
        ingest.build_windows(store, window_days=0)
