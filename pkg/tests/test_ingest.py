import io
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickrank.ingest import (
    CLICKOUT,
    Action,
    LogFormatError,
    Session,
    filter_hotel_actions,
    format_log,
    group_sessions,
    make_splits,
    mask_last_clickout,
    parse_log,
    partition_cold_start,
    read_ground_truth,
    split_sessions,
    write_ground_truth,
)
from clickrank.synth import SynthSpec

from conftest import synthetic_sessions

HEADER = "user_id,session_id,timestamp,step,action_type,reference,impressions,prices\n"

FIXTURE_12 = HEADER + "".join(
    f"u{s},s{s},{1000 + 10 * step},{step},interaction item image,{100 + step},,\n"
    for s, k in ((1, 3), (2, 4), (3, 5))
    for step in range(1, k + 1)
)

WHITELISTED = [
    "interaction item rating",
    "interaction item info",
    "clickout item",
    "interaction item image",
    "interaction item deal",
    "search for item",
]
OTHER = ["change of sort order", "filter selection", "search for destination", "search for poi", "change of currency"]


def act(sid, step, kind="interaction item image", ref="1", imps=None, prices=None, user=None):
    return Action(user or "u" + sid, sid, 1000 + step, step, kind, ref, imps, prices)


def session(sid, *actions):
    return Session(sid, actions[0].user_id, list(actions))


# --- parse_log ---------------------------------------------------------------


def test_header_only_gives_no_actions():
    assert parse_log(io.StringIO(HEADER)) == []


def test_clickout_row_maps_lists():
    text = HEADER + "u1,s1,5,1,clickout item,b,a|b|c,100|90|80\n"
    (a,) = parse_log(io.StringIO(text))
    assert a.is_clickout
    assert a.impressions == ("a", "b", "c")
    assert a.prices == (100, 90, 80)
    assert a.reference == "b"


def test_fixture_twelve_rows_three_sessions():
    actions = parse_log(io.StringIO(FIXTURE_12))
    assert len(actions) == 12
    sessions = group_sessions(actions)
    assert [[a.step for a in s.actions] for s in sessions] == [[1, 2, 3], [1, 2, 3, 4], [1, 2, 3, 4, 5]]


def test_missing_column_is_named():
    text = "user_id,session_id,timestamp,step,action_type,reference,impressions\nu,s,1,1,x,y,\n"
    with pytest.raises(LogFormatError, match="prices"):
        parse_log(io.StringIO(text))


def test_price_impression_mismatch_reports_line():
    text = HEADER + "u1,s1,5,1,interaction item info,a,,\n" + "u1,s1,6,2,clickout item,b,a|b|c,100|90\n"
    with pytest.raises(LogFormatError, match="line 3"):
        parse_log(io.StringIO(text))


def test_empty_cells_are_absent():
    (a,) = parse_log(io.StringIO(HEADER + "u1,s1,5,1,search for destination,,,\n"))
    assert a.reference is None and a.impressions is None and a.prices is None


def test_custom_delimiter():
    text = HEADER.replace(",", ";") + "u1;s1;5;1;clickout item;b;a|b;1|2\n"
    (a,) = parse_log(io.StringIO(text), delimiter=";")
    assert a.impressions == ("a", "b")


ids = st.text(alphabet="abcxyz0123456789", min_size=1, max_size=6)


@st.composite
def action_lists(draw):
    n = draw(st.integers(0, 15))
    out = []
    for i in range(n):
        kind = draw(st.sampled_from(WHITELISTED + OTHER))
        imps = prices = None
        if kind == CLICKOUT and draw(st.booleans()):
            imps = tuple(draw(st.lists(ids, min_size=1, max_size=5)))
            prices = tuple(draw(st.integers(0, 500)) for _ in imps)
        ref = draw(st.one_of(st.none(), ids))
        out.append(Action(draw(ids), draw(ids), draw(st.integers(0, 2**40)), i, kind, ref, imps, prices))
    return out


@settings(max_examples=200, deadline=None)
@given(action_lists())
def test_serialize_parse_round_trip(actions):
    text = format_log(actions)
    assert parse_log(io.StringIO(text)) == actions
    assert format_log(parse_log(io.StringIO(text))) == text


# --- filter_hotel_actions ------------------------------------------------------


def test_whitelist_only_is_identity():
    actions = [act("s", i, kind) for i, kind in enumerate(WHITELISTED)]
    assert filter_hotel_actions(actions) == actions


def test_sort_order_change_removed():
    assert filter_hotel_actions([act("s", 1, "change of sort order", "price only")]) == []


def test_mixed_fixture_keeps_seven():
    kinds = WHITELISTED + ["clickout item"] + OTHER
    actions = [act("s", i, k) for i, k in enumerate(kinds)]
    kept = filter_hotel_actions(actions)
    assert len(kept) == 7
    assert kept == [a for a in actions if a.action_type in WHITELISTED]


def test_clickout_keeps_impressions():
    a = act("s", 1, CLICKOUT, "x", ("x", "y"), (1, 2))
    assert filter_hotel_actions([a])[0].impressions == ("x", "y")


@settings(max_examples=200, deadline=None)
@given(action_lists())
def test_filter_idempotent(actions):
    once = filter_hotel_actions(actions)
    assert filter_hotel_actions(once) == once


# --- split_sessions --------------------------------------------------------------


def _sessions(n, prefix="s"):
    return [session(f"{prefix}{i}", act(f"{prefix}{i}", 1), act(f"{prefix}{i}", 2)) for i in range(n)]


def test_split_band_1000_seed_7():
    train, test = split_sessions(_sessions(1000), 0.8, 7)
    assert 780 <= len(train) <= 820
    assert len(train) + len(test) == 1000


def test_split_deterministic():
    ss = _sessions(300)
    a = split_sessions(ss, 0.8, 11)
    b = split_sessions(ss, 0.8, 11)
    assert [s.session_id for s in a[0]] == [s.session_id for s in b[0]]


def test_split_ignores_input_order():
    ss = _sessions(200)
    a, _ = split_sessions(ss, 0.7, 5)
    b, _ = split_sessions(ss[::-1], 0.7, 5)
    assert {s.session_id for s in a} == {s.session_id for s in b}


def test_split_empty():
    assert split_sessions([], 0.8, 0) == ([], [])


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        split_sessions(_sessions(3), 1.0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(100, 600), st.floats(0.1, 0.9), st.integers(0, 10**6))
def test_split_fraction_within_two_points(n, ratio, seed):
    train, _ = split_sessions(_sessions(n), ratio, seed)
    assert abs(len(train) / n - ratio) <= 0.02


def test_split_atomic_over_synthetic_seeds():
    for seed in range(5):
        sessions = synthetic_sessions(SynthSpec(n_users=500, seed=seed))
        assert len(sessions) == 1000
        train, test = split_sessions(sessions, 0.8, seed)
        train_ids = {s.session_id for s in train}
        test_ids = {s.session_id for s in test}
        assert not train_ids & test_ids
        for s in train + test:
            # every action of a session travels with it
            assert all(a.session_id == s.session_id for a in s.actions)
        n_actions = sum(len(s) for s in sessions)
        assert sum(len(s) for s in train) + sum(len(s) for s in test) == n_actions


def test_split_matches_exhaustive_assignment_oracle():
    # for tiny inputs, the chosen train set must be exactly one of the C(n, k) subsets and the same
    # across every input ordering
    ss = _sessions(6)
    picks = set()
    for perm in itertools.permutations(ss):
        train, _ = split_sessions(list(perm), 0.5, 3)
        picks.add(frozenset(s.session_id for s in train))
    assert len(picks) == 1
    (chosen,) = picks
    assert len(chosen) == 3


# --- masking -----------------------------------------------------------------------


def test_only_last_clickout_masked():
    s = session(
        "s",
        act("s", 1),
        act("s", 3, CLICKOUT, "a", ("a", "b"), (1, 2)),
        act("s", 5),
        act("s", 9, CLICKOUT, "b", ("a", "b"), (1, 2)),
    )
    (m,), truth = mask_last_clickout([s])
    assert truth == {"s": "b"}
    assert m.actions[1].reference == "a"
    assert m.actions[3].reference is None
    assert s.actions[3].reference == "b"  # input untouched


def test_no_clickout_unchanged():
    s = session("s", act("s", 1), act("s", 2))
    (m,), truth = mask_last_clickout([s])
    assert truth == {} and m == s


def test_fixture_50_sessions_44_with_clickouts():
    ss = []
    for i in range(50):
        sid = f"s{i}"
        acts = [act(sid, 1)]
        if i < 44:
            acts.append(act(sid, 2, CLICKOUT, "x", ("x", "y"), (1, 2)))
        ss.append(session(sid, *acts))
    _, truth = mask_last_clickout(ss)
    assert len(truth) == 44


def test_masking_conservation_over_synthetic_seeds():
    for seed in range(5):
        sessions = synthetic_sessions(SynthSpec(n_users=500, seed=seed + 100))
        masked, truth = mask_last_clickout(sessions)
        with_clickout = sum(any(a.is_clickout and a.reference is not None for a in s.actions) for s in sessions)
        nulled = sum(
            (a.reference is None) != (b.reference is None)
            for s, m in zip(sessions, masked)
            for a, b in zip(s.actions, m.actions)
        )
        assert nulled == len(truth) == with_clickout
        for s, m in zip(sessions, masked):
            if s.session_id in truth:
                assert m.target().impressions is not None
                assert truth[s.session_id] == s.actions[m.target_index()].reference


def test_already_masked_session_is_left_alone():
    # a session whose final clickout is already unreferenced: the last *referenced* clickout is masked
    s = session("s", act("s", 1, CLICKOUT, "a", ("a",), (1,)), act("s", 2, CLICKOUT, None, ("a",), (1,)))
    (m,), truth = mask_last_clickout([s])
    assert truth == {"s": "a"}


# --- cold start -------------------------------------------------------------------


def test_cold_start_partition_cases():
    singles = [session(f"a{i}", act(f"a{i}", 1)) for i in range(3)]
    multis = _sessions(7, "b")
    assert partition_cold_start(singles) == (singles, [])
    assert partition_cold_start(multis) == ([], multis)
    one, many = partition_cold_start(singles[:1] + multis[:4] + singles[1:] + multis[4:])
    assert (len(one), len(many)) == (3, 7)


# --- splits bundle ----------------------------------------------------------------


def test_make_splits_disjoint_and_nested():
    sessions = synthetic_sessions(SynthSpec(n_users=300, seed=9))
    b = make_splits(sessions, 0.8, 4)
    parts = {name: {s.session_id for s in getattr(b, name)} for name in ("local_train", "local_test", "inner_train", "inner_test")}
    assert not parts["local_train"] & parts["local_test"]
    assert not parts["inner_train"] & parts["inner_test"]
    assert parts["inner_train"] | parts["inner_test"] == parts["local_train"]
    assert not (parts["inner_train"] | parts["inner_test"]) & parts["local_test"]
    masked = parts["local_test"] | parts["inner_test"]
    assert set(b.ground_truth) <= masked
    assert b.local_validation is b.inner_test
    # local_train keeps references, so the inner_test copy is masked but the local_train copy is not
    lt = {s.session_id: s for s in b.local_train}
    for s in b.inner_test:
        if s.session_id in b.ground_truth:
            assert lt[s.session_id].actions[s.target_index()].reference == b.ground_truth[s.session_id]


def test_ground_truth_round_trip(tmp_path):
    truth = {"s2": "b", "s1": "a"}
    write_ground_truth(truth, tmp_path / "t.csv")
    assert read_ground_truth(tmp_path / "t.csv") == truth
