import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickrank.ensemble import (
    MODES,
    STACK_FEATURES,
    borda_combine,
    build_stack_rows,
    route,
    stack_combine,
    train_stacker,
)
from clickrank.gbdt import TreeEnsemble, TreeParams, predict, rows_matrix
from clickrank.ingest import CLICKOUT, Action, Session
from clickrank.mf import LatentModel, rank_impressions
from clickrank.ranking import RankedList, rank_by_score

from oracles import borda_exhaustive, full_sort


def rl(items, sid="s", scores=None):
    return RankedList(sid, list(items), scores)


# --- Borda ---------------------------------------------------------------------------


def test_identical_lists():
    assert borda_combine([rl("abcd"), rl("abcd")]).items == list("abcd")


def test_reversed_lists_tie_to_first():
    out = borda_combine([rl("abc"), rl("cba")])
    assert out.items == list("abc")
    assert out.scores == [2, 2, 2]


def test_worked_example():
    out = borda_combine([rl("abcd"), rl("badc")])
    # m - r points: a = 3 + 2, b = 2 + 3, c = 1 + 0, d = 0 + 1
    assert dict(zip(out.items, out.scores)) == {"a": 5, "b": 5, "c": 1, "d": 1}
    assert out.items == list("abcd")


def test_mismatched_items_listed():
    with pytest.raises(ValueError, match=r"\['d', 'e'\]"):
        borda_combine([rl("abd"), rl("abe")])


def test_exhaustive_small_lists():
    for m in range(1, 5):
        items = "abcd"[:m]
        perms = list(itertools.permutations(items))
        for first in perms:
            for second in perms:
                out = borda_combine([rl(first), rl(second)])
                assert out.items == borda_exhaustive([first, second])
        # three voters over a sample of permutation triples
        for first, second, third in itertools.islice(itertools.product(perms, repeat=3), 300):
            assert borda_combine([rl(first), rl(second), rl(third)]).items == borda_exhaustive([first, second, third])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(2, 5), st.integers(0, 10**6))
def test_borda_properties(m, k, seed):
    rng = np.random.default_rng(seed)
    items = [f"x{i}" for i in range(m)]
    lists = [rl([items[j] for j in rng.permutation(m)]) for _ in range(k)]
    out = borda_combine(lists)
    assert sorted(out.items) == sorted(items)
    # anonymity: reordering voters only permutes items within equal-point groups
    shuffled = borda_combine([lists[0]] + [lists[j] for j in rng.permutation(range(1, k))])
    assert shuffled.items == out.items
    other = borda_combine([lists[j] for j in rng.permutation(k)])
    pts = dict(zip(out.items, out.scores))
    assert [pts[i] for i in other.items] == out.scores


# --- stacking ------------------------------------------------------------------------


def base_preds(rng, n_sessions=40, size=8):
    mf, rnn, truth, imps = {}, {}, {}, {}
    for k in range(n_sessions):
        sid = f"s{k}"
        items = [f"i{j}" for j in rng.permutation(max(20, size))[:size]]
        t = items[int(rng.integers(size))]
        mf_s = [rng.normal() + (1.5 if it == t else 0) for it in items]
        rnn_s = [rng.normal() + (1.0 if it == t else 0) for it in items]
        mf[sid] = rank_by_score(sid, items, mf_s)
        rnn[sid] = rank_by_score(sid, items, rnn_s)
        truth[sid] = t
        imps[sid] = items
    return mf, rnn, truth, imps


def test_stack_rows_shape():
    mf, rnn, truth, imps = base_preds(np.random.default_rng(0), 5, 25)
    rows = build_stack_rows(mf, rnn, truth, imps)
    assert len(rows) == 125
    for sid in mf:
        group = [r for r in rows if r.group_id == sid]
        assert len(group) == 25
        assert sum(r.label for r in group) == 1
        assert next(r for r in group if r.item_id == mf[sid].items[0]).mf_rank == 1
        assert [r.impression_position for r in group] == list(range(25))
        assert all(1 <= r.mf_rank <= 25 and 1 <= r.rnn_rank <= 25 for r in group)


def test_stack_rows_require_both_models():
    mf, rnn, truth, imps = base_preds(np.random.default_rng(1), 3)
    del rnn["s1"]
    with pytest.raises(ValueError, match="s1"):
        build_stack_rows(mf, rnn, truth, imps)


def test_infinite_scores_map_to_finite_sentinel():
    mf = rl("ab", scores=[1.0, -np.inf])
    rnn = rl("ab", scores=[0.0, -1.0])
    rows = build_stack_rows({"s": mf}, {"s": rnn}, {"s": "a"}, {"s": ["a", "b"]})
    assert all(np.isfinite(r.mf_score) for r in rows)


def test_stack_combine_single_and_empty_model():
    model = TreeEnsemble(STACK_FEATURES, [], 0.1, 0.0)
    one = stack_combine(model, rl("a", scores=[1.0]), rl("a", scores=[0.0]), ["a"])
    assert one.items == ["a"]
    out = stack_combine(model, rl("cab", scores=[3, 2, 1]), rl("bca", scores=[3, 2, 1]), list("abc"))
    assert out.items == list("abc")


def test_stack_combine_matches_full_sort():
    rng = np.random.default_rng(2)
    mf, rnn, truth, imps = base_preds(rng)
    model = train_stacker(build_stack_rows(mf, rnn, truth, imps), TreeParams(n_rounds=10, max_depth=3))
    mf2, rnn2, truth2, imps2 = base_preds(rng, 10)
    for sid in mf2:
        rows = build_stack_rows({sid: mf2[sid]}, {sid: rnn2[sid]}, {}, {sid: imps2[sid]})
        x, _ = rows_matrix(rows, STACK_FEATURES)
        scores = [predict(model, r) for r in x]
        assert stack_combine(model, mf2[sid], rnn2[sid], imps2[sid]).items == full_sort(imps2[sid], scores)


# --- routing ---------------------------------------------------------------------------


def sess(n_before, imps=("x", "y", "z")):
    acts = [Action("u0", "s", i, i, "interaction item image", imps[i % len(imps)]) for i in range(n_before)]
    acts.append(Action("u0", "s", n_before, n_before, CLICKOUT, None, tuple(imps), tuple(range(len(imps)))))
    return Session("s", "u0", acts)


def rankers():
    rng = np.random.default_rng(3)
    model = LatentModel({"u0": 0}, {"x": 0, "y": 1, "z": 2}, rng.normal(size=(1, 2)), rng.normal(size=(3, 2)), [0.0], rng.normal(size=3))

    def mf(s):
        return rank_impressions(model, None, s.user_id, s.target().impressions, session_id=s.session_id)

    def rnn(s):
        return rank_by_score(s.session_id, list(s.target().impressions), [0.1, 0.5, 0.3])

    return model, mf, rnn


def test_cold_start_emits_impressions():
    _, mf, rnn = rankers()
    stacker = TreeEnsemble(STACK_FEATURES, [], 0.1, 0.0)
    for mode in MODES:
        assert route(sess(0), mode, mf, rnn, stacker).items == ["x", "y", "z"]


def test_mf_only_passes_through():
    model, mf, rnn = rankers()
    s = sess(1)
    assert route(s, "mf-only", mf, rnn).items == rank_impressions(model, None, "u0", ["x", "y", "z"]).items


def test_borda_route_is_borda_combine():
    _, mf, rnn = rankers()
    s = sess(2)
    assert route(s, "borda", mf, rnn).items == borda_combine([mf(s), rnn(s)]).items


def test_route_stamps_submission_fields():
    _, mf, rnn = rankers()
    s = sess(2)
    out = route(s, "rnn-only", mf, rnn)
    assert (out.user_id, out.timestamp, out.step) == ("u0", 2, 2)


def test_route_never_drops_items():
    rng = np.random.default_rng(4)
    _, mf, rnn = rankers()
    mf_p, rnn_p, truth, imps = base_preds(rng)
    stacker = train_stacker(build_stack_rows(mf_p, rnn_p, truth, imps), TreeParams(n_rounds=3, max_depth=2))
    for n in range(0, 4):
        s = sess(n)
        for mode in MODES:
            out = route(s, mode, mf, rnn, stacker)
            assert sorted(out.items) == ["x", "y", "z"]


def test_route_requires_target():
    s = Session("s", "u", [Action("u", "s", 1, 1, "interaction item info", "a")])
    with pytest.raises(ValueError):
        route(s, "borda")
