import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clickrank.gbdt import (
    MF_FEATURES,
    FeatureRow,
    Tree,
    TreeEnsemble,
    TreeParams,
    best_split,
    extract_features,
    feature_importance,
    predict,
    rank_group,
    read_rows,
    train_reranker,
    train_trees,
    write_rows,
)
from clickrank.ingest import CLICKOUT, Action, Session
from clickrank.mf import LatentModel

from oracles import exhaustive_stump, full_sort, tree_traverse


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def threshold_data(rng, n=80, n_feat=3, f=1, thr=0.3):
    x = rng.normal(size=(n, n_feat))
    y = (x[:, f] > thr).astype(float)
    return x, y


def rows_for(rng, n_groups=30, size=6, informative=True):
    rows = []
    for g in range(n_groups):
        truth = int(rng.integers(size))
        for p in range(size):
            mf = rng.normal() + (2.5 if informative and p == truth else 0.0)
            rows.append(FeatureRow(f"g{g}", int(p == truth), mf, -1.0, 0.0, p, 0.0, f"it{p}"))
    return rows


# --- training ------------------------------------------------------------------------


def test_stump_matches_exhaustive_split():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = threshold_data(rng, f=int(seed % 3))
        model = train_trees(x, y, TreeParams(n_rounds=1, max_depth=1))
        p0 = y.mean()
        g, h = p0 - y, np.full(len(y), p0 * (1 - p0))
        gain, f, thr = exhaustive_stump(x, g, h)
        tree = model.trees[0]
        assert tree.feature[0] == f
        assert tree.threshold[0] == pytest.approx(thr)
        assert best_split(x, g, h, 1.0)[0] == pytest.approx(gain)


def test_zero_rounds_predict_base_score():
    rng = np.random.default_rng(0)
    x, y = threshold_data(rng)
    model = train_trees(x, y, TreeParams(n_rounds=0))
    assert model.base_score == pytest.approx(np.log(y.mean() / (1 - y.mean())))
    assert np.all(predict(model, x) == model.base_score)


def test_constant_features_give_base_rate():
    y = np.array([1, 0, 0, 1, 0, 0, 0, 1.0])
    x = np.ones((8, 3))
    model = train_trees(x, y, TreeParams(n_rounds=20, max_depth=4))
    assert np.allclose(sigmoid(predict(model, x)), y.mean(), atol=1e-6)


def test_degenerate_labels():
    with pytest.raises(ValueError, match="degenerate labels"):
        train_trees(np.ones((4, 2)), np.zeros(4))


def test_train_loss_never_increases():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 4))
    y = (x[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(float)
    model = train_trees(x, y, TreeParams(n_rounds=30, max_depth=3))
    losses = np.array(model.train_loss)
    assert len(losses) == 31
    assert np.all(np.diff(losses) <= 1e-12)


def test_training_deterministic():
    rng = np.random.default_rng(2)
    x, y = threshold_data(rng)
    a = train_trees(x, y, TreeParams(n_rounds=5, max_depth=3))
    b = train_trees(x, y, TreeParams(n_rounds=5, max_depth=3))
    assert a.dump() == b.dump()


# --- prediction ----------------------------------------------------------------------


def test_empty_ensemble_is_base_score():
    model = TreeEnsemble(("a",), [], 0.1, 0.7)
    assert predict(model, [3.0]) == 0.7


def test_single_leaf_additivity():
    t = Tree()
    t.add_leaf(2.5)
    model = TreeEnsemble(("a", "b"), [t], 0.3, -1.0)
    assert predict(model, [9.0, 9.0]) == pytest.approx(-1.0 + 0.3 * 2.5)


def test_predict_matches_hand_traversal():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(120, 4))
    y = (x[:, 0] * x[:, 1] > 0).astype(float)
    model = train_trees(x, y, TreeParams(n_rounds=5, max_depth=3))
    for row in x[:40]:
        expected = model.base_score + sum(model.shrinkage * tree_traverse(t, row) for t in model.trees)
        assert predict(model, row) == pytest.approx(expected, abs=1e-12)


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    x, y = threshold_data(rng)
    model = train_trees(x, y, TreeParams(n_rounds=4, max_depth=2), ("a", "b", "c"))
    model.save(tmp_path / "t.txt")
    back = TreeEnsemble.load(tmp_path / "t.txt")
    assert back.dump() == model.dump()
    assert np.array_equal(predict(back, x), predict(model, x))


# --- importance ----------------------------------------------------------------------


def test_importance_empty():
    assert feature_importance(TreeEnsemble(("a", "b"))) == {"a": 0, "b": 0}


def test_importance_of_stump():
    rng = np.random.default_rng(5)
    x, y = threshold_data(rng, f=2)
    model = train_trees(x, y, TreeParams(n_rounds=1, max_depth=1), ("a", "b", "c"))
    assert feature_importance(model) == {"a": 0, "b": 0, "c": 1}


def test_importance_sums_to_internal_nodes():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(150, 5))
    y = (x.sum(axis=1) > 0).astype(float)
    model = train_trees(x, y, TreeParams(n_rounds=8, max_depth=3))
    assert sum(feature_importance(model).values()) == sum(t.n_internal() for t in model.trees)


def test_mf_score_dominates_importance():
    rng = np.random.default_rng(7)
    rows = rows_for(rng, 80)
    for r in rows:
        r.session_position = float(rng.integers(-1, 5))
        r.user_bias = float(rng.normal())
        r.item_bias = float(rng.normal())
    imp = feature_importance(train_reranker(rows, TreeParams(n_rounds=20, max_depth=3)))
    assert imp["mf_score"] > max(v for k, v in imp.items() if k != "mf_score")


# --- features and ranking -----------------------------------------------------------


def feature_session():
    acts = [
        Action("u0", "s", 1, 1, "interaction item image", "i1"),
        Action("u0", "s", 2, 2, "interaction item info", "i2"),
        Action("u0", "s", 3, 3, "interaction item deal", "i1"),
        Action("u0", "s", 4, 4, CLICKOUT, None, tuple(f"i{j}" for j in range(25)), tuple(range(25))),
    ]
    return Session("s", "u0", acts)


def test_extract_features_positions():
    rng = np.random.default_rng(8)
    mf = LatentModel({"u0": 0}, {f"i{j}": j for j in range(25)}, rng.normal(size=(1, 3)), rng.normal(size=(25, 3)),
                     np.array([0.4]), rng.normal(size=25))
    rows = extract_features(feature_session(), mf, None, truth="i3")
    assert len(rows) == 25
    assert [r.impression_position for r in rows] == list(range(25))
    assert rows[1].session_position == 0  # i1 at the last pre-clickout action
    assert rows[2].session_position == 1
    assert rows[0].session_position == -1
    assert sum(r.label for r in rows) == 1 and rows[3].label == 1
    assert all(r.user_bias == 0.4 for r in rows)
    assert rows[5].item_bias == mf.item_bias[5]


def test_rank_group_single_row():
    model = TreeEnsemble(MF_FEATURES)
    assert rank_group(model, rows_for(np.random.default_rng(0), 1, 1)).items == ["it0"]


def test_rank_group_ties_follow_impression_position():
    rows = rows_for(np.random.default_rng(1), 1, 6)
    model = TreeEnsemble(MF_FEATURES)
    assert rank_group(model, rows[::-1]).items == [f"it{p}" for p in range(6)]


def test_rank_group_matches_full_sort():
    rng = np.random.default_rng(2)
    model = train_reranker(rows_for(rng, 40), TreeParams(n_rounds=10, max_depth=3))
    for g in range(10):
        rows = rows_for(rng, 1, 8)
        scores = [predict(model, r.vector()) for r in rows]
        assert rank_group(model, rows).items == full_sort([r.item_id for r in rows], scores)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5))
def test_rank_group_invariant_to_monotone_transform(a, b):
    rng = np.random.default_rng(3)
    model = train_reranker(rows_for(rng, 30), TreeParams(n_rounds=5, max_depth=2))
    rows = rows_for(rng, 1, 8)
    scaled = TreeEnsemble(model.feature_names, model.trees, model.shrinkage * a, model.base_score * a + b)
    assert rank_group(scaled, rows).items == rank_group(model, rows).items


def test_rows_round_trip(tmp_path):
    rows = rows_for(np.random.default_rng(4), 3, 4)
    write_rows(rows, tmp_path / "r.csv")
    assert read_rows(tmp_path / "r.csv") == rows
