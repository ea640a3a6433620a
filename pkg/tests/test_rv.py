import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mustlab import datasets, must, nn, rv
from mustlab.datasets import DataError, Dataset, SyntheticSpec
from mustlab.must import TrainerConfig
from mustlab.numerics import Rng


@pytest.fixture(scope="module")
def easy():
    return datasets.gen_clusters2d(SyntheticSpec(n_per_class=50, shift=0.0, seed=1))


def balanced(n_per_class, classes=2, dim=2, seed=0):
    x = Rng(seed).normal(n_per_class * classes * dim).reshape(-1, dim)
    return Dataset(x, np.repeat(np.arange(classes), n_per_class), "d")


# -- split ----------------------------------------------------------------------


def test_half_split_is_stratified():
    train, val = rv.split(balanced(50), 0.5, seed=3)
    assert len(train) == len(val) == 50
    assert np.bincount(train.labels).tolist() == [25, 25]
    assert np.bincount(val.labels).tolist() == [25, 25]


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 30), st.integers(2, 4), st.floats(0.2, 0.8), st.integers(0, 1000))
def test_split_is_a_partition(n, classes, frac, seed):
    ds = balanced(n, classes, seed=seed)
    train, val = rv.split(ds, frac, seed)
    both = np.concatenate([train.features, val.features])
    key = lambda a: a[np.lexsort(a.T[::-1])]
    assert np.array_equal(key(both), key(ds.features))
    assert set(np.unique(train.labels)) == set(np.unique(val.labels)) == set(range(classes))


def test_split_is_deterministic_and_seeded():
    ds = balanced(40)
    a, b = rv.split(ds, 0.8, 7), rv.split(ds, 0.8, 7)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    c = rv.split(ds, 0.8, 8)
    assert not np.array_equal(a[1].features, c[1].features)


def test_unlabeled_split():
    ds = balanced(10).unlabeled()
    train, val = rv.split(ds, 0.8, 0)
    assert (len(train), len(val)) == (16, 4)
    assert train.is_unlabeled and val.is_unlabeled


def test_split_errors():
    with pytest.raises(ValueError):
        rv.split(balanced(10), 1.0, 0)
    # a single-sample class cannot populate both sides
    ds = Dataset(np.zeros((5, 1)), [0, 0, 0, 0, 1], "d")
    with pytest.raises(DataError, match="class 1"):
        rv.split(ds, 0.8, 0)


# -- reverse validation ----------------------------------------------------------------


def test_untrained_candidate_scores_the_initial_reverse_classifier(easy):
    sources, target, _ = easy
    cfg = TrainerConfig(steps=0, seed=2)
    result = rv.reverse_validate(cfg, sources, target, seed=5)
    # with no steps the reverse student is exactly its initialization
    _, student = must.init_networks(cfg, 2, 1)
    val = [rv.split(s, rv.DEFAULT_FRAC, 5, stream=k)[1] for k, s in enumerate(sources)]
    x = np.concatenate([v.features for v in val])
    y = np.concatenate([v.labels for v in val])
    expected, _ = nn.cross_entropy(nn.forward(student, x, 0, "eval")[0], y)
    assert result.rv_loss == float(expected)


def test_converged_candidate_beats_chance(easy):
    sources, target, _ = easy
    result = rv.reverse_validate(TrainerConfig(steps=1500, seed=1), sources, target, seed=1)
    assert 0.0 <= result.rv_loss < math.log(2)
    assert result.student_src_acc >= 0.95


def test_reverse_validation_is_deterministic(easy):
    sources, target, _ = easy
    cfg = TrainerConfig(steps=100, seed=3)
    a = rv.reverse_validate(cfg, sources, target, seed=2)
    b = rv.reverse_validate(cfg, sources, target, seed=2)
    assert a.rv_loss == b.rv_loss and a.student_src_acc == b.student_src_acc


def test_reverse_validation_refuses_target_labels(easy):
    sources, _, target_eval = easy
    with pytest.raises(ValueError, match="unlabeled"):
        rv.reverse_validate(TrainerConfig(steps=1), sources, target_eval)


def test_teacher_only_candidates_are_scored(easy):
    sources, target, _ = easy
    for variant in ("only-bn", "source-only"):
        r = rv.reverse_validate(TrainerConfig(steps=50, variant=variant), sources, target)
        assert np.isfinite(r.rv_loss) and 0.0 <= r.student_src_acc <= 1.0


# -- selection ------------------------------------------------------------------------


def test_single_candidate_is_selected(easy):
    sources, target, _ = easy
    cfg = TrainerConfig(steps=10)
    best, results = rv.select([cfg], sources, target)
    assert best is cfg and len(results) == 1


def test_duplicate_candidates_keep_first(easy):
    sources, target, _ = easy
    a = TrainerConfig(steps=10, lam=0.25)
    b = TrainerConfig(steps=10, lam=0.25)
    best, _ = rv.select([a, b], sources, target)
    assert best is a
    best, _ = rv.select([a, b], sources, target, criterion="student-src-acc")
    assert best is a


@pytest.mark.parametrize("criterion", rv.CRITERIA)
def test_converged_candidate_wins(easy, criterion):
    sources, target, _ = easy
    untrained = TrainerConfig(steps=0, seed=1)
    trained = TrainerConfig(steps=1500, seed=1)
    best, results = rv.select([untrained, trained], sources, target, seed=1, criterion=criterion)
    assert best is trained


def test_select_errors(easy):
    sources, target, _ = easy
    with pytest.raises(ValueError, match="empty"):
        rv.select([], sources, target)
    with pytest.raises(ValueError, match="criterion"):
        rv.select([TrainerConfig(steps=1)], sources, target, criterion="accuracy")


def test_results_csv(easy, tmp_path):
    sources, target, _ = easy
    grid = [TrainerConfig(steps=20, lam=lam) for lam in (0.25, 1.0)]
    _, results = rv.select(grid, sources, target)
    rv.write_results(results, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == rv.RESULT_COLUMNS
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "0.25"
