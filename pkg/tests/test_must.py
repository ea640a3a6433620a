import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mustlab import datasets, must, nn
from mustlab.datasets import Dataset, SyntheticSpec
from mustlab.must import ConfigError, TrainerConfig
from mustlab.numerics import Rng, finite_diff_gradient, relative_error

from conftest import random_net

SMALL = SyntheticSpec(n_per_class=40)


@pytest.fixture(scope="module")
def problem():
    return datasets.gen_clusters2d(SMALL)


def batch(seed, n=8, dim=3):
    r = Rng(seed, 99)
    return r.normal(n * dim).reshape(n, dim)


# -- confidence gate and prediction -----------------------------------------------


def test_confidence_mask_examples():
    probs = np.array([[0.5, 0.5], [0.3, 0.7], [0.05, 0.95]])
    assert must.confidence_mask(probs, 0.6).tolist() == [False, True, True]
    assert must.confidence_mask(probs, 0.0).all()
    assert not must.confidence_mask(np.full((4, 3), 1 / 3), 1.0).any()
    with pytest.raises(ConfigError):
        must.confidence_mask(probs, 1.01)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (6, 3), elements=st.floats(0.01, 1.0)),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_raising_threshold_never_admits_more(raw, a, b):
    probs = raw / raw.sum(axis=1, keepdims=True)
    lo, hi = min(a, b), max(a, b)
    assert must.confidence_mask(probs, hi).sum() <= must.confidence_mask(probs, lo).sum()


def test_predict_breaks_ties_toward_first_class():
    net = nn.Network.init(nn.parse_arch("2-softmax", 2), 1, Rng(0))
    net.params["0.weight"][:] = 0.0
    net.params["0.bias"][:] = 0.0
    assert must.predict(net, np.ones((3, 2))).tolist() == [0, 0, 0]
    net.params["0.bias"][:] = [0.0, 1.0]
    assert must.predict(net, np.ones((1, 2))).tolist() == [1]


def test_accuracy_is_mean_indicator():
    net = random_net(3, input_dim=2, arch="4-relu-2-softmax", num_domains=1)
    x = batch(1, n=50, dim=2)
    y = (x[:, 0] > 0).astype(int)
    pred = must.predict(net, x)
    assert must.accuracy(net, Dataset(x, y)) == pytest.approx(np.mean(pred == y))


# -- objectives ------------------------------------------------------------------


def test_logistic_teacher_gradient_by_hand():
    # single sigmoid unit: d CE / dw = mean (p - y) x, d CE / db = mean (p - y)
    net = nn.Network.init(nn.parse_arch("1-sigmoid", 1), 1, Rng(0))
    net.params["0.weight"][:] = 0.7
    net.params["0.bias"][:] = -0.2
    x = np.array([[1.0], [-2.0], [0.5]])
    y = np.array([1, 0, 0])
    p = 1.0 / (1.0 + np.exp(-(0.7 * x[:, 0] - 0.2)))
    loss, _, grads, _ = must.teacher_objective(net, x, y, 0)
    expected_loss = -np.mean(np.where(y == 1, np.log(p), np.log(1 - p)))
    assert loss == pytest.approx(expected_loss, rel=1e-12)
    assert grads["0.weight"][0, 0] == pytest.approx(np.mean((p - y) * x[:, 0]), rel=1e-12)
    assert grads["0.bias"][0] == pytest.approx(np.mean(p - y), rel=1e-12)


def composite_loss_fn(teacher, name, src_x, src_y, tgt_x, student_probs, mask, lam):
    src_l = np.asarray(src_x, dtype=np.longdouble)
    tgt_l = np.asarray(tgt_x, dtype=np.longdouble)

    def loss(theta):
        t = teacher.copy()
        t.params[name] = theta.reshape(t.params[name].shape)
        sp, _ = nn.forward(t, src_l, 0, "train")
        tp, _ = nn.forward(t, tgt_l, 1, "train")
        clf = nn.cross_entropy(sp, src_y)[0]
        reg = np.mean(np.abs(tp[mask] - student_probs[mask]))
        return clf + lam * reg

    return loss


@pytest.mark.parametrize("seed", range(4))
def test_composite_teacher_gradient_matches_finite_differences(seed):
    teacher = random_net(seed)
    src_x, tgt_x = batch(seed, 10), batch(seed + 100, 10) + 0.5
    src_y = Rng(seed, 5).integers(3, 10)
    tgt = nn.forward(teacher.copy(), tgt_x, 1, "train")
    student_probs = tgt[0] + 0.1 * Rng(seed, 6).uniform(30).reshape(10, 3)
    mask = np.arange(10) % 3 != 0
    _, _, grads, _ = must.teacher_objective(
        teacher.copy(), src_x, src_y, 0, tgt, student_probs, mask, 0.5
    )
    for name in teacher.params:
        fd = finite_diff_gradient(
            composite_loss_fn(teacher, name, src_x, src_y, tgt_x, student_probs, mask, 0.5),
            teacher.params[name],
        )
        assert relative_error(grads[name], fd).max() <= 1e-5, name


@pytest.mark.parametrize("seed", range(4))
def test_student_gradient_matches_finite_differences(seed):
    student = random_net(seed + 50, num_domains=1)
    x = batch(seed, 12)
    teacher_probs = Rng(seed, 7).uniform(36).reshape(12, 3)
    teacher_probs /= teacher_probs.sum(axis=1, keepdims=True)
    mask = np.arange(12) % 4 != 1
    _, grads, _ = must.student_objective(student.copy(), x, teacher_probs, mask)
    xl = np.asarray(x, dtype=np.longdouble)
    for name in student.params:

        def loss(theta, name=name):
            s = student.copy()
            s.params[name] = theta.reshape(s.params[name].shape)
            p, _ = nn.forward(s, xl, 0, "train")
            return np.mean(np.abs(p[mask] - teacher_probs[mask]))

        fd = finite_diff_gradient(loss, student.params[name])
        assert relative_error(grads[name], fd).max() <= 1e-5, name


# -- train_step ------------------------------------------------------------------


def step_inputs(seed=0):
    teacher = random_net(seed, input_dim=2, arch="bn-6-relu-2-softmax", num_domains=3)
    student = random_net(seed + 1, input_dim=2, arch="bn-6-relu-2-softmax", num_domains=1)
    src_x = batch(seed, 8, 2)
    src_y = np.array([0, 1] * 4)
    tgt_x = batch(seed + 1, 8, 2) + 1.0
    return teacher, student, src_x, src_y, tgt_x


def test_step_order_and_fixed_targets():
    teacher, student, src_x, src_y, tgt_x = step_inputs()
    cfg = TrainerConfig(lam=0.7, confidence_threshold=0.0, lr=0.05)
    t0, s0 = teacher.copy(), student.copy()
    must.train_step(teacher, student, src_x, src_y, 0, tgt_x, 2, cfg)

    # reference: pseudo-labels and student outputs both from the pre-step networks
    ref_t, ref_s = t0.copy(), s0.copy()
    tgt = nn.forward(ref_t, tgt_x, 2, "train")
    mask = np.ones(len(tgt_x), dtype=bool)
    _, s_grads, s_probs = must.student_objective(ref_s, tgt_x, tgt[0], mask)
    nn.sgd_momentum_step(ref_s, s_grads, cfg.lr, cfg.momentum)
    _, _, t_grads, _ = must.teacher_objective(ref_t, src_x, src_y, 0, tgt, s_probs, mask, cfg.lam)
    nn.sgd_momentum_step(ref_t, t_grads, cfg.lr, cfg.momentum)
    assert teacher.state_equal(ref_t)
    assert student.state_equal(ref_s)


def test_zero_lambda_teacher_matches_teacher_only_step():
    teacher, student, src_x, src_y, tgt_x = step_inputs(2)
    cfg = TrainerConfig(lam=0.0, confidence_threshold=0.0, lr=0.05)
    alone = teacher.copy()
    for _ in range(3):
        must.train_step(teacher, student, src_x, src_y, 0, tgt_x, 2, cfg)
        must.train_step(alone, None, src_x, src_y, 0, tgt_x, 2, cfg)
    assert teacher.state_equal(alone)


def test_unreachable_threshold_leaves_student_untouched():
    teacher, student, src_x, src_y, tgt_x = step_inputs(3)
    before = student.copy()
    rec = must.train_step(teacher, student, src_x, src_y, 0, tgt_x, 2,
                          TrainerConfig(confidence_threshold=1.0, lr=0.05))
    assert student.state_equal(before)
    assert rec.pct_confident == 0.0 and rec.loss_student == 0.0


def test_student_blind_to_source_batch():
    teacher, student, src_x, src_y, tgt_x = step_inputs(4)
    cfg = TrainerConfig(confidence_threshold=0.5, lr=0.05)
    s1, s2 = student.copy(), student.copy()
    must.train_step(teacher.copy(), s1, src_x, src_y, 0, tgt_x, 2, cfg)
    must.train_step(teacher.copy(), s2, 5.0 * src_x[::-1], src_y, 1, tgt_x, 2, cfg)
    assert s1.state_equal(s2)


def test_step_record_additivity():
    teacher, student, src_x, src_y, tgt_x = step_inputs(5)
    cfg = TrainerConfig(lam=0.25, confidence_threshold=0.5)
    rec = must.train_step(teacher, student, src_x, src_y, 0, tgt_x, 2, cfg)
    assert rec.loss_teacher_total == rec.loss_teacher_clf + 0.25 * rec.loss_student


def test_step_rejects_bad_inputs():
    teacher, student, src_x, src_y, tgt_x = step_inputs()
    cfg = TrainerConfig()
    with pytest.raises(ValueError):
        must.train_step(teacher, student, src_x, src_y, 5, tgt_x, 2, cfg)
    with pytest.raises(ValueError):
        must.train_step(teacher, student, src_x, np.full(8, -1), 0, tgt_x, 2, cfg)


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(lam=-0.1),
        dict(confidence_threshold=1.0000001),
        dict(lr=0.0),
        dict(momentum=1.0),
        dict(steps=-1),
        dict(batch_size=1),
        dict(variant="dann"),
        dict(teacher_arch="16-relu"),
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        TrainerConfig(**kwargs).validate()


# -- train ------------------------------------------------------------------------


def test_zero_steps_returns_initial_networks(problem):
    sources, target, _ = problem
    cfg = TrainerConfig(steps=0)
    pair = must.train(cfg, sources, target)
    t0, s0 = must.init_networks(cfg, 2, len(sources))
    assert pair.log == []
    assert pair.teacher.state_equal(t0) and pair.student.state_equal(s0)


@pytest.mark.parametrize("steps, every, rows", [(100, 50, 2), (101, 50, 3), (7, 50, 1), (30, 1, 30)])
def test_log_length(problem, steps, every, rows):
    sources, target, _ = problem
    pair = must.train(TrainerConfig(steps=steps, record_every=every), sources, target)
    assert len(pair.log) == rows == math.ceil(steps / every)
    assert pair.log[-1].step == steps


def test_training_is_deterministic(problem, tmp_path):
    sources, target, ev = problem
    cfg = TrainerConfig(steps=120, record_every=20, seed=4)
    a = must.train(cfg, sources, target, ev)
    b = must.train(cfg, sources, target, ev)
    assert a.teacher.state_equal(b.teacher) and a.student.state_equal(b.student)
    must.write_log(a.log, tmp_path / "a.csv")
    must.write_log(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_log_round_trip_and_additivity(problem, tmp_path):
    sources, target, ev = problem
    cfg = TrainerConfig(steps=200, record_every=25, lam=0.3)
    pair = must.train(cfg, sources, target, ev)
    must.write_log(pair.log, tmp_path / "log.csv")
    back = must.read_log(tmp_path / "log.csv")
    assert back == pair.log
    for r in back:
        assert abs(r.loss_teacher_total - (r.loss_teacher_clf + 0.3 * r.loss_student)) <= 1e-9
        assert 0.0 <= r.pct_confident <= 1.0
        assert r.teacher_tgt_acc is not None and r.student_tgt_acc is not None


def test_variants_shape_networks(problem):
    sources, target, _ = problem
    only_bn = must.train(TrainerConfig(steps=20, variant="only-bn"), sources, target)
    assert only_bn.student is None and only_bn.teacher.num_domains == 4
    base = must.train(TrainerConfig(steps=20, variant="source-only"), sources, target)
    assert base.student is None and base.teacher.num_domains == 1
    assert base.target_domain == 0 and only_bn.target_domain == 3
    assert all(r.loss_student == 0.0 for r in base.log)


def test_target_eval_only_fills_accuracy_columns(problem):
    sources, target, ev = problem
    cfg = TrainerConfig(steps=60, record_every=20)
    with_eval = must.train(cfg, sources, target, ev)
    without = must.train(cfg, sources, target)
    assert with_eval.teacher.state_equal(without.teacher)
    assert all(r.teacher_tgt_acc is None for r in without.log)


def test_snapshots(problem):
    sources, target, _ = problem
    pair = must.train(TrainerConfig(steps=50), sources, target, snapshot_every=10)
    assert pair.snapshot_steps == [10, 20, 30, 40, 50]
    assert pair.snapshots.shape == (5, len(target), 2)


def test_train_rejects_labeled_target(problem):
    sources, _, ev = problem
    with pytest.raises(ValueError, match="unlabeled"):
        must.train(TrainerConfig(steps=1), sources, ev)


def test_read_log_rejects_other_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        must.read_log(p)
