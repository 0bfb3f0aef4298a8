from dataclasses import replace

import numpy as np
import pytest

from dbilstm import training as T
from dbilstm.dataset import SplitPlan, make_split
from dbilstm.errors import ContractError, DataError, DivergenceError, ShapeError
from dbilstm.model import ArchitectureConfig, Model, count_params, init_model, lstm_names, ModelParameters
from dbilstm.preprocess import WindowConfig, WindowedDataset
from dbilstm.synthetic import SyntheticSpec, generate

TINY = ArchitectureConfig(
    channels=4, hidden=4, layers=1, dilation_schedule=[1], gestures=4, dropout_rate=0.0, fc_width=8, embedding_width=8
)
SMALL_WINDOWS = WindowConfig(window_ms=100, stride_ms=50, transient_s=0.5)


def toy_set(n=64, classes=4, T_=6, C=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    x = 0.1 * rng.normal(size=(n, T_, C))
    x[np.arange(n), :, labels] += 1.0
    return WindowedDataset(x, labels, np.zeros(n, dtype=np.int64))


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    spec = SyntheticSpec(n_subjects=3, n_gestures=3, fs=100.0, rep_seconds=1.0, channels=4, n_latent=3, seed=5)
    return generate(spec, tmp_path_factory.mktemp("synth"))


# ---------------------------------------------------------------- adam


def _one_param(value, trainable=True):
    from dbilstm.core_math import Tensor

    return ModelParameters({"w": Tensor(np.array(value, dtype=float), requires_grad=True)}, {"w": trainable})


def test_adam_first_step_closed_form():
    p = _one_param([0.0])
    T.adam_step(p, {"w": np.array([0.5])}, T.AdamState(T.AdamConfig()))
    assert abs(p["w"].data[0] - (-1e-3 * 0.5 / (0.5 + 1e-8))) < 1e-18
    assert abs(p["w"].data[0] + 1e-3) < 1e-10


def test_adam_two_steps_against_formula():
    cfg = T.AdamConfig()
    p = _one_param([1.0, -2.0])
    st = T.AdamState(cfg)
    g1, g2 = np.array([0.3, -1.0]), np.array([-0.1, 2.0])
    T.adam_step(p, {"w": g1}, st)
    T.adam_step(p, {"w": g2}, st)
    m = 0.1 * 0.9 * g1 + 0.1 * g2
    v = 0.001 * 0.999 * g1**2 + 0.001 * g2**2
    theta1 = np.array([1.0, -2.0]) - 1e-3 * g1 / (np.abs(g1) + 1e-8)
    expect = theta1 - 1e-3 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, expect, rtol=0, atol=1e-15)


def test_adam_zero_gradient_decays_moments():
    p = _one_param([1.0])
    st = T.AdamState(T.AdamConfig())
    T.adam_step(p, {"w": np.array([2.0])}, st)
    before = p["w"].data.copy()
    m1, v1 = st.m["w"].copy(), st.v["w"].copy()
    T.adam_step(p, {"w": np.array([0.0])}, st)
    np.testing.assert_allclose(st.m["w"], 0.9 * m1)
    np.testing.assert_allclose(st.v["w"], 0.999 * v1)
    p2 = _one_param([1.0])
    T.adam_step(p2, {"w": np.array([0.0])}, T.AdamState(T.AdamConfig()))
    assert p2["w"].data[0] == 1.0
    assert before.shape == (1,)


def test_adam_frozen_and_shape_errors():
    p = _one_param([1.0], trainable=False)
    T.adam_step(p, {"w": np.array([5.0])}, T.AdamState(T.AdamConfig()))
    assert p["w"].data[0] == 1.0
    with pytest.raises(ShapeError):
        T.adam_step(_one_param([1.0]), {"w": np.array([1.0, 2.0])}, T.AdamState(T.AdamConfig()))


def test_adam_huge_epsilon_limit():
    p = _one_param([0.0, 0.0])
    T.adam_step(p, {"w": np.array([0.5, -3.0])}, T.AdamState(T.AdamConfig(epsilon=1e6)))
    assert np.max(np.abs(p["w"].data)) < 1e-8


def test_adam_row_mask():
    from dbilstm.core_math import Tensor

    p = ModelParameters({"e": Tensor(np.ones((3, 2)), requires_grad=True)}, {"e": True}, {"e": np.array([False, False, True])})
    T.adam_step(p, {"e": np.ones((3, 2))}, T.AdamState(T.AdamConfig()))
    assert np.all(p["e"].data[:2] == 1.0) and np.all(p["e"].data[2] < 1.0)


# ---------------------------------------------------------------- plans and splits


def test_plan_defaults_and_validation():
    assert (T.TrainPlan.for_regime("pretrain_generalized").max_epochs, T.TrainPlan.for_regime("subject_specific").patience) == (200, 40)
    r = T.TrainPlan.for_regime("retrain_generalized")
    assert (r.max_epochs, r.patience) == (100, None)
    for bad in (dict(regime="nope"), dict(batch_size=0), dict(patience=0), dict(validation_fraction=1.0)):
        with pytest.raises(ContractError):
            T.TrainPlan(**bad)


def test_stratified_split_covers_every_class():
    labels = np.repeat(np.arange(5), 20)
    tr, va = T.stratified_split(labels, 0.1, np.random.default_rng(0))
    assert len(va) == 10 and sorted(set(labels[va])) == list(range(5))
    assert not set(tr) & set(va) and len(tr) + len(va) == 100


def test_empty_validation_is_rejected():
    data = WindowedDataset(np.zeros((1, 6, 4)), np.array([0]), np.zeros(1, dtype=np.int64))
    with pytest.raises(ContractError):
        T.train(Model.create(TINY, 0), data, T.TrainPlan(max_epochs=1))


def test_labels_out_of_range():
    data = toy_set()
    data.labels[0] = 9
    with pytest.raises(ContractError):
        T.train(Model.create(TINY, 0), data, T.TrainPlan(max_epochs=1))


# ---------------------------------------------------------------- loop behaviour


def test_overfits_separable_toy_set():
    model = Model.create(TINY, 0)
    data = toy_set()
    plan = T.TrainPlan(max_epochs=200, patience=None, batch_size=16)
    model, report = T.train(model, data, plan)
    assert report.best_val_acc == 1.0
    assert min(report.train_loss) < 0.05
    assert T.accuracy(model, data) == 1.0


def test_loss_drops_during_first_epoch():
    model = Model.create(TINY, 1)
    data = toy_set()
    plan = T.TrainPlan(max_epochs=1, patience=None, batch_size=8)
    state = T.init_state(model, data, plan)
    from dbilstm import core_math as cm
    from dbilstm.model import forward

    def full_loss():
        idx = state.train_idx
        return float(cm.softmax_cross_entropy(forward(data.windows[idx], model.params, TINY), data.labels[idx])[0].data)

    before = full_loss()
    T.run_epoch(model, data, plan, state)
    assert full_loss() < before


def test_patience_one_frozen_model_stops_at_epoch_two():
    model = Model.create(TINY, 0)
    model.params.freeze(model.params.names())
    _, report = T.train(model, toy_set(), T.TrainPlan(max_epochs=50, patience=1))
    assert report.epochs_run == 2
    assert report.best_epoch == 1
    assert report.stop_reason.startswith("early stop")


def test_best_weights_restored():
    model = Model.create(TINY, 3)
    snapshots = {}

    def hook(m, state):
        snapshots[state.epoch] = {n: a.copy() for n, a in m.params.arrays().items()}

    model, report = T.train(model, toy_set(seed=2), T.TrainPlan(max_epochs=8, patience=None, batch_size=16), on_epoch=hook)
    best = snapshots[report.best_epoch]
    for n, a in model.params.arrays().items():
        assert np.array_equal(a, best[n])
    assert report.best_val_acc == max(report.val_acc)


def test_keep_initial_scores_epoch_zero():
    model = Model.create(TINY, 0)
    model, _ = T.train(model, toy_set(), T.TrainPlan(max_epochs=200, patience=None, batch_size=16))
    trained = model.params.copy().arrays()
    data = toy_set(seed=1)
    plan = T.TrainPlan(regime="retrain_generalized", max_epochs=2, patience=None, keep_initial=True)
    model.params.freeze(model.params.names())
    model, report = T.train(model, data, plan)
    assert report.best_epoch == 0 and report.best_val_acc == 1.0
    assert all(np.array_equal(trained[n], a) for n, a in model.params.arrays().items())


def test_same_seed_same_report():
    reports = []
    for _ in range(2):
        model = Model.create(replace(TINY, dropout_rate=0.2), 4)
        _, rep = T.train(model, toy_set(), T.TrainPlan(max_epochs=5, patience=None, batch_size=16, seed=9))
        reports.append((rep.deterministic_view(), model.params.copy().arrays()))
    assert reports[0][0] == reports[1][0]
    for n in reports[0][1]:
        assert np.array_equal(reports[0][1][n], reports[1][1][n])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    model = Model.create(TINY, 0)
    data = toy_set()
    data.windows[:] = np.inf
    with pytest.raises(DivergenceError):
        T.train(model, data, T.TrainPlan(max_epochs=1))


def test_zero_epochs_is_a_no_op():
    model = Model.create(TINY, 0)
    before = model.params.arrays()
    _, report = T.train(model, toy_set(), T.TrainPlan(max_epochs=0))
    assert report.epochs_run == 0
    assert all(np.array_equal(before[n], a) for n, a in model.params.arrays().items())


def test_report_csv():
    rep = T.TrainReport(train_loss=[1.5, 0.5], val_acc=[0.25, 0.75])
    assert rep.to_csv().splitlines() == ["epoch,train_loss,val_acc", "1,1.5,0.25", "2,0.5,0.75"]


# ---------------------------------------------------------------- regimes


def _pretrain(synth, embedded, epochs=2):
    reps, _ = make_split(synth, SplitPlan(100), 0, synth.subjects[:2])
    plan = T.TrainPlan.for_regime("pretrain_generalized", max_epochs=epochs, batch_size=16)
    return T.pretrain(reps, TINY.__class__(**{**TINY.to_dict(), "gestures": 3}), plan, SMALL_WINDOWS, embedded=embedded)[0]


def _new_subject(synth, fraction=33):
    return make_split(synth, SplitPlan(fraction), 0, synth.subjects[2:])


def test_pretrain_generalized_rows(synth):
    cfg = replace(TINY, gestures=3)
    plan = T.TrainPlan.for_regime("pretrain_generalized", max_epochs=1, batch_size=16)
    model, _ = T.pretrain_generalized(synth, synth.subjects[:2], cfg, plan, SMALL_WINDOWS)
    assert model.cfg.use_embedding and model.cfg.n_embedding_rows == 2
    assert model.subject_rows == {synth.subjects[0]: 0, synth.subjects[1]: 1}
    assert all(model.params.trainable.values())
    data = T.windows_for(model, make_split(synth, SplitPlan(100), 0, synth.subjects[:2])[0], SMALL_WINDOWS)
    assert set(data.subject_rows.tolist()) == {0, 1}


def test_pretrain_missing_reps(synth):
    reps, _ = make_split(synth, SplitPlan(100), 0, synth.subjects[:2])
    reps = [r for r in reps if not (r.subject_id == synth.subjects[0] and r.rep_index == 5)]
    with pytest.raises(DataError):
        T.pretrain(reps, replace(TINY, gestures=3), T.TrainPlan(max_epochs=1), SMALL_WINDOWS, embedded=True)


def test_extend_embedding_mean_row():
    cfg = replace(TINY, use_embedding=True, n_embedding_rows=2, fc_width=2, embedding_width=2)
    base = Model.create(cfg, 0, ["a", "b"])
    base.params["embedding"].data[:] = [[1.0, 2.0], [3.0, 4.0]]
    ext = T.extend_embedding(base, "c")
    assert ext.params["embedding"].data[2].tolist() == [2.0, 3.0]
    assert ext.subject_rows["c"] == 2 and ext.cfg.n_embedding_rows == 3
    assert base.params["embedding"].data.shape == (2, 2)


def test_retrain_counts_for_full_size_model():
    cfg = ArchitectureConfig(use_embedding=True, n_embedding_rows=5)
    base = Model(cfg, init_model(cfg, 0), {f"s{i}": i for i in range(5)})
    ext = T.extend_embedding(base, "new")
    assert count_params(ext.params) == 78_753
    tl = Model(replace(cfg, use_embedding=False, n_embedding_rows=0), init_model(replace(cfg, use_embedding=False, n_embedding_rows=0), 0))
    tl.params.freeze(lstm_names(tl.cfg))
    assert count_params(tl.params) == 4_225


def test_retrain_isolates_old_rows_and_starts_from_mean(synth):
    base = _pretrain(synth, embedded=True)
    old = base.params["embedding"].data.copy()
    new_train, _ = _new_subject(synth)
    zero, _ = T.retrain_on_new_subject(base, new_train, T.TrainPlan.for_regime("retrain_generalized", max_epochs=0), SMALL_WINDOWS)
    for n in base.params.names():
        if n != "embedding":
            assert np.array_equal(zero.params[n].data, base.params[n].data)
    assert np.array_equal(zero.params["embedding"].data[-1], old.mean(axis=0))
    plan = T.TrainPlan.for_regime("retrain_generalized", max_epochs=3, batch_size=8, keep_initial=False)
    model, _ = T.retrain_on_new_subject(base, new_train, plan, SMALL_WINDOWS)
    emb = model.params["embedding"].data
    assert emb[:2].tobytes() == old.tobytes()
    assert not np.array_equal(emb[2], old.mean(axis=0))
    assert not np.array_equal(model.params["fc2.W"].data, base.params["fc2.W"].data)
    assert np.array_equal(base.params["embedding"].data, old)


def test_retrain_errors(synth):
    base = _pretrain(synth, embedded=True, epochs=1)
    plan = T.TrainPlan.for_regime("retrain_generalized", max_epochs=1)
    with pytest.raises(ContractError):
        T.retrain_on_new_subject(base, [], plan, SMALL_WINDOWS)
    new_train, _ = _new_subject(synth)
    wide = [replace(r, signal=np.hstack([r.signal, r.signal])) for r in new_train]
    with pytest.raises(ShapeError):
        T.retrain_on_new_subject(base, wide, plan, SMALL_WINDOWS)


def test_traditional_tl_freezes_lstm(synth):
    base = _pretrain(synth, embedded=False)
    new_train, _ = _new_subject(synth)
    model, _ = T.traditional_tl(
        base,
        new_train,
        T.TrainPlan.for_regime("traditional_tl_retrain", max_epochs=3, batch_size=8, keep_initial=False),
        SMALL_WINDOWS,
    )
    for n in lstm_names(base.cfg):
        assert model.params[n].data.tobytes() == base.params[n].data.tobytes()
        assert not model.params.trainable[n]
    assert not np.array_equal(model.params["fc1.W"].data, base.params["fc1.W"].data)
    with pytest.raises(ContractError):
        T.traditional_tl(base, [], T.TrainPlan.for_regime("traditional_tl_retrain"), SMALL_WINDOWS)


def test_subject_specific_has_no_embedding(synth):
    reps, _ = _new_subject(synth, 100)
    plan = T.TrainPlan.for_regime("subject_specific", max_epochs=1, batch_size=16)
    model, report = T.train_subject_specific(reps, replace(TINY, gestures=3), plan, SMALL_WINDOWS)
    assert not model.cfg.use_embedding and "embedding" not in model.params.names()
    assert report.epochs_run == 1
