import numpy as np
import pytest

from ruladapt import dann, losses
from ruladapt.data import (
    DomainDataset,
    EngineRun,
    SampleBatch,
    SyntheticConfig,
    SyntheticShift,
    fit_transform_minmax,
    gen_synthetic,
    label_rul,
)
from ruladapt.dann import (
    PAIR_HYPERPARAMS,
    DannHyperParams,
    build_model,
    domain_pass,
    evaluate,
    fit,
    forward_domain,
    forward_regression,
    make_opt_states,
    predict_rul,
    predict_windows,
    train_step,
)


def tiny_hp(**overrides):
    base = dict(lstm_layers=[6], lstm_dropout=0.0, f_units=5, reg_layers=[4], reg_dropout=0.0,
                dom_layers=[4], dom_dropout=0.0, alpha=0.8, batch_size=16, lr_reg=0.01,
                lr_dom=0.01, optimizer="sgd", l2=0.0, t_w=6, p=1, max_epochs=5, patience=3)
    base.update(overrides)
    return DannHyperParams(**base)


def toy_batches(rng, n=16, t_w=6, q=3):
    xs = rng.standard_normal((n, t_w, q))
    ys = rng.uniform(0.1, 0.9, n)
    xt = rng.standard_normal((n, t_w, q)) + 1.0
    src = SampleBatch(xs, ys, np.zeros(n), [("s", 1, t_w + 1 + i) for i in range(n)])
    tgt = SampleBatch(xt, None, np.ones(n), [("t", 1, t_w + 1 + i) for i in range(n)])
    return src, tgt


def prepared_synthetic(shift, seed, n_units=12, t_range=(50, 70), q=6, r_e=40.0):
    cfg = SyntheticConfig(n_units=n_units, t_range=t_range, q=q, knee=r_e, noise=0.05,
                          shift=shift)
    src_raw, tgt_raw = gen_synthetic(cfg, seed)

    def prep(ds, labeled=True):
        runs = [label_rul(r, r_e) for r in ds.runs]
        runs_n, scaler = fit_transform_minmax(runs, include_rul=True, rul_max=r_e)
        if not labeled:
            runs_n = [EngineRun(r.unit_id, r.features, None) for r in runs_n]
        return DomainDataset(ds.name, runs_n, scaler)

    return prep(src_raw), prep(tgt_raw, labeled=False)


class TestBuildModel:
    def test_pair_preset_fd004_fd001(self):
        hp = PAIR_HYPERPARAMS[("FD004", "FD001")]
        assert hp.lstm_layers == [100]
        assert hp.lstm_dropout == 0.5
        assert hp.f_units == 30
        assert hp.reg_layers == [20]
        assert hp.dom_layers == [20]
        assert hp.dom_dropout == 0.1
        assert hp.alpha == 1.0
        assert hp.batch_size == 512
        assert hp.lr_reg == 0.01 and hp.lr_dom == 0.01
        assert hp.optimizer == "sgd" and hp.l2 == 0.01
        m = build_model(hp, q=24, seed=0)
        assert m.feature_lstm.layers[0].W_f.shape == (100, 24)
        assert m.feature_dense.W.shape == (30, 100)
        assert m.regressor.layers[-1].W.shape == (1, 20)

    def test_pair_preset_fd001_fd004(self):
        hp = PAIR_HYPERPARAMS[("FD001", "FD004")]
        assert hp.alpha == 1.0
        assert hp.lr_dom == 0.1
        assert hp.reg_layers == [32, 32]
        assert hp.lstm_dropout == 0.7

    def test_same_seed_identical_parameters(self):
        hp = tiny_hp()
        a = build_model(hp, q=4, seed=9)
        b = build_model(hp, q=4, seed=9)
        for x, y in zip(a.all_arrays(), b.all_arrays()):
            assert np.array_equal(x, y)

    def test_invalid_hyperparams(self):
        with pytest.raises(ValueError):
            tiny_hp(alpha=-1.0)
        with pytest.raises(ValueError):
            tiny_hp(lstm_dropout=1.0)
        with pytest.raises(ValueError):
            tiny_hp(optimizer="adamw")


class TestForward:
    def test_fresh_model_predicts_zero(self, rng):
        m = build_model(tiny_hp(), q=3, seed=1)
        src, _ = toy_batches(rng)
        pred, _ = forward_regression(m, src)
        assert np.all(pred == 0.0)

    def test_eval_mode_deterministic(self, rng):
        m = build_model(tiny_hp(lstm_dropout=0.5, reg_dropout=0.3), q=3, seed=1)
        src, _ = toy_batches(rng)
        a, _ = forward_regression(m, src, train=False)
        b, _ = forward_regression(m, src, train=False)
        assert np.array_equal(a, b)

    def test_padded_windows_finite(self, rng):
        m = build_model(tiny_hp(), q=3, seed=1)
        x = np.vstack([np.zeros((4, 3)), rng.standard_normal((2, 3))])[None]
        pred, _ = forward_regression(m, x)
        assert np.isfinite(pred).all()

    def test_fresh_classifier_outputs_half(self, rng):
        m = build_model(tiny_hp(), q=3, seed=1)
        src, _ = toy_batches(rng)
        probs, _ = forward_domain(m, src)
        assert np.all(probs == 0.5)

    def test_probabilities_strictly_inside_unit_interval(self, rng):
        m = build_model(tiny_hp(), q=3, seed=1)
        # blow up the classifier output layer to saturate the sigmoid
        m.classifier.layers[-1].W[...] = 1e4
        m.classifier.layers[-1].b[...] = 1e4
        src, _ = toy_batches(rng)
        probs, _ = forward_domain(m, src)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)

    def test_fresh_classifier_near_chance_on_balanced_batch(self, rng):
        hp = tiny_hp()
        m = build_model(hp, q=3, seed=2)
        xs = rng.standard_normal((500, hp.t_w, 3))
        xt = rng.standard_normal((500, hp.t_w, 3)) + 0.3
        probs, _ = forward_domain(m, np.concatenate([xs, xt]))
        d = np.concatenate([np.zeros(500), np.ones(500)])
        acc = np.mean((probs >= 0.5) == (d >= 0.5))
        assert 0.35 <= acc <= 0.65


class TestTrainStep:
    def test_alpha_zero_leaves_features_bitwise_identical(self, rng):
        hp = tiny_hp(alpha=0.0)
        src, tgt = toy_batches(rng)
        m1 = build_model(hp, q=3, seed=4)
        m2 = build_model(hp, q=3, seed=4)
        o1 = make_opt_states(m1, hp)
        o2 = make_opt_states(m2, hp)
        train_step(m1, src, tgt, hp, o1)
        dann.regression_pass(m2, src, hp, o2["reg"], hp.lr_reg)
        for a, b in zip(m1.theta_f(), m2.theta_f()):
            assert np.array_equal(a, b)

    def test_one_step_descends_regression_loss(self, rng):
        hp = tiny_hp(lr_reg=1e-3, lr_dom=1e-3)
        src, tgt = toy_batches(rng)
        m = build_model(hp, q=3, seed=4)
        opt = make_opt_states(m, hp)
        before, _ = forward_regression(m, src)
        l0 = losses.regression_loss(before, src.y, hp.p)
        train_step(m, src, tgt, hp, opt)
        after, _ = forward_regression(m, src)
        assert losses.regression_loss(after, src.y, hp.p) < l0

    def test_pass_isolation(self, rng):
        hp = tiny_hp()
        src, tgt = toy_batches(rng)
        m = build_model(hp, q=3, seed=4)
        opt = make_opt_states(m, hp)
        theta_d_before = [a.copy() for a in m.theta_d()]
        dann.regression_pass(m, src, hp, opt["reg"], hp.lr_reg)
        assert all(np.array_equal(a, b) for a, b in zip(m.theta_d(), theta_d_before))
        theta_y_before = [a.copy() for a in m.theta_y()]
        x_cat = np.concatenate([src.x, tgt.x])
        d_cat = np.concatenate([src.d, tgt.d])
        domain_pass(m, x_cat, d_cat, hp, opt["dom"], hp.lr_dom)
        assert all(np.array_equal(a, b) for a, b in zip(m.theta_y(), theta_y_before))

    def test_frozen_features_classifier_separates_shifted_domains(self, rng):
        hp = tiny_hp(dom_layers=[16], lr_dom=0.01, alpha=1.0, optimizer="rmsprop")
        m = build_model(hp, q=3, seed=4)
        opt = make_opt_states(m, hp)
        xs = rng.standard_normal((32, hp.t_w, 3))
        xt = rng.standard_normal((32, hp.t_w, 3)) + 2.0  # separable input shift
        x_cat = np.concatenate([xs, xt])
        d_cat = np.concatenate([np.zeros(32), np.ones(32)])
        theta_f_before = [a.copy() for a in m.theta_f()]
        acc = 0.0
        for _ in range(1500):
            _, acc = domain_pass(m, x_cat, d_cat, hp, opt["dom"], hp.lr_dom,
                                 update_features=False)
        assert acc > 0.9
        assert all(np.array_equal(a, b) for a, b in zip(m.theta_f(), theta_f_before))

    def test_clipped_gradient_norm_bounded(self, rng):
        # with clip_norm=1 the applied update magnitude is at most lr
        hp = tiny_hp(lr_reg=0.5, optimizer="sgd")
        src, tgt = toy_batches(rng)
        m = build_model(hp, q=3, seed=4)
        opt = make_opt_states(m, hp)
        before = [a.copy() for a in m.theta_f() + m.theta_y()]
        dann.regression_pass(m, src, hp, opt["reg"], hp.lr_reg)
        delta = np.sqrt(sum(np.sum((a - b) ** 2)
                            for a, b in zip(m.theta_f() + m.theta_y(), before)))
        assert delta <= hp.lr_reg + 1e-9


class TestFit:
    def test_lr_zero_flat_loss_stops_at_patience(self):
        src, tgt = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        hp = tiny_hp(lr_reg=0.0, lr_dom=0.0, max_epochs=200, patience=20, batch_size=64)
        _, report = fit(src, tgt, hp, seed=0)
        assert report.stop_epoch == 20

    def test_fixed_seed_bit_identical_report(self):
        src, tgt = prepared_synthetic(SyntheticShift(), seed=1, n_units=6, t_range=(20, 25))
        hp = tiny_hp(max_epochs=3, patience=3, batch_size=64,
                     lstm_dropout=0.2, dom_dropout=0.2)
        _, r1 = fit(src, tgt, hp, seed=5)
        _, r2 = fit(src, tgt, hp, seed=5)
        assert r1.to_csv() == r2.to_csv()

    def test_report_row_per_epoch(self):
        src, tgt = prepared_synthetic(SyntheticShift(), seed=1, n_units=6, t_range=(20, 25))
        hp = tiny_hp(max_epochs=4, patience=10, batch_size=64)
        _, report = fit(src, tgt, hp, seed=2)
        assert [row.epoch for row in report.epochs] == [1, 2, 3, 4]
        csv = report.to_csv()
        assert csv.splitlines()[0] == "epoch,src_reg_loss,dom_loss,dom_acc,val_rmse"

    def test_target_labels_never_consumed(self):
        src, tgt = prepared_synthetic(SyntheticShift(), seed=1, n_units=6, t_range=(20, 25))
        assert all(r.rul is None for r in tgt.runs)
        windows = tgt.windows(6, domain=1, labeled=False)
        assert all(s.y is None for s in windows)
        hp = tiny_hp(max_epochs=2, patience=5, batch_size=64)
        fit(src, tgt, hp, seed=0)  # completes without touching labels

    def test_identical_domains_domain_accuracy_near_chance(self):
        src, tgt = prepared_synthetic(SyntheticShift(), seed=3, n_units=12, t_range=(50, 70))
        hp = tiny_hp(lstm_layers=[8], f_units=8, reg_layers=[8], dom_layers=[8],
                     alpha=0.8, batch_size=256, lr_reg=0.002, lr_dom=0.001,
                     optimizer="rmsprop", max_epochs=30, patience=30, t_w=6, p=2)
        _, report = fit(src, tgt, hp, seed=3)
        assert 0.4 < report.epochs[-1].dom_acc < 0.6


class StubModel:
    def __init__(self, value, t_w=6, label_scaler=None):
        self.value = value
        self.t_w = t_w
        self.label_scaler = label_scaler

    def predict_norm_batch(self, x):
        return np.full(len(x), self.value)


class TestPredictEvaluate:
    def test_denormalization_and_clipping(self):
        src, _ = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        samples = src.windows(6)
        high = predict_windows(StubModel(1.0), samples, src.scaler)
        assert np.allclose(high, 40.0)  # r_e of the prepared synthetic data
        low = predict_windows(StubModel(-0.1), samples, src.scaler)
        assert np.all(low == 0.0)

    def test_last_window_per_unit_count(self):
        src, _ = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        preds = predict_rul(StubModel(0.5), src, at="last_window_per_unit")
        assert len(preds) == 6

    def test_perfect_predictions_zero_metrics(self):
        src, _ = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        # every unit's final window has RUL exactly 0, so a 0-predictor is exact
        metrics = evaluate(StubModel(0.0), src, at="last_window_per_unit")
        assert metrics == {"rmse": 0.0, "nasa_score": 0.0}

    def test_constant_predictor_hand_metrics(self):
        src, _ = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        metrics = evaluate(StubModel(1.0), src, at="last_window_per_unit")
        truth = np.zeros(6)
        pred = np.full(6, 40.0)
        assert abs(metrics["rmse"] - losses.rmse(pred, truth)) < 1e-12
        assert abs(metrics["nasa_score"] - losses.nasa_score(pred, truth)) < 1e-12

    def test_repeated_evaluation_identical(self):
        src, _ = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        m = build_model(tiny_hp(), q=6, seed=1)
        m.label_scaler = src.scaler
        assert evaluate(m, src) == evaluate(m, src)

    def test_missing_labels_error(self):
        _, tgt = prepared_synthetic(SyntheticShift(), seed=0, n_units=6, t_range=(20, 25))
        with pytest.raises(ValueError):
            evaluate(StubModel(0.0), tgt)
