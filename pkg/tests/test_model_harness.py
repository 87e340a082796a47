import csv
import dataclasses
import io
import logging

import numpy as np
import pytest

from rtnag import harness as H
from rtnag import tnode
from rtnag.cohort import CohortConfig, generate_cohort
from rtnag.config import ExperimentConfig, LossConfig, ModelConfig
from rtnag.model import RTNAG, init_params


def small_cfg(**kw):
    model = kw.pop("model", ModelConfig(q=3, ode_hidden=8))
    return ExperimentConfig(epochs=kw.pop("epochs", 2), folds=kw.pop("folds", 2),
                            batch_size=kw.pop("batch_size", 8), model=model, **kw)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortConfig(n_subjects=20, seed=3))


@pytest.fixture(scope="module")
def model(cohort):
    return RTNAG.create(ModelConfig(q=3, ode_hidden=8, init_std=0.3), 1, cohort)


class TestBatching:
    def test_holds_out_last_visit(self, cohort, model):
        subj = cohort.subjects[0]
        b = model.batch([subj])
        assert b.observed.sum() == len(subj.visits) - 1
        assert b.target_label[0] == subj.visits[-1].label
        assert b.target_time[0] == pytest.approx((subj.visits[-1].age - model.age_mean) / model.age_std)

    def test_padding_does_not_change_predictions(self, cohort, model):
        subs = cohort.subjects[:6]
        together = model.predict(model.batch(subs))["final_probs"]
        for i, s in enumerate(subs):
            alone = model.predict(model.batch([s]))["final_probs"]
            np.testing.assert_allclose(together[i], alone[0], atol=1e-12)

    def test_single_visit_subject_rejected(self, cohort, model):
        s = dataclasses.replace(cohort.subjects[0], visits=cohort.subjects[0].visits[:1])
        with pytest.raises(ValueError):
            model.batch([s])


def test_save_load_round_trip(tmp_path, cohort, model):
    path = tmp_path / "m.bin"
    model.save(path)
    back = RTNAG.load(path)
    assert back.cfg == model.cfg and back.age_mean == model.age_mean
    for k, v in model.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    batch = model.batch(cohort.subjects[:4])
    assert back.predict(batch)["final_probs"].tobytes() == \
        model.predict(batch)["final_probs"].tobytes()


def test_save_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError):
        RTNAG.load(path)


def test_gate_removed_trajectory_is_pure_evolution(cohort):
    cfg = ModelConfig(q=3, ode_hidden=8, init_std=0.3, gate="none")
    m = RTNAG.create(cfg, 2, cohort)
    subj = cohort.subjects[1]
    batch = m.batch([subj])
    p = {k: np.asarray(v) for k, v in m.params.items()}
    out = m.forward(p, batch)
    h = np.eye(3)[None]
    t_prev = batch.t_start
    n = int(batch.observed.sum())
    for j in range(n):
        t = batch.times[:, j]
        h = tnode.evolve(h, t_prev, t, tnode.time_coefficient(t_prev, p), p, cfg.solver).data
        np.testing.assert_allclose(out.states[j].data, h, atol=1e-12)
        t_prev = t
    h = tnode.evolve(h, t_prev, batch.target_time, tnode.time_coefficient(t_prev, p), p,
                     cfg.solver).data
    np.testing.assert_allclose(out.final_state.data, h, atol=1e-12)


class TestTrain:
    def test_zero_lr_leaves_params(self, cohort):
        cfg = small_cfg(lr=0.0, epochs=3)
        model, curve = H.train(cfg, cohort.subjects[:10])
        fresh = init_params(cfg.model, cfg.seed)
        assert all(model.params[k].tobytes() == fresh[k].tobytes() for k in fresh)
        assert len(curve) == 3

    def test_overfit_five_subjects(self, cohort):
        cfg = small_cfg(epochs=200, lr=1e-2, batch_size=5)
        _, curve = H.train(cfg, cohort.subjects[:5])
        assert curve[-1] <= 0.5 * curve[0]

    def test_same_seed_bit_identical(self, cohort):
        a, ca = H.train(small_cfg(), cohort.subjects[:10])
        b, cb = H.train(small_cfg(), cohort.subjects[:10])
        assert ca == cb
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            H.train(small_cfg(), [])

    def test_divergence_reports_epoch(self, cohort):
        cfg = small_cfg(lr=1e300, epochs=5, loss=LossConfig(alpha=(1.0, 1.0, 1.0)))
        with pytest.raises(H.DivergenceError) as info:
            H.train(cfg, cohort.subjects[:8])
        assert 0 <= info.value.epoch < 5

    def test_alpha_defaults_to_inverse_frequency(self, cohort):
        cfg = H._fill_alpha(small_cfg(), cohort.subjects)
        assert np.mean(cfg.loss.alpha) == pytest.approx(1.0)
        assert small_cfg().loss.alpha is None


def test_evaluate_metric_ranges(cohort, model):
    out = model and H.evaluate(model, cohort.subjects)
    assert set(out) == set(H.METRIC_COLUMNS)
    assert 0 <= out["mauc"] <= 1 and 0 <= out["f1"] <= 1


class TestFolds:
    def test_partition(self):
        ids = list(range(23))
        folds = H.subject_folds(ids, 5, seed=1)
        assert [len(f) for f in folds] == [4, 4, 4, 4, 7]
        assert sorted(np.concatenate(folds).tolist()) == ids

    def test_seeded(self):
        a = H.subject_folds(range(30), 3, 0)
        b = H.subject_folds(range(30), 3, 0)
        c = H.subject_folds(range(30), 3, 1)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_too_many_folds(self):
        with pytest.raises(ValueError):
            H.subject_folds(range(3), 5, 0)


@pytest.fixture(scope="module")
def cv_report(cohort):
    return H.crossvalidate(small_cfg(), cohort)


class TestReport:
    def test_rows_per_fold(self, cv_report):
        assert [r["fold"] for r in cv_report.rows] == [0, 1]
        assert len(cv_report.curves) == 2

    def test_header_exact(self, tmp_path, cv_report):
        H.write_report(cv_report, tmp_path)
        first = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert first == ("experiment,case,fold,mauc,precision,recall,f1,mape_mmse,mape_adas11,"
                         "mape_adas13,r2_mmse,r2_adas11,r2_adas13,wall_s")

    def test_summary_recomputable_from_csv(self, tmp_path, cv_report):
        H.write_report(cv_report, tmp_path)
        rows = list(csv.DictReader(io.StringIO((tmp_path / "metrics.csv").read_text())))
        stats = cv_report.summary()[("cv", "full")]
        for m in H.METRIC_COLUMNS:
            vals = [float(r[m]) for r in rows]
            mean = sum(vals) / len(vals)
            std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
            assert stats[m][0] == pytest.approx(mean, abs=1e-12)
            assert stats[m][1] == pytest.approx(std, abs=1e-12)
        text = (tmp_path / "summary.txt").read_text()
        assert f"{stats['mauc'][0]:.4f} ± {stats['mauc'][1]:.4f}" in text

    def test_loss_curve_files(self, tmp_path, cv_report):
        H.write_report(cv_report, tmp_path)
        lines = (tmp_path / "loss_cv_full_fold1.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 3

    def test_rerun_identical_bytes(self, tmp_path, cohort, cv_report):
        H.write_report(cv_report, tmp_path / "a")
        H.write_report(H.crossvalidate(small_cfg(), cohort), tmp_path / "b")
        for name in ("metrics.csv", "loss_cv_full_fold0.csv", "summary.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_wall_time_optional(self, cohort):
        r = H.crossvalidate(small_cfg(record_wall_time=True, epochs=1), cohort)
        assert all(row["wall_s"] > 0 for row in r.rows)

    def test_leakage_guard(self, cohort, monkeypatch):
        ids = [s.subject_id for s in cohort.subjects]
        monkeypatch.setattr(H, "subject_folds", lambda *a: [np.array(ids), np.array(ids)])
        # every subject lands in test, so train is empty; leakage never reaches training
        with pytest.raises((H.LeakageError, ValueError)):
            H.crossvalidate(small_cfg(), cohort)


class TestSweeps:
    def test_missing_rate_zero_equals_cv(self, cohort, cv_report):
        r = H.sweep_missing(small_cfg(), cohort, rates=(0.0, 0.5))
        zero = r.select("missing", "rate=0")
        for a, b in zip(zero, cv_report.rows):
            assert all(a[m] == b[m] or (np.isnan(a[m]) and np.isnan(b[m]))
                       for m in H.METRIC_COLUMNS)
        assert set(r.notes["missing_mauc"]) == {"0", "0.5"}
        assert r.notes["missing_rate_overall"]["0.5"] > r.notes["missing_rate_overall"]["0"]

    def test_missing_rejects_bad_rate(self, cohort):
        with pytest.raises(ValueError):
            H.sweep_missing(small_cfg(), cohort, rates=(1.0,))

    def test_default_grid(self):
        assert H.MISSING_RATES == (0.0, 0.1, 0.3, 0.5)

    def test_monotone_trend(self):
        assert H.monotone_trend([0.9, 0.91, 0.85, 0.86])
        assert not H.monotone_trend([0.9, 0.95])

    def test_truncation(self, cohort):
        one, n1 = H.truncate_horizon(cohort, 1)
        assert all(max(s.months) <= 12 for s in one.subjects) and n1 == len(one)
        five, n5 = H.truncate_horizon(cohort, 5)
        assert n5 == len(cohort)
        assert [s.visits for s in five.subjects] == [s.visits for s in cohort.subjects]

    def test_horizon_five_is_full_evaluation(self, cohort, cv_report):
        r = H.sweep_horizon(small_cfg(), cohort, years=(5,))
        for a, b in zip(r.select("horizon", "years=5"), cv_report.rows):
            assert all(a[m] == b[m] or (np.isnan(a[m]) and np.isnan(b[m]))
                       for m in H.METRIC_COLUMNS)
        assert r.notes["eligible_subjects"] == {"5": 20}

    def test_horizon_skips_thin_windows(self, cohort, caplog):
        with caplog.at_level(logging.WARNING):
            r = H.sweep_horizon(small_cfg(folds=19), cohort, years=(1,))
        eligible = r.notes["eligible_subjects"]["1"]
        if eligible < 19:
            assert not r.rows and "skipped" in caplog.text

    def test_one_row_per_horizon_fold(self, cohort):
        r = H.sweep_horizon(small_cfg(epochs=1), cohort, years=(2, 3))
        assert [(x["case"], x["fold"]) for x in r.rows] == \
            [("years=2", 0), ("years=2", 1), ("years=3", 0), ("years=3", 1)]


class TestAblation:
    def test_full_case_is_default_pipeline(self, cohort, cv_report):
        r = H.ablate(small_cfg(), cohort, cases=("full",))
        for a, b in zip(r.rows, cv_report.rows):
            assert all(a[m] == b[m] or (np.isnan(a[m]) and np.isnan(b[m]))
                       for m in H.METRIC_COLUMNS)
        assert r.curves[("ablation", "full", 0)] == cv_report.curves[("cv", "full", 0)]

    def test_unknown_case(self, cohort):
        with pytest.raises(ValueError, match="unknown ablation case"):
            H.ablate(small_cfg(), cohort, cases=("bogus",))

    @pytest.mark.parametrize("case,field,value", [
        ("no-rmm-vector-input", "encoder", "flat"), ("plain-node", "time_aware", False),
        ("no-argru", "gate", "none"), ("plain-gate", "gate", "plain"),
        ("euclidean", "manifold", False)])
    def test_case_flags(self, case, field, value):
        assert getattr(H.ablation_config(small_cfg(), case).model, field) == value

    def test_shared_modules_share_init(self):
        base = init_params(ModelConfig(q=3, ode_hidden=8), 4)
        plain = init_params(ModelConfig(q=3, ode_hidden=8, gate="plain"), 4)
        assert all(base[k].tobytes() == plain[k].tobytes() for k in base)

    def test_every_case_runs(self, cohort):
        r = H.ablate(small_cfg(epochs=1), cohort)
        assert {row["case"] for row in r.rows} == set(H.ABLATION_CASES)
        assert all(np.isfinite(row["mape_mmse"]) for row in r.rows)
