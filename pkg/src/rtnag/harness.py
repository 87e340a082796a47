"""Training, cross-validation, experiment sweeps and CSV reporting."""
from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cohort import SCORE_NAMES, Cohort, Subject, content_hash, inject_missingness
from .config import ExperimentConfig
from .model import RTNAG, init_params
from .objectives import (UndefinedMetricError, class_weights, mape, mauc,
                         precision_recall_f1, r2)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("mauc", "precision", "recall", "f1",
                  "mape_mmse", "mape_adas11", "mape_adas13",
                  "r2_mmse", "r2_adas11", "r2_adas13")
CSV_HEADER = ("experiment", "case", "fold") + METRIC_COLUMNS + ("wall_s",)
MISSING_RATES = (0.0, 0.1, 0.3, 0.5)
HORIZONS = (1, 2, 3, 4, 5)
ABLATION_CASES = ("no-rmm-vector-input", "plain-node", "no-argru", "plain-gate", "full",
                  "euclidean")
TREND_TOLERANCE = 0.02


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value}) at epoch {epoch}")
        self.epoch = epoch


class LeakageError(AssertionError):
    pass


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -------------------------------------------------------------------- train

def _fill_alpha(cfg: ExperimentConfig, subjects: Sequence[Subject]) -> ExperimentConfig:
    if cfg.loss.alpha is not None:
        return cfg
    labels = [v.label for s in subjects for v in s.visits if v.label_mask]
    cfg = copy.deepcopy(cfg)
    cfg.loss.alpha = class_weights(labels, cfg.model.n_classes)
    return cfg


def _age_stats(subjects: Sequence[Subject]) -> tuple[float, float]:
    ages = np.array([v.age for s in subjects for v in s.visits])
    std = float(ages.std())
    return float(ages.mean()), std if std > 0 else 1.0


def train(cfg: ExperimentConfig, subjects: Sequence[Subject], seed: int | None = None
          ) -> tuple[RTNAG, list[float]]:
    """Fit a model with Adam; returns it with the mean loss of each epoch."""
    subjects = list(subjects)
    if not subjects:
        raise ValueError("training split is empty")
    seed = cfg.seed if seed is None else seed
    cfg = _fill_alpha(cfg, subjects)
    age_mean, age_std = _age_stats(subjects)
    model = RTNAG(cfg.model, init_params(cfg.model, seed), age_mean, age_std)
    opt = Adam(model.params, cfg.lr)
    rng = np.random.default_rng([seed, 0xBA7C])
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(subjects))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [subjects[i] for i in order[start:start + cfg.batch_size]]
            batch = model.batch(chunk)
            p = T.parameters(model.params)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = model.loss(p, batch, cfg.loss, cfg.final_only, cfg.aux_ce)
            except ValueError as err:
                if opt.t == 0:
                    raise
                # updated weights overflowed inside the forward pass
                raise DivergenceError(epoch, float("nan")) from err
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            grads = T.grad(loss, p)
            if cfg.lr > 0:
                opt.step(model.params, grads)
                if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                    raise DivergenceError(epoch, float("nan"))
            total += value * len(chunk)
            count += len(chunk)
        curve.append(total / count)
    return model, curve


# ----------------------------------------------------------------- evaluate

def evaluate(model: RTNAG, subjects: Sequence[Subject], batch_size: int = 64
             ) -> dict[str, float]:
    """Metrics of the held-out last visit predicted from its predecessors."""
    probs, labels, lmask, preds, scores, smask = [], [], [], [], [], []
    subjects = list(subjects)
    for start in range(0, len(subjects), batch_size):
        batch = model.batch(subjects[start:start + batch_size])
        out = model.predict(batch)
        probs.append(out["final_probs"])
        preds.append(out["final_scores"])
        labels.append(batch.target_label)
        lmask.append(batch.target_label_mask)
        scores.append(batch.target_scores)
        smask.append(batch.target_score_mask)
    probs, preds = np.concatenate(probs), np.concatenate(preds)
    labels, lmask = np.concatenate(labels), np.concatenate(lmask).astype(bool)
    scores, smask = np.concatenate(scores), np.concatenate(smask)
    out: dict[str, float] = {}
    try:
        out["mauc"] = mauc(probs[lmask], labels[lmask])
    except UndefinedMetricError:
        out["mauc"] = float("nan")
    out["precision"], out["recall"], out["f1"] = precision_recall_f1(
        probs[lmask].argmax(axis=1), labels[lmask])
    for r, name in enumerate(SCORE_NAMES):
        for metric, fn in (("mape", mape), ("r2", r2)):
            try:
                out[f"{metric}_{name}"] = fn(preds[:, r], scores[:, r], smask[:, r])
            except UndefinedMetricError:
                out[f"{metric}_{name}"] = float("nan")
    return out


def mean_mape(row: dict) -> float:
    return float(np.mean([row[f"mape_{n}"] for n in SCORE_NAMES]))


# ---------------------------------------------------------------- reporting

@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)
    curves: dict[tuple[str, str, int], list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""
    wall_s: float = 0.0
    notes: dict = field(default_factory=dict)

    def extend(self, other: "RunReport") -> None:
        self.rows += other.rows
        self.curves.update(other.curves)
        self.wall_s += other.wall_s
        self.notes.update(other.notes)

    def select(self, experiment: str | None = None, case: str | None = None) -> list[dict]:
        return [r for r in self.rows
                if (experiment is None or r["experiment"] == experiment)
                and (case is None or r["case"] == case)]

    def summary(self) -> dict[tuple[str, str], dict[str, tuple[float, float]]]:
        """(experiment, case) -> metric -> (mean, population std) over folds."""
        groups: dict[tuple[str, str], list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["experiment"], r["case"]), []).append(r)
        return {k: {m: (float(np.mean([r[m] for r in rows])), float(np.std([r[m] for r in rows])))
                    for m in METRIC_COLUMNS}
                for k, rows in groups.items()}


def subject_folds(ids: Sequence[int], k: int, seed: int) -> list[np.ndarray]:
    """Shuffle subject ids and cut them into k folds; the remainder goes last."""
    ids = np.asarray(sorted(ids))
    if k < 2 or k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} subjects")
    perm = ids[np.random.default_rng([seed, 0xF01D]).permutation(len(ids))]
    size = len(ids) // k
    return [perm[i * size:(i + 1) * size] if i < k - 1 else perm[i * size:] for i in range(k)]


def crossvalidate(cfg: ExperimentConfig, cohort: Cohort, experiment: str = "cv",
                  case: str = "full") -> RunReport:
    report = RunReport(config=cfg.to_dict(), dataset_hash=content_hash(cohort))
    ids = [s.subject_id for s in cohort.subjects]
    by_id = {s.subject_id: s for s in cohort.subjects}
    t_start = time.perf_counter()
    for fold, test_ids in enumerate(subject_folds(ids, cfg.folds, cfg.seed)):
        test_set = set(int(i) for i in test_ids)
        train_ids = [i for i in ids if i not in test_set]
        if test_set & set(train_ids):
            raise LeakageError(f"fold {fold}: subjects in both train and test")
        t0 = time.perf_counter()
        model, curve = train(cfg, [by_id[i] for i in train_ids], seed=cfg.seed + fold)
        row = {"experiment": experiment, "case": case, "fold": fold}
        row.update(evaluate(model, [by_id[i] for i in sorted(test_set)]))
        row["wall_s"] = time.perf_counter() - t0 if cfg.record_wall_time else None
        report.rows.append(row)
        report.curves[(experiment, case, fold)] = curve
        log.info("%s/%s fold %d: mauc=%.4f mape=%.4f", experiment, case, fold,
                 row["mauc"], mean_mape(row))
    report.wall_s = time.perf_counter() - t_start
    return report


def monotone_trend(values: Sequence[float], tolerance: float = TREND_TOLERANCE) -> bool:
    """True when the sequence never rises by more than ``tolerance``."""
    return all(b <= a + tolerance for a, b in zip(values, values[1:]))


def sweep_missing(cfg: ExperimentConfig, cohort: Cohort,
                  rates: Sequence[float] = MISSING_RATES) -> RunReport:
    for r in rates:
        if not 0 <= r < 1:
            raise ValueError(f"invalid missing rate {r}")
    report = RunReport(config=cfg.to_dict(), dataset_hash=content_hash(cohort))
    means, overall = [], {}
    for r in rates:
        damaged = inject_missingness(cohort, r, cfg.seed)
        sub = crossvalidate(cfg, damaged, experiment="missing", case=f"rate={r:g}")
        report.extend(sub)
        means.append(float(np.mean([row["mauc"] for row in sub.rows])))
        overall[f"{r:g}"] = damaged.missing_rate()
    report.notes["missing_rate_overall"] = overall
    report.notes["missing_mauc"] = dict(zip((f"{r:g}" for r in rates), means))
    report.notes["monotone"] = monotone_trend(means)
    return report


def truncate_horizon(cohort: Cohort, years: int) -> tuple[Cohort, int]:
    """Keep visits within ``years`` of baseline; subjects need two of them."""
    subjects = []
    for s in cohort.subjects:
        visits = [v for v in s.visits if v.month <= 12 * years]
        if len(visits) >= 2:
            subjects.append(Subject(s.subject_id, s.baseline_age, visits))
    return Cohort(subjects, cohort.payload_kind, cohort.payload_shape, dict(cohort.meta)), \
        len(subjects)


def sweep_horizon(cfg: ExperimentConfig, cohort: Cohort,
                  years: Sequence[int] = HORIZONS) -> RunReport:
    report = RunReport(config=cfg.to_dict(), dataset_hash=content_hash(cohort))
    eligible = {}
    for y in years:
        window, n = truncate_horizon(cohort, y)
        eligible[str(y)] = n
        if n < cfg.folds:
            log.warning("horizon %d: only %d eligible subjects, skipped", y, n)
            continue
        report.extend(crossvalidate(cfg, window, experiment="horizon", case=f"years={y}"))
    report.notes["eligible_subjects"] = eligible
    return report


def ablation_config(cfg: ExperimentConfig, case: str) -> ExperimentConfig:
    m = cfg.model
    changes = {
        "full": {},
        "no-rmm-vector-input": {"encoder": "flat"},
        "plain-node": {"time_aware": False},
        "no-argru": {"gate": "none"},
        "plain-gate": {"gate": "plain", "interval_scaling": False},
        "euclidean": {"manifold": False},
    }
    if case not in changes:
        raise ValueError(f"unknown ablation case {case!r}; expected one of {ABLATION_CASES}")
    return dataclasses.replace(cfg, model=dataclasses.replace(m, **changes[case]))


def ablate(cfg: ExperimentConfig, cohort: Cohort,
           cases: Sequence[str] = ABLATION_CASES) -> RunReport:
    configs = [(c, ablation_config(cfg, c)) for c in cases]
    report = RunReport(config=cfg.to_dict(), dataset_hash=content_hash(cohort))
    for case, case_cfg in configs:
        report.extend(crossvalidate(case_cfg, cohort, experiment="ablation", case=case))
    return report


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(report: RunReport, outdir: str | Path) -> list[Path]:
    """metrics.csv, one loss_<experiment>_<case>_fold<k>.csv per run, summary.txt."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = outdir / "metrics.csv"
    lines = [",".join(CSV_HEADER)]
    lines += [",".join(format_cell(r.get(c)) for c in CSV_HEADER) for r in report.rows]
    metrics.write_text("\n".join(lines) + "\n")
    written.append(metrics)
    for (experiment, case, fold), curve in report.curves.items():
        path = outdir / f"loss_{experiment}_{case}_fold{fold}.csv".replace("=", "")
        path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
        written.append(path)
    summary = outdir / "summary.txt"
    summary.write_text(summary_text(report))
    written.append(summary)
    return written


def summary_text(report: RunReport) -> str:
    out = [f"dataset sha256 {report.dataset_hash}"]
    for (experiment, case), stats in report.summary().items():
        out.append(f"[{experiment} / {case}]")
        for m in METRIC_COLUMNS:
            mean, std = stats[m]
            out.append(f"  {m:12s} {mean:.4f} ± {std:.4f}")
    for key, value in sorted(report.notes.items()):
        out.append(f"{key}: {value}")
    return "\n".join(out) + "\n"
