"""Synthetic longitudinal cohort: generation, missingness and JSON-lines I/O.

Each subject follows a sigmoid latent severity s(t) in [0, 1]. Labels come
from thresholds on s, the three normalized scores are noisy affine maps of s,
and the payload is either a feature vector or a small 3D volume whose central
intensity fades with s. Visits sit on a fixed month grid with i.i.d. drops.

File format (one JSON object per line, keys sorted):

* line 1, header: ``schema`` ("rtnag.cohort"), ``version`` (1),
  ``payload_kind`` ("vector" | "volume"), ``payload_shape``, ``n_subjects``,
  ``meta`` (free-form generation settings).
* one line per visit: ``subject_id``, ``month``, ``age``, ``label``,
  ``label_mask``, ``scores`` [3], ``score_mask`` [3], ``payload_kind``,
  ``payload`` (flat row-major values).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = "rtnag.cohort"
SCHEMA_VERSION = 1
VISIT_GRID = (0, 6, 12, 18, 24, 36, 48, 54, 60)
CLASS_NAMES = ("CN", "MCI", "AD")
SCORE_NAMES = ("mmse", "adas11", "adas13")
AGE_CENTER, AGE_SCALE = 72.5, 7.5
REQUIRED_KEYS = ("subject_id", "month", "age", "label", "label_mask", "scores",
                 "score_mask", "payload_kind", "payload")


@dataclass
class CohortConfig:
    n_subjects: int = 200
    visit_grid: tuple[int, ...] = VISIT_GRID
    drop_prob: float = 0.44
    score_noise: float = 0.02
    feature_noise: float = 0.05
    score_missing: float = 0.05
    label_missing: float = 0.0
    volume_extent: int = 0  # 0 = vector payloads
    feature_dim: int = 32
    rho_range: tuple[float, float] = (0.3, 1.5)
    onset_range: tuple[float, float] = (1.0, 4.0)
    stage_offset: float = 2.0
    years_per_unit: float = 5.0
    age_range: tuple[float, float] = (60.0, 85.0)
    seed: int = 0
    shifted: bool = False

    def __post_init__(self):
        self.visit_grid = tuple(int(m) for m in self.visit_grid)
        self.rho_range = tuple(float(x) for x in self.rho_range)
        self.onset_range = tuple(float(x) for x in self.onset_range)
        self.age_range = tuple(float(x) for x in self.age_range)
        if self.n_subjects < 10:
            raise ValueError("n_subjects must be >= 10")
        for name in ("drop_prob", "score_missing", "label_missing"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.score_noise < 0 or self.feature_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if len(self.visit_grid) < 3 or list(self.visit_grid) != sorted(set(self.visit_grid)):
            raise ValueError("visit grid must be >= 3 strictly increasing months")
        v = self.volume_extent
        if v and (v < 8 or v & (v - 1)):
            raise ValueError("volume extent must be 0 or a power of two >= 8")


@dataclass
class Visit:
    subject_id: int
    month: int
    age: float
    payload: np.ndarray
    scores: np.ndarray
    score_mask: np.ndarray
    label: int
    label_mask: int


@dataclass
class Subject:
    subject_id: int
    baseline_age: float
    visits: list[Visit]

    @property
    def months(self) -> list[int]:
        return [v.month for v in self.visits]


@dataclass
class Cohort:
    subjects: list[Subject]
    payload_kind: str
    payload_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subjects)

    def n_visits(self) -> int:
        return sum(len(s.visits) for s in self.subjects)

    def missing_rate(self, grid_size: int = len(VISIT_GRID)) -> float:
        """Fraction of scheduled grid slots without a visit."""
        return 1.0 - self.n_visits() / (len(self.subjects) * grid_size)

    def subset(self, ids) -> "Cohort":
        keep = set(int(i) for i in ids)
        return Cohort([s for s in self.subjects if s.subject_id in keep],
                      self.payload_kind, self.payload_shape, dict(self.meta))


def latent_severity(years, rho, onset, stage_offset=2.0, years_per_unit=5.0):
    t = stage_offset + np.asarray(years, dtype=np.float64) / years_per_unit
    return 1.0 / (1.0 + np.exp(-rho * (t - onset)))


def label_from_severity(s) -> np.ndarray:
    return np.digitize(np.asarray(s), [1.0 / 3.0, 2.0 / 3.0])


def score_means(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.stack([1.0 - 0.6 * s, 0.1 + 0.7 * s, 0.15 + 0.7 * s], axis=-1)


def _payload_map(cfg: CohortConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0xA11CE, int(cfg.shifted)])
    return rng.normal(0.0, 1.0, (cfg.feature_dim, 3))


def _volume(s: float, extent: int, noise: float, rng) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, extent)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = x * x + y * y + z * z
    blob = np.exp(-r2 / (2 * 0.45 ** 2))
    blob = np.where(r2 < 0.3 ** 2, blob * (1.0 - 0.5 * s), blob)
    return np.clip(blob + rng.normal(0.0, noise, blob.shape), 0.0, 1.0)


def _make_subject(sid: int, cfg: CohortConfig, A: np.ndarray) -> Subject:
    rng = np.random.default_rng(cfg.seed ^ sid) if not cfg.shifted \
        else np.random.default_rng([cfg.seed ^ sid, 1])
    noise_mult = 1.5 if cfg.shifted else 1.0
    while True:
        rho = rng.uniform(*cfg.rho_range)
        onset = rng.uniform(*cfg.onset_range)
        base_age = rng.uniform(*cfg.age_range)
        grid = np.array(cfg.visit_grid)
        kept = np.concatenate([[True], rng.random(len(grid) - 1) >= cfg.drop_prob])
        months = grid[kept]
        if len(months) >= 3:
            break
    visits = []
    for m in months:
        years = m / 12.0
        s = float(latent_severity(years, rho, onset, cfg.stage_offset, cfg.years_per_unit))
        age = base_age + m / 12.0
        scores = np.clip(score_means(s) + rng.normal(0.0, cfg.score_noise * noise_mult, 3),
                         0.0, 1.0)
        score_mask = (rng.random(3) >= cfg.score_missing).astype(np.int64)
        label_mask = int(rng.random() >= cfg.label_missing)
        if cfg.volume_extent:
            payload = _volume(s, cfg.volume_extent, cfg.feature_noise * noise_mult, rng)
        else:
            z = np.array([s, s * s, (age - AGE_CENTER) / AGE_SCALE])
            payload = A @ z + rng.normal(0.0, cfg.feature_noise * noise_mult, A.shape[0])
        visits.append(Visit(sid, int(m), float(age), payload, scores, score_mask,
                            int(label_from_severity(s)), label_mask))
    return Subject(sid, float(base_age), visits)


def generate_cohort(cfg: CohortConfig) -> Cohort:
    """Deterministic cohort from ``cfg`` (including its seed)."""
    cfg.__post_init__()
    A = _payload_map(cfg)
    subjects = [_make_subject(i, cfg, A) for i in range(cfg.n_subjects)]
    if cfg.volume_extent:
        kind, shape = "volume", (cfg.volume_extent,) * 3
    else:
        kind, shape = "vector", (cfg.feature_dim,)
    meta = {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(cfg).items()}
    return Cohort(subjects, kind, shape, meta)


def shifted_cohort(cfg: CohortConfig) -> Cohort:
    """Same family, faster progression, noisier, different payload map."""
    shifted = dataclasses.replace(cfg, rho_range=(0.5, 2.0), shifted=True)
    return generate_cohort(shifted)


def inject_missingness(cohort: Cohort, extra_rate: float, seed: int) -> Cohort:
    """Drop each non-baseline visit with probability ``extra_rate``.

    Baselines are always kept; a subject left with fewer than three visits
    keeps its earliest three.
    """
    if not 0 <= extra_rate < 1:
        raise ValueError("extra_rate must lie in [0, 1)")
    if extra_rate == 0:
        return cohort
    subjects = []
    for subj in cohort.subjects:
        rng = np.random.default_rng([seed, subj.subject_id, 0x5EED])
        keep = rng.random(len(subj.visits)) >= extra_rate
        keep[0] = True
        if keep.sum() < 3:
            keep[:] = False
            keep[:3] = True
        subjects.append(Subject(subj.subject_id, subj.baseline_age,
                                [v for v, k in zip(subj.visits, keep) if k]))
    meta = dict(cohort.meta, extra_missing=extra_rate, extra_missing_seed=seed)
    return Cohort(subjects, cohort.payload_kind, cohort.payload_shape, meta)


# ----------------------------------------------------------------------- I/O

class DatasetFormatError(ValueError):
    pass


def _visit_record(v: Visit, kind: str) -> dict:
    return {
        "subject_id": v.subject_id, "month": v.month, "age": v.age,
        "label": v.label, "label_mask": v.label_mask,
        "scores": [float(x) for x in v.scores],
        "score_mask": [int(x) for x in v.score_mask],
        "payload_kind": kind,
        "payload": [float(x) for x in np.ravel(v.payload)],
    }


def dumps(cohort: Cohort) -> str:
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION,
              "payload_kind": cohort.payload_kind,
              "payload_shape": list(cohort.payload_shape),
              "n_subjects": len(cohort.subjects), "meta": cohort.meta}
    lines = [json.dumps(header, sort_keys=True)]
    for subj in cohort.subjects:
        for v in subj.visits:
            lines.append(json.dumps(_visit_record(v, cohort.payload_kind), sort_keys=True))
    return "\n".join(lines) + "\n"


def write_dataset(cohort: Cohort, path: str | Path) -> None:
    Path(path).write_text(dumps(cohort), encoding="utf-8")


def content_hash(cohort: Cohort) -> str:
    return hashlib.sha256(dumps(cohort).encode("utf-8")).hexdigest()


def loads(text: str) -> Cohort:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"line 1: malformed header ({err})") from None
    if header.get("schema") != SCHEMA:
        raise DatasetFormatError(f"line 1: not an {SCHEMA} file")
    if header.get("version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"schema version mismatch: file has {header.get('version')}, "
            f"reader expects {SCHEMA_VERSION}")
    kind = header["payload_kind"]
    shape = tuple(header["payload_shape"])
    by_subject: dict[int, list[Visit]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"line {lineno}: malformed record ({err})") from None
        for key in REQUIRED_KEYS:
            if key not in rec:
                raise DatasetFormatError(f"line {lineno}: missing required key {key!r}")
        if rec["payload_kind"] != kind:
            raise DatasetFormatError(f"line {lineno}: payload kind {rec['payload_kind']!r} "
                                     f"does not match header {kind!r}")
        payload = np.array(rec["payload"], dtype=np.float64)
        if payload.size != int(np.prod(shape)):
            raise DatasetFormatError(f"line {lineno}: payload has {payload.size} values, "
                                     f"expected shape {shape}")
        v = Visit(int(rec["subject_id"]), int(rec["month"]), float(rec["age"]),
                  payload.reshape(shape), np.array(rec["scores"], dtype=np.float64),
                  np.array(rec["score_mask"], dtype=np.int64), int(rec["label"]),
                  int(rec["label_mask"]))
        by_subject.setdefault(v.subject_id, []).append(v)
    subjects = []
    for sid, visits in by_subject.items():
        months = [v.month for v in visits]
        if any(b <= a for a, b in zip(months, months[1:])):
            raise DatasetFormatError(f"subject {sid}: months not strictly increasing")
        first = visits[0]
        subjects.append(Subject(sid, first.age - first.month / 12.0, visits))
    return Cohort(subjects, kind, shape, header.get("meta", {}))


def read_dataset(path: str | Path) -> Cohort:
    return loads(Path(path).read_text(encoding="utf-8"))
