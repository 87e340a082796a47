"""The full model: encoder, TNODE/ARGRU recurrence and decoder over batches.

A batch is a set of whole subjects padded to a common number of input
visits. By default the last visit of each subject is held out as the
prediction target at t_{n+1}; earlier visits are the inputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import argru, extractor, rmm, tnode
from . import geometry as G
from . import tensor as T
from .cohort import Cohort, Subject
from .config import LossConfig, ModelConfig
from .objectives import total_loss
from .tensor import Tensor

PARAMS_FORMAT = "rtnag.params"


@dataclass
class Batch:
    subject_ids: np.ndarray
    payload: np.ndarray  # (B, J, *payload_shape)
    scores: np.ndarray  # (B, J, R)
    score_mask: np.ndarray
    labels: np.ndarray  # (B, J)
    label_mask: np.ndarray
    times: np.ndarray  # (B, J) normalized age; padding repeats the last time
    observed: np.ndarray  # (B, J)
    t_start: np.ndarray  # (B,)
    target_time: np.ndarray  # (B,)
    target_label: np.ndarray
    target_label_mask: np.ndarray
    target_scores: np.ndarray  # (B, R)
    target_score_mask: np.ndarray


@dataclass
class Outputs:
    visit_probs: Tensor  # (B, J, C)
    visit_scores: Tensor  # (B, J, R)
    final_probs: Tensor  # (B, C)
    final_scores: Tensor  # (B, R)
    aux_probs: Tensor | None
    states: list[Tensor]
    final_state: Tensor


def make_batch(subjects: Sequence[Subject], age_mean: float, age_std: float,
               hold_out_last: bool = True) -> Batch:
    """Pad subjects into arrays; optionally hold out each last visit."""
    inputs, targets = [], []
    for s in subjects:
        visits = s.visits[:-1] if hold_out_last else s.visits
        if not visits:
            raise ValueError(f"subject {s.subject_id} has no input visits")
        inputs.append(visits)
        targets.append(s.visits[-1])
    B = len(subjects)
    J = max(len(v) for v in inputs)
    shape = np.shape(inputs[0][0].payload)
    R = len(inputs[0][0].scores)
    payload = np.zeros((B, J) + shape)
    scores = np.zeros((B, J, R))
    score_mask = np.zeros((B, J, R))
    labels = np.zeros((B, J), dtype=np.int64)
    label_mask = np.zeros((B, J))
    times = np.zeros((B, J))
    observed = np.zeros((B, J))
    norm = lambda age: (age - age_mean) / age_std  # noqa: E731
    for b, visits in enumerate(inputs):
        for j, v in enumerate(visits):
            payload[b, j] = v.payload
            scores[b, j] = v.scores
            score_mask[b, j] = v.score_mask
            labels[b, j] = v.label
            label_mask[b, j] = v.label_mask
            times[b, j] = norm(v.age)
            observed[b, j] = 1.0
        times[b, len(visits):] = times[b, len(visits) - 1]
    return Batch(
        subject_ids=np.array([s.subject_id for s in subjects]),
        payload=payload, scores=scores, score_mask=score_mask, labels=labels,
        label_mask=label_mask, times=times, observed=observed,
        t_start=times[:, 0].copy(),
        target_time=np.array([norm(t.age) for t in targets]),
        target_label=np.array([t.label for t in targets], dtype=np.int64),
        target_label_mask=np.array([t.label_mask for t in targets], dtype=np.float64),
        target_scores=np.array([t.scores for t in targets]),
        target_score_mask=np.array([t.score_mask for t in targets], dtype=np.float64),
    )


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Initial weights; each module draws from its own stream so switching
    ablation flags never perturbs the other modules' initial values."""
    rng = lambda k: np.random.default_rng([seed, k])  # noqa: E731
    W = cfg.feature_dim + cfg.n_scores
    p: dict[str, np.ndarray] = {}
    if cfg.volume_extent:
        p.update(extractor.init_params(rng(1), cfg.volume_extent, cfg.feature_dim,
                                       cfg.n_classes, cfg.att_hidden))
    p.update(rmm.init_params(rng(2), cfg.q, cfg.n_classes, cfg.n_scores, cfg.init_std))
    p.update(tnode.init_params(rng(3), cfg.q, cfg.ode_hidden, cfg.init_std))
    p.update(argru.init_params(rng(4), cfg.q, cfg.init_std))
    if cfg.gate == "plain":
        g = rng(5)
        p["gru.wz"] = np.zeros(2)
        p["gru.bz"] = g.normal(0, cfg.init_std, cfg.tangent_dim)
    if cfg.encoder == "flat":
        g = rng(6)
        p["enc.w"] = g.normal(0, 1.0 / np.sqrt(W), (cfg.tangent_dim, W))
        p["enc.b"] = np.zeros(cfg.tangent_dim)
    return p


class RTNAG:
    """Parameters plus age normalization; forward/loss over batches."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 age_mean: float = 72.5, age_std: float = 7.5):
        self.cfg = cfg
        self.params = params
        self.age_mean = float(age_mean)
        self.age_std = float(age_std)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int, cohort: Cohort | None = None) -> "RTNAG":
        age_mean, age_std = 72.5, 7.5
        if cohort is not None:
            ages = np.array([v.age for s in cohort.subjects for v in s.visits])
            age_mean, age_std = float(ages.mean()), float(ages.std())
        return cls(cfg, init_params(cfg, seed), age_mean, age_std)

    @property
    def space(self):
        return argru.space_for(self.cfg)

    def batch(self, subjects: Sequence[Subject], hold_out_last: bool = True) -> Batch:
        return make_batch(subjects, self.age_mean, self.age_std, hold_out_last)

    def encode(self, p, batch: Batch) -> tuple[Tensor, Tensor | None]:
        cfg = self.cfg
        aux = None
        if cfg.volume_extent:
            feats = extractor.extract_features(batch.payload, p)
            aux = T.softmax_rows(extractor.aux_logits(feats, p))
        else:
            feats = T.Tensor(batch.payload)
        m = rmm.fuse(feats, batch.scores, batch.score_mask)
        if cfg.encoder == "rmm":
            E = rmm.encode(m, p, cfg.ridge, cfg.manifold)
        else:
            coords = extractor.linear(m, p["enc.w"], p["enc.b"])
            E = self.space.exp(G.unvec(coords, cfg.q))
        return E, aux

    def forward(self, p, batch: Batch) -> Outputs:
        E, aux = self.encode(p, batch)
        states, final = argru.run_batch(E, batch.times, batch.observed, batch.t_start,
                                        batch.target_time, p, self.cfg)
        H = T.stack(states, axis=1)
        vp, vs = rmm.decode_coords(G.vec(self.space.log(H)), p)
        fp, fs = rmm.decode_coords(G.vec(self.space.log(final)), p)
        return Outputs(vp, vs, fp, fs, aux, states, final)

    def loss(self, p, batch: Batch, loss_cfg: LossConfig, final_only: bool = False,
             aux_ce: bool = True) -> Tensor:
        out = self.forward(p, batch)
        B, J = batch.labels.shape
        C, R = self.cfg.n_classes, self.cfg.n_scores
        visit_w = 0.0 if final_only else 1.0
        probs = T.concat([T.reshape(out.visit_probs, (B * J, C)), out.final_probs], axis=0)
        preds = T.concat([T.reshape(out.visit_scores, (B * J, R)), out.final_scores], axis=0)
        labels = np.concatenate([batch.labels.ravel(), batch.target_label])
        lmask = np.concatenate([(batch.label_mask * batch.observed).ravel() * visit_w,
                                batch.target_label_mask])
        scores = np.concatenate([batch.scores.reshape(B * J, R), batch.target_scores])
        smask = np.concatenate([
            (batch.score_mask * batch.observed[..., None]).reshape(B * J, R) * visit_w,
            batch.target_score_mask])
        aux = None
        if out.aux_probs is not None and aux_ce:
            # auxiliary head only sees input visits; pad the target rows out
            aux = T.concat([T.reshape(out.aux_probs, (B * J, C)),
                            np.full((B, C), 1.0 / C)], axis=0)
            aux_mask = np.concatenate([(batch.label_mask * batch.observed).ravel(),
                                       np.zeros(B)])
            return total_loss(probs, labels, lmask, preds, scores, smask, loss_cfg) + \
                loss_cfg.lambda_ce * _aux_term(aux, labels, aux_mask)
        return total_loss(probs, labels, lmask, preds, scores, smask, loss_cfg)

    def predict(self, batch: Batch) -> dict[str, np.ndarray]:
        p = {k: T.Tensor(v) for k, v in self.params.items()}
        out = self.forward(p, batch)
        return {"final_probs": out.final_probs.data, "final_scores": out.final_scores.data,
                "visit_probs": out.visit_probs.data, "visit_scores": out.visit_scores.data}

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path) -> None:
        """Flat little-endian f64 values after a one-line JSON header."""
        names = sorted(self.params)
        header = {"format": PARAMS_FORMAT, "version": 1,
                  "model": dataclasses.asdict(self.cfg),
                  "age_mean": self.age_mean, "age_std": self.age_std,
                  "params": [[n, list(self.params[n].shape)] for n in names]}
        blob = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes()
                        for n in names)
        Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)

    @classmethod
    def load(cls, path: str | Path) -> "RTNAG":
        raw = Path(path).read_bytes()
        head, _, blob = raw.partition(b"\n")
        header = json.loads(head)
        if header.get("format") != PARAMS_FORMAT:
            raise ValueError(f"{path}: not an {PARAMS_FORMAT} file")
        values = np.frombuffer(blob, dtype="<f8")
        params, offset = {}, 0
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            params[name] = values[offset:offset + n].reshape(shape).astype(np.float64)
            offset += n
        if offset != values.size:
            raise ValueError(f"{path}: {values.size - offset} trailing values")
        return cls(ModelConfig(**header["model"]), params, header["age_mean"],
                   header["age_std"])


def _aux_term(aux, labels, mask):
    from .objectives import cross_entropy, masked_mean
    safe = np.where(np.asarray(mask) > 0, labels, 0)
    return masked_mean(cross_entropy(aux, safe), mask)
