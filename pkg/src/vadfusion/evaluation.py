"""F1 metrics, evaluation protocols, and report rendering.

Two protocols: leave-one-person-out (train on everyone else, score the
held-out person, repeat for each person) and cross-dataset (train one
model on dataset A, score every person of dataset B). Reports carry one
F1 per person plus the average and the population standard deviation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LABEL_TO_INT, SPEAKING, make_lopo_folds
from .errors import EmptyPredictions, PersonNamespaceCollision
from .training import (
    Checkpoint,
    FeatureStores,
    TrainConfig,
    build_fused_arrays,
    estimator_from_checkpoint,
    train_all,
    train_fold,
)

INT_TO_LABEL = {v: k for k, v in LABEL_TO_INT.items()}


@dataclass
class PredictionRecord:
    segment_id: str
    person_id: str
    true_label: str
    predicted_label: str
    logit: float


@dataclass
class EvalReport:
    per_person_f1: dict[str, float]
    average: float
    std: float
    protocol: str  # "lopo" | "cross_dataset" | "vlm_baseline"
    config: dict = field(default_factory=dict)
    person_order: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "per_person_f1": self.per_person_f1,
            "average": self.average,
            "std": self.std,
            "protocol": self.protocol,
            "config": self.config,
            "person_order": self.person_order,
        }, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(per_person_f1=obj["per_person_f1"], average=obj["average"], std=obj["std"],
                   protocol=obj["protocol"], config=obj.get("config", {}),
                   person_order=obj.get("person_order", []))


def make_report(per_person_f1: dict[str, float], protocol: str, config: dict,
                person_order: list[str] | None = None, std_mode: str = "population") -> EvalReport:
    """Aggregate per-person scores.

    std defaults to the population form (divide by n); with only a handful
    of persons the choice is material, so the sample form is selectable.
    """
    if std_mode not in ("population", "sample"):
        raise ValueError(f"std_mode must be 'population' or 'sample', got {std_mode!r}")
    values = np.array([per_person_f1[p] for p in per_person_f1], dtype=np.float64)
    ddof = 0 if std_mode == "population" else 1
    std = float(values.std(ddof=ddof)) if len(values) > ddof else 0.0
    return EvalReport(
        per_person_f1=dict(per_person_f1),
        average=float(values.mean()),
        std=std,
        protocol=protocol,
        config=config,
        person_order=person_order or sorted(per_person_f1),
    )


def f1_score(records: list[PredictionRecord], positive_label: str = SPEAKING) -> float:
    """F1 of the positive class; 0 by convention when P + R == 0."""
    if not records:
        raise EmptyPredictions("cannot score an empty prediction list")
    tp = sum(1 for r in records if r.predicted_label == positive_label and r.true_label == positive_label)
    fp = sum(1 for r in records if r.predicted_label == positive_label and r.true_label != positive_label)
    fn = sum(1 for r in records if r.predicted_label != positive_label and r.true_label == positive_label)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_from_arrays(y_true, y_pred) -> float:
    """F1 on {0,1} arrays with 1 the positive class."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def predict_segments(est, segments, stores: FeatureStores, fusion_arch: str,
                     threshold: float = 0.0) -> list[PredictionRecord]:
    X, _, ids = build_fused_arrays(segments, stores, fusion_arch)
    logits = est.decision_function(X)
    records = []
    for seg, seg_id, logit in zip(segments, ids, logits):
        records.append(PredictionRecord(
            segment_id=seg_id,
            person_id=seg.person_id,
            true_label=seg.label,
            predicted_label=INT_TO_LABEL[int(logit > threshold)],
            logit=float(logit),
        ))
    return records


@dataclass
class LopoResult:
    report: EvalReport
    records: list[PredictionRecord]
    checkpoints: dict[str, Checkpoint]
    batch_logs: dict[str, list[list[str]]]
    failed_folds: dict[str, str] = field(default_factory=dict)


def run_lopo(segments, config: TrainConfig, stores: FeatureStores,
             allow_partial: bool = False, positive_label: str = SPEAKING,
             std_mode: str = "population") -> LopoResult:
    """Leave-one-person-out protocol over every person in the segment list.

    Augmented training copies (see data.with_augmented_copies) are used for
    training like any other segment but never scored.
    """
    from .data import is_augmented_id

    folds = make_lopo_folds(segments)
    person_order = [f.held_out_person for f in folds]
    per_person: dict[str, float] = {}
    records: list[PredictionRecord] = []
    checkpoints: dict[str, Checkpoint] = {}
    batch_logs: dict[str, list[list[str]]] = {}
    failed: dict[str, str] = {}
    for fold in folds:
        held_out = [s for s in segments
                    if s.person_id == fold.held_out_person and not is_augmented_id(s.segment_id)]
        try:
            ckpt = train_fold(fold, config, stores, segments)
            X_like, _, _ = build_fused_arrays(held_out, stores, config.fusion_arch)
            est = estimator_from_checkpoint(ckpt, X_like)
            fold_records = predict_segments(est, held_out, stores, config.fusion_arch, config.threshold)
        except Exception as exc:
            if not allow_partial:
                raise
            failed[fold.held_out_person] = f"{type(exc).__name__}: {exc}"
            continue
        held_ids = {s.segment_id for s in segments if s.person_id == fold.held_out_person}
        log = _fold_batch_log(ckpt)
        for batch in log:
            assert not held_ids.intersection(batch), "held-out segment found in a training batch"
        per_person[fold.held_out_person] = f1_score(fold_records, positive_label)
        records.extend(fold_records)
        checkpoints[fold.held_out_person] = ckpt
        batch_logs[fold.held_out_person] = log
    if not per_person:
        raise EmptyPredictions("every fold failed")
    report = make_report(per_person, "lopo", config.as_dict(),
                         [p for p in person_order if p in per_person], std_mode)
    return LopoResult(report, records, checkpoints, batch_logs, failed)


def _fold_batch_log(ckpt: Checkpoint) -> list[list[str]]:
    return ckpt.batch_log


def run_cross_dataset(train_segments, test_segments, config: TrainConfig,
                      train_stores: FeatureStores, test_stores: FeatureStores,
                      allow_same: bool = False, positive_label: str = SPEAKING,
                      std_mode: str = "population") -> tuple[EvalReport, list[PredictionRecord], Checkpoint]:
    """Train once on dataset A, score every person of dataset B."""
    from .data import is_augmented_id

    train_persons = {s.person_id for s in train_segments}
    test_persons = sorted({s.person_id for s in test_segments})
    overlap = train_persons.intersection(test_persons)
    if overlap and not allow_same:
        raise PersonNamespaceCollision(
            f"persons appear in both datasets: {sorted(overlap)}; pass allow_same to override"
        )
    ckpt = train_all(train_segments, config, train_stores)
    scored = [s for s in test_segments if not is_augmented_id(s.segment_id)]
    X_like, _, _ = build_fused_arrays(scored, test_stores, config.fusion_arch)
    est = estimator_from_checkpoint(ckpt, X_like)
    records = predict_segments(est, scored, test_stores, config.fusion_arch, config.threshold)
    per_person = {
        p: f1_score([r for r in records if r.person_id == p], positive_label)
        for p in test_persons
    }
    report = make_report(per_person, "cross_dataset", config.as_dict(), test_persons, std_mode)
    return report, records, ckpt


def render_report(report: EvalReport, format: str = "markdown") -> str:
    """One column per person plus AVG and STD, percentages to 2 decimals."""
    persons = report.person_order or sorted(report.per_person_f1)
    header = persons + ["AVG", "STD"]
    values = [report.per_person_f1[p] * 100 for p in persons] + [report.average * 100, report.std * 100]
    cells = [f"{v:.2f}" for v in values]
    if format == "markdown":
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
            "| " + " | ".join(cells) + " |",
        ]
        return "\n".join(lines) + "\n"
    if format == "csv":
        return ",".join(header) + "\n" + ",".join(cells) + "\n"
    raise ValueError(f"format must be 'markdown' or 'csv', got {format!r}")


def write_predictions(records: list[PredictionRecord], path) -> Path:
    """JSON-lines dump for external analysis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "segment_id": r.segment_id,
                "person_id": r.person_id,
                "true": r.true_label,
                "pred": r.predicted_label,
                "logit": r.logit,
            }, sort_keys=True) + "\n")
    return path


def run_vlm_baseline(segments, client, caption_cache=None, config: dict | None = None) -> tuple[EvalReport, list[PredictionRecord]]:
    """Standalone VLM baseline: yes/no prompt on each segment's central frame."""
    from .captioning import standalone_vlm_predict

    persons = sorted({s.person_id for s in segments})
    records = []
    for seg in segments:
        pred = standalone_vlm_predict(seg, client, caption_cache)
        records.append(PredictionRecord(
            segment_id=seg.segment_id, person_id=seg.person_id,
            true_label=seg.label, predicted_label=pred,
            logit=float(LABEL_TO_INT[pred]),
        ))
    per_person = {p: f1_score([r for r in records if r.person_id == p]) for p in persons}
    report = make_report(per_person, "vlm_baseline", config or {}, persons)
    return report, records
