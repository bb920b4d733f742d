import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vadfusion.data import NOT_SPEAKING, SPEAKING
from vadfusion.errors import EmptyPredictions, PersonNamespaceCollision
from vadfusion.evaluation import (
    EvalReport,
    PredictionRecord,
    f1_score,
    make_report,
    render_report,
    run_cross_dataset,
    run_lopo,
    run_vlm_baseline,
    write_predictions,
)
from vadfusion.synthetic import make_blob_dataset
from vadfusion.training import FeatureStores, TrainConfig


def rec(true, pred, person="p0", seg="s0", logit=0.0):
    return PredictionRecord(segment_id=seg, person_id=person, true_label=true,
                            predicted_label=pred, logit=logit)


def f1_oracle(records):
    """Independent confusion-matrix computation, written longhand."""
    tp = fp = fn = 0
    for r in records:
        if r.predicted_label == SPEAKING and r.true_label == SPEAKING:
            tp += 1
        elif r.predicted_label == SPEAKING and r.true_label == NOT_SPEAKING:
            fp += 1
        elif r.predicted_label == NOT_SPEAKING and r.true_label == SPEAKING:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# --- f1 ------------------------------------------------------------------------

def test_all_correct_is_one():
    records = [rec(SPEAKING, SPEAKING), rec(NOT_SPEAKING, NOT_SPEAKING)]
    assert f1_score(records) == 1.0


def test_all_predicted_speaking_half_true():
    # precision 0.5, recall 1.0 -> F1 = 2/3 (confusion-matrix hand count)
    records = [rec(SPEAKING, SPEAKING), rec(NOT_SPEAKING, SPEAKING)]
    assert f1_score(records) == pytest.approx(2 / 3, abs=1e-12)


def test_degenerate_zero_by_convention():
    records = [rec(NOT_SPEAKING, NOT_SPEAKING)]
    assert f1_score(records) == 0.0


def test_empty_predictions_rejected():
    with pytest.raises(EmptyPredictions):
        f1_score([])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 300))
def test_f1_matches_bruteforce_oracle(seed, n):
    rng = np.random.default_rng(seed)
    labels = [SPEAKING, NOT_SPEAKING]
    records = [rec(labels[rng.integers(2)], labels[rng.integers(2)], seg=f"s{i}") for i in range(n)]
    assert abs(f1_score(records) - f1_oracle(records)) <= 1e-12


def test_f1_order_invariant():
    rng = np.random.default_rng(0)
    labels = [SPEAKING, NOT_SPEAKING]
    records = [rec(labels[rng.integers(2)], labels[rng.integers(2)], seg=f"s{i}") for i in range(50)]
    shuffled = list(records)
    rng.shuffle(shuffled)
    assert f1_score(records) == f1_score(shuffled)


def test_f1_invariant_under_segment_relabeling():
    records = [rec(SPEAKING, SPEAKING, seg=f"s{i}") for i in range(5)]
    renamed = [rec(r.true_label, r.predicted_label, seg=f"x{i}") for i, r in enumerate(records)]
    assert f1_score(records) == f1_score(renamed)


def test_constant_speaking_prediction_closed_form():
    # always predicting the positive class: F1 = 2p / (p + 1), p the class prior
    for n_speak, n_total in [(3, 10), (5, 5), (1, 100)]:
        records = [rec(SPEAKING, SPEAKING, seg=f"a{i}") for i in range(n_speak)]
        records += [rec(NOT_SPEAKING, SPEAKING, seg=f"b{i}") for i in range(n_total - n_speak)]
        p = n_speak / n_total
        assert f1_score(records) == pytest.approx(2 * p / (p + 1), abs=1e-12)


# --- report assembly and rendering ------------------------------------------------

def test_report_average_and_population_std():
    report = make_report({"a": 0.8, "b": 0.9}, "lopo", {})
    assert report.average == pytest.approx(0.85, abs=1e-12)
    assert report.std == pytest.approx(0.05, abs=1e-12)  # population: divide by n
    values = np.array(list(report.per_person_f1.values()))
    assert report.average == pytest.approx(values.mean())
    assert report.std == pytest.approx(values.std())


def test_render_single_person_row():
    report = make_report({"solo": 1.0}, "lopo", {})
    md = render_report(report, "markdown")
    assert "100.00 | 100.00 | 0.00" in md


def test_render_two_person_table():
    report = make_report({"a": 0.8, "b": 0.9}, "lopo", {}, person_order=["a", "b"])
    md = render_report(report, "markdown")
    assert "| 80.00 | 90.00 | 85.00 | 5.00 |" in md
    assert md.splitlines()[0] == "| a | b | AVG | STD |"


def test_csv_roundtrips_through_parser():
    import csv
    import io

    report = make_report({"a": 0.8, "b": 0.9}, "lopo", {}, person_order=["a", "b"])
    text = render_report(report, "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["a", "b", "AVG", "STD"]
    assert [float(v) for v in rows[1]] == [80.0, 90.0, 85.0, 5.0]


def test_report_json_roundtrip():
    report = make_report({"a": 0.8}, "cross_dataset", {"seed": 1})
    clone = EvalReport.from_json(report.to_json())
    assert clone == report


def test_render_rejects_unknown_format():
    with pytest.raises(ValueError):
        render_report(make_report({"a": 1.0}, "lopo", {}), "xml")


def test_write_predictions_jsonl(tmp_path):
    import json

    records = [rec(SPEAKING, NOT_SPEAKING, seg="s1", logit=-0.25)]
    path = write_predictions(records, tmp_path / "preds.jsonl")
    obj = json.loads(path.read_text().splitlines()[0])
    assert obj == {"segment_id": "s1", "person_id": "p0", "true": SPEAKING,
                   "pred": NOT_SPEAKING, "logit": -0.25}


# --- leave-one-person-out protocol ---------------------------------------------------

def lopo_config(**kw):
    defaults = dict(learning_rate=0.001, max_epochs=6, batch_size=16, seed=0, fusion_arch="mlp")
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_lopo_two_person_synthetic():
    segments, stores = make_blob_dataset(n_persons=2, segments_per_class=20, seed=0)
    result = run_lopo(segments, lopo_config(), stores)
    assert set(result.report.per_person_f1) == {"p0", "p1"}
    assert all(v >= 0.95 for v in result.report.per_person_f1.values())
    assert result.report.protocol == "lopo"


def test_lopo_leakage_audit_and_aggregates():
    segments, stores = make_blob_dataset(n_persons=3, segments_per_class=10, seed=1)
    result = run_lopo(segments, lopo_config(max_epochs=3), stores)
    by_person = {p: {s.segment_id for s in segments if s.person_id == p}
                 for p in result.report.per_person_f1}
    for person, log in result.batch_logs.items():
        assert log, "instrumentation log must not be empty"
        for batch in log:
            assert not by_person[person].intersection(batch)
    values = np.array([result.report.per_person_f1[p] for p in result.report.per_person_f1])
    assert result.report.average == pytest.approx(values.mean())
    assert result.report.std == pytest.approx(values.std())
    assert len(result.records) == len(segments)


def _unbalanced_dataset():
    big_segments, big_stores = make_blob_dataset(n_persons=1, segments_per_class=20, seed=2,
                                                 person_prefix="p")
    tiny_segments, tiny_stores = make_blob_dataset(n_persons=1, segments_per_class=2, seed=3,
                                                   person_prefix="q")
    segments = big_segments + tiny_segments
    stores = FeatureStores(
        visual={**big_stores.visual, **tiny_stores.visual},
        captions={**big_stores.captions, **tiny_stores.captions},
        text_vectors={**big_stores.text_vectors, **tiny_stores.text_vectors},
    )
    return segments, stores


def test_lopo_failed_fold_aborts_without_allow_partial():
    segments, stores = _unbalanced_dataset()
    with pytest.raises(Exception):
        run_lopo(segments, lopo_config(batch_size=16), stores)


def test_lopo_allow_partial_reports_surviving_folds():
    segments, stores = _unbalanced_dataset()
    result = run_lopo(segments, lopo_config(batch_size=16), stores, allow_partial=True)
    assert set(result.report.per_person_f1) == {"q0"}  # training on p0 works
    assert "p0" in result.failed_folds


# --- cross-dataset protocol ---------------------------------------------------------------

def test_cross_dataset_namespace_guard():
    segments, stores = make_blob_dataset(n_persons=2, segments_per_class=10, seed=4)
    with pytest.raises(PersonNamespaceCollision):
        run_cross_dataset(segments, segments, lopo_config(max_epochs=1), stores, stores)
    report, _, _ = run_cross_dataset(segments, segments, lopo_config(max_epochs=1),
                                     stores, stores, allow_same=True)
    assert report.protocol == "cross_dataset"


def test_cross_dataset_domain_shifted_blobs():
    train_segments, train_stores = make_blob_dataset(n_persons=2, segments_per_class=20,
                                                     seed=5, person_prefix="a")
    test_segments, test_stores = make_blob_dataset(n_persons=3, segments_per_class=8,
                                                   seed=5, person_prefix="b",
                                                   domain_shift=0.2)
    report, records, ckpt = run_cross_dataset(train_segments, test_segments,
                                              lopo_config(), train_stores, test_stores)
    assert sorted(report.per_person_f1) == ["b0", "b1", "b2"]
    assert len(records) == len(test_segments)
    assert ckpt.held_out_person is None
    assert all(v >= 0.9 for v in report.per_person_f1.values())


# --- standalone VLM baseline ------------------------------------------------------------------

def test_vlm_baseline_report():
    from vadfusion.captioning import MockVlmClient
    from conftest import make_frame, make_segment

    segs = []
    for p in range(2):
        for i in range(3):
            value = 220 if i % 2 == 0 else 30
            label = SPEAKING if value > 128 else NOT_SPEAKING
            segs.append(make_segment([make_frame(value=value)] * 10,
                                     label=label, person=f"p{p}", seg_id=f"p{p}s{i}"))
    report, records = run_vlm_baseline(segs, MockVlmClient())
    assert report.protocol == "vlm_baseline"
    assert set(report.per_person_f1) == {"p0", "p1"}
    assert all(v == 1.0 for v in report.per_person_f1.values())
    assert len(records) == len(segs)


# --- std mode and augmented-copy exclusion ----------------------------------------

def test_sample_std_mode():
    report = make_report({"a": 0.8, "b": 0.9}, "lopo", {}, std_mode="sample")
    assert report.std == pytest.approx(np.std([0.8, 0.9], ddof=1), abs=1e-12)
    with pytest.raises(ValueError):
        make_report({"a": 0.8}, "lopo", {}, std_mode="bogus")


def test_lopo_never_scores_augmented_copies():
    from dataclasses import replace

    segments, stores = make_blob_dataset(n_persons=2, segments_per_class=10, seed=9)
    copies = []
    for seg in segments[:4]:  # pretend these were augmented offline
        copy = replace(seg, segment_id=seg.segment_id + ":aug0")
        stores.visual[copy.segment_id] = stores.visual[seg.segment_id] + 0.01
        stores.captions[copy.segment_id] = stores.captions[seg.segment_id]
        copies.append(copy)
    result = run_lopo(segments + copies, lopo_config(max_epochs=2), stores)
    scored = {r.segment_id for r in result.records}
    assert not any(":aug" in sid for sid in scored)
    assert len(result.records) == len(segments)
