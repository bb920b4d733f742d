"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The full-scale table
targets need the real datasets and live encoder/VLM backends; they are
marked ``full_scale``, skip without the environment variables documented
in the README, and are excluded from routine runs via ``-m "not full_scale"``.
"""

import inspect
import json
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

import vadfusion.captioning as captioning_module
from vadfusion.captioning import FIXED_CAPTION_NO, FIXED_CAPTION_YES, MockVlmClient, to_fixed_caption
from vadfusion.data import SPEAKING, load_annotations, build_segments
from vadfusion.encoders import (
    MeanPixelBackend,
    MockEncoderBackend,
    encode_frame,
    encode_segment,
    partition_patches,
    replicate_text,
)
from vadfusion.errors import BackendUnavailable
from vadfusion.evaluation import f1_score, render_report, run_lopo
from vadfusion.fusion import (
    MlpFusionNet,
    TransformerFusionNet,
    fuse_for_mlp,
    fuse_for_transformer,
    self_attention,
)
from vadfusion.synthetic import make_blob_dataset, make_image_dataset
from vadfusion.training import TrainConfig, build_stores, save_checkpoint, train_all

from conftest import make_frame, make_segment
from test_evaluation import f1_oracle, rec
from test_fusion import attention_oracle
from test_gradients import RTOL, max_relative_error


@contextmanager
def criterion(number, name, budget_s):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} {name}: FAIL ({time.time() - start:.1f}s)")
        raise
    elapsed = time.time() - start
    verdict = "PASS" if elapsed <= budget_s else f"PASS but over {budget_s}s budget"
    print(f"ACCEPTANCE {number} {name}: {verdict} ({elapsed:.1f}s)")
    assert elapsed <= budget_s, f"criterion {number} took {elapsed:.1f}s, budget {budget_s}s"


def test_criterion_1_shape_pipeline():
    with criterion(1, "shape pipeline", budget_s=1.0):
        backend = MockEncoderBackend(seed=0)
        seg = make_segment([make_frame(value=12 * i, size=16) for i in range(10)])
        per_frame = [encode_frame(f, backend) for f in seg.frames]
        for fe in per_frame:
            assert fe.shape == (10, 512)
        stack = np.stack(per_frame)
        assert stack.shape == (10, 10, 512)
        vis = encode_segment(seg, backend)
        assert vis.shape == (10, 512)
        assert np.allclose(vis, stack.mean(axis=0), atol=1e-6)
        txt = replicate_text(backend.encode_text("no one is talking"), 10)
        assert txt.shape == (10, 512)
        assert fuse_for_transformer(vis, txt).shape == (20, 512)
        assert fuse_for_mlp(vis, txt).shape == (1024,)


def test_criterion_2_oracle_equivalence():
    with criterion(2, "oracle equivalence", budget_s=10.0):
        rng = np.random.default_rng(2024)

        # temporal averaging vs a pixel-arithmetic oracle (mock scalar embeddings)
        for _ in range(100):
            values = rng.integers(0, 256, size=10)
            seg = make_segment([make_frame(value=int(v), size=224) for v in values])
            got = encode_segment(seg, MeanPixelBackend())
            expected = np.full((10, 512), float(np.mean(values)) / 255.0)
            assert np.allclose(got, expected, atol=1e-6)

        # vector-path pooling vs longhand row mean
        for _ in range(100):
            vis = rng.standard_normal((10, 512))
            txt = np.tile(rng.standard_normal(512), (10, 1))
            manual = np.zeros(512)
            for row in vis:
                manual += row
            manual /= 10.0
            fused = fuse_for_mlp(vis, txt)
            assert np.allclose(fused[:512], manual, atol=1e-6)
            assert np.allclose(fused[512:], txt[0], atol=1e-6)

        # F1 vs longhand confusion counting, including one 10^4-record set
        labels = [SPEAKING, "not_speaking"]
        sizes = [int(rng.integers(1, 400)) for _ in range(99)] + [10_000]
        for n in sizes:
            records = [rec(labels[rng.integers(2)], labels[rng.integers(2)], seg=f"s{i}")
                       for i in range(n)]
            assert abs(f1_score(records) - f1_oracle(records)) <= 1e-12

        # attention vs the explicit-loop oracle
        for _ in range(100):
            n, c, d = int(rng.integers(1, 7)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
            Q, K = rng.standard_normal((2, n, c))
            V = rng.standard_normal((n, d))
            assert np.allclose(self_attention(Q, K, V), attention_oracle(Q, K, V), atol=1e-6)


def test_criterion_3_gradient_checks():
    with criterion(3, "gradient checks", budget_s=30.0):
        rng = np.random.default_rng(3)
        mlp = MlpFusionNet(layer_sizes=(6, 4, 3, 1), seed=0, dtype=np.float64)
        X = rng.standard_normal((5, 6))
        y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        assert max_relative_error(mlp, X, y, train=True) <= RTOL

        tr = TransformerFusionNet(dim=4, heads=2, proj_dim=6, head_hidden=3, seed=0,
                                  dtype=np.float64)
        Xt = rng.standard_normal((3, 5, 4))
        yt = np.array([1.0, 0.0, 1.0])
        assert max_relative_error(tr, Xt, yt, train=True) <= RTOL


def test_criterion_4_patch_tiling():
    with criterion(4, "patch tiling", budget_s=1.0):
        rng = np.random.default_rng(4)
        for _ in range(50):
            frame = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
            patches = partition_patches(frame)
            rows = [np.concatenate(patches[r * 3:(r + 1) * 3], axis=1) for r in range(3)]
            assert np.array_equal(np.concatenate(rows, axis=0), frame)


def test_criterion_5_determinism(tmp_path):
    with criterion(5, "determinism", budget_s=120.0):
        csv_path, frames_root = make_image_dataset(tmp_path / "ds", n_persons=2,
                                                   runs_per_label=4, seed=0)
        config = TrainConfig(learning_rate=0.001, max_epochs=5, batch_size=8, seed=3,
                             fusion_arch="mlp")

        def one_run(tag):
            table = load_annotations(csv_path)
            segments = build_segments(table, frames_root)
            stores = build_stores(segments, MeanPixelBackend(), MockVlmClient(), "fixed")
            ckpt = train_all(segments, config, stores)
            ckpt_path = save_checkpoint(ckpt, tmp_path / f"{tag}.ckpt")
            result = run_lopo(segments, config, stores)
            report_md = render_report(result.report, "markdown")
            report_json = result.report.to_json()
            return ckpt_path.read_bytes(), report_md, report_json

        run1 = one_run("first")
        run2 = one_run("second")
        assert run1[0] == run2[0], "checkpoint bytes differ between identical runs"
        assert run1[1] == run2[1], "markdown report differs between identical runs"
        assert run1[2] == run2[2], "json report differs between identical runs"


def test_criterion_6_synthetic_end_to_end():
    with criterion(6, "synthetic end-to-end", budget_s=600.0):
        # dense path: batches of 64 speaking + 64 not speaking, lr 0.001
        segments, stores = make_blob_dataset(n_persons=3, segments_per_class=40, seed=6)
        mlp_config = TrainConfig(learning_rate=0.001, max_epochs=50, batch_size=128,
                                 seed=0, fusion_arch="mlp")
        mlp_result = run_lopo(segments, mlp_config, stores)
        print(f"  dense path per-person F1: "
              f"{ {p: round(v, 4) for p, v in mlp_result.report.per_person_f1.items()} }")
        assert mlp_result.report.average >= 0.95
        for log in mlp_result.batch_logs.values():
            assert all(len(batch) == 128 for batch in log)

        # attention path wants more data: 10x larger synthetic set
        big_segments, big_stores = make_blob_dataset(n_persons=3, segments_per_class=400,
                                                     seed=7)
        tr_config = TrainConfig(learning_rate=0.001, max_epochs=4, batch_size=128,
                                seed=0, fusion_arch="transformer")
        tr_result = run_lopo(big_segments, tr_config, big_stores)
        print(f"  attention path per-person F1: "
              f"{ {p: round(v, 4) for p, v in tr_result.report.per_person_f1.items()} }")
        assert tr_result.report.average >= 0.95


def test_criterion_7_leakage_guards():
    with criterion(7, "leakage guards", budget_s=60.0):
        segments, stores = make_blob_dataset(n_persons=3, segments_per_class=12, seed=8)
        config = TrainConfig(learning_rate=0.001, max_epochs=4, batch_size=16,
                             seed=0, fusion_arch="mlp")
        result = run_lopo(segments, config, stores)
        by_person = {p: {s.segment_id for s in segments if s.person_id == p}
                     for p in result.report.per_person_f1}
        total_batches = 0
        for person, log in result.batch_logs.items():
            assert log, "instrumentation produced no batch log"
            for batch in log:
                total_batches += 1
                assert not by_person[person].intersection(batch), (
                    f"held-out person {person} leaked into a training batch"
                )
        assert total_batches > 0

        # the captioning surface cannot even receive ground-truth labels
        forbidden = {"label", "labels", "true_label", "y", "target", "ground_truth"}
        for name, fn in inspect.getmembers(captioning_module, inspect.isfunction):
            if name.startswith("_"):
                continue
            assert not set(inspect.signature(fn).parameters) & forbidden, name


def test_criterion_8_fixed_caption_contract():
    with criterion(8, "fixed caption contract", budget_s=60.0):
        assert to_fixed_caption("yes").text == "the person is engaged in a conversation"
        assert to_fixed_caption("no").text == "no one is talking"
        assert FIXED_CAPTION_YES == "the person is engaged in a conversation"
        assert FIXED_CAPTION_NO == "no one is talking"

        try:
            from vadfusion.encoders import get_backend

            backend = get_backend("clip-rn101")
        except BackendUnavailable:
            print("  real text backend unavailable; cosine-similarity leg skipped")
            return
        a = backend.encode_text(FIXED_CAPTION_YES).astype(np.float64)
        b = backend.encode_text(FIXED_CAPTION_NO).astype(np.float64)
        cosine = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert math.isclose(cosine, 0.75, abs_tol=0.05), f"fixed-caption cosine {cosine:.3f}"


# --- full-scale targets (criterion 9): documented, flag-gated, never in CI ------

FULL_SCALE_TARGETS = [
    ("VADCTL_FULLSCALE_MODCOLUMBIA", "eval-lopo", 0.9055),
    ("VADCTL_FULLSCALE_COLUMBIA", "eval-lopo", 0.952),
    ("VADCTL_FULLSCALE_REALVAD", "eval-lopo", 0.882),
    ("VADCTL_FULLSCALE_CROSS", "eval-cross", 0.872),
]


@pytest.mark.full_scale
@pytest.mark.parametrize("env_var, command, target", FULL_SCALE_TARGETS)
def test_criterion_9_full_scale_targets(env_var, command, target, tmp_path, monkeypatch):
    config_path = os.environ.get(env_var)
    if not config_path:
        pytest.skip(f"{env_var} not set; full-scale targets need the real datasets "
                    f"and live encoder/VLM backends")
    from vadfusion.cli import main

    monkeypatch.chdir(tmp_path)
    assert main([command, "--config", config_path]) == 0
    (run_dir,) = sorted(tmp_path.glob(f"runs/{command}-*"))
    report = json.loads((run_dir / "report.json").read_text())
    assert abs(report["average"] - target) <= 0.02, (
        f"average F1 {report['average']:.4f} outside {target} +/- 0.02"
    )
