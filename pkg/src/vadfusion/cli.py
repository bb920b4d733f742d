"""vadctl: command-line surface for the full pipeline.

ingest -> embed -> caption -> train -> eval-lopo / eval-cross -> report,
plus the standalone VLM baseline and a doctor command. Every run writes
its artifacts under a fresh directory named by config hash + timestamp,
including a snapshot of the resolved configuration. Exit codes: 0 ok,
2 config error, 3 data error, 4 backend error, 1 anything else.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .cache import EmbeddingCache
from .captioning import CaptionCache, caption_segments, get_vlm_client
from .config import config_hash, load_config, train_config_from
from .data import (
    build_segments,
    load_annotations,
    plan_segments,
    with_augmented_copies,
    write_segment_manifest,
)
from .encoders import FinetuneConfig, finetune_visual_backbone, get_backend
from .errors import BackendError, ConfigError, DataError, VadError
from .evaluation import (
    EvalReport,
    render_report,
    run_cross_dataset,
    run_lopo,
    run_vlm_baseline,
    write_predictions,
)
from .training import build_stores, save_checkpoint, train_all


def _category(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, DataError):
        return "data", 3
    if isinstance(exc, BackendError):
        return "backend", 4
    return "internal", 1


def _emit_error(exc: BaseException) -> int:
    category, code = _category(exc)
    sys.stderr.write(json.dumps({
        "error": type(exc).__name__,
        "category": category,
        "message": str(exc),
    }) + "\n")
    return code


def make_run_dir(cfg: dict, command: str) -> Path:
    """Fresh run directory: outputs are never overwritten."""
    base = Path(cfg["run"]["out_dir"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{command}-{config_hash(cfg)}-{stamp}"
    counter = 1
    while candidate.exists():
        candidate = base / f"{command}-{config_hash(cfg)}-{stamp}-{counter}"
        counter += 1
    candidate.mkdir(parents=True)
    (candidate / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2))
    return candidate


def _load_cfg(args) -> dict:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "allow_partial", False):
        overrides.append("eval.allow_partial=true")
    if getattr(args, "allow_same", False):
        overrides.append("eval.allow_same=true")
    return load_config(args.config, overrides)


def _dataset(cfg: dict, augment: bool = False):
    annotations = cfg["data"]["annotations"]
    if not annotations:
        raise ConfigError("data.annotations is required for this command")
    table = load_annotations(annotations)
    segments = build_segments(table, cfg["data"]["frames_root"], cfg["data"]["segment_length"])
    if augment and cfg["data"]["augment_copies"] > 0:
        segments = with_augmented_copies(segments, cfg["data"]["augment_copies"],
                                         cfg["data"]["augment_seed"])
    return table, segments


def _encoder_backend(cfg: dict):
    name = cfg["encoder"]["backend"]
    if name in ("mock-hash", "mock-mean", "tiny-linear"):
        return get_backend(name, seed=cfg["encoder"]["seed"])
    return get_backend(name)


def _vlm_client(cfg: dict):
    if cfg["vlm"]["client"] == "http":
        return get_vlm_client("http", endpoint=cfg["vlm"]["endpoint"], model=cfg["vlm"]["model"])
    return get_vlm_client("mock", model=cfg["vlm"]["model"])


def _prepare_backend(cfg: dict, segments):
    """Encoder backend per config, fine-tuned first when requested."""
    backend = _encoder_backend(cfg)
    if cfg["encoder"]["mode"] == "finetuned":
        result = finetune_visual_backbone(
            backend, segments,
            FinetuneConfig(
                steps=cfg["encoder"]["finetune_steps"],
                batch_size=cfg["encoder"]["finetune_batch_size"],
                learning_rate=cfg["encoder"]["finetune_learning_rate"],
                seed=cfg["encoder"]["seed"],
            ),
            checkpoint_path=Path(cfg["encoder"]["cache_dir"]) / "finetuned-backbone.npz",
        )
        backend = result.backend
    return backend


def _stores(cfg: dict, segments, jobs: int = 1):
    backend = _prepare_backend(cfg, segments)
    client = _vlm_client(cfg)
    emb_cache = EmbeddingCache(cfg["encoder"]["cache_dir"])
    cap_cache = CaptionCache(cfg["vlm"]["cache"])
    if jobs > 1:
        _parallel_embed(segments, backend, emb_cache, jobs)
    return build_stores(segments, backend, client, cfg["captioning"]["mode"],
                        embedding_cache=emb_cache, caption_cache=cap_cache)


def _parallel_embed(segments, backend, cache, jobs: int):
    from .encoders import embed_segments

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(lambda seg: embed_segments([seg], backend, cache), segments))


# --- commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _load_cfg(args)
    table = load_annotations(cfg["data"]["annotations"])
    plans = plan_segments(table, cfg["data"]["segment_length"])
    run_dir = make_run_dir(cfg, "ingest")
    manifest = run_dir / "manifest.jsonl"
    write_segment_manifest(plans, manifest)
    padded = sum(1 for p in plans if p.padded)
    print(f"ingested {len(table)} annotations -> {len(plans)} segments "
          f"({padded} padded, {len(table.persons)} persons)")
    print(f"manifest: {manifest}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_cfg(args)
    _, segments = _dataset(cfg, augment=True)
    backend = _prepare_backend(cfg, segments)
    cache = EmbeddingCache(cfg["encoder"]["cache_dir"])
    jobs = args.jobs or cfg["run"]["jobs"]
    if jobs > 1:
        _parallel_embed(segments, backend, cache, jobs)
    else:
        from .encoders import embed_segments

        embed_segments(segments, backend, cache)
    print(f"embedded {len(segments)} segments with backend {backend.name}/{backend.mode} "
          f"({backend.image_calls} encoder calls)")
    return 0


def cmd_caption(args) -> int:
    cfg = _load_cfg(args)
    _, segments = _dataset(cfg, augment=True)
    client = _vlm_client(cfg)
    cache = CaptionCache(cfg["vlm"]["cache"])
    mode = cfg["captioning"]["mode"]
    jobs = args.jobs or cfg["run"]["jobs"]
    if jobs > 1:
        from .captioning import caption_segment

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            captions = dict(pool.map(
                lambda seg: (seg.segment_id, caption_segment(seg, client, mode, cache)), segments
            ))
    else:
        captions = caption_segments(segments, client, mode, cache)
    print(f"captioned {len(captions)} segments ({client.calls} VLM calls, "
          f"cache {cfg['vlm']['cache']})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _, segments = _dataset(cfg, augment=True)
    stores = _stores(cfg, segments, args.jobs or cfg["run"]["jobs"])
    config = train_config_from(cfg)
    ckpt = train_all(segments, config, stores)
    run_dir = make_run_dir(cfg, "train")
    path = save_checkpoint(ckpt, run_dir / "checkpoint.ckpt")
    final_loss = ckpt.loss_history[-1] if ckpt.loss_history else float("nan")
    print(f"trained {config.fusion_arch} for {ckpt.epoch} epochs "
          f"(final loss {final_loss:.4f})")
    print(f"checkpoint: {path}")
    return 0


def _write_report_files(cfg: dict, run_dir: Path, report: EvalReport, records) -> None:
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.md").write_text(render_report(report, "markdown"))
    (run_dir / "report.csv").write_text(render_report(report, "csv"))
    write_predictions(records, run_dir / "predictions.jsonl")
    reports_dir = Path(cfg["eval"]["reports_dir"]) / cfg["data"]["name"]
    reports_dir.mkdir(parents=True, exist_ok=True)
    stem = config_hash(cfg)
    (reports_dir / f"{stem}.md").write_text(render_report(report, "markdown"))
    (reports_dir / f"{stem}.csv").write_text(render_report(report, "csv"))


def cmd_eval_lopo(args) -> int:
    cfg = _load_cfg(args)
    _, segments = _dataset(cfg, augment=True)
    stores = _stores(cfg, segments, args.jobs or cfg["run"]["jobs"])
    config = train_config_from(cfg)
    result = run_lopo(segments, config, stores,
                      allow_partial=cfg["eval"]["allow_partial"],
                      std_mode=cfg["eval"]["std"])
    run_dir = make_run_dir(cfg, "eval-lopo")
    _write_report_files(cfg, run_dir, result.report, result.records)
    if result.failed_folds:
        print(f"failed folds: {result.failed_folds}")
    print(render_report(result.report, "markdown"))
    print(f"run dir: {run_dir}")
    return 0


def cmd_eval_cross(args) -> int:
    cfg = _load_cfg(args)
    _, train_segments = _dataset(cfg, augment=True)
    if not cfg["eval"]["test_annotations"]:
        raise ConfigError("eval.test_annotations is required for eval-cross")
    test_table = load_annotations(cfg["eval"]["test_annotations"])
    test_segments = build_segments(test_table, cfg["eval"]["test_frames_root"],
                                   cfg["data"]["segment_length"])
    train_stores = _stores(cfg, train_segments, args.jobs or cfg["run"]["jobs"])
    test_stores = _stores(cfg, test_segments, args.jobs or cfg["run"]["jobs"])
    config = train_config_from(cfg)
    report, records, ckpt = run_cross_dataset(
        train_segments, test_segments, config, train_stores, test_stores,
        allow_same=cfg["eval"]["allow_same"], std_mode=cfg["eval"]["std"],
    )
    run_dir = make_run_dir(cfg, "eval-cross")
    save_checkpoint(ckpt, run_dir / "checkpoint.ckpt")
    _write_report_files(cfg, run_dir, report, records)
    print(render_report(report, "markdown"))
    print(f"run dir: {run_dir}")
    return 0


def cmd_baseline_vlm(args) -> int:
    cfg = _load_cfg(args)
    _, segments = _dataset(cfg)
    client = _vlm_client(cfg)
    cache = CaptionCache(cfg["vlm"]["cache"])
    report, records = run_vlm_baseline(segments, client, cache, {"vlm": cfg["vlm"]})
    run_dir = make_run_dir(cfg, "baseline-vlm")
    _write_report_files(cfg, run_dir, report, records)
    print(render_report(report, "markdown"))
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise DataError(f"report file not found: {path}")
    report = EvalReport.from_json(path.read_text(encoding="utf-8"))
    print(render_report(report, args.format), end="")
    return 0


def cmd_doctor(args) -> int:
    cfg = _load_cfg(args)
    print(f"vadfusion {__version__}")
    cache = EmbeddingCache(cfg["encoder"]["cache_dir"])
    n_entries = sum(1 for _ in cache.entries())
    print(f"embedding cache: {cfg['encoder']['cache_dir']} "
          f"({n_entries} entries, {cache.size_bytes()} bytes)")
    for path, problem in cache.verify():
        print(f"  CORRUPT: {path.name}: {problem}")
    cap_path = Path(cfg["vlm"]["cache"])
    if cap_path.is_file():
        cap = CaptionCache(cap_path)
        print(f"caption cache: {cap_path} ({len(cap)} entries)")
    else:
        print(f"caption cache: {cap_path} (empty)")
    probe = Path(cfg["encoder"]["cache_dir"]) / "finetuned-backbone.probe.json"
    if probe.is_file():
        info = json.loads(probe.read_text())
        status = "diverged from pretrained" if info.get("outputs_differ") else "IDENTICAL to pretrained"
        print(f"fine-tune probe: {probe.name}: {status} after {info.get('steps')} steps")
    print("backends: mock-hash ok, mock-mean ok, tiny-linear ok")
    for module, label in (("clip", "clip"), ("open_clip", "open_clip")):
        status = "installed" if importlib.util.find_spec(module) else "not installed"
        print(f"backend {label}: {status}")
    if cfg["vlm"]["client"] == "http":
        import urllib.error
        import urllib.request

        try:
            urllib.request.urlopen(cfg["vlm"]["endpoint"], timeout=3)
            print(f"vlm endpoint {cfg['vlm']['endpoint']}: reachable")
        except (urllib.error.URLError, OSError, ValueError) as exc:
            print(f"WARNING: vlm endpoint {cfg['vlm']['endpoint']}: unreachable ({exc})")
    else:
        print("vlm client: mock (deterministic)")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vadctl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vadctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", default=None, required=needs_config,
                       help="TOML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="shortcut for train.seed")
        p.add_argument("--jobs", type=int, default=None, help="worker pool size")

    for name, fn in [("ingest", cmd_ingest), ("embed", cmd_embed), ("caption", cmd_caption),
                     ("train", cmd_train), ("eval-lopo", cmd_eval_lopo),
                     ("eval-cross", cmd_eval_cross), ("baseline-vlm", cmd_baseline_vlm)]:
        p = sub.add_parser(name)
        common(p)
        if name == "eval-lopo":
            p.add_argument("--allow-partial", action="store_true",
                           help="report surviving folds when a fold fails")
        if name == "eval-cross":
            p.add_argument("--allow-same", action="store_true",
                           help="permit overlapping person namespaces")
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="render a stored report.json")
    p.add_argument("report", help="path to a report.json")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("doctor", help="environment and cache diagnostics")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_doctor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VadError as exc:
        return _emit_error(exc)
    except Exception as exc:  # anything unforeseen is an internal error
        return _emit_error(exc)


if __name__ == "__main__":
    sys.exit(main())
