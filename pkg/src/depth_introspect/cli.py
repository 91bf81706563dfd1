"""``depth-introspect`` command line: generate, pretrain, train, detect, correct, evaluate, baseline.

Every artifact goes under ``<out>/<stage>/``. Exit status is 0 on success, 1
for invalid configuration or missing prerequisites, and 2 for runtime or
numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import (
    DepthRaster,
    RasterFormatError,
    SceneSample,
    generate_scene,
    load_sample,
    read_manifest,
    read_raster,
    save_sample,
    write_manifest,
    write_raster,
)
from .decn import CorrectionResult, correct_iterative, oracle_detector
from .dedn import DednModel, distill_pairs, infer, pretrain_distill
from .evaluation import (
    DetectionReport,
    corpus_depth_metrics,
    corpus_detection_report,
    dumps_json,
    random_baseline,
    render_depth_table,
    render_detection_table,
)
from .labeling import class_distribution, label, write_label_png
from .nn.tensor import AutodiffError, precision
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("depth_introspect")

SPLITS = ("train", "test")


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------- paths and loading


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output)


def _split_dir(cfg: RunConfig, split: str) -> Path:
    return _out(cfg) / "dataset" / split


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run `depth-introspect {hint}` first)")
    return path


def _load_split(cfg: RunConfig, split: str) -> tuple[list[dict], list[SceneSample]]:
    directory = _split_dir(cfg, split)
    manifest = _require(directory / "manifest.jsonl", f"{split} dataset manifest", "generate")
    records = read_manifest(manifest)
    return records, [load_sample(r, directory) for r in records]


def _checkpoint_path(cfg: RunConfig, explicit: Optional[str]) -> Path:
    if explicit:
        return _require(Path(explicit), "model checkpoint", "train")
    return _require(_out(cfg) / "train" / "model.ckpt", "trained model checkpoint", "train")


def _new_model(cfg: RunConfig) -> DednModel:
    with precision(np.float32):
        return DednModel(cfg.model_config())


def _sample_seed(seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> None:
    scene_cfg = cfg.dataset.scene_config()
    counts = {"train": cfg.dataset.n_train, "test": cfg.dataset.n_test}
    for split in SPLITS:
        directory = _split_dir(cfg, split)
        directory.mkdir(parents=True, exist_ok=True)

        def make(i: int, split=split, directory=directory) -> dict:
            sample = generate_scene(scene_cfg, _sample_seed(cfg.seed, split, i))
            rec = save_sample(sample, directory, f"{split}{i:05d}")
            rec["sha256"] = {k: _sha256(directory / rec[k]) for k in sorted(rec) if k not in ("id", "corruption")}
            return rec

        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                records = list(pool.map(make, range(counts[split])))
        else:
            records = [make(i) for i in range(counts[split])]
        write_manifest(records, directory / "manifest.jsonl")
        print(f"{split}: {len(records)} samples -> {directory}")
    # the output location is left out so relocated reruns stay byte-identical
    recorded = {k: v for k, v in cfg.to_dict().items() if k != "output"}
    (_out(cfg) / "dataset" / "config.json").write_text(dumps_json(recorded))


def cmd_pretrain(cfg: RunConfig, args) -> None:
    _, samples = _load_split(cfg, "train")
    _, held = _load_split(cfg, "test")
    pc = cfg.pretrain
    model = _new_model(cfg)
    out = _out(cfg) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    if pc.warmup_epochs:
        warm = TrainConfig(pc.learning_rate, pc.momentum, pc.batch_size, pc.warmup_epochs, cfg.seed)
        train(model, samples, cfg.labeler, warm, log_line=lambda s: _echo(lines, "warmup " + s))
    scale = model.config.depth_scale
    encoder = model.encoder
    result = pretrain_distill(
        encoder.depth_branch,
        encoder.rgb_branch,
        distill_pairs(samples, scale),
        pc.distill_epochs,
        learning_rate=pc.learning_rate,
        momentum=pc.momentum,
        batch_size=pc.batch_size,
        seed=cfg.seed,
        heldout=distill_pairs(held, scale),
    )
    for k, (a, b) in enumerate(zip(result.loss_curve, result.heldout_curve)):
        _echo(lines, f"distill epoch={k} train_mse={a:.6f} heldout_mse={b:.6f}")
    _write_lines(out / "pretrain_log.txt", lines)
    model.save(out / "model.ckpt")


def _echo(lines: list[str], line: str) -> None:
    lines.append(line)
    print(line, flush=True)


def cmd_train(cfg: RunConfig, args) -> None:
    _, samples = _load_split(cfg, "train")
    out = _out(cfg) / "train"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.training.init_from_pretrain:
        model = DednModel.load(_require(_out(cfg) / "pretrain" / "model.ckpt", "pretrained checkpoint", "pretrain"))
        if model.config != cfg.model_config():
            raise ConfigError("pretrained checkpoint architecture differs from the model section")
    else:
        model = _new_model(cfg)
    lines: list[str] = []
    tcfg = cfg.training.train_config(cfg.seed)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    ckpt_dir = out / "checkpoints" if cfg.training.checkpoint_every else None
    result = train(
        model,
        samples,
        cfg.labeler,
        tcfg,
        log_line=lambda s: _echo(lines, s),
        checkpoint_dir=ckpt_dir,
        checkpoint_every=cfg.training.checkpoint_every,
    )
    _write_lines(out / "train_log.txt", lines)
    w = result.loss_config.class_weights
    history = {
        "class_weights": [w.c_under, w.c_correct, w.c_over],
        "epochs": [{"epoch": h.epoch, "loss": h.loss, **h.report.metrics()} for h in result.history],
    }
    (out / "history.json").write_text(dumps_json(history))
    model.save(out / "model.ckpt")


def cmd_detect(cfg: RunConfig, args) -> None:
    model = DednModel.load(_checkpoint_path(cfg, args.checkpoint))
    records, samples = _load_split(cfg, "test")
    out = _out(cfg) / "detect"
    out.mkdir(parents=True, exist_ok=True)
    preds, gts = [], []
    for rec, s in zip(records, samples):
        probs = infer(model, s.views(model.config.n_views))
        gt = label(s.pred_depth, s.gt_depth, cfg.labeler)
        write_label_png(probs.labels(), out / f"{rec['id']}_detected.png", mask=s.pred_depth.valid)
        write_label_png(gt, out / f"{rec['id']}_truth.png")
        preds.append(probs)
        gts.append(gt)
    report = corpus_detection_report(preds, gts, jobs=args.jobs)
    _write_lines(out / "detection_report.txt", report.to_lines())
    (out / "detection_report.json").write_text(dumps_json(report.to_dict()))
    print("\n".join(report.to_lines()))


def _correction_dir(cfg: RunConfig, oracle: bool) -> Path:
    return _out(cfg) / ("correct_oracle" if oracle else "correct")


def cmd_correct(cfg: RunConfig, args) -> None:
    ccfg = cfg.correction
    overrides = {k: v for k, v in (("iterations", args.iterations), ("confidence_threshold", args.confidence),
                                   ("step", args.step)) if v is not None}
    if overrides:
        try:
            ccfg = dataclasses.replace(ccfg, **overrides)
        except ValueError as exc:
            raise ConfigError(f"correction: {exc}") from exc
    model = None if args.oracle else DednModel.load(_checkpoint_path(cfg, args.checkpoint))
    n_views = 1 if model is None else model.config.n_views
    records, samples = _load_split(cfg, "test")
    out = _correction_dir(cfg, args.oracle)
    out.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    summary = []
    for rec, s in zip(records, samples):
        detector = oracle_detector(s.gt_depth, cfg.labeler.threshold_t) if args.oracle else model
        res: CorrectionResult = correct_iterative(s.pred_depth, s.views(n_views), detector, ccfg, gt=s.gt_depth)
        write_raster(res.depth, out / f"{rec['id']}_corrected.png")
        lines += [f"id={rec['id']} {line}" for line in res.trace_lines()]
        summary.append({"id": rec["id"], "iterations_run": res.iterations_run, "converged": res.converged,
                        "rmse_before": res.trace[0]["rmse"], "rmse_after": res.trace[-1]["rmse"]})
    _write_lines(out / "trace.txt", lines)
    meta = {"correction": dataclasses.asdict(ccfg), "oracle": bool(args.oracle), "samples": summary}
    (out / "correction.json").write_text(dumps_json(meta))
    print(f"corrected {len(samples)} samples -> {out}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    records, samples = _load_split(cfg, "test")
    src = _correction_dir(cfg, args.oracle)
    _require(src / "correction.json", "corrected depth maps", "correct" + (" --oracle" if args.oracle else ""))
    corrected = []
    for rec in records:
        r = read_raster(_require(src / f"{rec['id']}_corrected.png", "corrected depth map", "correct"))
        if not isinstance(r, DepthRaster):
            raise RasterFormatError(f"{rec['id']}: corrected map is not a depth raster")
        corrected.append(r)
    gts = [s.gt_depth for s in samples]
    before = corpus_depth_metrics([s.pred_depth for s in samples], gts, jobs=args.jobs)
    after = corpus_depth_metrics(corrected, gts, jobs=args.jobs)
    out = _out(cfg) / ("evaluate_oracle" if args.oracle else "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    table = render_depth_table(before, after, "oracle" if args.oracle else "dedn")
    _write_lines(out / "depth_report.txt", before.to_lines("before_") + after.to_lines("after_"))
    (out / "depth_table.txt").write_text(table)
    (out / "depth_report.json").write_text(dumps_json({"before": before.to_dict(), "after": after.to_dict()}))
    print(table, end="")


def cmd_baseline(cfg: RunConfig, args) -> None:
    _, samples = _load_split(cfg, "test")
    gts = [label(s.pred_depth, s.gt_depth, cfg.labeler) for s in samples]
    dist = class_distribution(gts)
    ev = cfg.evaluation
    report = random_baseline(dist, gts, cfg.seed, n_maps=ev.baseline_maps, size=ev.baseline_size)
    out = _out(cfg) / "baseline"
    out.mkdir(parents=True, exist_ok=True)
    rows = {"random baseline": report}
    detected = _out(cfg) / "detect" / "detection_report.json"
    if detected.exists():
        rows["dedn"] = DetectionReport(np.array(json.loads(detected.read_text())["confusion"]))
    lines = [f"distribution_{n}={p:.4f}" for n, p in zip(("under", "correct", "over"), dist)] + report.to_lines()
    _write_lines(out / "baseline_report.txt", lines)
    (out / "baseline_report.json").write_text(dumps_json({"distribution": list(dist), **report.to_dict()}))
    (out / "detection_table.txt").write_text(render_detection_table(rows))
    print(render_detection_table(rows), end="")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "detect": cmd_detect,
    "correct": cmd_correct,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
}


# ---------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    shared.add_argument("--seed", type=int, help="master seed; overrides the config")
    shared.add_argument("--out", help="output directory; overrides the config")
    shared.add_argument("--jobs", type=int, default=1, help="worker threads for corpus-level work")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="depth-introspect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[shared], help="synthesize the train/test corpus")
    sub.add_parser("pretrain", parents=[shared], help="warm up the RGB branch, then distill it into the depth branch")
    p = sub.add_parser("train", parents=[shared], help="fit the error detector")
    p.add_argument("--epochs", type=int)
    for name, help_ in (("detect", "write detected error maps and a detection report"),
                        ("correct", "iteratively correct the test predictions")):
        p = sub.add_parser(name, parents=[shared], help=help_)
        p.add_argument("--checkpoint", help="model checkpoint (default: <out>/train/model.ckpt)")
        if name == "correct":
            p.add_argument("--iterations", type=int)
            p.add_argument("--confidence", type=float)
            p.add_argument("--step", type=float)
            p.add_argument("--oracle", action="store_true", help="use ground-truth labels instead of a model")
    p = sub.add_parser("evaluate", parents=[shared], help="depth metrics before and after correction")
    p.add_argument("--oracle", action="store_true", help="evaluate the oracle-corrected maps")
    sub.add_parser("baseline", parents=[shared], help="random-guess detection baseline")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output=args.out)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if getattr(args, "epochs", None) is not None and args.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    return cfg.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](cfg, args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, AutodiffError, FloatingPointError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
