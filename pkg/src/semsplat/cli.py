"""Command-line entry point: gen-synthetic, pseudo-label, train, render, segment, eval.

Each subcommand writes only under ``--out`` and leaves a resolved ``config.json``
there, which replays the run when passed back through ``--config``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, load_config, to_flat
from .io import (
    SceneError,
    TensorFormatError,
    load_scene,
    read_checkpoint,
    read_feature_image,
    read_tensor,
    write_checkpoint,
    write_feature_image,
    write_json,
    write_tensor,
)
from .metrics import classify, evaluate_views
from .scene import IGNORE
from .synthetic import generate_synthetic
from .trainer import PseudoLabels, build_training_data, fit, pseudo_label, render_views

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class CommandError(Exception):
    """Failure tagged with the operation that raised it and the exit code to use."""

    def __init__(self, operation: str, message: str, code: int):
        super().__init__(f"{operation}: {message}")
        self.code = code


def emit(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def _view_name(i: int) -> str:
    return f"view_{i:03d}"


def _step(operation: str, fn, *args, **kwargs):
    """Run ``fn`` and translate its failure into a CommandError naming ``operation``."""
    try:
        return fn(*args, **kwargs)
    except (ConfigError, SceneError, TensorFormatError, ValueError, KeyError) as exc:
        raise CommandError(operation, str(exc), EXIT_INVALID) from exc
    except (FloatingPointError, OSError, RuntimeError, AssertionError) as exc:
        raise CommandError(operation, str(exc), EXIT_RUNTIME) from exc


def _need(path, what: str) -> Path:
    if path is None:
        raise CommandError("arguments", f"{what} is required", EXIT_INVALID)
    path = Path(path)
    if not path.exists():
        raise CommandError("arguments", f"{what} {path} does not exist", EXIT_INVALID)
    return path


# --- subcommands -------------------------------------------------------------------


def cmd_gen_synthetic(args, cfg: TrainConfig, out: Path) -> None:
    manifest = _step("synthetic.generate_synthetic", generate_synthetic, out / "scene", cfg.synthetic, cfg.seed)
    emit("scene_written", manifest=str(manifest))


def _load(args, cfg):
    manifest = _need(args.scene, "--scene")
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    return _step("io.load_scene", load_scene, manifest, cfg.downscale)


def write_pseudo_labels(out: Path, pseudo: PseudoLabels) -> None:
    write_tensor(out / "class_features.sadt", pseudo.class_features)
    for view, target in pseudo.targets.items():
        write_feature_image(out / "targets" / _view_name(view), target)
    for view, conf in pseudo.confidence_maps.items():
        write_tensor(out / "confidence" / f"{_view_name(view)}.sadt", conf)
    write_json(out / "filter_report.json", {"regions": pseudo.report, "accepted": sum(r["accepted"] for r in pseudo.report)})


def read_pseudo_labels(path: Path, scene) -> PseudoLabels:
    table = read_tensor(path / "class_features.sadt").astype(np.float64)
    targets, conf = {}, {}
    for i in scene.train:
        name = _view_name(i)
        if (path / "targets" / f"{name}_features.sadt").exists():
            targets[i] = read_feature_image(path / "targets" / name)
        if (path / "confidence" / f"{name}.sadt").exists():
            conf[i] = read_tensor(path / "confidence" / f"{name}.sadt").astype(np.float64)
    report = json.loads((path / "filter_report.json").read_text())["regions"]
    return PseudoLabels(table, targets, conf, report)


def cmd_pseudo_label(args, cfg: TrainConfig, out: Path) -> None:
    scene = _load(args, cfg)
    pseudo = _step("pseudo_label.filter_regions", pseudo_label, scene, cfg)
    _step("io.write_tensor", write_pseudo_labels, out, pseudo)
    emit(
        "pseudo_labels",
        regions=len(pseudo.report),
        accepted=sum(r["accepted"] for r in pseudo.report),
        views=sorted(pseudo.targets),
    )


def cmd_train(args, cfg: TrainConfig, out: Path) -> None:
    scene = _load(args, cfg)
    pseudo = None
    if args.pseudo is not None:
        pseudo = _step("io.read_tensor", read_pseudo_labels, _need(args.pseudo, "--pseudo"), scene)
    data = _step("trainer.build_training_data", build_training_data, scene, cfg, pseudo)
    emit("training_views", sources={str(v.index): v.source for v in data.views})

    log_path = out / "train_log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log_file:

        def on_step(state, record):
            line = json.dumps(record, sort_keys=True)
            log_file.write(line + "\n")
            if state.iteration % 100 == 0 or state.iteration == cfg.iterations:
                print(json.dumps({"event": "train_step", **record}, sort_keys=True), flush=True)

        state = _step("trainer.fit", fit, scene, cfg, data, on_step, out / "checkpoints")

    final = out / "checkpoint"
    _step("io.write_checkpoint", write_checkpoint, final, state.cloud, state.iteration, to_flat(cfg))
    write_tensor(final / "class_features.sadt", data.class_features)
    emit("checkpoint_written", path=str(final), points=len(state.cloud), iteration=state.iteration)


def _parse_views(spec: str, scene) -> list[int]:
    if spec == "test":
        return list(scene.test)
    if spec == "train":
        return list(scene.train)
    if spec == "all":
        return list(range(len(scene.views)))
    try:
        views = [int(v) for v in spec.split(",")]
    except ValueError:
        raise CommandError("arguments", f"--views: expected test, train, all or indices, got {spec!r}", EXIT_INVALID)
    if any(v < 0 or v >= len(scene.views) for v in views):
        raise CommandError("arguments", "--views references a view that does not exist", EXIT_INVALID)
    return views


def cmd_render(args, cfg: TrainConfig, out: Path) -> None:
    scene = _load(args, cfg)
    ckpt = _need(args.checkpoint, "--checkpoint")
    cloud, iteration, _ = _step("io.read_checkpoint", read_checkpoint, ckpt)
    views = _parse_views(args.views, scene)
    outputs = _step("render.render", render_views, cloud, [scene.views[i].camera for i in views], cfg)
    for i, rendered in zip(views, outputs):
        write_tensor(out / f"{_view_name(i)}_rgb.sadt", rendered.rgb)
        write_feature_image(out / _view_name(i), rendered.features)
    if (ckpt / "class_features.sadt").exists():
        write_tensor(out / "class_features.sadt", read_tensor(ckpt / "class_features.sadt"))
    emit("rendered", views=views, iteration=iteration, points=len(cloud))


def cmd_segment(args, cfg: TrainConfig, out: Path) -> None:
    renders = _need(args.renders, "--renders")
    table_path = Path(args.class_features) if args.class_features else renders / "class_features.sadt"
    table = _step("io.read_tensor", read_tensor, _need(table_path, "class feature table")).astype(np.float64)
    names = sorted(p.name[: -len("_features.sadt")] for p in renders.glob("view_*_features.sadt"))
    if not names:
        raise CommandError("segment", f"no rendered feature images in {renders}", EXIT_INVALID)
    for name in names:
        features = _step("io.read_feature_image", read_feature_image, renders / name)
        labels = _step("metrics.classify", classify, features, table)
        write_tensor(out / f"{name}.sadt", labels)
    emit("segmented", views=names)


def format_report(aggregate, per_view: dict, class_names) -> str:
    lines = [f"mIoU {aggregate.miou:.4f}  mAcc {aggregate.macc:.4f}", "", "class            IoU"]
    for name, iou in zip(class_names, aggregate.per_class_iou):
        lines.append(f"{name:<16} {'n/a' if np.isnan(iou) else f'{iou:.4f}'}")
    lines += ["", "view             mIoU    mAcc"]
    for name, res in per_view.items():
        lines.append(f"{name:<16} {res.miou:.4f}  {res.macc:.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args, cfg: TrainConfig, out: Path) -> None:
    scene = _load(args, cfg)
    labels_dir = _need(args.labels, "--labels")
    views = [i for i in _parse_views(args.views, scene) if scene.views[i].labels is not None]
    preds, gts, names = [], [], []
    for i in views:
        path = labels_dir / f"{_view_name(i)}.sadt"
        if not path.exists():
            raise CommandError("eval", f"missing predicted labels for {_view_name(i)}", EXIT_INVALID)
        preds.append(_step("io.read_tensor", read_tensor, path))
        gts.append(scene.views[i].labels)
        names.append(_view_name(i))
    if not views:
        raise CommandError("eval", "no selected view carries ground-truth labels", EXIT_INVALID)
    aggregate, per_view = _step("metrics.evaluate", evaluate_views, preds, gts, scene.num_classes)
    per_view = dict(zip(names, per_view))
    write_json(
        out / "metrics.json",
        {
            "aggregate": aggregate.as_record(),
            "views": {k: v.as_record() for k, v in per_view.items()},
            "class_names": scene.class_names,
            "ignore_label": IGNORE,
        },
    )
    (out / "metrics.txt").write_text(format_report(aggregate, per_view, scene.class_names))
    emit("metrics", miou=aggregate.miou, macc=aggregate.macc)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "render": cmd_render,
    "segment": cmd_segment,
    "eval": cmd_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError("arguments", message, EXIT_INVALID)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted config keys")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    parser = _Parser(prog="semsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic scene")
    p = sub.add_parser("pseudo-label", parents=[common], help="filter extractor regions into targets")
    p.add_argument("--scene", help="scene manifest or its directory")
    p = sub.add_parser("train", parents=[common], help="optimise a cloud")
    p.add_argument("--scene")
    p.add_argument("--pseudo", help="output directory of pseudo-label (computed in-process if omitted)")
    p = sub.add_parser("render", parents=[common], help="render RGB and feature images")
    p.add_argument("--scene")
    p.add_argument("--checkpoint")
    p.add_argument("--views", default="test", help="test, train, all or comma-separated indices")
    p = sub.add_parser("segment", parents=[common], help="decode rendered features to label maps")
    p.add_argument("--renders")
    p.add_argument("--class-features", help="class feature table (default: <renders>/class_features.sadt)")
    p = sub.add_parser("eval", parents=[common], help="score label maps against ground truth")
    p.add_argument("--scene")
    p.add_argument("--labels")
    p.add_argument("--views", default="test")
    return parser


def _overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CommandError("arguments", f"--set expects KEY=VALUE, got {item!r}", EXIT_INVALID)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    return overrides


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _step("config.load_config", load_config, args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", to_flat(cfg))
        COMMANDS[args.command](args, cfg, out)
    except CommandError as exc:
        emit("error", message=str(exc), exit_code=exc.code)
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


def main() -> None:
    sys.exit(run())


__all__ = ["run", "main", "build_parser"]
