"""Command-line harness: dataset generation, training, scoring, sweeps.

Four subcommands cover the pipeline end to end:

* ``generate`` -- procedurally build scenes and write a dataset directory
  (scene documents, rendered frames, label grids, masks, manifest);
* ``train`` -- fit the per-cell heads on a dataset's training split;
* ``eval`` -- score a trained model on the evaluation split, writing CSV
  tables, figures and color-coded prediction pixmaps;
* ``ablate`` -- sweep one axis (frames / interval / noise / components)
  and tabulate per-class IoU for every row.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 training divergence.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .camera import analytic_ground_homography
from .errors import DivergenceError
from .evaluation import evaluate, threshold_predictions
from .figures import (
    class_composite,
    error_overlay,
    save_confusion_heatmap,
    save_iou_bars,
    save_loss_curves,
    save_trend,
)
from .grid import BevGrid
from .model import model_from_dict, model_to_dict
from .pipeline import (
    average_reports,
    build_scene_sample,
    evaluate_scenario,
    generate_split,
    pack_image_labels,
    predict_sample,
    reference_world_pose,
    train_scenario,
)
from .scenario import (
    ABLATION_AXES,
    COMPONENT_ROWS,
    ScenarioConfig,
    config_from_dict,
    config_to_dict,
    with_components,
)
from .storage import (
    load_yaml,
    save_yaml,
    write_csv,
    write_grid,
    write_manifest,
    write_pbm,
    write_pgm,
    write_ppm,
)
from .world import (
    OBJECT_CLASSES,
    STATIC_CLASSES,
    bev_labels,
    image_labels,
    scene_from_dict,
    scene_to_dict,
)

_CLASS_NAMES = STATIC_CLASSES + OBJECT_CLASSES
_MEAN_ROWS = ("4-Mean", "7-Mean")


class UsageError(Exception):
    """Bad arguments or inconsistent inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default; this tool reserves 2 for I/O.
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser):
    parser.add_argument("--config", help="scenario YAML (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--frames", type=int, help="override the window length")
    parser.add_argument("--interval", type=int, help="override the frame interval")
    parser.add_argument(
        "--components",
        help="comma subset of img,bev,temp selecting active branches",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="monobev", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True, help="dataset directory to create")
    _add_common(p)
    p.set_defaults(run=cmd_generate)

    p = sub.add_parser("train", help="train the heads on a dataset")
    p.add_argument("dataset", help="directory produced by generate")
    p.add_argument("--out", required=True, help="run directory for model and logs")
    _add_common(p)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on the eval split")
    p.add_argument("dataset", help="directory produced by generate")
    p.add_argument("model", help="model YAML produced by train")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument(
        "--mask",
        choices=("occlusion", "fov"),
        default="occlusion",
        help="score under FOV+occlusion (default) or FOV alone",
    )
    p.add_argument("--noise-std", type=float, default=0.0,
                   help="correspondence noise in meters, applied at scoring time")
    _add_common(p)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis and tabulate IoU rows")
    p.add_argument("axis", choices=sorted(ABLATION_AXES), help="quantity to sweep")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--mask", choices=("occlusion", "fov"), default="occlusion")
    _add_common(p)
    p.set_defaults(run=cmd_ablate)

    return parser


def _parse_components(text: str):
    toggles = {"img": False, "bev": False, "temp": False}
    for token in text.split(","):
        token = token.strip().lower()
        if token not in toggles:
            raise UsageError(
                f"unknown component {token!r}; expected a subset of img,bev,temp"
            )
        toggles[token] = True
    return toggles


def _load_config(args, base=None) -> ScenarioConfig:
    if getattr(args, "config", None):
        config = config_from_dict(load_yaml(args.config))
    elif base is not None:
        config = base
    else:
        config = ScenarioConfig()
    updates = {}
    for field in ("seed", "frames", "interval"):
        value = getattr(args, field, None)
        if value is not None:
            updates[field] = value
    if getattr(args, "components", None):
        toggles = _parse_components(args.components)
        updates.update(
            use_image=toggles["img"],
            use_bev=toggles["bev"],
            use_temporal=toggles["temp"],
        )
    if updates:
        config = dataclasses.replace(config, **updates)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return config


def _dataset_config(args) -> ScenarioConfig:
    base = config_from_dict(load_yaml(Path(args.dataset) / "scenario.yaml"))
    return _load_config(args, base=base)


def _load_split(dataset, prefix: str):
    dataset = Path(dataset)
    dirs = sorted(
        p for p in dataset.iterdir()
        if p.is_dir() and p.name.startswith(prefix + "_")
    )
    if not dirs:
        raise UsageError(f"no {prefix} scenes under {dataset}")
    return [scene_from_dict(load_yaml(d / "scene.yaml")) for d in dirs]


def _write_scene_dir(directory: Path, scene, sample, written):
    directory.mkdir(parents=True, exist_ok=True)

    def emit(name, writer, payload):
        path = directory / name
        writer(path, payload)
        written.append(path)

    emit("scene.yaml", save_yaml, scene_to_dict(scene))
    for frame in sample.frames:
        emit(f"frame_{frame.timestamp:07.3f}s.ppm", write_ppm, frame.image)
    emit("labels.grid", write_grid, sample.labels)
    emit("fov.pbm", write_pbm, sample.visible_fov)
    emit("occlusion.pbm", write_pbm, sample.occlusion)


def _write_frame_labels(directory: Path, config, scene, sample, written):
    """Full-resolution packed pixel labels, one graymap per frame."""
    rig = config.rig()
    target = config.grid_spec()
    ref_world = reference_world_pose(scene, sample.frames[sample.reference_index])
    label_warp = analytic_ground_homography(rig.camera, rig.mount)
    for frame in sample.frames:
        world_pose = ref_world.compose(frame.pose)
        labels = image_labels(
            bev_labels(scene, world_pose, target, frame.timestamp),
            label_warp,
            rig.camera,
        )
        packed = pack_image_labels(labels)
        path = directory / f"frame_{frame.timestamp:07.3f}s_labels.pgm"
        write_pgm(path, packed.astype(float) / 255.0)
        written.append(path)


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    scenario_path = out / "scenario.yaml"
    save_yaml(scenario_path, config_to_dict(config))
    written.append(scenario_path)

    for split in ("train", "eval"):
        for i, scene in enumerate(generate_split(config, split)):
            directory = out / f"{split}_{i:03d}"
            sample = build_scene_sample(scene, config)
            _write_scene_dir(directory, scene, sample, written)
            _write_frame_labels(directory, config, scene, sample, written)

    manifest = out / "manifest.json"
    write_manifest(manifest, written, base_dir=out)
    print(f"wrote {len(written)} artifacts under {out} (manifest: {manifest})")
    return 0


def _loss_rows(history):
    sites = ("image_static", "image_object", "bev_static", "bev_object")
    length = max(len(v) for v in history.values())
    rows = []
    for epoch in range(length):
        values = {
            s: (history[s][epoch] if s in history else 0.0) for s in sites
        }
        bev = values["bev_static"] + values["bev_object"]
        total = values["image_static"] + values["image_object"] + bev
        rows.append(
            (
                epoch,
                f"{values['image_static']:.8f}",
                f"{values['image_object']:.8f}",
                f"{bev:.8f}",
                f"{total:.8f}",
            )
        )
    return rows


def cmd_train(args) -> int:
    config = _dataset_config(args)
    scenes = _load_split(args.dataset, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model, history = train_scenario(config, scenes)

    model_path = out / "model.yaml"
    save_yaml(model_path, model_to_dict(model))
    loss_path = out / "loss.csv"
    write_csv(
        loss_path,
        ("epoch", "image_static_loss", "image_object_loss", "bev_loss", "total"),
        _loss_rows(history),
    )
    save_loss_curves(out / "loss.png", history)
    write_manifest(out / "manifest.json", [model_path, loss_path], base_dir=out)
    final = _loss_rows(history)[-1]
    print(f"trained {len(scenes)} scenes, final total loss {final[-1]} -> {model_path}")
    return 0


def _iou_rows(summary):
    rows = [(name, f"{summary.class_iou[name]:.6f}") for name in _CLASS_NAMES]
    rows.append(("4-Mean", f"{summary.mean_static:.6f}"))
    rows.append(("7-Mean", f"{summary.mean_overall:.6f}"))
    return rows


def _confusion_rows(confusion):
    names = ("background",) + OBJECT_CLASSES
    return [
        (true_name, *(int(c) for c in confusion[i]))
        for i, true_name in enumerate(names)
    ]


def cmd_eval(args) -> int:
    config = _dataset_config(args)
    scenes = _load_split(args.dataset, "eval")
    model = model_from_dict(load_yaml(args.model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    n_static = len(STATIC_CLASSES)
    reports = []
    for i, scene in enumerate(scenes):
        sample = build_scene_sample(scene, config, noise_std=args.noise_std)
        mask = sample.eval_mask if args.mask == "occlusion" else sample.visible_fov
        static_probs, object_probs = predict_sample(model, sample)
        static_bin, object_bin = threshold_predictions(static_probs, object_probs)
        truth = sample.labels.data
        reports.append(
            evaluate(static_bin, object_bin, truth[..., :n_static],
                     truth[..., n_static:], mask)
        )

        directory = out / f"eval_{i:03d}"
        directory.mkdir(parents=True, exist_ok=True)
        grid_spec = sample.labels.spec
        write_grid(directory / "prediction_static.grid",
                   BevGrid(grid_spec.with_channels(n_static), static_probs))
        write_grid(directory / "prediction_objects.grid",
                   BevGrid(grid_spec.with_channels(object_probs.shape[-1]), object_probs))
        write_pbm(directory / "mask.pbm", mask)
        write_ppm(directory / "prediction.ppm",
                  class_composite(static_bin, object_bin, mask))
        write_ppm(directory / "truth.ppm",
                  class_composite(truth[..., :n_static], truth[..., n_static:], mask))
        for c, name in enumerate(STATIC_CLASSES):
            write_ppm(directory / f"difference_{name}.ppm",
                      error_overlay(static_bin[..., c], truth[..., c], mask))
        for c, name in enumerate(OBJECT_CLASSES):
            write_ppm(
                directory / f"difference_{name}.ppm",
                error_overlay(object_bin[..., c + 1],
                              truth[..., n_static + c + 1], mask),
            )

    summary = average_reports(reports)
    write_csv(out / "iou.csv", ("class", "iou"), _iou_rows(summary))
    write_csv(
        out / "confusion.csv",
        ("class", "background") + OBJECT_CLASSES,
        _confusion_rows(summary.confusion),
    )
    save_iou_bars(out / "iou.png", summary,
                  title=f"per-class IoU ({args.mask} mask)")
    save_confusion_heatmap(out / "confusion.png", summary.confusion)

    for name, value in _iou_rows(summary):
        print(f"{name:>12}: {value}")
    print(f"{'cells':>12}: {summary.cell_count}")
    return 0


def _ablation_rows(axis, config, scenes, mask_kind):
    """(value, summary) pairs for one sweep axis."""
    values = ABLATION_AXES[axis]
    if axis == "components":
        rows = []
        for label in values:
            row_config = with_components(config, label)
            model, _ = train_scenario(row_config)
            summary, _ = evaluate_scenario(
                row_config, model, mask_kind=mask_kind, scenes=scenes
            )
            rows.append((label, summary))
        return rows

    model, _ = train_scenario(config)
    rows = []
    for value in values:
        if axis == "frames":
            summary, _ = evaluate_scenario(
                config, model, n_frames=value, mask_kind=mask_kind, scenes=scenes
            )
        elif axis == "interval":
            summary, _ = evaluate_scenario(
                config, model, interval=value, mask_kind=mask_kind, scenes=scenes
            )
        else:  # noise
            summary, _ = evaluate_scenario(
                config, model, noise_std=value, mask_kind=mask_kind, scenes=scenes
            )
        rows.append((value, summary))
    return rows


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scenes = generate_split(config, "eval")
    rows = _ablation_rows(args.axis, config, scenes, args.mask)

    header = (args.axis,) + _CLASS_NAMES + _MEAN_ROWS
    table = []
    for value, summary in rows:
        table.append(
            (value,)
            + tuple(f"{summary.class_iou[n]:.6f}" for n in _CLASS_NAMES)
            + (f"{summary.mean_static:.6f}", f"{summary.mean_overall:.6f}")
        )
    write_csv(out / "ablation.csv", header, table)
    save_trend(out / "trend.png", args.axis, [v for v, _ in rows],
               [s for _, s in rows])

    width = max(len(str(v)) for v, _ in rows)
    for value, summary in rows:
        print(
            f"{args.axis} {value!s:>{width}}: 4-Mean {summary.mean_static:.4f} "
            f"7-Mean {summary.mean_overall:.4f}"
        )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.run(args)
    except UsageError as exc:
        print(f"monobev: error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"monobev: training diverged: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        detail = getattr(exc, "filename", None) or ""
        suffix = f" [{detail}]" if detail else ""
        print(f"monobev: i/o error: {exc}{suffix}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
