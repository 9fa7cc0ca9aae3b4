"""Command-line entry point: dataset synthesis, graph building, the three
training phases, evaluation, and segmentation artifact emission.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import attribution as attr
from . import imaging, metrics, synth, training
from .autodiff import softmax
from .gleason import decode_prediction
from .config import ConfigError, TrainConfig, load_config
from .gleason import (CLASS_INDEX, PATTERN_CLASSES, GleasonLabel, LabelError,
                      gleason_to_isup, mask_from_node_labels)
from .graph import (DefaultEncoder, GraphError, TissueGraph, build_tissue_graph,
                    load_embedding_sidecar, load_graph, save_graph)
from .imaging import ImagingError, SuperpixelMap, load_superpixel_map, read_image, save_superpixel_map
from .model import ModelError, load_checkpoint, save_checkpoint
from .synth import SynthError, SyntheticSpec
from .training import TrainingError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# overlay palette: benign transparent, G3 green, G4 blue, G5 red
OVERLAY_COLORS = {1: (0, 200, 0), 2: (0, 0, 230), 3: (230, 0, 0)}
OVERLAY_ALPHA = 0.5


class DataError(ValueError):
    pass


@dataclass
class ManifestRow:
    image_path: str
    mask_path: str | None
    label: GleasonLabel
    split: str

    @property
    def stem(self) -> str:
        return os.path.splitext(os.path.basename(self.image_path))[0]


def load_manifest(path: str, check_paths: bool = True) -> list[ManifestRow]:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_path", "mask_path", "primary", "secondary", "split"]:
            raise DataError(f"malformed manifest header in {path}")
        for raw in reader:
            if len(raw) != 5:
                raise DataError(f"malformed manifest row: {raw!r}")
            image_path, mask_path, primary, secondary, split = raw
            if split not in ("train", "val", "test"):
                raise DataError(f"invalid split {split!r}")
            if check_paths and not os.path.exists(image_path):
                raise DataError(f"image not found: {image_path}")
            if mask_path and check_paths and not os.path.exists(mask_path):
                raise DataError(f"mask not found: {mask_path}")
            try:
                label = GleasonLabel(primary, secondary)
            except LabelError as exc:
                raise DataError(str(exc)) from exc
            rows.append(ManifestRow(image_path, mask_path or None, label, split))
    if not rows:
        raise DataError(f"empty manifest: {path}")
    return rows


def load_graphs_for_split(data_dir: str, manifest: list[ManifestRow],
                          split: str | None) -> list[TissueGraph]:
    graphs = []
    for row in manifest:
        if split is not None and row.split != split:
            continue
        path = os.path.join(data_dir, "graphs", row.stem + ".json")
        if not os.path.exists(path):
            raise DataError(f"graph not found: {path} (run build-graph first)")
        g = load_graph(path)
        g.image_label = (row.label.primary, row.label.secondary)
        graphs.append(g)
    if not graphs:
        raise DataError(f"no graphs for split {split!r}")
    return graphs


def _config_from_args(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    for key in ("batch_size", "lr", "num_layers", "lambda_weight", "select_percent",
                "select_threshold", "finetune_lr", "epochs_graph", "epochs_node",
                "epochs_finetune", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "allow_offgrid", False):
        cfg.allow_offgrid = True
    cfg.validate()
    return cfg


def _write_phase(out_dir: str, phase: str, result: training.PhaseResult,
                 cfg: TrainConfig, optimizer_state=None) -> str:
    phase_dir = os.path.join(out_dir, phase)
    os.makedirs(phase_dir, exist_ok=True)
    ckpt = os.path.join(phase_dir, "best.ckpt")
    save_checkpoint(ckpt, result.model, optimizer_state,
                    extra={"phase": phase, "seed": cfg.seed,
                           "best_epoch": result.best_epoch,
                           "best_val_wf1": result.best_val_wf1})
    tmp = os.path.join(phase_dir, "metrics.json.tmp")
    with open(tmp, "w") as f:
        json.dump({"history": result.history, "best_epoch": result.best_epoch,
                   "best_val_wf1": result.best_val_wf1}, f, indent=2)
    os.replace(tmp, os.path.join(phase_dir, "metrics.json"))
    return ckpt


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args) -> int:
    colors = synth.OVERLAPPING_COLORS if args.overlap else synth.DEFAULT_COLORS
    spec = SyntheticSpec(width=args.size, height=args.size,
                         min_regions=args.min_regions, max_regions=args.max_regions,
                         class_colors=dict(colors), noise_std=args.noise,
                         seed=args.seed)
    manifest = synth.generate_dataset(
        spec, {"train": args.train, "val": args.val, "test": args.test}, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def _node_labels_from_mask(sp: SuperpixelMap, mask: np.ndarray) -> np.ndarray:
    labels = np.zeros(sp.num_segments, dtype=np.int64)
    for seg in range(sp.num_segments):
        values = mask[sp.labels == seg]
        labels[seg] = int(np.bincount(values, minlength=len(PATTERN_CLASSES)).argmax())
    return labels


def _build_one_graph(img_path: str, args, label: GleasonLabel,
                     mask_path: str | None, stem: str):
    img = read_image(img_path)
    if args.stain_ref:
        stats = [float(v) for v in args.stain_ref.split(",")]
        if len(stats) != 6:
            raise DataError("--stain-ref expects 6 comma-separated values (3 means, 3 stds)")
        img = imaging.normalize_stain(img, stats[:3], stats[3:])
    sp = imaging.slic(img, args.n_segments, args.compactness, args.iters)
    sp = imaging.hierarchical_merge(img, sp, args.merge_threshold, args.max_nodes)
    node_labels = None
    if mask_path:
        mask = np.asarray(Image.open(mask_path)).astype(np.int64)
        if mask.shape != sp.labels.shape:
            raise DataError(f"mask dimensions differ from image for {stem}")
        node_labels = _node_labels_from_mask(sp, mask)
    precomputed = None
    if args.embeddings:
        sidecar = os.path.join(args.embeddings, stem + ".csv")
        if not os.path.exists(sidecar):
            raise DataError(f"embedding sidecar not found: {sidecar}")
        precomputed = load_embedding_sidecar(sidecar)
    augment_fn = None
    if args.augment_seed is not None:
        augment_fn = training.make_augment_fn(args.augment_seed)
    g = build_tissue_graph(img, sp, DefaultEncoder(),
                           image_label=(label.primary, label.secondary),
                           node_labels=node_labels, patch_stride=args.stride,
                           graph_id=stem, precomputed=precomputed,
                           augment_fn=augment_fn)
    return g, sp


def cmd_build_graph(args) -> int:
    manifest = load_manifest(args.manifest)
    graph_dir = os.path.join(args.out, "graphs")
    sp_dir = os.path.join(args.out, "superpixels")
    os.makedirs(graph_dir, exist_ok=True)
    os.makedirs(sp_dir, exist_ok=True)
    for row in manifest:
        g, sp = _build_one_graph(row.image_path, args, row.label, row.mask_path, row.stem)
        save_graph(g, os.path.join(graph_dir, row.stem + ".json"))
        save_superpixel_map(sp, os.path.join(sp_dir, row.stem + ".png"))
    print(f"built {len(manifest)} graphs in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(args.manifest, check_paths=False)
    train_graphs = load_graphs_for_split(args.data, manifest, "train")
    val_graphs = load_graphs_for_split(args.data, manifest, "val")
    if args.supervision == "full":
        result = training.train_fully_supervised_nodes(train_graphs, val_graphs, cfg)
        ckpt = _write_phase(args.out, "multiplex", result, cfg)
    else:
        result = training.train_graph_phase(train_graphs, val_graphs, cfg)
        ckpt = _write_phase(args.out, "phase1", result, cfg)
    print(f"wrote {ckpt} (best val wF1 {result.best_val_wf1})")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    cfg = _config_from_args(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, check_paths=False)
    graphs = load_graphs_for_split(args.data, manifest, "train")
    pseudo = training.generate_pseudo_labels(model, graphs, cfg)
    attr.save_pseudo_labels(args.out, pseudo)
    n_assigned = sum(len(p.assignments) for p in pseudo.values())
    print(f"wrote {args.out} ({n_assigned} node labels over {len(pseudo)} graphs)")
    return EXIT_OK


def cmd_train_nodes(args) -> int:
    cfg = _config_from_args(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, check_paths=False)
    graphs = load_graphs_for_split(args.data, manifest, "train")
    pseudo = attr.load_pseudo_labels(args.pseudo)
    result = training.train_node_phase(graphs, pseudo, cfg, model)
    ckpt = _write_phase(args.out, "phase2", result, cfg)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, check_paths=False)
    train_graphs = load_graphs_for_split(args.data, manifest, "train")
    val_graphs = load_graphs_for_split(args.data, manifest, "val")
    pseudo = attr.load_pseudo_labels(args.pseudo)
    result = training.finetune_joint(train_graphs, pseudo, val_graphs, cfg, model)
    ckpt = _write_phase(args.out, "phase3", result, cfg)
    print(f"wrote {ckpt} (best val wF1 {result.best_val_wf1})")
    return EXIT_OK


def _load_mask(path: str) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)


def cmd_evaluate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, check_paths=False)
    rows = [r for r in manifest if r.split == args.split]
    if not rows:
        raise DataError(f"no rows for split {args.split!r}")
    graphs = load_graphs_for_split(args.data, manifest, args.split)

    gg_preds, gg_gts, isup_preds, isup_gts = [], [], [], []
    p_preds, p_gts, s_preds, s_gts = [], [], [], []
    probs_primary, probs_secondary = [], []
    coerced_count = 0
    pred_masks, gt_masks = [], []

    for row, g in zip(rows, graphs):
        result = model.forward(g, training=False)
        pp = softmax(result.logits_primary.data)[0]
        ps = softmax(result.logits_secondary.data)[0]
        pred_label, coerced = decode_prediction(pp, ps)
        coerced_count += int(coerced)
        probs_primary.append(pp)
        probs_secondary.append(ps)
        gg_preds.append(pred_label.gg_string())
        gg_gts.append(row.label.gg_string())
        isup_preds.append(gleason_to_isup(pred_label))
        isup_gts.append(gleason_to_isup(row.label))
        p_preds.append(pred_label.primary)
        p_gts.append(row.label.primary)
        s_preds.append(pred_label.secondary)
        s_gts.append(row.label.secondary)
        if row.mask_path:
            sp = load_superpixel_map(os.path.join(args.data, "superpixels", row.stem + ".png"))
            if args.segmentation == "attribution":
                node_classes = attr.attribution_argmax_classes(model, g)
            else:
                node_classes = training.predict_node_classes(model, g)
            pred_mask = mask_from_node_labels(sp, node_classes)
            pred_masks.append(pred_mask)
            gt_masks.append(_load_mask(row.mask_path))
            if args.masks_out:
                os.makedirs(args.masks_out, exist_ok=True)
                Image.fromarray(pred_mask.astype(np.uint8)).save(
                    os.path.join(args.masks_out, row.stem + ".png"))

    report = metrics.MetricReport()
    report.weighted_f1 = metrics.weighted_f1(gg_preds, gg_gts)
    report.quadratic_kappa = metrics.quadratic_kappa(isup_preds, isup_gts)

    probs_primary = np.stack(probs_primary)
    probs_secondary = np.stack(probs_secondary)
    p_targets = np.array([CLASS_INDEX[c] for c in p_gts])
    s_targets = np.array([CLASS_INDEX[c] for c in s_gts])
    b_p, n_p = metrics.brier_nll(probs_primary, p_targets)
    b_s, n_s = metrics.brier_nll(probs_secondary, s_targets)
    b_c, n_c = metrics.brier_nll(np.concatenate([probs_primary, probs_secondary]),
                                 np.concatenate([p_targets, s_targets]))
    report.brier = {"primary": b_p, "secondary": b_s, "combined": b_c}
    report.nll = {"primary": n_p, "secondary": n_s, "combined": n_c}

    conf_p = probs_primary.max(axis=1)
    correct_p = probs_primary.argmax(axis=1) == p_targets
    conf_s = probs_secondary.max(axis=1)
    correct_s = probs_secondary.argmax(axis=1) == s_targets
    report.ece = {
        "primary": metrics.ece(conf_p, correct_p, args.bins),
        "secondary": metrics.ece(conf_s, correct_s, args.bins),
    }
    report.reliability = metrics.reliability_bins(conf_p, correct_p, args.bins)

    gg_labels = sorted(set(gg_gts) | set(gg_preds) | {"B"})
    report.confusion = {
        "gg": {"labels": gg_labels,
               "matrix": metrics.confusion_matrix(gg_preds, gg_gts, gg_labels)},
        "isup": {"labels": list(range(6)),
                 "matrix": metrics.confusion_matrix(isup_preds, isup_gts, list(range(6)))},
        "primary": {"labels": list(PATTERN_CLASSES),
                    "matrix": metrics.confusion_matrix(p_preds, p_gts, list(PATTERN_CLASSES))},
        "secondary": {"labels": list(PATTERN_CLASSES),
                      "matrix": metrics.confusion_matrix(s_preds, s_gts, list(PATTERN_CLASSES))},
    }
    report.notes = {"coerced_predictions": coerced_count,
                    "segmentation_source": args.segmentation,
                    "num_samples": len(rows)}

    if pred_masks:
        per_class, avg = metrics.dice_scores(pred_masks, gt_masks,
                                             list(range(len(PATTERN_CLASSES))))
        report.dice_per_class = {PATTERN_CLASSES[c]: v for c, v in per_class.items()}
        report.dice_avg = avg

    report.save(args.out)
    metrics.save_reliability_csv(os.path.splitext(args.out)[0] + "_reliability.csv",
                                 report.reliability)
    print(f"wrote {args.out} (wF1 {report.weighted_f1:.4f}, "
          f"dice {report.dice_avg if report.dice_avg is not None else 'n/a'})")
    return EXIT_OK


def make_overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    overlay = img.astype(np.float64).copy()
    for cls, color in OVERLAY_COLORS.items():
        sel = mask == cls
        overlay[sel] = (1 - OVERLAY_ALPHA) * overlay[sel] + OVERLAY_ALPHA * np.array(color)
    return np.clip(np.rint(overlay), 0, 255).astype(np.uint8)


def cmd_segment(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    img = read_image(args.image)
    g, sp = _build_one_graph(args.image, args, GleasonLabel("B", "B"), None, "segment")
    g.image_label = None
    node_classes = training.predict_node_classes(model, g)
    mask = mask_from_node_labels(sp, node_classes)
    tmp = args.out_mask + ".tmp.png"
    Image.fromarray(mask.astype(np.uint8)).save(tmp)
    os.replace(tmp, args.out_mask)
    if args.out_overlay:
        tmp = args.out_overlay + ".tmp.png"
        Image.fromarray(make_overlay(img, mask)).save(tmp)
        os.replace(tmp, args.out_overlay)
    print(f"wrote {args.out_mask}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--lambda", dest="lambda_weight", type=float)
    p.add_argument("--select-percent", dest="select_percent", type=float)
    p.add_argument("--select-threshold", dest="select_threshold", type=float)
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float)
    p.add_argument("--epochs-graph", dest="epochs_graph", type=int)
    p.add_argument("--epochs-node", dest="epochs_node", type=int)
    p.add_argument("--epochs-finetune", dest="epochs_finetune", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-offgrid", dest="allow_offgrid", action="store_true")


def _add_build_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-segments", dest="n_segments", type=int, default=48)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--merge-threshold", dest="merge_threshold", type=float, default=0.08)
    p.add_argument("--max-nodes", dest="max_nodes", type=int, default=24)
    p.add_argument("--stride", type=int, default=144)
    p.add_argument("--stain-ref", dest="stain_ref",
                   help="6 comma-separated reference values: R,G,B means then stds")
    p.add_argument("--embeddings", help="directory of per-image embedding sidecar CSVs")
    p.add_argument("--augment-seed", dest="augment_seed", type=int,
                   help="enable geometric patch augmentation with this seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphseg",
                                     description="Weakly supervised tissue-graph "
                                                 "segmentation and classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic Voronoi dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=60)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--min-regions", dest="min_regions", type=int, default=3)
    p.add_argument("--max-regions", dest="max_regions", type=int, default=6)
    p.add_argument("--noise", type=float, default=6.0)
    p.add_argument("--overlap", action="store_true",
                   help="use heavily overlapping class colors")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-graph", help="build tissue graphs from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_build_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="phase 1: train backbone and graph heads")
    p.add_argument("--data", required=True, help="build-graph output directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint root directory")
    p.add_argument("--supervision", choices=("weak", "full"), default="weak")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", help="synthesize node pseudo-labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-nodes", help="phase 2: train node head on pseudo-labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_nodes)

    p = sub.add_parser("finetune", help="phase 3: joint fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="compute the metric report on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--segmentation", choices=("node", "attribution"), default="node")
    p.add_argument("--masks-out", dest="masks_out", help="directory for predicted masks")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("segment", help="segment one image with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask", dest="out_mask", required=True)
    p.add_argument("--out-overlay", dest="out_overlay")
    _add_build_flags(p)
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        with np.errstate(over="raise", invalid="raise"):
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, ImagingError, LabelError, ModelError,
            SynthError, TrainingError, attr.AttributionError, metrics.MetricError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError, ZeroDivisionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
