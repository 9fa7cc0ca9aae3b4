#!/usr/bin/env python3
"""Compare segmentation quality of three supervision regimes across seeds:
attribution argmax (no node training), the weak pipeline (pseudo-labels +
fine-tuning), and full node supervision.

Expects a dataset directory produced by `graphseg synth-data` + `build-graph`
(e.g. the `data/` directory written by run_synthetic_pipeline.py).

Example:
    python3 scripts/compare_supervision.py --data /tmp/demo/data --seeds 0 1 2
"""

import argparse
import os

import numpy as np
from PIL import Image

from graphseg.attribution import attribution_argmax_classes
from graphseg.cli import load_graphs_for_split, load_manifest
from graphseg.config import TrainConfig
from graphseg.gleason import mask_from_node_labels
from graphseg.imaging import load_superpixel_map
from graphseg.metrics import dice_scores
from graphseg.training import (finetune_joint, generate_pseudo_labels,
                               predict_node_classes,
                               train_fully_supervised_nodes, train_graph_phase,
                               train_node_phase)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()

    manifest = load_manifest(os.path.join(args.data, "manifest.csv"),
                             check_paths=False)
    train = load_graphs_for_split(args.data, manifest, "train")
    val = load_graphs_for_split(args.data, manifest, "val")
    test = load_graphs_for_split(args.data, manifest, "test")
    rows = [r for r in manifest if r.split == "test"]
    sps = [load_superpixel_map(os.path.join(args.data, "superpixels",
                                            r.stem + ".png")) for r in rows]
    gts = [np.asarray(Image.open(r.mask_path)).astype(int) for r in rows]

    def avg_dice(node_cls_fn):
        preds = [mask_from_node_labels(sp, node_cls_fn(g))
                 for sp, g in zip(sps, test)]
        return dice_scores(preds, gts, range(4))[1]

    print(f"{'seed':>4}  {'attribution':>11}  {'weak':>6}  {'supervised':>10}")
    for seed in args.seeds:
        cfg = TrainConfig(seed=seed)
        r1 = train_graph_phase(train, val, cfg)
        attr = avg_dice(lambda g: attribution_argmax_classes(r1.model, g))
        pseudo = generate_pseudo_labels(r1.model, train, cfg)
        r2 = train_node_phase(train, pseudo, cfg, r1.model)
        r3 = finetune_joint(train, pseudo, val, cfg, r2.model)
        weak = avg_dice(lambda g: predict_node_classes(r3.model, g))
        rf = train_fully_supervised_nodes(train, val, cfg)
        full = avg_dice(lambda g: predict_node_classes(rf.model, g))
        print(f"{seed:>4}  {attr:>11.4f}  {weak:>6.4f}  {full:>10.4f}")


if __name__ == "__main__":
    main()
