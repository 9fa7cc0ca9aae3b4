"""Three-phase training schedule: graph heads, pseudo-labeled node head with a
frozen backbone, and joint fine-tuning. Also the fully supervised multi-task
mode used as an upper bound, and geometric patch augmentation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attribution import PseudoLabelSet, attribution_maps, synthesize_pseudo_labels
from .config import TrainConfig
from .gleason import (CLASS_INDEX, PATTERN_CLASSES, GleasonLabel, class_weights,
                      decode_prediction, graph_loss, node_loss)
from .graph import TissueGraph
from .metrics import weighted_f1
from .model import ModelConfig, TissueGraphModel
from .optim import make_optimizer


class TrainingError(ValueError):
    pass


@dataclass
class PhaseResult:
    model: TissueGraphModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_wf1: float | None = None


def _require_labels(graphs: list[TissueGraph]) -> None:
    if not graphs:
        raise TrainingError("empty training set")
    for g in graphs:
        if g.image_label is None:
            raise TrainingError(f"graph {g.graph_id!r} lacks an image label")


def graph_label(g: TissueGraph) -> GleasonLabel:
    return GleasonLabel(*g.image_label)


def pattern_counts_from_graphs(graphs: list[TissueGraph]) -> np.ndarray:
    """Class occurrence counts pooled over primary and secondary labels."""
    counts = np.zeros(len(PATTERN_CLASSES))
    for g in graphs:
        lab = graph_label(g)
        counts[CLASS_INDEX[lab.primary]] += 1
        counts[CLASS_INDEX[lab.secondary]] += 1
    return counts


def pattern_counts_from_node_labels(label_arrays: list[np.ndarray]) -> np.ndarray:
    counts = np.zeros(len(PATTERN_CLASSES))
    for labels in label_arrays:
        for k in range(len(PATTERN_CLASSES)):
            counts[k] += int(np.count_nonzero(labels == k))
    return counts


def model_config(cfg: TrainConfig, feature_dim: int) -> ModelConfig:
    return ModelConfig(
        feature_dim=feature_dim,
        num_layers=cfg.num_layers,
        hidden_dim=cfg.hidden_dim,
        head_hidden=cfg.head_hidden,
        dropout_backbone=cfg.dropout_backbone,
        dropout_heads=cfg.dropout_graph_head,
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict_graph_label(model: TissueGraphModel, g: TissueGraph) -> tuple[GleasonLabel, np.ndarray, np.ndarray]:
    result = model.forward(g, training=False)
    probs_p = ad.softmax(result.logits_primary.data)[0]
    probs_s = ad.softmax(result.logits_secondary.data)[0]
    label, _ = decode_prediction(probs_p, probs_s)
    return label, probs_p, probs_s


def predict_node_classes(model: TissueGraphModel, g: TissueGraph) -> np.ndarray:
    result = model.forward(g, training=False)
    return np.argmax(result.node_logits.data, axis=1)


def validation_wf1(model: TissueGraphModel, graphs: list[TissueGraph]) -> float:
    preds = []
    gts = []
    for g in graphs:
        label, _, _ = predict_graph_label(model, g)
        preds.append(label.gg_string())
        gts.append(graph_label(g).gg_string())
    return weighted_f1(preds, gts)


def _run_epochs(
    model: TissueGraphModel,
    train_graphs: list[TissueGraph],
    val_graphs: list[TissueGraph] | None,
    cfg: TrainConfig,
    epochs: int,
    lr: float,
    loss_fn,
    rng: np.random.Generator,
) -> PhaseResult:
    """Generic epoch loop with best-by-validation-wF1 selection (ties -> earlier
    epoch) and early stopping after cfg.early_stop_patience stagnant epochs."""
    optimizer = make_optimizer(cfg.optimizer, lr)
    history: list[dict] = []
    best_state = model.state_dict()
    best_epoch = None
    stagnant = 0
    select = bool(val_graphs)
    # the incoming model is the selection baseline, so a phase can never end
    # on a checkpoint that scores worse on validation than its starting point
    best_wf1 = validation_wf1(model, val_graphs) if select else -np.inf
    for epoch in range(epochs):
        epoch_loss = 0.0
        n_batches = 0
        for batch in _batches(len(train_graphs), cfg.batch_size, rng):
            terms = []
            for idx in batch:
                terms.append((1.0 / len(batch), loss_fn(model, train_graphs[idx], rng)))
            loss = ad.add_scaled(terms)
            grads = model.gradients(loss)
            optimizer.step(model.params, grads)
            epoch_loss += float(loss.data)
            n_batches += 1
        record = {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        if select:
            wf1 = validation_wf1(model, val_graphs)
            record["val_wf1"] = wf1
            if wf1 > best_wf1:
                best_wf1 = wf1
                best_epoch = epoch
                best_state = model.state_dict()
                stagnant = 0
            else:
                stagnant += 1
        history.append(record)
        if select and stagnant >= cfg.early_stop_patience:
            break
    if select:
        model.load_state_dict(best_state)
    return PhaseResult(model=model, history=history,
                       best_epoch=best_epoch,
                       best_val_wf1=None if not select else best_wf1)


# ---------------------------------------------------------------------------
# phase 1: graph classification

def train_graph_phase(train_graphs: list[TissueGraph], val_graphs: list[TissueGraph],
                      cfg: TrainConfig, model: TissueGraphModel | None = None) -> PhaseResult:
    _require_labels(train_graphs)
    if model is None:
        model = TissueGraphModel(model_config(cfg, train_graphs[0].feature_dim), seed=cfg.seed)
    weights = class_weights(pattern_counts_from_graphs(train_graphs))
    lam = cfg.lambda_weight

    def loss_fn(m, g, rng):
        result = m.forward(g, training=True, rng=rng)
        return graph_loss(result.logits_primary, result.logits_secondary,
                          graph_label(g), lam, weights)

    rng = np.random.default_rng(cfg.seed)
    return _run_epochs(model, train_graphs, val_graphs, cfg,
                       cfg.epochs_graph, cfg.lr, loss_fn, rng)


# ---------------------------------------------------------------------------
# pseudo-label generation

def generate_pseudo_labels(model: TissueGraphModel, graphs: list[TissueGraph],
                           cfg: TrainConfig) -> dict[str, PseudoLabelSet]:
    _require_labels(graphs)
    out: dict[str, PseudoLabelSet] = {}
    for g in graphs:
        label = graph_label(g)
        ip, isec = attribution_maps(model, g, label)
        out[g.graph_id] = synthesize_pseudo_labels(
            ip, isec, label, cfg.select_percent, cfg.select_threshold)
    return out


# ---------------------------------------------------------------------------
# phase 2: node classification on pseudo labels, backbone frozen

def train_node_phase(train_graphs: list[TissueGraph],
                     pseudo: dict[str, PseudoLabelSet],
                     cfg: TrainConfig, model: TissueGraphModel) -> PhaseResult:
    label_arrays = {g.graph_id: pseudo[g.graph_id].labels_array(g.num_nodes)
                    for g in train_graphs if g.graph_id in pseudo}
    labeled = [g for g in train_graphs
               if g.graph_id in label_arrays and np.any(label_arrays[g.graph_id] >= 0)]
    if not labeled:
        raise TrainingError("zero labeled nodes across the training set")
    weights = class_weights(pattern_counts_from_node_labels(list(label_arrays.values())))
    model.freeze("backbone", "graph_head_primary", "graph_head_secondary")
    model.unfreeze("node_head")

    def loss_fn(m, g, rng):
        result = m.forward(g, training=True, rng=rng)
        return node_loss(result.node_logits, label_arrays[g.graph_id], weights)

    rng = np.random.default_rng(cfg.seed + 1)
    return _run_epochs(model, labeled, None, cfg, cfg.epochs_node, cfg.lr, loss_fn, rng)


# ---------------------------------------------------------------------------
# phase 3: joint fine-tuning

def finetune_joint(train_graphs: list[TissueGraph],
                   pseudo: dict[str, PseudoLabelSet],
                   val_graphs: list[TissueGraph] | None,
                   cfg: TrainConfig, model: TissueGraphModel,
                   node_loss_weight: float = 1.0) -> PhaseResult:
    _require_labels(train_graphs)
    label_arrays = {g.graph_id: pseudo[g.graph_id].labels_array(g.num_nodes)
                    for g in train_graphs if g.graph_id in pseudo}
    graph_weights = class_weights(pattern_counts_from_graphs(train_graphs))
    node_weights = class_weights(pattern_counts_from_node_labels(list(label_arrays.values())))
    model.unfreeze("backbone", "node_head")
    model.freeze("graph_head_primary", "graph_head_secondary")
    lam = cfg.lambda_weight

    def loss_fn(m, g, rng):
        result = m.forward(g, training=True, rng=rng)
        g_loss = graph_loss(result.logits_primary, result.logits_secondary,
                            graph_label(g), lam, graph_weights)
        labels = label_arrays.get(g.graph_id)
        if labels is None or not np.any(labels >= 0) or node_loss_weight == 0.0:
            return g_loss
        n_loss = node_loss(result.node_logits, labels, node_weights)
        return ad.add_scaled([(1.0, g_loss), (node_loss_weight, n_loss)])

    rng = np.random.default_rng(cfg.seed + 2)
    return _run_epochs(model, train_graphs, val_graphs, cfg,
                       cfg.epochs_finetune, cfg.effective_finetune_lr(), loss_fn, rng)


# ---------------------------------------------------------------------------
# fully supervised multi-task mode (upper bound)

def train_fully_supervised_nodes(train_graphs: list[TissueGraph],
                                 val_graphs: list[TissueGraph] | None,
                                 cfg: TrainConfig,
                                 model: TissueGraphModel | None = None) -> PhaseResult:
    _require_labels(train_graphs)
    for g in train_graphs:
        if g.node_labels is None:
            raise TrainingError(f"graph {g.graph_id!r} lacks ground-truth node labels")
    if model is None:
        model = TissueGraphModel(model_config(cfg, train_graphs[0].feature_dim), seed=cfg.seed)
    graph_weights = class_weights(pattern_counts_from_graphs(train_graphs))
    node_weights = class_weights(
        pattern_counts_from_node_labels([g.node_labels for g in train_graphs]))
    lam = cfg.lambda_weight

    def loss_fn(m, g, rng):
        result = m.forward(g, training=True, rng=rng)
        g_loss = graph_loss(result.logits_primary, result.logits_secondary,
                            graph_label(g), lam, graph_weights)
        n_loss = node_loss(result.node_logits, g.node_labels, node_weights)
        return ad.add_scaled([(1.0, g_loss), (1.0, n_loss)])

    rng = np.random.default_rng(cfg.seed)
    return _run_epochs(model, train_graphs, val_graphs, cfg,
                       cfg.epochs_graph, cfg.lr, loss_fn, rng)


# ---------------------------------------------------------------------------
# patch augmentation

def _rot90(p):
    return np.rot90(p, k=3).copy()  # (x, y) -> (N-1-y, x)


def _rot180(p):
    return np.rot90(p, k=2).copy()


def _rot270(p):
    return np.rot90(p, k=1).copy()


def _flip_h(p):
    return p[:, ::-1].copy()


def _flip_v(p):
    return p[::-1, :].copy()


AUGMENTATIONS = (lambda p: p, _rot90, _rot180, _rot270, _flip_h, _flip_v)


def augment_node_patches(patches: list[np.ndarray], seed: int) -> list[np.ndarray]:
    """Each patch independently receives one uniformly sampled geometric
    transform (identity, rotations by 90/180/270, horizontal/vertical mirror)."""
    rng = np.random.default_rng(seed)
    out = []
    for p in patches:
        p = np.asarray(p)
        if p.shape[0] != p.shape[1]:
            raise TrainingError("augmentation requires square patches")
        out.append(AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))](p))
    return out


def make_augment_fn(seed: int):
    """Per-patch transform sampler for use inside feature extraction."""
    rng = np.random.default_rng(seed)

    def augment(p):
        if p.shape[0] != p.shape[1]:
            return p  # edge-clamped rectangular crops pass through untransformed
        return AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))](p)

    return augment
