"""GIN backbone with Jumping Knowledge, graph classification heads, node head.

The message-passing layer follows the mean-aggregation form
h^{t+1}(v) = MLP(h^t(v) + mean_{u in N(v)} h^t(u)), with the empty
neighborhood contributing a zero vector. The backbone output is the
concatenation of all T layer embeddings; the graph embedding is the mean
readout of that concatenation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import TissueGraph

GROUPS = ("backbone", "graph_head_primary", "graph_head_secondary", "node_head")
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int  # morphology dim; centroids add 2 at the input
    num_layers: int = 4
    hidden_dim: int = 64
    head_hidden: int = 128
    num_classes: int = 4
    dropout_backbone: float = 0.2
    dropout_heads: float = 0.5


@dataclass
class ForwardResult:
    node_embeddings: Tensor  # |V| x (T*hidden), Jumping Knowledge concat
    graph_embedding: Tensor  # 1 x (T*hidden)
    logits_primary: Tensor  # 1 x K
    logits_secondary: Tensor  # 1 x K
    node_logits: Tensor  # |V| x K


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class TissueGraphModel:
    """Holds named parameters grouped by owner, with per-group freeze flags."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.frozen: set[str] = set()
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d_in = cfg.feature_dim + 2
        for t in range(cfg.num_layers):
            fan = d_in if t == 0 else cfg.hidden_dim
            self._add(f"backbone.layer{t}.lin1", rng, fan, cfg.hidden_dim)
            self._add(f"backbone.layer{t}.lin2", rng, cfg.hidden_dim, cfg.hidden_dim)
        jk = cfg.num_layers * cfg.hidden_dim
        for head in ("graph_head_primary", "graph_head_secondary", "node_head"):
            self._add(f"{head}.lin1", rng, jk, cfg.head_hidden)
            self._add(f"{head}.lin2", rng, cfg.head_hidden, cfg.num_classes)

    def _add(self, prefix: str, rng: np.random.Generator, fan_in: int, fan_out: int) -> None:
        self.params[f"{prefix}.w"] = Tensor(glorot_uniform(rng, fan_in, fan_out))
        self.params[f"{prefix}.b"] = Tensor(np.zeros((1, fan_out)))

    # -- freezing ----------------------------------------------------------
    def freeze(self, *groups: str) -> None:
        for g in groups:
            if g not in GROUPS:
                raise ModelError(f"unknown parameter group {g!r}")
            self.frozen.add(g)

    def unfreeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen.discard(g)

    def group_of(self, name: str) -> str:
        return name.split(".")[0] if not name.startswith("backbone") else "backbone"

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if self.group_of(n) not in self.frozen]

    # -- forward -----------------------------------------------------------
    def forward(self, g: TissueGraph, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        if training and rng is None:
            raise ModelError("training-mode forward needs an RNG for dropout")
        x = np.concatenate([g.features, g.centroids], axis=1)
        h = Tensor(x)
        agg = self._aggregation_matrix(g)
        layer_outputs = []
        for t in range(self.cfg.num_layers):
            z = ad.matmul_const(agg, h)
            h = self._mlp(z, f"backbone.layer{t}", self.cfg.dropout_backbone, training, rng)
            layer_outputs.append(h)
        node_emb = ad.concat_cols(layer_outputs)
        graph_emb = ad.mean_rows(node_emb)
        logits_p = self._mlp(graph_emb, "graph_head_primary", self.cfg.dropout_heads, training, rng)
        logits_s = self._mlp(graph_emb, "graph_head_secondary", self.cfg.dropout_heads, training, rng)
        node_logits = self._mlp(node_emb, "node_head", self.cfg.dropout_heads, training, rng)
        return ForwardResult(node_emb, graph_emb, logits_p, logits_s, node_logits)

    def _mlp(self, x: Tensor, prefix: str, dropout: float, training: bool,
             rng: np.random.Generator | None) -> Tensor:
        h = ad.add(ad.matmul(x, self.params[f"{prefix}.lin1.w"]), self.params[f"{prefix}.lin1.b"])
        h = ad.relu(h)
        if training and dropout > 0:
            mask = (rng.random(h.data.shape) >= dropout) / (1.0 - dropout)
            h = ad.scale(h, mask)
        return ad.add(ad.matmul(h, self.params[f"{prefix}.lin2.w"]), self.params[f"{prefix}.lin2.b"])

    @staticmethod
    def _aggregation_matrix(g: TissueGraph) -> np.ndarray:
        n = g.num_nodes
        agg = np.eye(n)
        neigh = g.adjacency_lists()
        for v, ns in enumerate(neigh):
            if ns:
                agg[v, ns] = 1.0 / len(ns)
        return agg

    # -- gradients ---------------------------------------------------------
    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backward pass; returns gradients for unfrozen parameters only."""
        loss.backward()
        grads = {}
        for name in self.trainable_names():
            p = self.params[name]
            # parameters not on the loss path (e.g. unused heads) get zero grads
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        return grads

    # -- checkpoints -------------------------------------------------------
    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ModelError(f"shape mismatch for {name}")
            p.data = value.copy()


def standalone_mlp_forward(x: np.ndarray, layers: list[tuple[np.ndarray, np.ndarray]],
                           dropout_rate: float = 0.0, training: bool = False,
                           rng: np.random.Generator | None = None) -> np.ndarray:
    """Plain MLP evaluation: affine -> ReLU -> inverted dropout -> ... -> affine."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for i, (w, b) in enumerate(layers):
        if h.shape[1] != w.shape[0]:
            raise ModelError("mlp shape mismatch")
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
            if training and dropout_rate > 0:
                if rng is None:
                    raise ModelError("dropout in training mode needs an RNG")
                mask = (rng.random(h.shape) >= dropout_rate) / (1.0 - dropout_rate)
                h = h * mask
    return h


def gin_layer(features: np.ndarray, neighbors: list[list[int]],
              mlp_layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inference-only single message-passing layer on raw arrays."""
    h = np.asarray(features, dtype=np.float64)
    out_in = h.copy()
    for v, ns in enumerate(neighbors):
        if ns:
            out_in[v] += h[ns].mean(axis=0)
    return standalone_mlp_forward(out_in, mlp_layers)


def readout_mean(node_embeddings: np.ndarray) -> np.ndarray:
    node_embeddings = np.asarray(node_embeddings, dtype=np.float64)
    if node_embeddings.shape[0] == 0:
        raise ModelError("readout of empty graph")
    return node_embeddings.mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoint files

def save_checkpoint(path: str, model: TissueGraphModel, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "frozen": sorted(model.frozen),
        "params": {n: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
                   for n, p in model.params.items()},
        "optimizer": optimizer_state,
        "extra": extra or {},
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[TissueGraphModel, dict | None, dict]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, OSError) as exc:
        raise ModelError(f"malformed checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version in {path}")
    model = TissueGraphModel(ModelConfig(**doc["config"]))
    state = {n: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
             for n, rec in doc["params"].items()}
    model.load_state_dict(state)
    model.frozen = set(doc["frozen"])
    return model, doc["optimizer"], doc.get("extra", {})
