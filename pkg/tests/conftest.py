import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphseg.graph import TissueGraph
from graphseg.model import ModelConfig, TissueGraphModel


def random_graph(rng, num_nodes=6, feature_dim=5, edge_prob=0.5, graph_id="g"):
    edges = set()
    for a in range(num_nodes):
        for b in range(a + 1, num_nodes):
            if rng.random() < edge_prob:
                edges.add((a, b))
    return TissueGraph(
        features=rng.random((num_nodes, feature_dim)),
        centroids=rng.random((num_nodes, 2)),
        edges=edges,
        graph_id=graph_id,
    )


@pytest.fixture
def small_model():
    return TissueGraphModel(ModelConfig(feature_dim=5, num_layers=2, hidden_dim=8,
                                        head_hidden=8), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
