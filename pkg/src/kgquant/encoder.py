"""Composition-based relational graph convolution over the training graph.

Each layer updates entity j to W1 e_j plus the sum over incoming
(neighbor, relation) pairs of W2 (e_i * v_r), where * is the element-wise
product; relations move through their own linear map between layers.
Aggregation is an unnormalized sum and there is no nonlinearity between
layers; dropout hits layer outputs at train time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ShapeError
from .kg_store import KnowledgeGraph
from .numkernel import NdBuffer


@dataclass
class GcnParams:
    entity_table: NdBuffer
    relation_table: NdBuffer
    w1: list[NdBuffer]
    w2: list[NdBuffer]
    w_rel: list[NdBuffer]
    dropout: float

    @property
    def num_layers(self) -> int:
        return len(self.w1)


def init_gcn_params(
    num_entities: int, num_relations: int, dim: int, num_layers: int, dropout: float, rng: np.random.Generator
) -> GcnParams:
    # embeddings start uniform in [-0.1, 0.1]; weight matrices Glorot-uniform
    def emb(rows):
        return NdBuffer(rng.uniform(-0.1, 0.1, size=(rows, dim)), requires_grad=True)

    def weight():
        limit = np.sqrt(6.0 / (dim + dim))
        return NdBuffer(rng.uniform(-limit, limit, size=(dim, dim)), requires_grad=True)

    return GcnParams(
        entity_table=emb(num_entities),
        relation_table=emb(num_relations),
        w1=[weight() for _ in range(num_layers)],
        w2=[weight() for _ in range(num_layers)],
        w_rel=[weight() for _ in range(num_layers)],
        dropout=dropout,
    )


def gcn_layer(
    entities_in: NdBuffer,
    relations_in: NdBuffer,
    layer_idx: int,
    graph: KnowledgeGraph,
    params: GcnParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> NdBuffer:
    """One message-passing step over all entities at once.

    Edges are walked in ascending (target, neighbor, relation) order so the
    floating-point accumulation order never depends on input ordering.
    """
    if layer_idx >= params.num_layers:
        raise ShapeError(f"layer index {layer_idx} out of range for {params.num_layers} layers")
    targets, sources, rels = graph.edge_arrays()
    messages = nk.mul(nk.gather_rows(entities_in, sources), nk.gather_rows(relations_in, rels))
    aggregated = nk.scatter_add_rows(messages, targets, graph.num_entities)
    out = nk.add(
        nk.matmul(entities_in, nk.transpose(params.w1[layer_idx])),
        nk.matmul(aggregated, nk.transpose(params.w2[layer_idx])),
    )
    if train and params.dropout > 0.0:
        out = nk.dropout(out, params.dropout, train=True, rng=rng)
    return out


def relation_update(relations_in: NdBuffer, layer_idx: int, params: GcnParams) -> NdBuffer:
    if layer_idx >= params.num_layers:
        raise ShapeError(f"layer index {layer_idx} out of range for {params.num_layers} layers")
    return nk.matmul(relations_in, nk.transpose(params.w_rel[layer_idx]))


def encode(
    graph: KnowledgeGraph,
    params: GcnParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
    skip_gcn: bool = False,
) -> tuple[NdBuffer, NdBuffer]:
    """Run all layers and return final (entity, relation) embeddings.

    With ``skip_gcn`` the raw tables pass through untouched (the encoder
    ablation).
    """
    entities, relations = params.entity_table, params.relation_table
    if skip_gcn:
        return entities, relations
    for layer in range(params.num_layers):
        entities = gcn_layer(entities, relations, layer, graph, params, train=train, rng=rng)
        relations = relation_update(relations, layer, params)
    return entities, relations
