"""Shared builders for toy molecules and small models."""

import numpy as np

from confflow import autodiff as ad
from confflow.dynamics import MoleculeContext, build_dynamics, build_embedding
from confflow.molgraph import (
    ToySpec,
    augment_edges,
    compute_feature_stats,
    generate_toy_dataset,
)


def prepared_toy_dataset(templates=("chain-5", "ring-5", "branched-6"),
                         conformers=5, seed=0):
    """Toy molecules with auxiliary edges plus matching feature stats."""
    raw = generate_toy_dataset(ToySpec(templates, conformers), seed=seed)
    augmented = [(augment_edges(g), confs) for g, confs in raw]
    stats = compute_feature_stats(augmented)
    return augmented, stats


def small_dynamics(node_width, edge_width, embed_dim=8, hidden=8, blocks=2,
                   rounds=1, seed=0, store=None):
    store = store if store is not None else ad.ParameterStore()
    rng = np.random.default_rng(seed)
    embedding = build_embedding(store, rng, node_width, edge_width, embed_dim)
    dyn = build_dynamics(store, rng, "cnf0", embedding, blocks, rounds,
                         embed_dim, hidden)
    return store, dyn


def perturb_store(store, rng, scale=0.1):
    """Move every parameter away from the identity-flow initialization."""
    for _, tensor in store.items():
        tensor.data = tensor.data + rng.normal(scale=scale, size=tensor.shape)


def context_for(graph, stats, embed_dim):
    return MoleculeContext.from_graph(graph, stats, embed_dim)
