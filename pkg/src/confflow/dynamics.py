"""Point-transformer dynamics conditioned on a molecular graph.

A dynamics evaluation runs S point-transformer blocks; each block applies R
attention-style message-passing rounds that update node and edge streams
(residually) while sharing the block's coordinate embedding, then a
coordinate MLP lifts the embedding to the next block's width along the
3 -> 32 -> ... -> 3 ladder.  The time derivative of the coordinates is the
final 3-d output minus the 3-d input.

Undirected edges are expanded to both directions for message passing, so
neighbourhoods are symmetric.  The per-channel attention weights are a
softmax over each destination's incoming edges.  Time enters every map as one
extra concatenated scalar channel.  The architecture is deliberately free of
rotation/translation constraints; permutation equivariance is the only
symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .molgraph import MolecularGraph, encode_features

__all__ = [
    "LinearParams",
    "MlpParams",
    "LayerParams",
    "BlockParams",
    "EmbeddingParams",
    "FlowDynamics",
    "MoleculeContext",
    "DynamicsError",
    "coordinate_ladder",
    "build_embedding",
    "build_dynamics",
    "INTERIOR_WIDTH",
]

INTERIOR_WIDTH = 32
_PASS_CHANNELS = 3  # coordinate channels carried through every block at init


class DynamicsError(RuntimeError):
    """Non-finite value produced while evaluating the dynamics."""


@dataclass(frozen=True)
class LinearParams:
    w: ad.Tensor
    b: ad.Tensor


@dataclass(frozen=True)
class MlpParams:
    """Two linear layers with a swish in between."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


@dataclass(frozen=True)
class LayerParams:
    """One message-passing round: three time-conditioned linear maps and the
    position-encoding / message / node-update MLPs."""

    phi: LinearParams
    psi: LinearParams
    alpha: LinearParams
    delta: MlpParams
    gamma: MlpParams
    theta: MlpParams


@dataclass(frozen=True)
class BlockParams:
    layers: tuple
    omega: MlpParams
    c_in: int
    c_out: int


@dataclass(frozen=True)
class EmbeddingParams:
    node: LinearParams
    edge: LinearParams


def coordinate_ladder(num_blocks: int):
    """(c_in, c_out) per block: 3 at both ends, fixed interior width."""
    if num_blocks < 1:
        raise ValueError("need at least one point-transformer block")
    dims = [3] + [INTERIOR_WIDTH] * (num_blocks - 1) + [3]
    return list(zip(dims[:-1], dims[1:]))


def _uniform(rng, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear(store, name, fan_in, fan_out, rng) -> LinearParams:
    return LinearParams(
        w=store.add(f"{name}.w", _uniform(rng, fan_in, fan_out)),
        b=store.add(f"{name}.b", np.zeros((1, fan_out))))


def _mlp(store, name, fan_in, hidden, fan_out, rng, zero_final=False) -> MlpParams:
    w2 = np.zeros((hidden, fan_out)) if zero_final else _uniform(rng, hidden, fan_out)
    return MlpParams(
        w1=store.add(f"{name}.w1", _uniform(rng, fan_in, hidden)),
        b1=store.add(f"{name}.b1", np.zeros((1, hidden))),
        w2=store.add(f"{name}.w2", w2),
        b2=store.add(f"{name}.b2", np.zeros((1, fan_out))))


def _omega_mlp(store, name, c_in, embed_dim, hidden, c_out, rng) -> MlpParams:
    """Coordinate MLP initialized as an exact identity on the first three
    coordinate channels.

    swish(x) - swish(-x) = x, so a (+z, -z) pair of hidden units recovers the
    input channel exactly; everything else in the final layer starts at zero,
    making the initial flow field exactly zero.
    """
    fan_in = c_in + 2 * embed_dim + 1
    if hidden < 2 * _PASS_CHANNELS:
        raise ValueError(f"hidden width {hidden} too small for identity init")
    w1 = _uniform(rng, fan_in, hidden)
    b1 = np.zeros((1, hidden))
    w2 = np.zeros((hidden, c_out))
    for k in range(_PASS_CHANNELS):
        w1[:, 2 * k] = 0.0
        w1[:, 2 * k + 1] = 0.0
        w1[k, 2 * k] = 1.0
        w1[k, 2 * k + 1] = -1.0
        w2[2 * k, k] = 1.0
        w2[2 * k + 1, k] = -1.0
    return MlpParams(
        w1=store.add(f"{name}.w1", w1),
        b1=store.add(f"{name}.b1", b1),
        w2=store.add(f"{name}.w2", w2),
        b2=store.add(f"{name}.b2", np.zeros((1, c_out))))


def build_embedding(store, rng, node_width, edge_width, embed_dim) -> EmbeddingParams:
    return EmbeddingParams(
        node=_linear(store, "embed.node", node_width, embed_dim, rng),
        edge=_linear(store, "embed.edge", edge_width, embed_dim, rng))


def build_dynamics(store, rng, prefix, embedding, num_blocks, rounds,
                   embed_dim, hidden) -> "FlowDynamics":
    blocks = []
    for s, (c_in, c_out) in enumerate(coordinate_ladder(num_blocks)):
        layers = []
        for r in range(rounds):
            base = f"{prefix}.block{s}.round{r}"
            layers.append(LayerParams(
                phi=_linear(store, f"{base}.phi", embed_dim + 1, embed_dim, rng),
                psi=_linear(store, f"{base}.psi", embed_dim + 1, embed_dim, rng),
                alpha=_linear(store, f"{base}.alpha", embed_dim + 1, embed_dim, rng),
                delta=_mlp(store, f"{base}.delta", c_in + 1, hidden, embed_dim, rng),
                gamma=_mlp(store, f"{base}.gamma", 2 * embed_dim + 1, hidden,
                           embed_dim, rng, zero_final=True),
                theta=_mlp(store, f"{base}.theta", 2 * embed_dim + 1, hidden,
                           embed_dim, rng, zero_final=True)))
        omega = _omega_mlp(store, f"{prefix}.block{s}.omega", c_in, embed_dim,
                           hidden, c_out, rng)
        blocks.append(BlockParams(layers=tuple(layers), omega=omega,
                                  c_in=c_in, c_out=c_out))
    return FlowDynamics(embedding=embedding, blocks=tuple(blocks),
                        embed_dim=embed_dim)


class MoleculeContext:
    """Precomputed per-molecule arrays shared by every dynamics evaluation."""

    def __init__(self, graph: MolecularGraph, node_feats, edge_feats, embed_dim):
        self.molecule_id = graph.molecule_id
        self.num_atoms = graph.atom_count
        self.node_feats = np.asarray(node_feats, dtype=np.float64)
        self.edge_feats = np.asarray(edge_feats, dtype=np.float64)
        src, dst, undirected = [], [], []
        for e_index, (i, j, _) in enumerate(graph.edges):
            src += [j, i]
            dst += [i, j]
            undirected += [e_index, e_index]
        self.src = np.array(src, dtype=np.intp)
        self.dst = np.array(dst, dtype=np.intp)
        self.undirected = np.array(undirected, dtype=np.intp)
        self.num_directed = len(src)
        self.zeros_nodes = np.zeros(self.num_atoms, dtype=np.intp)
        self.zeros_edges = np.zeros(self.num_directed, dtype=np.intp)
        degree = np.zeros(self.num_atoms)
        np.add.at(degree, self.dst, 1.0)
        inv = np.where(degree > 0, 1.0 / np.maximum(degree, 1.0), 0.0)
        self.inv_degree = np.repeat(inv[:, None], embed_dim, axis=1)
        self.softmax_pad = np.repeat((degree == 0).astype(np.float64)[:, None],
                                     embed_dim, axis=1)

    @classmethod
    def from_graph(cls, graph: MolecularGraph, stats, embed_dim):
        node_feats, edge_feats = encode_features(graph, stats)
        return cls(graph, node_feats, edge_feats, embed_dim)

    @classmethod
    def concatenate(cls, contexts):
        """Disjoint union of contexts: one batched system, no cross edges."""
        merged = object.__new__(cls)
        merged.molecule_id = "+".join(c.molecule_id for c in contexts)
        merged.num_atoms = sum(c.num_atoms for c in contexts)
        merged.node_feats = np.concatenate([c.node_feats for c in contexts])
        merged.edge_feats = np.concatenate([c.edge_feats for c in contexts])
        src, dst, und = [], [], []
        atom_off = edge_off = 0
        for c in contexts:
            src.append(c.src + atom_off)
            dst.append(c.dst + atom_off)
            und.append(c.undirected + edge_off)
            atom_off += c.num_atoms
            edge_off += c.edge_feats.shape[0]
        merged.src = np.concatenate(src)
        merged.dst = np.concatenate(dst)
        merged.undirected = np.concatenate(und)
        merged.num_directed = len(merged.src)
        merged.zeros_nodes = np.zeros(merged.num_atoms, dtype=np.intp)
        merged.zeros_edges = np.zeros(merged.num_directed, dtype=np.intp)
        merged.inv_degree = np.concatenate([c.inv_degree for c in contexts])
        merged.softmax_pad = np.concatenate([c.softmax_pad for c in contexts])
        return merged


def _affine(x, p: LinearParams, zeros_idx):
    return ad.add(ad.matmul(x, p.w), ad.gather(p.b, zeros_idx))


def _mlp_apply(x, p: MlpParams, zeros_idx):
    h = ad.swish(ad.add(ad.matmul(x, p.w1), ad.gather(p.b1, zeros_idx)))
    return ad.add(ad.matmul(h, p.w2), ad.gather(p.b2, zeros_idx))


def _segment_softmax(x, ctx: MoleculeContext):
    """Per-channel softmax over each destination node's incoming edges."""
    mx = np.full((ctx.num_atoms, x.shape[1]), -np.inf)
    np.maximum.at(mx, ctx.dst, x.data)
    shifted = ad.sub(x, ad.constant(mx[ctx.dst]))
    ex = ad.exp(shifted)
    denom = ad.segment_sum(ex, ctx.dst, ctx.num_atoms)
    # isolated nodes have an empty sum; pad so the log stays finite
    denom = ad.add(denom, ad.constant(ctx.softmax_pad[:, :x.shape[1]]))
    inv = ad.exp(ad.neg(ad.log(denom)))
    return ad.mul(ex, ad.gather(inv, ctx.dst))


class FlowDynamics:
    """The learned vector field dZ/dt for one continuous-flow block."""

    def __init__(self, embedding: EmbeddingParams, blocks: tuple, embed_dim: int):
        self.embedding = embedding
        self.blocks = blocks
        self.embed_dim = embed_dim

    def embed(self, ctx: MoleculeContext):
        """Project raw attributes to (node, directed-edge) feature streams."""
        if ctx.node_feats.shape[1] != self.embedding.node.w.shape[0]:
            raise ad.ShapeError(
                f"node features {ctx.node_feats.shape} vs embedding "
                f"{self.embedding.node.w.shape}")
        if ctx.edge_feats.shape[1] != self.embedding.edge.w.shape[0]:
            raise ad.ShapeError(
                f"edge features {ctx.edge_feats.shape} vs embedding "
                f"{self.embedding.edge.w.shape}")
        hv = _affine(ad.constant(ctx.node_feats), self.embedding.node,
                     ctx.zeros_nodes)
        he_undirected = _affine(ad.constant(ctx.edge_feats), self.embedding.edge,
                                np.zeros(ctx.edge_feats.shape[0], dtype=np.intp))
        he = ad.gather(he_undirected, ctx.undirected)
        return hv, he

    def _round(self, ctx, layer: LayerParams, hv, he, zc, t_nodes, t_edges):
        hin = ad.concat([hv, t_nodes], axis=1)
        psi = _affine(hin, layer.psi, ctx.zeros_nodes)
        phi = _affine(hin, layer.phi, ctx.zeros_nodes)
        alpha = _affine(hin, layer.alpha, ctx.zeros_nodes)

        d = ad.sub(ad.gather(zc, ctx.dst), ad.gather(zc, ctx.src))
        delta = _mlp_apply(ad.concat([d, t_edges], axis=1), layer.delta,
                           ctx.zeros_edges)
        msg = ad.add(ad.sub(ad.gather(psi, ctx.dst), ad.gather(phi, ctx.src)), he)
        h_hat = _mlp_apply(ad.concat([msg, delta, t_edges], axis=1), layer.gamma,
                           ctx.zeros_edges)
        att = _segment_softmax(h_hat, ctx)
        values = ad.add(ad.gather(alpha, ctx.src), delta)
        m = ad.segment_sum(ad.mul(att, values), ctx.dst, ctx.num_atoms)
        hv_next = ad.add(hv, _mlp_apply(ad.concat([hv, m, t_nodes], axis=1),
                                        layer.theta, ctx.zeros_nodes))
        he_next = ad.add(he, h_hat)
        return hv_next, he_next

    def eval(self, ctx: MoleculeContext, hv0, he0, z, t: float):
        """dZ/dt at time t; feature streams restart from the cached embeddings."""
        t_nodes = ad.constant(np.full((ctx.num_atoms, 1), t))
        t_edges = ad.constant(np.full((ctx.num_directed, 1), t))
        hv, he = hv0, he0
        zc = z
        for block in self.blocks:
            for layer in block.layers:
                hv, he = self._round(ctx, layer, hv, he, zc, t_nodes, t_edges)
            emean = ad.mul(ad.segment_sum(he, ctx.dst, ctx.num_atoms),
                           ad.constant(ctx.inv_degree))
            zc = _mlp_apply(ad.concat([zc, hv, emean, t_nodes], axis=1),
                            block.omega, ctx.zeros_nodes)
        f = ad.sub(zc, z)
        if not np.all(np.isfinite(f.data)):
            raise DynamicsError(
                f"{ctx.molecule_id}: non-finite dynamics at t={t:.6g}")
        return f

    def eval_fresh(self, ctx: MoleculeContext, z, t: float):
        """Convenience wrapper that embeds the graph and evaluates once."""
        hv0, he0 = self.embed(ctx)
        return self.eval(ctx, hv0, he0, z, t)
