"""Transformer encoder over unmasked patches.

Two branches run independently over the compacted N_u x T_u block: a
temporal branch attending over steps within each node, and a spatial branch
attending over nodes within each step with hop-distance attention biases.
Their outputs are combined by a sigmoid gate.

All parameters are float64; forward passes are pure and dropout-free.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from scipy.sparse.csgraph import shortest_path

from .data import Graph

UNREACHABLE = -1
DEGREE_BUCKET_EDGES = (0, 1, 2, 3, 4, 8)  # buckets: 0,1,2,3,4-7,8+
NUM_DEGREE_BUCKETS = 6


def hop_distances(adjacency: np.ndarray, max_hop: int) -> np.ndarray:
    """Hop-count matrix over edges A_ij > 0, clipped at max_hop.

    Returns int64 buckets: 0..max_hop for reachable pairs (distances beyond
    max_hop clip to max_hop), max_hop + 1 for unreachable pairs.
    """
    connected = (np.asarray(adjacency) > 0).astype(np.float64)
    np.fill_diagonal(connected, 0.0)
    dist = shortest_path(connected, method="D", unweighted=True, directed=True)
    buckets = np.where(np.isinf(dist), max_hop + 1, np.minimum(dist, max_hop))
    np.fill_diagonal(buckets, 0)
    return buckets.astype(np.int64)


def degree_buckets(adjacency: np.ndarray) -> np.ndarray:
    """Out-degree of each node bucketized as 0,1,2,3,4-7,8+."""
    a = np.asarray(adjacency).copy()
    np.fill_diagonal(a, 0.0)
    deg = (a > 0).sum(axis=1)
    buckets = np.searchsorted(DEGREE_BUCKET_EDGES, deg, side="right") - 1
    return np.minimum(buckets, NUM_DEGREE_BUCKETS - 1).astype(np.int64)


class GraphCache:
    """Precomputed structural features of a full graph."""

    def __init__(self, graph: Graph, max_hop: int):
        self.graph = graph
        self.max_hop = max_hop
        self.hop_buckets = torch.from_numpy(hop_distances(graph.adjacency, max_hop))
        self.degree = torch.from_numpy(degree_buckets(graph.adjacency))
        self.adjacency = torch.from_numpy(graph.adjacency).to(torch.float64)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"heads {num_heads} must divide hidden dim {dim}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, bias=None, need_logits=False):
        # x: (B, S, d); bias: (heads, S, S) additive attention bias
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, heads, S, hd)
        logits = q @ k.transpose(-2, -1) / self.head_dim**0.5  # (B, heads, S, S)
        if bias is not None:
            logits = logits + bias.unsqueeze(0)
        attn = torch.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, s, d)
        y = self.out(y)
        if need_logits:
            return y, logits
        return y


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block with a 4x feedforward."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, x, bias=None):
        x = x + self.attn(self.norm1(x), bias=bias)
        x = x + self.ffn(self.norm2(x))
        return x


def _with_batch(x):
    """Promote (N, T, d) to (1, N, T, d); report whether it was batched."""
    if x.dim() == 3:
        return x.unsqueeze(0), False
    return x, True


def time_embedding(table, idx):
    """Look up (T,) or (B, T) indices; result broadcasts over the node axis."""
    emb = table[idx]
    if emb.dim() == 3:  # (B, T, d) -> (B, 1, T, d)
        emb = emb.unsqueeze(1)
    return emb


class TemporalBranch(nn.Module):
    """Per-node attention over the step axis, with TOD/DOW lookups at entry."""

    def __init__(self, dim: int, num_heads: int, num_layers: int):
        super().__init__()
        self.tod_table = nn.Parameter(torch.randn(24, dim) * 0.02)
        self.dow_table = nn.Parameter(torch.randn(7, dim) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(dim, num_heads) for _ in range(num_layers)
        )

    def forward(self, x, tod_idx, dow_idx):
        # x: (B, N, T, d) or (N, T, d); tod/dow: (T,) or (B, T) step indices
        x, batched = _with_batch(x)
        b, n, t, d = x.shape
        x = x + time_embedding(self.tod_table, tod_idx) + time_embedding(self.dow_table, dow_idx)
        h = x.reshape(b * n, t, d)
        for layer in self.layers:
            h = layer(h)
        h = h.reshape(b, n, t, d)
        return h if batched else h.squeeze(0)


class SpatialBranch(nn.Module):
    """Per-step attention over the node axis with hop-distance biases."""

    def __init__(self, dim: int, num_heads: int, num_layers: int, max_hop: int):
        super().__init__()
        self.num_heads = num_heads
        self.max_hop = max_hop
        self.degree_table = nn.Parameter(torch.randn(NUM_DEGREE_BUCKETS, dim) * 0.02)
        # one scalar per (hop bucket, head); last bucket = unreachable
        self.hop_bias_table = nn.Parameter(torch.zeros(max_hop + 2, num_heads))
        self.layers = nn.ModuleList(
            TransformerLayer(dim, num_heads) for _ in range(num_layers)
        )

    def attention_bias(self, hop_buckets):
        # hop_buckets: (N, N) ints -> (heads, N, N)
        return self.hop_bias_table[hop_buckets].permute(2, 0, 1)

    def forward(self, x, hop_buckets, degree_idx):
        # x: (B, N, T, d) or (N, T, d); hop_buckets: (N, N); degree_idx: (N,)
        x, batched = _with_batch(x)
        b, n, t, d = x.shape
        x = x + self.degree_table[degree_idx][:, None, :]
        bias = self.attention_bias(hop_buckets)
        h = x.permute(0, 2, 1, 3).reshape(b * t, n, d)
        for layer in self.layers:
            h = layer(h, bias=bias)
        h = h.reshape(b, t, n, d).permute(0, 2, 1, 3)
        return h if batched else h.squeeze(0)


class FusionGate(nn.Module):
    """out = z * h_spatial + (1 - z) * h_temporal with a learned sigmoid gate."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_spatial = nn.Linear(dim, dim, bias=False)
        self.w_temporal = nn.Linear(dim, dim, bias=False)
        self.bias = nn.Parameter(torch.zeros(dim))

    def gate(self, h_spatial, h_temporal):
        return torch.sigmoid(
            self.w_spatial(h_spatial) + self.w_temporal(h_temporal) + self.bias
        )

    def forward(self, h_spatial, h_temporal, need_gate=False):
        z = self.gate(h_spatial, h_temporal)
        fused = z * h_spatial + (1.0 - z) * h_temporal
        if need_gate:
            return fused, z
        return fused


class Encoder(nn.Module):
    """Patch embedding, positional table, dual branches, and fusion gate."""

    def __init__(
        self,
        patch_width: int,
        dim: int,
        num_heads: int,
        temporal_layers: int,
        spatial_layers: int,
        max_steps: int,
        max_hop: int = 4,
    ):
        super().__init__()
        self.dim = dim
        self.max_hop = max_hop
        self.patch_projection = nn.Linear(patch_width, dim)
        self.positional_table = nn.Parameter(torch.randn(max_steps, dim) * 0.02)
        self.temporal = TemporalBranch(dim, num_heads, temporal_layers)
        self.spatial = SpatialBranch(dim, num_heads, spatial_layers, max_hop)
        self.gate = FusionGate(dim)
        self.to(torch.float64)

    def embed(self, patch_values):
        # (..., N, T, L*d_x) -> (..., N, T, d)
        return self.patch_projection(patch_values)

    def positional(self, step_idx):
        # (T_u,) -> (T_u, d); raises on steps beyond the table
        step_idx = torch.as_tensor(step_idx, dtype=torch.long)
        if step_idx.numel() and int(step_idx.max()) >= self.positional_table.shape[0]:
            raise ValueError(
                f"step index {int(step_idx.max())} outside positional table "
                f"of size {self.positional_table.shape[0]}"
            )
        return self.positional_table[step_idx]

    def temporal_encode(self, x, tod_idx, dow_idx):
        tod_idx = torch.as_tensor(tod_idx, dtype=torch.long)
        dow_idx = torch.as_tensor(dow_idx, dtype=torch.long)
        return self.temporal(x, tod_idx, dow_idx)

    def spatial_encode(self, x, hop_buckets, degree_idx):
        hop_buckets = torch.as_tensor(hop_buckets, dtype=torch.long)
        degree_idx = torch.as_tensor(degree_idx, dtype=torch.long)
        return self.spatial(x, hop_buckets, degree_idx)

    def gated_fuse(self, h_spatial, h_temporal, need_gate=False):
        return self.gate(h_spatial, h_temporal, need_gate=need_gate)

    def encode(self, s_spatial, s_temporal, cache: GraphCache, node_map, step_map, tod, dow):
        """Run both branches on their (possibly prompted) inputs and fuse.

        s_spatial / s_temporal: (..., N_u, T_u, d) blocks that already carry
        the positional table (added before any prompting). node_map/step_map
        are the gather maps; tod/dow index the full window's patches.
        """
        node_map = np.asarray(node_map)
        step_map = np.asarray(step_map)
        hop_sub = self.hop_submatrix(cache, node_map)
        deg_sub = cache.degree[node_map]
        tod_sub = torch.as_tensor(np.asarray(tod)[..., step_map], dtype=torch.long)
        dow_sub = torch.as_tensor(np.asarray(dow)[..., step_map], dtype=torch.long)
        h_s = self.spatial_encode(s_spatial, hop_sub, deg_sub)
        h_t = self.temporal_encode(s_temporal, tod_sub, dow_sub)
        return self.gated_fuse(h_s, h_t)

    @staticmethod
    def hop_submatrix(cache: GraphCache, node_map):
        """Full-graph hop buckets restricted to the unmasked nodes."""
        idx = torch.as_tensor(np.asarray(node_map), dtype=torch.long)
        return cache.hop_buckets[idx][:, idx]
