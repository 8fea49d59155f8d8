"""Gated spatio-temporal decoder with mask-token recovery.

The decoder rebuilds the full N x T_p grid by substituting a shared learnable
mask token at masked cells, runs stacked gated TCN/GCN layers with residual
and skip connections, and maps the skip sum to patch predictions through an
MLP head. The reconstruction loss is a mean absolute error restricted to the
mask's eval cells.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .data import MaskSpec


def _time_embedding(table, idx):
    # (T,) or (B, T) indices; the batched form broadcasts over nodes
    emb = table[idx]
    if emb.dim() == 3:
        emb = emb.unsqueeze(1)
    return emb


class GatedSTLayer(nn.Module):
    """One decoder layer: parallel temporal conv and graph conv, sigmoid-gated.

    The temporal convolution is non-causal with symmetric zero padding; the
    graph convolution is single-hop propagation plus a self term. A residual
    connection adds the layer input to the gated combination.
    """

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError(f"temporal kernel must be odd, got {kernel}")
        self.tcn = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.w_graph = nn.Linear(dim, dim, bias=False)
        self.w_self = nn.Linear(dim, dim, bias=False)
        self.w_gate_t = nn.Linear(dim, dim, bias=False)
        self.w_gate_g = nn.Linear(dim, dim, bias=False)
        self.gate_bias = nn.Parameter(torch.zeros(dim))

    def temporal_conv(self, x):
        # (B, N, T, d) -> same, convolving over T per node
        b, n, t, d = x.shape
        h = x.reshape(b * n, t, d).transpose(1, 2)  # (B*N, d, T)
        h = self.tcn(h)
        return h.transpose(1, 2).reshape(b, n, t, d)

    def graph_conv(self, x, adjacency):
        # A @ H @ W_g + H @ W_self, per step
        propagated = torch.einsum("ij,bjtd->bitd", adjacency, self.w_graph(x))
        return propagated + self.w_self(x)

    def forward(self, x, adjacency, return_parts=False):
        t_out = self.temporal_conv(x)
        g_out = self.graph_conv(x, adjacency)
        z = torch.sigmoid(self.w_gate_t(t_out) + self.w_gate_g(g_out) + self.gate_bias)
        out = z * t_out + (1.0 - z) * g_out + x
        if return_parts:
            return out, t_out, g_out, z
        return out


class Decoder(nn.Module):
    def __init__(
        self,
        dim: int,  # width of incoming representations (encoder dim)
        hidden: int,  # decoder layer width
        num_layers: int,
        kernel: int,
        patch_width: int,  # L * d_x, the head's output width
        max_steps: int,
        head_hidden: tuple[int, ...] = (128, 256),
    ):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.positional_table = nn.Parameter(torch.randn(max_steps, dim) * 0.02)
        self.tod_table = nn.Parameter(torch.randn(24, dim) * 0.02)
        self.dow_table = nn.Parameter(torch.randn(7, dim) * 0.02)
        self.entry = nn.Linear(dim, hidden)
        self.layers = nn.ModuleList(GatedSTLayer(hidden, kernel) for _ in range(num_layers))
        self.skips = nn.ModuleList(
            nn.Linear(hidden, hidden, bias=False) for _ in range(num_layers)
        )
        head: list[nn.Module] = []
        width = hidden
        for h in head_hidden:
            head += [nn.Linear(width, h), nn.ReLU()]
            width = h
        head.append(nn.Linear(width, patch_width))
        self.head = nn.Sequential(*head)
        self.to(torch.float64)

    def positional(self, step_idx):
        step_idx = torch.as_tensor(step_idx, dtype=torch.long)
        if step_idx.numel() and int(step_idx.max()) >= self.positional_table.shape[0]:
            raise ValueError(
                f"step index {int(step_idx.max())} outside positional table "
                f"of size {self.positional_table.shape[0]}"
            )
        return self.positional_table[step_idx]

    def recover_full(self, h_unmasked, mask: MaskSpec):
        """Scatter the compacted block back to N x T_p, mask token elsewhere.

        h_unmasked: (..., N_u, T_u, d). Unmasked entries are preserved
        bitwise; every masked cell holds the shared mask token.
        """
        node_map = torch.as_tensor(mask.unmasked_nodes(), dtype=torch.long)
        step_map = torch.as_tensor(mask.unmasked_steps(), dtype=torch.long)
        if h_unmasked.shape[-3] != node_map.numel() or h_unmasked.shape[-2] != step_map.numel():
            raise ValueError(
                f"block shape {tuple(h_unmasked.shape)} inconsistent with mask "
                f"({node_map.numel()} x {step_map.numel()} unmasked)"
            )
        shape = h_unmasked.shape[:-3] + (mask.num_nodes, mask.num_steps, h_unmasked.shape[-1])
        full = self.mask_token.expand(shape).clone()
        full[..., node_map[:, None], step_map[None, :], :] = h_unmasked
        return full

    def decode(self, h, adjacency, tod, dow, add_positional=True):
        """Map full-grid representations to patch predictions.

        h: (..., N, T_p, dim). Time embeddings enter at the first layer;
        the positional table is added only when task prompting has not
        already done so (add_positional).
        """
        squeeze = h.dim() == 3
        if squeeze:
            h = h.unsqueeze(0)
        t_p = h.shape[2]
        tod = torch.as_tensor(np.asarray(tod), dtype=torch.long)
        dow = torch.as_tensor(np.asarray(dow), dtype=torch.long)
        if add_positional:
            h = h + self.positional(torch.arange(t_p))
        h = h + _time_embedding(self.tod_table, tod) + _time_embedding(self.dow_table, dow)
        adjacency = torch.as_tensor(adjacency, dtype=torch.float64)
        x = self.entry(h)
        skip_sum = torch.zeros_like(x)
        for layer, skip in zip(self.layers, self.skips):
            x = layer(x, adjacency)
            skip_sum = skip_sum + skip(x)
        out = self.head(torch.relu(skip_sum))
        return out.squeeze(0) if squeeze else out


def masked_mae(pred, target, mask: MaskSpec):
    """Mean absolute error over the mask's eval cells only.

    Gradients w.r.t. predictions at all other cells are exactly zero: those
    entries never enter the loss graph.
    """
    cells = mask.eval_cell_array()
    if cells.shape[0] == 0:
        raise ValueError("mask has no eval cells")
    rows = torch.as_tensor(cells[:, 0], dtype=torch.long)
    cols = torch.as_tensor(cells[:, 1], dtype=torch.long)
    diff = pred[..., rows, cols, :] - target[..., rows, cols, :]
    return diff.abs().mean()
