import math

import networkx as nx
import numpy as np
import pytest
import torch

from gradcheck import assert_grads_close
from stprompt.data import MaskSpec
from stprompt.decoder import Decoder, GatedSTLayer, masked_mae


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def make_decoder(dim=6, hidden=4, layers=2, kernel=3, patch_width=3, max_steps=8,
                 head_hidden=(8,), seed=0):
    torch.manual_seed(seed)
    return Decoder(
        dim=dim, hidden=hidden, num_layers=layers, kernel=kernel,
        patch_width=patch_width, max_steps=max_steps, head_hidden=head_hidden,
    )


# --- recover_full -----------------------------------------------------------


def test_recover_full_empty_mask():
    dec = make_decoder()
    h = rand(3, 4, 6, seed=1)
    mask = MaskSpec(num_nodes=3, num_steps=4, masked_nodes=[], masked_steps=[])
    out = dec.recover_full(h, mask)
    assert torch.equal(out, h)


def test_recover_full_broadcasts_mask_token():
    # nearly-degenerate mask: a single unmasked cell survives, every other
    # cell must equal the shared token
    dec = make_decoder()
    h = rand(1, 1, 6, seed=2)
    mask = MaskSpec(num_nodes=5, num_steps=5, masked_nodes=[0, 1, 2, 3], masked_steps=[0, 1, 2, 4])
    out = dec.recover_full(h, mask)
    assert torch.equal(out[4, 3], h[0, 0])
    grid = torch.from_numpy(mask.masked_grid())
    assert torch.all(out[grid] == dec.mask_token.expand(int(grid.sum()), 6))


def test_recover_full_row_layout():
    dec = make_decoder()
    h = rand(2, 2, 6, seed=3)  # rows (a, b)
    mask = MaskSpec(num_nodes=3, num_steps=2, masked_nodes=[1], masked_steps=[])
    out = dec.recover_full(h, mask)
    assert torch.equal(out[0], h[0])
    assert torch.equal(out[2], h[1])
    assert torch.equal(out[1], dec.mask_token.expand(2, 6))


def test_recover_full_shape_mismatch():
    dec = make_decoder()
    h = rand(2, 2, 6, seed=4)
    mask = MaskSpec(num_nodes=3, num_steps=4, masked_nodes=[1], masked_steps=[])
    with pytest.raises(ValueError, match="inconsistent with mask"):
        dec.recover_full(h, mask)


def test_recover_full_batched():
    dec = make_decoder()
    h = rand(2, 2, 3, 6, seed=5)
    mask = MaskSpec(num_nodes=4, num_steps=3, masked_nodes=[0, 3], masked_steps=[])
    out = dec.recover_full(h, mask)
    assert out.shape == (2, 4, 3, 6)
    assert torch.equal(out[:, [1, 2]], h)


# --- gated layer ------------------------------------------------------------


def test_gated_layer_equal_branches_ignore_gate():
    # with both branches forced equal, the output is branch + residual no
    # matter what the gate parameters are
    torch.manual_seed(1)
    x = rand(1, 2, 4, 3, seed=6)
    adjacency = torch.zeros(2, 2, dtype=torch.float64)
    layer = GatedSTLayer(3, kernel=1).to(torch.float64)
    with torch.no_grad():
        layer.tcn.bias.zero_()
        layer.w_self.weight.copy_(layer.tcn.weight[:, :, 0])
    outs = []
    for gate_seed in (2, 3):
        gen = torch.Generator().manual_seed(gate_seed)
        with torch.no_grad():
            layer.w_gate_t.weight.copy_(torch.randn(3, 3, generator=gen))
            layer.w_gate_g.weight.copy_(torch.randn(3, 3, generator=gen))
            layer.gate_bias.copy_(torch.randn(3, generator=gen))
        out, t_out, g_out, _ = layer(x, adjacency, return_parts=True)
        assert torch.allclose(t_out, g_out, atol=1e-15)
        assert torch.allclose(out, t_out + x, atol=1e-15)
        outs.append(out)
    assert torch.allclose(outs[0], outs[1], atol=1e-15)


def test_gated_layer_identity_config_doubles():
    torch.manual_seed(0)
    layer = GatedSTLayer(3, kernel=1).to(torch.float64)
    with torch.no_grad():
        layer.tcn.weight.copy_(torch.eye(3).unsqueeze(-1))
        layer.tcn.bias.zero_()
        layer.w_graph.weight.copy_(torch.eye(3))
        layer.w_self.weight.zero_()
        layer.w_gate_t.weight.zero_()
        layer.w_gate_g.weight.zero_()
        layer.gate_bias.zero_()
    x = rand(1, 4, 5, 3, seed=7)
    adjacency = torch.eye(4, dtype=torch.float64)
    out = layer(x, adjacency)
    assert torch.allclose(out, 2 * x, atol=1e-15)


def test_gated_layer_scalar_toy_hand_computed():
    layer = GatedSTLayer(1, kernel=1).to(torch.float64)
    c, beta, g, s, u_t, u_g, gb = 0.7, 0.1, 0.5, -0.3, 0.9, -0.4, 0.2
    a01, a10 = 0.6, 0.8
    with torch.no_grad():
        layer.tcn.weight.fill_(c)
        layer.tcn.bias.fill_(beta)
        layer.w_graph.weight.fill_(g)
        layer.w_self.weight.fill_(s)
        layer.w_gate_t.weight.fill_(u_t)
        layer.w_gate_g.weight.fill_(u_g)
        layer.gate_bias.fill_(gb)
    x0, x1 = 1.3, -0.5
    x = torch.tensor([[[[x0]], [[x1]]]], dtype=torch.float64)  # (1, 2, 1, 1)
    adjacency = torch.tensor([[0.0, a01], [a10, 0.0]], dtype=torch.float64)
    out = layer(x, adjacency).reshape(2)

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    for i, (xi, other, a) in enumerate([(x0, x1, a01), (x1, x0, a10)]):
        t_i = c * xi + beta
        g_i = a * (g * other) + s * xi
        z_i = sigmoid(u_t * t_i + u_g * g_i + gb)
        expected = z_i * t_i + (1 - z_i) * g_i + xi
        assert abs(out[i].item() - expected) < 1e-12


def test_gated_layer_convexity_random():
    torch.manual_seed(3)
    layer = GatedSTLayer(5, kernel=3).to(torch.float64)
    adjacency = torch.rand(4, 4, dtype=torch.float64) * 0.5
    for seed in range(10):
        x = rand(2, 4, 6, 5, seed=40 + seed)
        out, t_out, g_out, z = layer(x, adjacency, return_parts=True)
        assert torch.all(z > 0) and torch.all(z < 1)
        gated = out - x
        lo = torch.minimum(t_out, g_out)
        hi = torch.maximum(t_out, g_out)
        assert torch.all(gated >= lo - 1e-12) and torch.all(gated <= hi + 1e-12)


# --- decode -----------------------------------------------------------------


def test_decode_shape_contract():
    torch.manual_seed(0)
    dec = Decoder(
        dim=128, hidden=32, num_layers=2, kernel=3,
        patch_width=12, max_steps=25, head_hidden=(128, 256),
    )
    h = rand(5, 25, 128, seed=8)
    adjacency = torch.rand(5, 5, dtype=torch.float64) * 0.3
    tod = np.arange(25) % 24
    dow = np.zeros(25, dtype=np.int64)
    out = dec.decode(h, adjacency, tod, dow)
    assert out.shape == (5, 25, 12)


def test_decode_zero_head_gives_zeros():
    dec = make_decoder()
    with torch.no_grad():
        for m in dec.head:
            if isinstance(m, torch.nn.Linear):
                m.weight.zero_()
                m.bias.zero_()
    h = rand(3, 4, 6, seed=9)
    adjacency = torch.rand(3, 3, dtype=torch.float64) * 0.5
    out = dec.decode(h, adjacency, np.zeros(4, dtype=int), np.zeros(4, dtype=int))
    assert torch.all(out == 0.0)


def test_decode_receptive_field_locality():
    # 5-node path graph, 2 layers, kernel 3: a bump at cell (i, t) can only
    # reach cells (j, s) with hop(i, j) + |t - s| <= 2
    n, t_p, layers = 5, 6, 2
    dec = make_decoder(layers=layers, kernel=3, max_steps=t_p, seed=11)
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 0.9
    adjacency = torch.from_numpy(a)
    g = nx.from_numpy_array(a)
    hops = dict(nx.all_pairs_shortest_path_length(g))
    tod = np.zeros(t_p, dtype=int)
    dow = np.zeros(t_p, dtype=int)
    h = rand(n, t_p, 6, seed=12)
    base = dec.decode(h, adjacency, tod, dow)
    src_node, src_step = 0, 2
    bumped = h.clone()
    bumped[src_node, src_step] += 1.0
    out = dec.decode(bumped, adjacency, tod, dow)
    changed = (out - base).abs().sum(dim=-1) > 0
    for j in range(n):
        for s in range(t_p):
            reachable = hops[src_node].get(j, 99) + abs(s - src_step) <= layers
            if not reachable:
                assert not changed[j, s], f"cell ({j},{s}) outside receptive field changed"
    assert changed[src_node, src_step]


def test_decode_positional_flag():
    dec = make_decoder()
    h = rand(2, 4, 6, seed=13)
    adjacency = torch.zeros(2, 2, dtype=torch.float64)
    tod = np.zeros(4, dtype=int)
    dow = np.zeros(4, dtype=int)
    with_pe = dec.decode(h, adjacency, tod, dow, add_positional=True)
    without = dec.decode(h + dec.positional(torch.arange(4)), adjacency, tod, dow, add_positional=False)
    assert torch.allclose(with_pe, without, atol=1e-15)


# --- masked_mae -------------------------------------------------------------


def make_mask_4x6():
    return MaskSpec(num_nodes=4, num_steps=6, masked_nodes=[1], masked_steps=[4, 5])


def test_masked_mae_zero_when_equal():
    mask = make_mask_4x6()
    pred = rand(4, 6, 3, seed=14)
    assert masked_mae(pred, pred.clone(), mask).item() == 0.0


def test_masked_mae_constant_error():
    mask = MaskSpec(num_nodes=3, num_steps=3, masked_nodes=[], masked_steps=[2],
                    eval_cells=[(0, 2)])
    target = rand(3, 3, 4, seed=15)
    pred = target.clone()
    pred[0, 2] += 2.0
    assert masked_mae(pred, target, mask).item() == pytest.approx(2.0)


def test_masked_mae_ignores_unmasked_errors():
    mask = make_mask_4x6()
    target = rand(4, 6, 3, seed=16)
    pred = target.clone()
    grid = mask.masked_grid()
    for i in range(4):
        for t in range(6):
            if not grid[i, t]:
                pred[i, t] += 5.0
    assert masked_mae(pred, target, mask).item() == 0.0


def test_masked_mae_gradient_locality():
    mask = make_mask_4x6()
    target = rand(4, 6, 3, seed=17)
    pred = rand(4, 6, 3, seed=18).requires_grad_(True)
    loss = masked_mae(pred, target, mask)
    (grad,) = torch.autograd.grad(loss, pred)
    grid = torch.from_numpy(mask.masked_grid())
    assert torch.all(grad[~grid] == 0.0)
    assert torch.any(grad[grid] != 0.0)
    # finite difference at a non-eval cell changes the loss by exactly 0
    bumped = pred.detach().clone()
    bumped[0, 0] += 1e-3
    assert masked_mae(bumped, target, mask).item() == loss.item()


def test_masked_mae_empty_eval_rejected():
    mask = make_mask_4x6()
    object.__setattr__(mask, "eval_cells", np.zeros((0, 2), dtype=np.int64))
    with pytest.raises(ValueError, match="no eval cells"):
        masked_mae(rand(4, 6, 3), rand(4, 6, 3), mask)


def test_masked_mae_respects_eval_cells():
    mask = MaskSpec(num_nodes=3, num_steps=4, masked_nodes=[2], masked_steps=[3],
                    eval_cells=[(2, 3)])
    target = rand(3, 4, 2, seed=19)
    pred = target.clone()
    pred[2, 0] += 9.0  # masked but not an eval cell
    assert masked_mae(pred, target, mask).item() == 0.0


# --- gradient fidelity ------------------------------------------------------


def test_decoder_gradients_match_fd():
    torch.manual_seed(21)
    dec = make_decoder(dim=5, hidden=4, layers=2, kernel=3, patch_width=3,
                       max_steps=6, head_hidden=(6,), seed=21)
    mask = MaskSpec(num_nodes=4, num_steps=6, masked_nodes=[2], masked_steps=[0])
    h = rand(4, 6, 5, seed=22)
    target = rand(4, 6, 3, seed=23)
    adjacency = torch.rand(4, 4, dtype=torch.float64) * 0.4
    tod = np.arange(6) % 24
    dow = np.zeros(6, dtype=int)

    def loss_fn():
        return masked_mae(dec.decode(h, adjacency, tod, dow), target, mask)

    params = list(dec.parameters())
    checked = assert_grads_close(loss_fn, params, rtol=1e-4, coords_per_tensor=3)
    assert checked >= 30
