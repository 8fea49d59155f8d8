"""Central finite-difference gradient checking shared by the test suite."""

import torch


def fd_grad(loss_fn, tensor, index, h=1e-6):
    """Central difference of loss_fn w.r.t. tensor.flatten()[index]."""
    flat = tensor.data.reshape(-1)
    orig = flat[index].item()
    flat[index] = orig + h
    hi = float(loss_fn().detach())
    flat[index] = orig - h
    lo = float(loss_fn().detach())
    flat[index] = orig
    return (hi - lo) / (2 * h)


def assert_grads_close(loss_fn, tensors, rtol=1e-4, coords_per_tensor=None, h=1e-6):
    """Compare autograd gradients of loss_fn against central differences.

    tensors: list of parameters/leaves (requires_grad). coords_per_tensor
    limits how many flat coordinates are probed per tensor (None = all).
    Returns the number of coordinates checked.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    checked = 0
    for tensor, grad in zip(tensors, grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        numel = tensor.numel()
        if coords_per_tensor is None or coords_per_tensor >= numel:
            coords = range(numel)
        else:
            step = max(1, numel // coords_per_tensor)
            coords = range(0, numel, step)
        for idx in coords:
            analytic = grad.reshape(-1)[idx].item()
            numeric = fd_grad(loss_fn, tensor, idx, h=h)
            tol = rtol * max(abs(analytic), abs(numeric), 1e-6)
            assert abs(analytic - numeric) <= tol, (
                f"grad mismatch at flat index {idx}: analytic {analytic:.10g} "
                f"vs finite-difference {numeric:.10g}"
            )
            checked += 1
    return checked
