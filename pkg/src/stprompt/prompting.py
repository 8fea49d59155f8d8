"""Prompt banks and their two deployments.

A bank holds N_p learnable vectors. A cell's prompted value is the cell plus
a weighted sum of bank vectors, where each weight is the sigmoid similarity
between cell and vector, zeroed when it does not exceed the bank's threshold.
Domain prompting rewrites encoder inputs (one bank per branch); task
prompting rewrites decoder inputs (one bank for mask-token cells, one for
the rest).
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .data import MaskSpec

DOMAIN_SPATIAL = "domain.spatial"
DOMAIN_TEMPORAL = "domain.temporal"


def task_bank_names(task: str) -> tuple[str, str]:
    return f"task.{task}.masked", f"task.{task}.unmasked"


class PromptBank(nn.Module):
    """N_p prompt vectors with a fixed similarity threshold."""

    def __init__(self, num_prompts: int, dim: int, threshold: float):
        super().__init__()
        if num_prompts < 1:
            raise ValueError("a prompt bank needs at least one vector")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
        self.threshold = threshold
        self.prompts = nn.Parameter(torch.randn(num_prompts, dim, dtype=torch.float64) * 0.02)

    def weights(self, h):
        """Thresholded sigmoid similarities, (..., N_p); entries are 0 or in (threshold, 1)."""
        sims = torch.sigmoid(h @ self.prompts.T)
        return torch.where(sims > self.threshold, sims, torch.zeros_like(sims))

    def forward(self, h):
        """h plus the weighted sum of active prompts; identity when none pass."""
        return h + self.weights(h) @ self.prompts


def prompt_apply(h, bank: PromptBank):
    return bank(h)


class PromptSet(nn.Module):
    """The four-bank layout: spatial/temporal domain banks plus per-task pairs.

    Single-bank ablations alias one module for both slots, so the shared
    parameters are counted and serialized once.
    """

    def __init__(
        self,
        num_prompts: int,
        dim: int,
        threshold: float,
        single_domain_bank: bool = False,
        single_task_bank: bool = False,
    ):
        super().__init__()
        self.num_prompts = num_prompts
        self.dim = dim
        self.threshold = threshold
        self.single_domain_bank = single_domain_bank
        self.single_task_bank = single_task_bank
        self.domain_spatial: PromptBank | None = None
        self.domain_temporal: PromptBank | None = None
        self.task_masked = nn.ModuleDict()
        self.task_unmasked = nn.ModuleDict()

    @property
    def has_domain(self) -> bool:
        return self.domain_spatial is not None

    def has_task(self, task: str) -> bool:
        return task in self.task_masked

    def create_domain_banks(self):
        self.domain_spatial = PromptBank(self.num_prompts, self.dim, self.threshold)
        if self.single_domain_bank:
            self.domain_temporal = self.domain_spatial
        else:
            self.domain_temporal = PromptBank(self.num_prompts, self.dim, self.threshold)
        return self

    def create_task_banks(self, task: str):
        masked = PromptBank(self.num_prompts, self.dim, self.threshold)
        self.task_masked[task] = masked
        self.task_unmasked[task] = masked if self.single_task_bank else PromptBank(
            self.num_prompts, self.dim, self.threshold
        )
        return self

    def domain_parameters(self):
        seen, out = set(), []
        for bank in (self.domain_spatial, self.domain_temporal):
            if bank is not None and id(bank.prompts) not in seen:
                seen.add(id(bank.prompts))
                out.append(bank.prompts)
        return out

    def task_parameters(self, task: str):
        seen, out = set(), []
        for table in (self.task_masked, self.task_unmasked):
            if task in table and id(table[task].prompts) not in seen:
                seen.add(id(table[task].prompts))
                out.append(table[task].prompts)
        return out


def domain_prompt(s_unmasked, positional, prompts: PromptSet):
    """Prompted branch inputs (S_spatial*, S_temporal*).

    The positional table slice is added first, then each branch's bank
    rewrites the shared input independently.
    """
    if not prompts.has_domain:
        raise ValueError("domain banks have not been created")
    base = s_unmasked + positional
    return prompts.domain_spatial(base), prompts.domain_temporal(base)


def task_prompt(h_full, mask: MaskSpec, positional, prompts: PromptSet, task: str):
    """Route every cell of the recovered grid through its task bank.

    Masked cells (mask-token positions) go through the masked bank,
    unmasked cells through the other; the routing partitions N x T_p.
    """
    if not prompts.has_task(task):
        raise ValueError(f"no task banks for {task!r}")
    base = h_full + positional
    grid = torch.from_numpy(mask.masked_grid()).to(h_full.device)
    prompted_m = prompts.task_masked[task](base)
    prompted_u = prompts.task_unmasked[task](base)
    return torch.where(grid.unsqueeze(-1), prompted_m, prompted_u)
