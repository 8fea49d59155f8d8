"""End-to-end training pipeline: pre-training, domain prompting, task
prompting, and prediction.

Stage contract: pre-training fits the whole backbone on source domains;
domain prompting freezes it and fits the two encoder-input banks on the
target; task prompting additionally freezes those banks and fits the two
decoder-input banks (optionally the head) per downstream task. Every stage
is a pure function of (inputs, config, seed) and checkpoints the epoch with
the best validation error.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError
from .config import TrainConfig
from .data import (
    Graph,
    MaskSpec,
    NormStats,
    SignalTensor,
    gather_unmasked,
    patchify,
    sample_random_mask,
    zscore,
)
from .decoder import Decoder, masked_mae
from .encoder import Encoder, GraphCache
from .prompting import (
    DOMAIN_SPATIAL,
    DOMAIN_TEMPORAL,
    PromptSet,
    domain_prompt,
    task_bank_names,
    task_prompt,
)

PRETRAIN = "pretrain"
FORECAST = "forecast"
KRIGING = "kriging"
EXTRAPOLATION = "extrapolation"
TRANSDUCTIVE = "transductive"
INDUCTIVE = "inductive"

# config fields that must agree between a checkpoint and the stage config
STRUCTURAL_KEYS = (
    "patch_len", "window_patches", "hidden_dim", "decoder_dim", "num_heads",
    "temporal_layers", "spatial_layers", "decoder_layers", "tcn_kernel",
    "max_hop", "head_hidden",
)


class PipelineError(RuntimeError):
    pass


class TrainingDiverged(PipelineError):
    pass


# --- task templates ---------------------------------------------------------


@dataclass
class TaskTemplate:
    """Masking recipe that encodes a task as reconstruction targets."""

    kind: str
    total_ratio: float = 0.75  # pretraining only
    hist_patches: int = 0
    pred_patches: int = 0
    unobserved_nodes: tuple = ()
    setting: str = TRANSDUCTIVE

    def __post_init__(self):
        if self.kind not in (PRETRAIN, FORECAST, KRIGING, EXTRAPOLATION):
            raise PipelineError(f"unknown task kind {self.kind!r}")
        if self.setting not in (TRANSDUCTIVE, INDUCTIVE):
            raise PipelineError(f"unknown setting {self.setting!r}")
        self.unobserved_nodes = tuple(int(i) for i in self.unobserved_nodes)
        if self.kind in (KRIGING, EXTRAPOLATION) and not self.unobserved_nodes:
            raise PipelineError(f"{self.kind} template needs unobserved nodes")

    def validate(self, num_nodes: int, num_patches: int):
        if self.kind in (FORECAST, EXTRAPOLATION):
            if self.hist_patches < 1 or self.pred_patches < 1:
                raise PipelineError("temporal tasks need hist and pred patches")
            if self.hist_patches + self.pred_patches != num_patches:
                raise PipelineError(
                    f"hist {self.hist_patches} + pred {self.pred_patches} "
                    f"must equal the window's {num_patches} patches"
                )
        if self.kind in (KRIGING, EXTRAPOLATION):
            nodes = set(self.unobserved_nodes)
            if not nodes or len(nodes) >= num_nodes:
                raise PipelineError("unobserved nodes must be a nonempty proper subset")
            if min(nodes) < 0 or max(nodes) >= num_nodes:
                raise PipelineError("unobserved node index out of range")


def task_mask(
    template: TaskTemplate,
    num_nodes: int,
    num_patches: int,
    rng: np.random.Generator | None = None,
) -> MaskSpec:
    """Build the MaskSpec that realizes a task on an N x T_p window."""
    template.validate(num_nodes, num_patches)
    if template.kind == PRETRAIN:
        if rng is None:
            raise PipelineError("pretraining masks need a random generator")
        return sample_random_mask(num_nodes, num_patches, template.total_ratio, rng)
    if template.kind == FORECAST:
        steps = np.arange(template.hist_patches, num_patches)
        return MaskSpec(num_nodes, num_patches, masked_nodes=[], masked_steps=steps)
    if template.kind == KRIGING:
        return MaskSpec(
            num_nodes, num_patches,
            masked_nodes=np.array(template.unobserved_nodes), masked_steps=[],
        )
    # extrapolation: spatial and temporal masking crossed; the loss targets
    # are only the unobserved-future cells
    steps = np.arange(template.hist_patches, num_patches)
    nodes = np.array(template.unobserved_nodes)
    cells = np.array([(i, t) for i in nodes for t in steps], dtype=np.int64)
    return MaskSpec(
        num_nodes, num_patches,
        masked_nodes=nodes, masked_steps=steps, eval_cells=cells,
    )


# --- model assembly ---------------------------------------------------------


class Backbone(torch.nn.Module):
    """Encoder + decoder pair built from one config."""

    def __init__(self, cfg: TrainConfig, num_channels: int):
        super().__init__()
        self.num_channels = num_channels
        patch_width = cfg.patch_len * num_channels
        self.encoder = Encoder(
            patch_width=patch_width,
            dim=cfg.hidden_dim,
            num_heads=cfg.num_heads,
            temporal_layers=cfg.temporal_layers,
            spatial_layers=cfg.spatial_layers,
            max_steps=cfg.window_patches,
            max_hop=cfg.max_hop,
        )
        self.decoder = Decoder(
            dim=cfg.hidden_dim,
            hidden=cfg.decoder_dim,
            num_layers=cfg.decoder_layers,
            kernel=cfg.tcn_kernel,
            patch_width=patch_width,
            max_steps=cfg.window_patches,
            head_hidden=cfg.head_hidden,
        )

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("decoder.head.")]


def reconstruct(model: Backbone, prompts: PromptSet | None, patch_values, tod, dow,
                cache: GraphCache, mask: MaskSpec, task: str | None = None):
    """Full forward pass: embed, mask, (prompt), encode, recover, (prompt), decode.

    patch_values: (..., N, T_p, L*d_x) normalized patches; tod/dow: (T_p,) or
    (B, T_p) indices for the window. Returns predictions of the same shape.
    """
    s = model.encoder.embed(patch_values)
    s_u, node_map, step_map = gather_unmasked(s, mask)
    pe = model.encoder.positional(step_map)
    if prompts is not None and prompts.has_domain:
        s_spatial, s_temporal = domain_prompt(s_u, pe, prompts)
    else:
        s_spatial = s_temporal = s_u + pe
    tod = np.asarray(tod)
    dow = np.asarray(dow)
    h_u = model.encoder.encode(s_spatial, s_temporal, cache, node_map, step_map, tod, dow)
    h = model.decoder.recover_full(h_u, mask)
    add_positional = True
    if prompts is not None and task is not None and prompts.has_task(task):
        pe_d = model.decoder.positional(np.arange(mask.num_steps))
        h = task_prompt(h, mask, pe_d, prompts, task)
        add_positional = False
    return model.decoder.decode(
        h, cache.adjacency, tod, dow, add_positional=add_positional
    )


# --- prepared domains -------------------------------------------------------


@dataclass
class DomainData:
    """A (graph, signal) pair patchified and normalized once for training."""

    graph: Graph
    cache: GraphCache
    patches: torch.Tensor  # (N, P_total, L*d_x) normalized
    tod: np.ndarray
    dow: np.ndarray
    stats: NormStats
    num_channels: int

    @classmethod
    def prepare(cls, graph: Graph, signal: SignalTensor, cfg: TrainConfig,
                stats: NormStats | None = None) -> "DomainData":
        if signal.num_steps % cfg.patch_len != 0:
            usable = (signal.num_steps // cfg.patch_len) * cfg.patch_len
            signal = signal.slice_steps(0, usable)
        if stats is None:
            stats = (
                NormStats.fit(signal) if cfg.normalize
                else NormStats.identity(signal.num_channels)
            )
        normalized = zscore(signal, stats) if cfg.normalize else signal
        patches = patchify(normalized, cfg.patch_len)
        return cls(
            graph=graph,
            cache=GraphCache(graph, cfg.max_hop),
            patches=torch.from_numpy(patches.patch_values).to(torch.float64),
            tod=patches.tod_index,
            dow=patches.dow_index,
            stats=stats,
            num_channels=signal.num_channels,
        )

    @property
    def total_patches(self) -> int:
        return self.patches.shape[1]

    def window_batch(self, starts: np.ndarray, num_patches: int):
        """Stack windows [t0, t0 + num_patches) -> (B, N, T_p, W) plus (B, T_p) tod/dow."""
        values = torch.stack(
            [self.patches[:, t0 : t0 + num_patches] for t0 in starts]
        )
        tod = np.stack([self.tod[t0 : t0 + num_patches] for t0 in starts])
        dow = np.stack([self.dow[t0 : t0 + num_patches] for t0 in starts])
        return values, tod, dow


def _denorm_patch_errors(pred, target, stats: NormStats, num_channels: int):
    """Sum of absolute raw-unit errors and the cell count, per batch."""
    diff = (pred - target).reshape(*pred.shape[:-1], -1, num_channels)
    std = torch.as_tensor(stats.std, dtype=torch.float64)
    raw = diff.abs() * std
    return float(raw.sum()), raw.numel()


def _window_starts(first: int, last: int, stride_p: int) -> np.ndarray:
    """Window start patch indices in [first, last] inclusive."""
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, stride_p, dtype=np.int64)


def _rng(seed: int, *tags) -> np.random.Generator:
    parts = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(parts)


def _seed_torch(seed: int, *tags):
    ss = np.random.SeedSequence(
        [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    )
    torch.manual_seed(int(ss.generate_state(1)[0]))


# --- checkpoint assembly ----------------------------------------------------


def _collect_arrays(model: Backbone, prompts: PromptSet | None,
                    stats: NormStats | None) -> dict[str, np.ndarray]:
    arrays = {
        name: tensor.detach().cpu().numpy().astype(np.float64, copy=True)
        for name, tensor in model.state_dict().items()
    }
    if prompts is not None:
        if prompts.has_domain:
            arrays[DOMAIN_SPATIAL] = prompts.domain_spatial.prompts.detach().numpy().copy()
            arrays[DOMAIN_TEMPORAL] = prompts.domain_temporal.prompts.detach().numpy().copy()
        for task in prompts.task_masked:
            m_name, u_name = task_bank_names(task)
            arrays[m_name] = prompts.task_masked[task].prompts.detach().numpy().copy()
            arrays[u_name] = prompts.task_unmasked[task].prompts.detach().numpy().copy()
    if stats is not None:
        arrays["norm.mean"] = np.asarray(stats.mean, dtype=np.float64)
        arrays["norm.std"] = np.asarray(stats.std, dtype=np.float64)
    return arrays


def build_from_checkpoint(ckpt: Checkpoint) -> tuple[Backbone, PromptSet | None, TrainConfig]:
    """Rebuild the backbone (and any prompt banks) a checkpoint describes."""
    cfg = TrainConfig.from_flat(ckpt.config)
    num_channels = int(ckpt.meta.get("num_channels", 1))
    model = Backbone(cfg, num_channels)
    state = {}
    bank_arrays = {}
    for name, arr in ckpt.arrays.items():
        if name.startswith(("encoder.", "decoder.")):
            state[name] = torch.from_numpy(arr)
        elif name.startswith(("domain.", "task.")):
            bank_arrays[name] = arr
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    ckpt.require_shapes(expected)
    model.load_state_dict(state, strict=True)

    prompts = None
    if bank_arrays:
        prompts = PromptSet(
            cfg.num_prompts, cfg.hidden_dim, cfg.prompt_threshold,
            single_domain_bank=cfg.single_domain_bank,
            single_task_bank=cfg.single_task_bank,
        )
        if DOMAIN_SPATIAL in bank_arrays:
            prompts.create_domain_banks()
            with torch.no_grad():
                prompts.domain_spatial.prompts.copy_(torch.from_numpy(bank_arrays[DOMAIN_SPATIAL]))
                if not cfg.single_domain_bank:
                    prompts.domain_temporal.prompts.copy_(
                        torch.from_numpy(bank_arrays[DOMAIN_TEMPORAL])
                    )
        tasks = sorted(
            {name.split(".")[1] for name in bank_arrays if name.startswith("task.")}
        )
        for task in tasks:
            m_name, u_name = task_bank_names(task)
            prompts.create_task_banks(task)
            with torch.no_grad():
                prompts.task_masked[task].prompts.copy_(torch.from_numpy(bank_arrays[m_name]))
                if not cfg.single_task_bank:
                    prompts.task_unmasked[task].prompts.copy_(
                        torch.from_numpy(bank_arrays[u_name])
                    )
    return model, prompts, cfg


def checkpoint_stats(ckpt: Checkpoint) -> NormStats | None:
    if "norm.mean" in ckpt.arrays:
        return NormStats(mean=ckpt.arrays["norm.mean"], std=ckpt.arrays["norm.std"])
    return None


def _check_structure(cfg: TrainConfig, ckpt: Checkpoint):
    flat = cfg.to_flat()
    for key in STRUCTURAL_KEYS:
        if key in ckpt.config and ckpt.config[key] != flat[key]:
            raise CheckpointError(
                f"config mismatch on {key}: checkpoint {ckpt.config[key]} vs {flat[key]}"
            )


# --- shared training loop ---------------------------------------------------


@dataclass
class _Plan:
    """Everything one optimization stage needs per epoch."""

    domains: list[DomainData]
    train_starts: list[np.ndarray]
    val_batches: list[tuple[int, np.ndarray, MaskSpec]]
    train_mask: object  # callable (dom_idx, rng) -> MaskSpec
    task_name: str | None = None


def _run_stage(
    model: Backbone,
    prompts: PromptSet | None,
    trainable: list[torch.nn.Parameter],
    plan: _Plan,
    cfg: TrainConfig,
    lr: float,
    epochs: int,
    stage_tag: str,
):
    """Generic optimize/validate/select loop shared by all stages.

    Returns (best_state, history). best_state snapshots every trainable
    tensor at the epoch with minimal validation MAE (raw units).
    """
    optimizer = torch.optim.AdamW(trainable, lr=lr, weight_decay=cfg.weight_decay)
    mask_rng = _rng(cfg.seed, stage_tag, "mask")
    t_p = cfg.window_patches

    def evaluate(use_prompts) -> float:
        err, count = 0.0, 0
        with torch.no_grad():
            for dom_idx, starts, mask in plan.val_batches:
                dom = plan.domains[dom_idx]
                values, tod, dow = dom.window_batch(starts, t_p)
                preds = reconstruct(
                    model, use_prompts, values, tod, dow, dom.cache, mask,
                    task=plan.task_name,
                )
                cells = mask.eval_cell_array()
                rows, cols = cells[:, 0], cells[:, 1]
                e, c = _denorm_patch_errors(
                    preds[..., rows, cols, :], values[..., rows, cols, :],
                    dom.stats, dom.num_channels,
                )
                err += e
                count += c
        if count == 0:
            raise PipelineError("validation produced no eval cells")
        return err / count

    history = {
        "train_loss": [],
        "val_mae": [],
        "stage": stage_tag,
        "trainable_params": int(sum(p.numel() for p in trainable)),
    }
    best_val = float("inf")
    best_state = None
    best_epoch = -1
    stale = 0

    for epoch in range(epochs):
        order_rng = _rng(cfg.seed, stage_tag, "order", epoch)
        per_domain = []
        for starts in plan.train_starts:
            shuffled = starts[order_rng.permutation(starts.size)]
            per_domain.append(
                [shuffled[i : i + cfg.batch_size]
                 for i in range(0, shuffled.size, cfg.batch_size)]
            )
        epoch_loss, batches = 0.0, 0
        max_len = max(len(b) for b in per_domain)
        for round_idx in range(max_len):
            for dom_idx, batch_list in enumerate(per_domain):
                if round_idx >= len(batch_list):
                    continue
                starts = batch_list[round_idx]
                dom = plan.domains[dom_idx]
                values, tod, dow = dom.window_batch(starts, t_p)
                mask = plan.train_mask(dom_idx, mask_rng)
                preds = reconstruct(
                    model, prompts, values, tod, dow, dom.cache, mask,
                    task=plan.task_name,
                )
                loss = masked_mae(preds, values, mask)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"{stage_tag}: non-finite loss at epoch {epoch}, batch {batches}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss.detach())
                batches += 1
        history["train_loss"].append(epoch_loss / max(batches, 1))
        val = evaluate(prompts)
        history["val_mae"].append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_state = [t.detach().clone() for t in trainable]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        with torch.no_grad():
            for tensor, saved in zip(trainable, best_state):
                tensor.copy_(saved)
    history["best_epoch"] = best_epoch
    history["best_val_mae"] = best_val
    return history


def _split_patches(total_steps: int, cfg: TrainConfig, interval: int):
    """Target split boundaries in patch units: train / selection / rest."""
    steps_per_day = 86400 / interval
    train_steps = int(round(cfg.target_train_days * steps_per_day))
    select_steps = int(round(cfg.target_select_days * steps_per_day))
    train_p = train_steps // cfg.patch_len
    select_p = select_steps // cfg.patch_len
    total_p = total_steps // cfg.patch_len
    if train_p < cfg.window_patches:
        raise PipelineError(
            f"target training split has {train_p} patches, "
            f"need at least {cfg.window_patches}"
        )
    return train_p, min(train_p + select_p, total_p), total_p


# --- stages -----------------------------------------------------------------


def pretrain(
    source_datasets: list[tuple[Graph, SignalTensor]],
    cfg: TrainConfig,
) -> Checkpoint:
    """Fit the full backbone on source domains with random masking."""
    if not source_datasets:
        raise PipelineError("pretraining needs at least one source dataset")
    _seed_torch(cfg.seed, "pretrain", "init")
    stride_p = cfg.window_stride // cfg.patch_len
    t_p = cfg.window_patches

    domains, train_starts, val_batches = [], [], []
    spans = []
    val_mask_rng = _rng(cfg.seed, "pretrain", "valmask")
    num_channels = source_datasets[0][1].num_channels
    for graph, signal in source_datasets:
        if signal.num_channels != num_channels:
            raise PipelineError("sources disagree on channel count")
        total_p = signal.num_steps // cfg.patch_len
        train_p = int(np.floor(total_p * cfg.source_train_frac))
        if train_p < t_p or total_p - train_p < t_p:
            raise PipelineError(
                f"source too short: {total_p} patches for {t_p}-patch windows"
            )
        train_slice = signal.slice_steps(0, train_p * cfg.patch_len)
        stats = (
            NormStats.fit(train_slice) if cfg.normalize
            else NormStats.identity(num_channels)
        )
        dom = DomainData.prepare(graph, signal, cfg, stats=stats)
        dom_idx = len(domains)
        domains.append(dom)
        train_starts.append(_window_starts(0, train_p - t_p, stride_p))
        for v0 in _window_starts(train_p, total_p - t_p, t_p):
            mask = sample_random_mask(graph.num_nodes, t_p, cfg.mask_ratio, val_mask_rng)
            val_batches.append((dom_idx, np.array([v0]), mask))
        spans.append([0, train_p * cfg.patch_len])

    def train_mask(dom_idx, rng):
        n = domains[dom_idx].graph.num_nodes
        return sample_random_mask(n, t_p, cfg.mask_ratio, rng)

    model = Backbone(cfg, num_channels)
    plan = _Plan(domains, train_starts, val_batches, train_mask)
    history = _run_stage(
        model, None, list(model.parameters()), plan, cfg,
        lr=cfg.lr_pretrain, epochs=cfg.epochs_pretrain, stage_tag="pretrain",
    )
    history["train_step_spans"] = spans
    return Checkpoint(
        stage="pretrained",
        config=cfg.to_flat(),
        arrays=_collect_arrays(model, None, None),
        history=history,
        meta={
            "num_channels": num_channels,
            "source_nodes": [g.num_nodes for g, _ in source_datasets],
        },
    )


def _target_plan(graph, signal, cfg, hidden_nodes, stage_tag, task_template=None):
    """Prepare the prompting-stage data: split, stats, windows, masks.

    hidden_nodes lists target nodes whose signals must never be model input
    (transductive spatial tasks); they are forced into every random mask and
    dropped from its eval cells.
    """
    hidden = np.asarray(sorted(hidden_nodes or ()), dtype=np.int64)
    train_p, select_end, total_p = _split_patches(signal.num_steps, cfg, signal.interval)
    t_p = cfg.window_patches
    stride_p = cfg.window_stride // cfg.patch_len
    train_slice = signal.slice_steps(0, train_p * cfg.patch_len)
    stats = (
        NormStats.fit(train_slice) if cfg.normalize
        else NormStats.identity(signal.num_channels)
    )
    dom = DomainData.prepare(graph, signal, cfg, stats=stats)
    train_starts = _window_starts(0, train_p - t_p, stride_p)
    if train_starts.size == 0:
        raise PipelineError("target training split shorter than one window")
    val_starts = _window_starts(train_p, select_end - t_p, t_p)
    if val_starts.size == 0:
        raise PipelineError("target selection split shorter than one window")

    def hide(mask: MaskSpec) -> MaskSpec:
        if hidden.size == 0:
            return mask
        keep = mask.eval_cell_array()
        keep = keep[~np.isin(keep[:, 0], hidden)]
        return MaskSpec(
            num_nodes=mask.num_nodes,
            num_steps=mask.num_steps,
            masked_nodes=np.union1d(mask.masked_nodes, hidden),
            masked_steps=mask.masked_steps,
            eval_cells=keep,
        )

    if task_template is None:
        val_mask_rng = _rng(cfg.seed, stage_tag, "valmask")
        val_batches = [
            (0, np.array([v0]),
             hide(sample_random_mask(graph.num_nodes, t_p, cfg.mask_ratio, val_mask_rng)))
            for v0 in val_starts
        ]

        def train_mask(dom_idx, rng):
            return hide(sample_random_mask(graph.num_nodes, t_p, cfg.mask_ratio, rng))

        task_name = None
    else:
        fixed = task_mask(task_template, graph.num_nodes, t_p)
        val_batches = [(0, np.array([v0]), fixed) for v0 in val_starts]

        def train_mask(dom_idx, rng):
            return fixed

        task_name = task_template.kind

    plan = _Plan([dom], [train_starts], val_batches, train_mask, task_name=task_name)
    return dom, plan, stats, train_p


def fit_domain_prompts(
    target: tuple[Graph, SignalTensor],
    pretrained: Checkpoint,
    cfg: TrainConfig,
    hidden_nodes: tuple = (),
) -> Checkpoint:
    """Stage two: freeze the backbone, fit the encoder-input banks on the
    target with the pre-training objective."""
    if pretrained.stage != "pretrained":
        raise PipelineError(f"expected a pretrained checkpoint, got {pretrained.stage!r}")
    _check_structure(cfg, pretrained)
    graph, signal = target
    model, _, _ = build_from_checkpoint(pretrained)
    model.requires_grad_(False)

    _seed_torch(cfg.seed, "domain", "init")
    prompts = PromptSet(
        cfg.num_prompts, cfg.hidden_dim, cfg.prompt_threshold,
        single_domain_bank=cfg.single_domain_bank,
        single_task_bank=cfg.single_task_bank,
    ).create_domain_banks()

    dom, plan, stats, train_p = _target_plan(graph, signal, cfg, hidden_nodes, "domain")
    history = _run_stage(
        model, prompts, prompts.domain_parameters(), plan, cfg,
        lr=cfg.lr_prompt, epochs=cfg.epochs_domain, stage_tag="domain",
    )
    # zero-shot reference on the same validation windows and masks
    err, count = 0.0, 0
    with torch.no_grad():
        for dom_idx, starts, mask in plan.val_batches:
            values, tod, dow = plan.domains[dom_idx].window_batch(starts, cfg.window_patches)
            preds = reconstruct(model, None, values, tod, dow, dom.cache, mask)
            cells = mask.eval_cell_array()
            rows, cols = cells[:, 0], cells[:, 1]
            e, c = _denorm_patch_errors(
                preds[..., rows, cols, :], values[..., rows, cols, :],
                dom.stats, dom.num_channels,
            )
            err += e
            count += c
    history["zero_shot_val_mae"] = err / count
    history["train_step_spans"] = [[0, train_p * cfg.patch_len]]
    return Checkpoint(
        stage="domain_prompted",
        config=cfg.to_flat(),
        arrays=_collect_arrays(model, prompts, stats),
        history=history,
        meta={
            "num_channels": dom.num_channels,
            "trained_num_nodes": graph.num_nodes,
            "hidden_nodes": [int(i) for i in hidden_nodes],
        },
    )


def fit_task_prompts(
    target: tuple[Graph, SignalTensor],
    domain_prompted: Checkpoint,
    template: TaskTemplate,
    cfg: TrainConfig,
) -> Checkpoint:
    """Stage three: freeze backbone and domain banks, fit the task banks
    (and optionally the head) with the task's masking."""
    if domain_prompted.stage not in ("domain_prompted", "pretrained"):
        raise PipelineError(
            f"expected a domain-prompted checkpoint, got {domain_prompted.stage!r}"
        )
    if template.kind == PRETRAIN:
        raise PipelineError("task prompting needs a downstream task template")
    _check_structure(cfg, domain_prompted)
    graph, signal = target
    model, prompts, _ = build_from_checkpoint(domain_prompted)
    model.requires_grad_(False)
    if prompts is None:
        prompts = PromptSet(
            cfg.num_prompts, cfg.hidden_dim, cfg.prompt_threshold,
            single_domain_bank=cfg.single_domain_bank,
            single_task_bank=cfg.single_task_bank,
        )
    prompts.requires_grad_(False)

    task = template.kind
    _seed_torch(cfg.seed, "task", task, "init")
    prompts.create_task_banks(task)
    trainable = task_parameters = prompts.task_parameters(task)
    if cfg.tune_head:
        head = model.head_parameters()
        for p in head:
            p.requires_grad_(True)
        trainable = task_parameters + head
    for p in task_parameters:
        p.requires_grad_(True)

    hidden_nodes = tuple(
        template.unobserved_nodes if template.setting == TRANSDUCTIVE else ()
    )
    dom, plan, stats, train_p = _target_plan(
        graph, signal, cfg, hidden_nodes=(), stage_tag=f"task:{task}",
        task_template=template,
    )
    # domain-prompts-only reference on the same windows and task mask
    err, count = 0.0, 0
    with torch.no_grad():
        for dom_idx, starts, mask in plan.val_batches:
            values, tod, dow = plan.domains[dom_idx].window_batch(starts, cfg.window_patches)
            preds = reconstruct(model, prompts, values, tod, dow, dom.cache, mask, task=None)
            cells = mask.eval_cell_array()
            rows, cols = cells[:, 0], cells[:, 1]
            e, c = _denorm_patch_errors(
                preds[..., rows, cols, :], values[..., rows, cols, :],
                dom.stats, dom.num_channels,
            )
            err += e
            count += c
    domain_only = err / count

    history = _run_stage(
        model, prompts, trainable, plan, cfg,
        lr=cfg.lr_prompt, epochs=cfg.epochs_task, stage_tag=f"task:{task}",
    )
    history["domain_only_val_mae"] = domain_only
    history["train_step_spans"] = [[0, train_p * cfg.patch_len]]
    return Checkpoint(
        stage=f"task_prompted:{task}",
        config=cfg.to_flat(),
        arrays=_collect_arrays(model, prompts, stats),
        history=history,
        meta={
            "num_channels": dom.num_channels,
            "trained_num_nodes": graph.num_nodes,
            "task": task,
            "setting": template.setting,
            "tune_head": cfg.tune_head,
            "hidden_nodes": [int(i) for i in hidden_nodes],
        },
    )


def fine_tune(
    target: tuple[Graph, SignalTensor],
    pretrained: Checkpoint,
    template: TaskTemplate,
    cfg: TrainConfig,
) -> Checkpoint:
    """Fine-tune every backbone parameter on the target task (the "ft"
    ablation); no prompts are involved."""
    _check_structure(cfg, pretrained)
    graph, signal = target
    model, _, _ = build_from_checkpoint(pretrained)
    _seed_torch(cfg.seed, "finetune", template.kind, "init")
    dom, plan, stats, train_p = _target_plan(
        graph, signal, cfg, hidden_nodes=(), stage_tag=f"ft:{template.kind}",
        task_template=template,
    )
    history = _run_stage(
        model, None, list(model.parameters()), plan, cfg,
        lr=cfg.lr_pretrain, epochs=cfg.epochs_task, stage_tag=f"ft:{template.kind}",
    )
    history["train_step_spans"] = [[0, train_p * cfg.patch_len]]
    return Checkpoint(
        stage=f"fine_tuned:{template.kind}",
        config=cfg.to_flat(),
        arrays=_collect_arrays(model, None, stats),
        history=history,
        meta={
            "num_channels": dom.num_channels,
            "trained_num_nodes": graph.num_nodes,
            "task": template.kind,
        },
    )


# --- prediction -------------------------------------------------------------


def predict(
    ckpt: Checkpoint,
    graph: Graph,
    window: SignalTensor,
    template: TaskTemplate,
    stats: NormStats | None = None,
) -> np.ndarray:
    """Predict the template's target cells for one window, in raw units.

    Output shapes: forecasting (N, pred*L, d_x); kriging (M, T_p*L, d_x);
    extrapolation (M, pred*L, d_x), rows ordered by unobserved node index.
    """
    model, prompts, cfg = build_from_checkpoint(ckpt)
    if window.num_steps != cfg.window_steps:
        raise PipelineError(
            f"window length mismatch: got {window.num_steps} steps, "
            f"model expects {cfg.window_steps}"
        )
    if (
        template.kind in (KRIGING, EXTRAPOLATION)
        and template.setting == TRANSDUCTIVE
        and "trained_num_nodes" in ckpt.meta
        and graph.num_nodes != int(ckpt.meta["trained_num_nodes"])
    ):
        raise PipelineError(
            f"unknown node in transductive mode: graph has {graph.num_nodes} "
            f"nodes, training saw {ckpt.meta['trained_num_nodes']}"
        )
    if stats is None:
        stats = checkpoint_stats(ckpt)
    if cfg.normalize and stats is None:
        raise PipelineError("normalization stats unavailable; pass them explicitly")

    d_x = window.num_channels
    normalized = zscore(window, stats) if cfg.normalize else window
    patchset = patchify(normalized, cfg.patch_len)
    mask = task_mask(template, graph.num_nodes, cfg.window_patches)
    cache = GraphCache(graph, cfg.max_hop)
    values = torch.from_numpy(patchset.patch_values).to(torch.float64)
    with torch.no_grad():
        preds = reconstruct(
            model, prompts, values, patchset.tod_index, patchset.dow_index,
            cache, mask, task=template.kind,
        )
    preds = preds.numpy()

    if template.kind == FORECAST:
        out = preds[:, mask.masked_steps, :]
    elif template.kind == KRIGING:
        out = preds[mask.masked_nodes, :, :]
    else:
        out = preds[mask.masked_nodes][:, mask.masked_steps, :]
    rows = out.shape[0]
    series = out.reshape(rows, -1, d_x)
    if cfg.normalize:
        series = series * stats.std + stats.mean
    return series


def target_values(window: SignalTensor, template: TaskTemplate, cfg: TrainConfig) -> np.ndarray:
    """Ground-truth counterpart of predict's output, from a raw window."""
    patchset = patchify(window, cfg.patch_len)
    mask = task_mask(template, window.num_nodes, cfg.window_patches)
    vals = patchset.patch_values
    if template.kind == FORECAST:
        out = vals[:, mask.masked_steps, :]
    elif template.kind == KRIGING:
        out = vals[mask.masked_nodes, :, :]
    else:
        out = vals[mask.masked_nodes][:, mask.masked_steps, :]
    return out.reshape(out.shape[0], -1, window.num_channels)
