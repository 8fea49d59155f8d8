import numpy as np
import pytest
import torch

from stprompt.checkpoint import Checkpoint, CheckpointError
from stprompt.config import TrainConfig
from stprompt.data import Graph, NormStats, SignalTensor
from stprompt.encoder import GraphCache
from stprompt.pipeline import (
    EXTRAPOLATION,
    FORECAST,
    KRIGING,
    PRETRAIN,
    Backbone,
    PipelineError,
    TaskTemplate,
    fine_tune,
    fit_domain_prompts,
    fit_task_prompts,
    predict,
    pretrain,
    reconstruct,
    target_values,
    task_mask,
)

MONDAY = 1614556800  # 2021-03-01 00:00 UTC


def tiny_config(**kwargs) -> TrainConfig:
    base = dict(
        seed=0,
        patch_len=4,
        window_patches=6,
        hidden_dim=8,
        decoder_dim=8,
        num_heads=2,
        temporal_layers=1,
        spatial_layers=1,
        decoder_layers=2,
        tcn_kernel=3,
        head_hidden=(16,),
        num_prompts=4,
        prompt_threshold=0.5,
        epochs_pretrain=4,
        epochs_domain=4,
        epochs_task=4,
        patience=10,
        batch_size=4,
        mask_ratio=0.75,
        target_train_days=3.0,
        target_select_days=3.0,
    )
    base.update(kwargs)
    return TrainConfig(**base)


def ring_graph(n, weight=0.8):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = weight
        a[(i + 1) % n, i] = weight
    return Graph(num_nodes=n, adjacency=a)


def wave_dataset(n=4, days=7, interval=3600, phase_hours=0.0, seed=0, noise=0.3):
    rng = np.random.default_rng(seed)
    steps = int(days * 86400 / interval)
    hours = (np.arange(steps) * interval / 3600.0) % 24
    base = rng.uniform(40, 60, size=n)
    amp = rng.uniform(5, 10, size=n)
    values = (
        base[:, None]
        + amp[:, None] * np.sin(2 * np.pi * (hours[None, :] + phase_hours) / 24.0)
        + rng.normal(0, noise, size=(n, steps))
    )
    return ring_graph(n), SignalTensor(
        values=values[:, :, None], start_epoch=MONDAY, interval=interval
    )


def constant_dataset(n=3, days=7, interval=3600, value=1.0):
    steps = int(days * 86400 / interval)
    return ring_graph(n), SignalTensor(
        values=np.full((n, steps, 1), value), start_epoch=MONDAY, interval=interval
    )


# --- task templates ---------------------------------------------------------


def test_forecast_template_masks_last_patches():
    tpl = TaskTemplate(kind=FORECAST, hist_patches=24, pred_patches=1)
    mask = task_mask(tpl, num_nodes=5, num_patches=25)
    assert mask.masked_steps.tolist() == [24]
    assert mask.masked_nodes.size == 0
    cells = mask.eval_cell_array()
    assert sorted(map(tuple, cells)) == [(i, 24) for i in range(5)]


def test_kriging_template_masks_nodes():
    tpl = TaskTemplate(kind=KRIGING, unobserved_nodes=(2, 5, 8))
    mask = task_mask(tpl, num_nodes=9, num_patches=25)
    assert mask.masked_nodes.tolist() == [2, 5, 8]
    assert mask.masked_steps.size == 0
    assert mask.masked_fraction() == pytest.approx(3 / 9)


def test_extrapolation_template_cross_eval():
    tpl = TaskTemplate(
        kind=EXTRAPOLATION, unobserved_nodes=(2,), hist_patches=24, pred_patches=1
    )
    mask = task_mask(tpl, num_nodes=3, num_patches=25)
    grid = mask.masked_grid()
    for i in range(3):
        for t in range(25):
            assert grid[i, t] == (i == 2 or t == 24)
    assert mask.eval_cell_array().tolist() == [[2, 24]]


def test_template_invariants():
    with pytest.raises(PipelineError):
        TaskTemplate(kind="nonsense")
    with pytest.raises(PipelineError):
        TaskTemplate(kind=KRIGING)  # no unobserved nodes
    with pytest.raises(PipelineError):
        task_mask(TaskTemplate(kind=FORECAST, hist_patches=3, pred_patches=1), 4, 25)
    with pytest.raises(PipelineError):
        task_mask(
            TaskTemplate(kind=KRIGING, unobserved_nodes=(0, 1, 2)), 3, 10
        )  # not a proper subset
    with pytest.raises(PipelineError):
        task_mask(TaskTemplate(kind=PRETRAIN), 4, 8)  # rng required


def test_template_soundness_property():
    rng = np.random.default_rng(7)
    kinds = [FORECAST, KRIGING, EXTRAPOLATION]
    for _ in range(200):
        n = int(rng.integers(2, 12))
        t_p = int(rng.integers(2, 12))
        kind = kinds[int(rng.integers(3))]
        if kind == FORECAST:
            pred = int(rng.integers(1, t_p))
            tpl = TaskTemplate(kind=kind, hist_patches=t_p - pred, pred_patches=pred)
        else:
            m = int(rng.integers(1, n))
            nodes = tuple(rng.choice(n, size=m, replace=False).tolist())
            if kind == KRIGING:
                tpl = TaskTemplate(kind=kind, unobserved_nodes=nodes)
            else:
                pred = int(rng.integers(1, t_p))
                tpl = TaskTemplate(
                    kind=kind, unobserved_nodes=nodes,
                    hist_patches=t_p - pred, pred_patches=pred,
                )
        mask = task_mask(tpl, n, t_p)
        grid = mask.masked_grid()
        node_set = set(mask.masked_nodes.tolist())
        step_set = set(mask.masked_steps.tolist())
        for i in range(n):
            for t in range(t_p):
                assert grid[i, t] == (i in node_set or t in step_set)
        cells = mask.eval_cell_array()
        assert np.all(grid[cells[:, 0], cells[:, 1]])


# --- pretraining ------------------------------------------------------------


@pytest.fixture(scope="module")
def constant_run():
    cfg = tiny_config(
        normalize=False, epochs_pretrain=150, lr_pretrain=0.01, patience=150, seed=1
    )
    graph, signal = constant_dataset()
    ckpt = pretrain([(graph, signal)], cfg)
    return cfg, graph, signal, ckpt


def test_pretrain_constant_converges(constant_run):
    _, _, _, ckpt = constant_run
    losses = ckpt.history["train_loss"]
    assert min(losses) < 1e-2 * losses[0]
    assert ckpt.history["best_val_mae"] < 0.01  # raw units


def test_pretrain_selects_argmin_epoch(constant_run):
    _, _, _, ckpt = constant_run
    curve = ckpt.history["val_mae"]
    assert ckpt.history["best_epoch"] == int(np.argmin(curve))


def test_pretrain_determinism_bitwise():
    cfg = tiny_config(epochs_pretrain=2, seed=5)
    graph, signal = wave_dataset(seed=3)
    a = pretrain([(graph, signal)], cfg)
    b = pretrain([(graph, signal)], cfg)
    assert set(a.arrays) == set(b.arrays)
    for name in a.arrays:
        assert np.array_equal(a.arrays[name], b.arrays[name]), name
    assert a.history["val_mae"] == b.history["val_mae"]


def test_pretrain_divergence_aborts():
    cfg = tiny_config(epochs_pretrain=8, lr_pretrain=1e12, patience=20)
    graph, signal = wave_dataset(seed=4)
    with pytest.raises(PipelineError):
        pretrain([(graph, signal)], cfg)


def test_pretrain_requires_sources():
    with pytest.raises(PipelineError, match="at least one source"):
        pretrain([], tiny_config())


def test_pretrain_multi_source_round_robin():
    cfg = tiny_config(epochs_pretrain=1, seed=9)
    d1 = wave_dataset(n=4, seed=11)
    d2 = wave_dataset(n=5, seed=12)  # different node count is fine
    ckpt = pretrain([d1, d2], cfg)
    assert ckpt.meta["source_nodes"] == [4, 5]
    assert len(ckpt.history["train_step_spans"]) == 2


# --- prompting stages -------------------------------------------------------


@pytest.fixture(scope="module")
def wave_pipeline():
    cfg = tiny_config(epochs_pretrain=6, epochs_domain=3, epochs_task=3, seed=2)
    source = wave_dataset(n=4, seed=21)
    target = wave_dataset(n=4, days=10, phase_hours=2.0, seed=22)
    pretrained = pretrain([source], cfg)
    return cfg, source, target, pretrained


def test_domain_prompting_freezes_backbone(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    ckpt = fit_domain_prompts(target, pretrained, cfg)
    assert ckpt.stage == "domain_prompted"
    for name, arr in pretrained.arrays.items():
        assert np.array_equal(ckpt.arrays[name], arr), f"{name} changed"
    assert "domain.spatial" in ckpt.arrays
    assert "domain.temporal" in ckpt.arrays
    assert ckpt.arrays["domain.spatial"].shape == (cfg.num_prompts, cfg.hidden_dim)


def test_domain_prompting_threshold_one_is_noop(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    inert_cfg = cfg.replace(prompt_threshold=1.0, epochs_domain=2)
    ckpt = fit_domain_prompts(target, pretrained, inert_cfg)
    zero_shot = ckpt.history["zero_shot_val_mae"]
    for val in ckpt.history["val_mae"]:
        assert abs(val - zero_shot) <= 1e-12


def test_task_prompting_freezes_domain_banks(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    domain_ckpt = fit_domain_prompts(target, pretrained, cfg)
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    task_ckpt = fit_task_prompts(target, domain_ckpt, tpl, cfg)
    assert task_ckpt.stage == "task_prompted:forecast"
    for name, arr in domain_ckpt.arrays.items():
        if name.startswith("norm."):
            continue
        assert np.array_equal(task_ckpt.arrays[name], arr), f"{name} changed"
    assert "task.forecast.masked" in task_ckpt.arrays
    assert "task.forecast.unmasked" in task_ckpt.arrays


def test_task_prompting_head_flag(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    domain_ckpt = fit_domain_prompts(target, pretrained, cfg)
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    frozen = fit_task_prompts(target, domain_ckpt, tpl, cfg.replace(tune_head=False))
    tuned = fit_task_prompts(target, domain_ckpt, tpl, cfg.replace(tune_head=True))
    head_names = [n for n in domain_ckpt.arrays if n.startswith("decoder.head.")]
    assert head_names
    for name in head_names:
        assert np.array_equal(frozen.arrays[name], domain_ckpt.arrays[name])
    assert any(
        not np.array_equal(tuned.arrays[name], domain_ckpt.arrays[name])
        for name in head_names
    )


def test_task_prompting_rejects_pretrain_template(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    with pytest.raises(PipelineError, match="downstream task"):
        fit_task_prompts(target, pretrained, TaskTemplate(kind=PRETRAIN), cfg)


def test_structure_mismatch_rejected(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    with pytest.raises(CheckpointError, match="config mismatch"):
        fit_domain_prompts(target, pretrained, cfg.replace(hidden_dim=16))


def test_fine_tune_updates_backbone(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    ckpt = fine_tune(target, pretrained, tpl, cfg.replace(epochs_task=1))
    assert ckpt.stage == "fine_tuned:forecast"
    changed = sum(
        not np.array_equal(ckpt.arrays[n], pretrained.arrays[n])
        for n in pretrained.arrays
    )
    assert changed > 0


# --- prediction -------------------------------------------------------------


def test_predict_forecast_shape(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    stats = NormStats.fit(signal.slice_steps(0, cfg.window_steps))
    window = signal.slice_steps(0, cfg.window_steps)
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    out = predict(pretrained, graph, window, tpl, stats=stats)
    assert out.shape == (4, cfg.patch_len, 1)
    truth = target_values(window, tpl, cfg)
    assert truth.shape == out.shape


def test_predict_kriging_and_extrapolation_shapes(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    stats = NormStats.fit(signal.slice_steps(0, cfg.window_steps))
    window = signal.slice_steps(0, cfg.window_steps)
    krig = TaskTemplate(kind=KRIGING, unobserved_nodes=(1,))
    out = predict(pretrained, graph, window, krig, stats=stats)
    assert out.shape == (1, cfg.window_steps, 1)
    extra = TaskTemplate(
        kind=EXTRAPOLATION, unobserved_nodes=(1, 3), hist_patches=5, pred_patches=1
    )
    out = predict(pretrained, graph, window, extra, stats=stats)
    assert out.shape == (2, cfg.patch_len, 1)


def test_predict_window_length_mismatch(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    with pytest.raises(PipelineError, match="window length mismatch"):
        predict(pretrained, graph, signal.slice_steps(0, cfg.window_steps - 4), tpl)


def test_predict_inductive_new_node(wave_pipeline):
    # train every stage on a 3-node subgraph, then predict for a 4th node
    # that only appears at prediction time
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    observed = np.array([0, 1, 2])
    sub_adj = graph.adjacency[np.ix_(observed, observed)]
    sub_graph = Graph(num_nodes=3, adjacency=sub_adj)
    sub_signal = signal.select_nodes(observed)
    sub_pre = pretrain([(sub_graph, sub_signal)], cfg)
    domain_ckpt = fit_domain_prompts((sub_graph, sub_signal), sub_pre, cfg)
    tpl_train = TaskTemplate(kind=KRIGING, unobserved_nodes=(2,), setting="inductive")
    task_ckpt = fit_task_prompts((sub_graph, sub_signal), domain_ckpt, tpl_train, cfg)
    stats = NormStats.fit(sub_signal.slice_steps(0, cfg.window_steps))
    tpl_eval = TaskTemplate(kind=KRIGING, unobserved_nodes=(3,), setting="inductive")
    window = signal.slice_steps(0, cfg.window_steps)
    out = predict(task_ckpt, graph, window, tpl_eval, stats=stats)
    assert out.shape == (1, cfg.window_steps, 1)
    assert np.all(np.isfinite(out))


def test_predict_transductive_unknown_node(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    domain_ckpt = fit_domain_prompts(target, pretrained, cfg)
    bigger = ring_graph(6)
    big_signal = SignalTensor(
        values=np.tile(signal.values[:1], (6, 1, 1))[:, : cfg.window_steps],
        start_epoch=signal.start_epoch,
        interval=signal.interval,
    )
    tpl = TaskTemplate(kind=KRIGING, unobserved_nodes=(5,), setting="transductive")
    with pytest.raises(PipelineError, match="unknown node in transductive"):
        predict(domain_ckpt, bigger, big_signal, tpl)


def test_predict_end_to_end_constant(constant_run):
    cfg, graph, signal, ckpt = constant_run
    window = signal.slice_steps(0, cfg.window_steps)
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    out = predict(ckpt, graph, window, tpl)
    assert np.all(np.abs(out - 1.0) < 1e-2)


# --- checkpoint round trip --------------------------------------------------


def test_checkpoint_round_trip_forward_bitwise(wave_pipeline, tmp_path):
    cfg, _, target, pretrained = wave_pipeline
    graph, signal = target
    domain_ckpt = fit_domain_prompts(target, pretrained, cfg)
    path = domain_ckpt.save(tmp_path / "domain.ckpt")
    loaded = Checkpoint.load(path)
    assert loaded.stage == domain_ckpt.stage
    assert loaded.hash == domain_ckpt.hash
    for name in domain_ckpt.arrays:
        assert np.array_equal(loaded.arrays[name], domain_ckpt.arrays[name])
    stats = NormStats.fit(signal.slice_steps(0, cfg.window_steps))
    window = signal.slice_steps(0, cfg.window_steps)
    tpl = TaskTemplate(kind=FORECAST, hist_patches=5, pred_patches=1)
    before = predict(domain_ckpt, graph, window, tpl, stats=stats)
    after = predict(loaded, graph, window, tpl, stats=stats)
    assert np.array_equal(before, after)


def test_checkpoint_shape_verification(wave_pipeline):
    cfg, _, _, pretrained = wave_pipeline
    broken = Checkpoint(
        stage=pretrained.stage,
        config=pretrained.config,
        arrays={**pretrained.arrays},
        meta=pretrained.meta,
    )
    broken.arrays["encoder.patch_projection.weight"] = np.zeros((2, 2))
    from stprompt.pipeline import build_from_checkpoint

    with pytest.raises(CheckpointError, match="shape"):
        build_from_checkpoint(broken)


def test_train_step_spans_precede_validation(wave_pipeline):
    cfg, _, target, pretrained = wave_pipeline
    ckpt = fit_domain_prompts(target, pretrained, cfg)
    (span,) = ckpt.history["train_step_spans"]
    steps_per_day = 86400 / target[1].interval
    select_start = int(round(cfg.target_train_days * steps_per_day))
    assert span[1] <= select_start
