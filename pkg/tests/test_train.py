"""Trainer tests: optimizer math, loop determinism, resumption, harness."""

import os

import numpy as np
import pytest

from autocenet import autodiff as ad
from autocenet.autodiff import Tensor
from autocenet.data import LabelVolume, Volume, extract_contour
from autocenet.errors import ConfigurationError, NumericError, UsageError
from autocenet.losses import LossWeights, decay_parameters, max_pool_label
from autocenet.metrics import MetricsReport
from autocenet.network import AutoCENet, apply_ablation, desk_config, read_checkpoint, write_blobs
from autocenet.train import (Case, MomentOptimizer, TrainConfig, aggregate_reports,
                             compute_losses, desk_train_config, evaluate_run,
                             hard_dsc, lr_at, make_optimizer, mean_test_dice_loss,
                             nfold_study, phantom_cases, plot_curve, train,
                             write_curve_csv)

DIMS = (16, 16, 8)


def tiny_net(**overrides):
    cfg = desk_config(input_dims=DIMS, base_width=8, context_width=8,
                      prior_width=8, prior_up_width=4, contour_width=8,
                      fusion_width=8)
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return AutoCENet(cfg)


def tiny_cases(n=2, seed=0):
    return phantom_cases(n, seed=seed, dims=DIMS)


def quick_config(**overrides):
    base = dict(epochs=2, augment_probability=0.0, out_dir="")
    base.update(overrides)
    return desk_train_config(**base)


# --- configuration ----------------------------------------------------------

def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(decay_factor=0.0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="sgd").validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(augment_probability=1.5).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(weights=LossWeights(alpha=-1.0)).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0, max_iterations=0).validate()


def test_desk_train_config_overrides():
    cfg = desk_train_config(epochs=7, lr=1e-4)
    assert cfg.epochs == 7 and cfg.lr == 1e-4
    assert cfg.batch_size == 1
    assert cfg.decay_every == 40
    cfg.validate()


def test_lr_schedule_steps_down():
    cfg = TrainConfig(lr=1e-3, decay_factor=0.5, decay_every=10)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 9) == 1e-3
    assert lr_at(cfg, 10) == 5e-4
    assert lr_at(cfg, 39) == 1e-3 * 0.5 ** 3
    assert lr_at(cfg, 10) == 0.5 * lr_at(cfg, 9)


# --- optimizer --------------------------------------------------------------

def test_optimizer_zero_gradient_is_noop():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = MomentOptimizer([w])
    w.grad = np.zeros(2)
    opt.step(1e-2)
    assert np.array_equal(w.data, [1.0, -2.0])


def test_optimizer_missing_gradient_raises():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = MomentOptimizer([w])
    with pytest.raises(UsageError):
        opt.step(1e-2)


def test_rectified_first_step_is_pure_momentum():
    # the variance estimate is unreliable at t=1, so the step is lr * grad
    w = Tensor(np.array([10.0]), requires_grad=True)
    opt = MomentOptimizer([w], rectified=True)
    w.grad = np.array([2.5])
    opt.step(1e-2)
    assert abs((10.0 - w.data[0]) - 0.025) < 1e-12


def test_plain_adam_first_step_is_signed_lr():
    w = Tensor(np.array([10.0]), requires_grad=True)
    opt = MomentOptimizer([w], rectified=False)
    w.grad = np.array([2.5])
    opt.step(1e-2)
    assert abs((10.0 - w.data[0]) - 0.01) < 1e-9


@pytest.mark.parametrize("rectified", [True, False])
def test_optimizer_converges_on_quadratic(rectified):
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = MomentOptimizer([w], rectified=rectified)
    for i in range(1000):
        w.grad = 2.0 * (w.data - 3.0)
        opt.step(1e-1 * 0.5 ** (i // 200))
    assert abs(w.data[0] - 3.0) < 1e-8


def test_optimizer_state_roundtrip_continues_bitwise():
    rng = np.random.default_rng(80)
    names = ["a", "b"]
    p1 = [Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True),
          Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)]
    opt1 = MomentOptimizer(p1)
    grads = [[rng.standard_normal(p.data.shape).astype(np.float32)
              for p in p1] for _ in range(5)]
    for g in grads[:3]:
        for p, gi in zip(p1, g):
            p.grad = gi
        opt1.step(1e-2)

    p2 = [Tensor(p.data.copy(), requires_grad=True) for p in p1]
    opt2 = MomentOptimizer(p2)
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "opt.acnw")
        write_blobs(path, opt1.state_dict(names))
        opt2.load_state_dict(names, read_checkpoint(path))
    opt2.t = opt1.t

    for g in grads[3:]:
        for p, gi in zip(p1, g):
            p.grad = gi
        for p, gi in zip(p2, g):
            p.grad = gi
        opt1.step(1e-2)
        opt2.step(1e-2)
    for a, b in zip(p1, p2):
        assert np.array_equal(a.data, b.data)


def test_make_optimizer_respects_mode():
    net = tiny_net()
    assert make_optimizer(net, TrainConfig(optimizer="radam")).rectified
    assert not make_optimizer(net, TrainConfig(optimizer="adam")).rectified


# --- loss assembly ----------------------------------------------------------

def batch_for(net, cases):
    x = np.stack([c.image.data for c in cases])[:, None].astype(np.float32)
    y_l = np.stack([c.label.data for c in cases])
    y_dl = max_pool_label(y_l)
    gamma_c = np.stack([extract_contour(c.label).data for c in cases])
    return x, y_l, y_dl, gamma_c


@pytest.mark.parametrize("ablation,prior,contour,wmap", [
    ("none", True, True, True),
    ("FC", True, True, False),
    ("MC", True, True, False),
    ("autonet", True, False, False),
    ("A", False, False, False),
    ("AR", False, False, False),
])
def test_compute_losses_branch_matrix(ablation, prior, contour, wmap):
    cfg = apply_ablation(tiny_net().config, ablation)
    net = AutoCENet(cfg)
    cases = tiny_cases()
    x, y_l, y_dl, gamma_c = batch_for(net, cases[:1])
    out = net(ad.Tensor(x), mode="train")
    l_f, l_p, l_c, wm = compute_losses(net, out, y_l[:1], y_dl[:1],
                                       gamma_c[:1], LossWeights())
    assert l_f is not None and np.isfinite(l_f.item())
    assert (l_p is not None) == prior
    assert (l_c is not None) == contour
    assert (wm is not None) == wmap


def test_weight_map_tracks_training_progress():
    net = tiny_net()
    cases = tiny_cases()
    x, y_l, y_dl, gamma_c = batch_for(net, cases[:1])

    def current_map():
        out = net(ad.Tensor(x), mode="train")
        return compute_losses(net, out, y_l[:1], y_dl[:1], gamma_c[:1],
                              LossWeights())[3].data.copy()

    before = current_map()
    train(net, cases, quick_config(epochs=1, max_iterations=2))
    after = current_map()
    assert before.shape == after.shape
    assert not np.array_equal(before, after)
    # the map only ever lives on the contour
    assert (after[gamma_c[:1] == 0] == 0).all()


# --- training loop ----------------------------------------------------------

def test_train_runs_and_records():
    net = tiny_net()
    cases = tiny_cases()
    record = train(net, cases, quick_config(epochs=3))
    assert record.iterations == 6  # 2 cases, batch 1, 3 epochs
    assert net.trained
    assert all(np.isfinite(v) for v in record.total)
    assert all(np.isfinite(v) for v in record.l_final)
    assert record.wall_time > 0


def test_train_requires_cases():
    with pytest.raises(ConfigurationError):
        train(tiny_net(), [], quick_config())


def test_max_iterations_caps_exactly():
    record = train(tiny_net(), tiny_cases(), quick_config(epochs=50,
                                                          max_iterations=3))
    assert record.iterations == 3


def test_train_updates_parameters():
    net = tiny_net()
    before = {k: v.copy() for k, v in net.state_dict().items()}
    train(net, tiny_cases(), quick_config(epochs=1))
    changed = sum(not np.array_equal(v, before[k])
                  for k, v in net.state_dict().items())
    assert changed > 0


def test_train_deterministic_for_seed():
    r1 = train(tiny_net(), tiny_cases(), quick_config(augment_probability=0.8,
                                                      seed=3))
    net2 = tiny_net()
    r2 = train(net2, tiny_cases(), quick_config(augment_probability=0.8,
                                                seed=3))
    assert r1.total == r2.total
    net1 = tiny_net()
    r3 = train(net1, tiny_cases(), quick_config(augment_probability=0.8,
                                                seed=4))
    assert r1.total != r3.total


def test_batch_and_accumulation_wraparound():
    cases = tiny_cases(3)
    record = train(tiny_net(), cases, quick_config(
        epochs=2, batch_size=2, grad_accumulation=2))
    # 3 cases / micro-batch 2 -> 2 groups folded into one step per epoch
    assert record.iterations == 2


def test_weight_decay_shrinks_kernels():
    def kernel_energy(net):
        return sum(float((p.data.astype(np.float64) ** 2).sum())
                   for p in decay_parameters(net))

    heavy = tiny_net()
    train(heavy, tiny_cases(), quick_config(
        epochs=10, max_iterations=15, weights=LossWeights(gamma=0.1)))
    free = tiny_net()
    train(free, tiny_cases(), quick_config(
        epochs=10, max_iterations=15, weights=LossWeights(gamma=0.0)))
    assert kernel_energy(heavy) < kernel_energy(free)


def test_nan_abort_dumps_batch(tmp_path):
    net = tiny_net()
    bad = next(iter(net.parameters()))
    bad.data[...] = np.nan
    with pytest.raises(NumericError) as exc:
        train(net, tiny_cases(), quick_config(out_dir=str(tmp_path)))
    assert "non-finite" in str(exc.value)
    dumps = sorted(p.name for p in tmp_path.glob("nan-dump-*.vol"))
    assert any(name.endswith("-image.vol") for name in dumps)
    assert any(name.endswith("-label.vol") for name in dumps)


def test_validation_tracks_best_checkpoint(tmp_path):
    net = tiny_net()
    cases = tiny_cases()
    record = train(net, cases, quick_config(epochs=2, out_dir=str(tmp_path)),
                   val_cases=cases)
    assert record.val_epochs == [1, 2]
    assert len(record.val_dsc) == 2
    assert (tmp_path / "best.acnw").exists()
    assert (tmp_path / "last.acnw").exists()
    assert (tmp_path / "last.opt.acnw").exists()
    assert (tmp_path / "last.state.json").exists()


def test_resumption_matches_uninterrupted_run(tmp_path):
    cases = tiny_cases()
    cfg = quick_config(epochs=4, checkpoint_every=2,
                       out_dir=str(tmp_path / "full"),
                       augment_probability=0.8, seed=11)
    full_net = tiny_net()
    full = train(full_net, cases, cfg)
    assert full.iterations == 8

    resumed_net = tiny_net()
    cfg2 = quick_config(epochs=4, augment_probability=0.8, seed=11)
    resumed = train(resumed_net, cases, cfg2,
                    resume_from=(str(tmp_path / "full"), "epoch0002"))
    assert resumed.iterations == 4
    for a, b in zip(full.total[4:], resumed.total):
        assert abs(a - b) <= 1e-6
    full_state = full_net.state_dict()
    for k, v in resumed_net.state_dict().items():
        assert np.array_equal(v, full_state[k]), k


# --- evaluation helpers -----------------------------------------------------

class OracleNet:
    """Stand-in predictor that returns a fixed label per image object."""

    def __init__(self, mapping):
        self.mapping = mapping  # id(image) -> LabelVolume

    def predict(self, image):
        return self.mapping[id(image)]


def test_hard_dsc_and_dice_loss_for_perfect_predictor():
    cases = tiny_cases()
    net = OracleNet({id(c.image): c.label for c in cases})
    assert hard_dsc(net, cases) == 1.0
    assert mean_test_dice_loss(net, cases) == 0.0


def test_evaluate_run_aggregates():
    cases = tiny_cases()
    net = OracleNet({id(c.image): c.label for c in cases})
    reports, agg = evaluate_run(net, cases)
    assert len(reports) == len(cases)
    assert agg["dsc"] == (1.0, 0.0)
    assert agg["hd"] == (0.0, 0.0)
    assert agg["assd"] == (0.0, 0.0)


def test_aggregate_skips_undefined_distances():
    r1 = MetricsReport(dsc=0.8, precision=0.9, sensitivity=0.7,
                       hd=4.0, hd95=3.0, assd=1.0, tp=10, fp=2, fn=3)
    r2 = MetricsReport(dsc=0.0, precision=0.0, sensitivity=0.0,
                       hd=None, hd95=None, assd=None, tp=0, fp=0, fn=5)
    agg = aggregate_reports([("a", r1), ("b", r2)])
    assert agg["dsc"] == (0.4, 0.4)
    assert agg["hd"] == (4.0, 0.0)  # only the defined value participates
    empty = aggregate_reports([("b", r2)])
    assert empty["hd"] == (None, None)


def test_phantom_cases_are_normalized():
    cases = tiny_cases(3, seed=5)
    assert [c.id for c in cases] == ["phantom-0005", "phantom-0006",
                                     "phantom-0007"]
    for c in cases:
        assert c.image.data.min() >= 0.0
        assert c.image.data.max() <= 1.0
        assert c.image.dims == DIMS
        assert c.label.dims == DIMS


# --- the n-fold harness -----------------------------------------------------

def test_nfold_study_structure_and_curve_io(tmp_path):
    cases = tiny_cases(6, seed=20)
    net_cfg = tiny_net().config
    tc = quick_config(epochs=1, max_iterations=2)
    curve = nfold_study(cases, (0.5, 0.9), net_cfg, tc, seed=1)
    assert [frac for frac, _, _ in curve] == [0.5, 0.9]
    n_pool = 6 - round(6 * 4.0 / 9.0)
    assert curve[0][1] == max(1, int(n_pool * 0.5 + 0.5))
    for _, _, loss in curve:
        assert 0.0 <= loss <= 1.0

    csv_path = tmp_path / "curve.csv"
    write_curve_csv(csv_path, curve)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "fraction,n_train,mean_test_dice_loss"
    assert len(lines) == 3

    png_path = tmp_path / "curve.png"
    plot_curve(png_path, curve)
    assert png_path.read_bytes()[:4] == b"\x89PNG"
