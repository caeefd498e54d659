"""Optimizer, training loop, evaluation runner, and the N-fold harness.

Training is deterministic for a given seed with single-worker batching:
one generator drives epoch shuffling and augmentation, and its state is
persisted alongside checkpoints so a resumed run replays exactly.
"""

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses
from .data import (LabelVolume, Volume, extract_contour, make_phantom,
                   plan_folds, random_affine, window_normalize, write_volume)
from .errors import ConfigurationError, NumericError, UsageError
from .losses import LossWeights, max_pool_label
from .metrics import evaluate, f1_precision_sensitivity, confusion_counts
from .network import AutoCENet, read_checkpoint, save_checkpoint, write_blobs


@dataclass
class Case:
    """One preprocessed training/evaluation example."""
    id: str
    image: Volume       # normalized to [0, 1]
    label: LabelVolume


def phantom_cases(n, seed, dims=(32, 32, 16), spacing=(1.0, 1.0, 2.0)):
    """n synthetic cases, windowed and ready for training."""
    cases = []
    for i in range(n):
        vol, lab = make_phantom(seed + i, dims, spacing)
        cases.append(Case(id=f"phantom-{seed + i:04d}",
                          image=window_normalize(vol), label=lab))
    return cases


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 100
    max_iterations: int = 0          # 0 = no cap
    decay_factor: float = 0.5
    decay_every: int = 10            # epochs
    weights: LossWeights = field(default_factory=LossWeights)
    augment_probability: float = 0.8
    grad_accumulation: int = 1
    optimizer: str = "radam"         # or "adam"
    seed: int = 0
    checkpoint_every: int = 0        # epochs; 0 = final only
    validate_every: int = 1          # epochs
    out_dir: str = ""

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigurationError(
                f"decay factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigurationError(
                f"decay period must be >= 1, got {self.decay_every}")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ConfigurationError(
                f"augment probability must be in [0, 1], got {self.augment_probability}")
        if self.grad_accumulation < 1:
            raise ConfigurationError(
                f"grad accumulation must be >= 1, got {self.grad_accumulation}")
        if self.optimizer not in ("radam", "adam"):
            raise ConfigurationError(
                f"optimizer must be radam or adam, got {self.optimizer!r}")
        if self.epochs < 1 and self.max_iterations < 1:
            raise ConfigurationError("either epochs or max_iterations must be set")
        self.weights.validate()
        return self


def desk_train_config(**overrides):
    """Single-core defaults for 32x32x16 runs.

    Small case counts turn iterations into many short epochs, so the decay
    interval is stretched to keep the step size useful past iteration 100.
    """
    cfg = TrainConfig(lr=3e-3, batch_size=1, epochs=50, decay_every=40)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class RunRecord:
    total: list = field(default_factory=list)
    l_final: list = field(default_factory=list)
    l_prior: list = field(default_factory=list)
    l_contour: list = field(default_factory=list)
    val_epochs: list = field(default_factory=list)
    val_dsc: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def iterations(self):
        return len(self.total)


class MomentOptimizer:
    """Adaptive-moment optimizer with optional variance rectification.

    rectified=True follows the rectified-Adam update: while the variance
    estimate is unreliable (rho_t <= 4) the step uses bias-corrected
    momentum alone; afterwards the adaptive step is scaled by the
    rectification factor. rectified=False is plain Adam. No weight decay
    happens here; decay is a loss term.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, rectified=True):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.rectified = rectified
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step(self, lr):
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rho = self.rho_inf - 2.0 * t * b2 ** t / bc2
        if self.rectified and rho > 4.0:
            rect = np.sqrt(((rho - 4.0) * (rho - 2.0) * self.rho_inf)
                           / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho))
        else:
            rect = None
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise UsageError("optimizer step with missing gradient")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            if not self.rectified:
                p.data -= lr * m_hat / (np.sqrt(v / bc2) + self.eps)
            elif rect is not None:
                p.data -= lr * rect * m_hat / (np.sqrt(v / bc2) + self.eps)
            else:
                p.data -= lr * m_hat

    def state_dict(self, names):
        state = {}
        for name, m, v in zip(names, self.m, self.v):
            state[name + ".m"] = m
            state[name + ".v"] = v
        return state

    def load_state_dict(self, names, state):
        for i, name in enumerate(names):
            for key, dest in ((name + ".m", self.m), (name + ".v", self.v)):
                arr = np.asarray(state[key])
                if arr.shape != dest[i].shape:
                    raise ConfigurationError(
                        f"optimizer blob {key} has shape {arr.shape}, "
                        f"expected {dest[i].shape}")
                dest[i][...] = arr


def make_optimizer(net, config):
    return MomentOptimizer(net.parameters(),
                           rectified=(config.optimizer == "radam"))


def lr_at(config, epoch):
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


# ---------------------------------------------------------------------------
# loss assembly for one forward pass


def compute_losses(net, outputs, y_l, y_dl, gamma_c, weights):
    """All loss components for one batch; absent branches come back None.

    Returns (l_final, l_prior, l_contour, weight_map) where weight_map is
    the detached contour attention map (None unless self-supervised mode).
    """
    cfg = net.config
    fg_probs = ad.select_channel(ad.channel_softmax(outputs.final_logits), 1)
    l_final = losses.soft_dice_loss(fg_probs, y_l)

    l_prior = None
    if not cfg.disable_autocontext:
        l_prior = losses.liver_prior_loss(outputs.prior_residual_logits, y_dl)

    l_contour = None
    weight_map = None
    if cfg.contour_mode != "off":
        contour_probs = ad.select_channel(
            ad.channel_softmax(outputs.contour_logits), 1)
        w = weights
        if cfg.contour_mode == "self_supervised":
            weight_map = losses.contour_weight_map(gamma_c, fg_probs)
            l_contour = losses.penalized_contour_loss(
                contour_probs, gamma_c, weight_map, w.w0, w.w1)
        elif cfg.contour_mode == "full":
            l_contour = losses.full_contour_loss(contour_probs, gamma_c,
                                                 w.w0, w.w1)
        else:  # manual
            l_contour = losses.manual_selfsup_contour_loss(
                contour_probs, gamma_c, fg_probs.data, cfg.manual_threshold)

    return l_final, l_prior, l_contour, weight_map


def _batch_arrays(batch, rng, augment_probability):
    """Augment each case and stack input, label, pooled label, contour."""
    imgs, labs, contours = [], [], []
    for case in batch:
        img, lab = case.image, case.label
        if augment_probability > 0.0:
            img, lab = random_affine(img, lab, rng,
                                     probability=augment_probability)
        imgs.append(img.data)
        labs.append(lab.data)
        contours.append(extract_contour(lab).data)
    x = np.stack(imgs)[:, None].astype(np.float32)
    y_l = np.stack(labs)
    y_dl = max_pool_label(y_l)
    gamma_c = np.stack(contours)
    return x, y_l, y_dl, gamma_c


def _dump_batch(out_dir, batch, x, y_l):
    paths = []
    if not out_dir:
        return paths
    os.makedirs(out_dir, exist_ok=True)
    for i, case in enumerate(batch):
        spacing = case.image.spacing
        img_path = os.path.join(out_dir, f"nan-dump-{case.id}-image.vol")
        lab_path = os.path.join(out_dir, f"nan-dump-{case.id}-label.vol")
        write_volume(Volume(x[i, 0], spacing), img_path)
        write_volume(LabelVolume(y_l[i], spacing), lab_path)
        paths.extend([img_path, lab_path])
    return paths


def hard_dsc(net, cases):
    """Mean hard-thresholded overlap score over cases."""
    scores = []
    for case in cases:
        pred = net.predict(case.image)
        tp, fp, fn, _ = confusion_counts(pred, case.label)
        f1, _, _ = f1_precision_sensitivity(tp, fp, fn)
        scores.append(f1)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# persistence of a full training snapshot


def _paths(out_dir, tag):
    return (os.path.join(out_dir, f"{tag}.acnw"),
            os.path.join(out_dir, f"{tag}.opt.acnw"),
            os.path.join(out_dir, f"{tag}.state.json"))


def save_training_state(out_dir, tag, net, opt, rng, epoch, iteration):
    os.makedirs(out_dir, exist_ok=True)
    model_path, opt_path, state_path = _paths(out_dir, tag)
    save_checkpoint(net, model_path)
    names = [n for n, _ in net.named_parameters()]
    write_blobs(opt_path, opt.state_dict(names))
    payload = {"epoch": epoch, "iteration": iteration, "t": opt.t,
               "rng_state": rng.bit_generator.state}
    with open(state_path, "w") as f:
        json.dump(payload, f)
    return model_path


def load_training_state(out_dir, tag, net, opt):
    """Restore model, optimizer, and RNG; returns (rng, epoch, iteration)."""
    model_path, opt_path, state_path = _paths(out_dir, tag)
    net.load_state_dict(read_checkpoint(model_path))
    net.trained = True
    names = [n for n, _ in net.named_parameters()]
    opt.load_state_dict(names, read_checkpoint(opt_path))
    with open(state_path) as f:
        payload = json.load(f)
    opt.t = payload["t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return rng, payload["epoch"], payload["iteration"]


# ---------------------------------------------------------------------------
# training loop


def train(net, cases, config, val_cases=None, resume_from=None):
    """Run the full loop; returns a RunRecord and leaves net trained.

    resume_from: (out_dir, tag) of a saved training state; the run picks
    up from that epoch with identical RNG state, so the loss stream
    matches an uninterrupted run.
    """
    config.validate()
    if not cases:
        raise ConfigurationError("training needs at least one case")
    opt = make_optimizer(net, config)
    if resume_from is not None:
        rng, start_epoch, iteration = load_training_state(
            resume_from[0], resume_from[1], net, opt)
    else:
        rng = np.random.default_rng(config.seed)
        start_epoch, iteration = 0, 0

    record = RunRecord()
    best_val = -1.0
    start = time.perf_counter()
    micro = config.batch_size
    accum = config.grad_accumulation
    done = False

    epoch = start_epoch
    while epoch < config.epochs and not done:
        order = rng.permutation(len(cases))
        lr = lr_at(config, epoch)
        cursor = 0
        while cursor < len(order):
            groups = []
            while len(groups) < accum and cursor < len(order):
                groups.append([cases[order[(cursor + j) % len(order)]]
                               for j in range(micro)])
                cursor += micro
            scale = 1.0 / len(groups)

            net.zero_grad()
            net.train()
            comps = np.zeros(4)
            has_prior = has_contour = False
            for take in groups:
                x, y_l, y_dl, gamma_c = _batch_arrays(
                    take, rng, config.augment_probability)
                outputs = net.forward(ad.Tensor(x))
                l_f, l_p, l_c, _ = compute_losses(
                    net, outputs, y_l, y_dl, gamma_c, config.weights)
                total = losses.total_loss(l_f, l_p, l_c, config.weights,
                                          losses.decay_parameters(net))
                if len(groups) > 1:
                    total = total * scale
                values = (total.item() / scale if len(groups) > 1 else total.item(),
                          l_f.item(),
                          l_p.item() if l_p is not None else 0.0,
                          l_c.item() if l_c is not None else 0.0)
                if not all(np.isfinite(values)):
                    paths = _dump_batch(config.out_dir, take, x, y_l)
                    raise NumericError(
                        f"non-finite loss at iteration {iteration}: "
                        f"total={values[0]} final={values[1]} "
                        f"prior={values[2]} contour={values[3]}; "
                        f"batch dumped to {paths or '(no out_dir)'}")
                ad.backward(total)
                comps += values
                has_prior = has_prior or l_p is not None
                has_contour = has_contour or l_c is not None
            opt.step(lr)
            net.trained = True
            iteration += 1
            comps *= scale
            record.total.append(comps[0])
            record.l_final.append(comps[1])
            record.l_prior.append(comps[2] if has_prior else float("nan"))
            record.l_contour.append(comps[3] if has_contour else float("nan"))
            if config.max_iterations and iteration >= config.max_iterations:
                done = True
                break
        epoch += 1

        if val_cases and config.validate_every and epoch % config.validate_every == 0:
            dsc = hard_dsc(net, val_cases)
            record.val_epochs.append(epoch)
            record.val_dsc.append(dsc)
            if config.out_dir and dsc > best_val:
                best_val = dsc
                save_checkpoint(net, _paths(config.out_dir, "best")[0])
        if (config.out_dir and config.checkpoint_every
                and epoch % config.checkpoint_every == 0):
            save_training_state(config.out_dir, f"epoch{epoch:04d}",
                                net, opt, rng, epoch, iteration)

    record.wall_time = time.perf_counter() - start
    if config.out_dir:
        save_training_state(config.out_dir, "last", net, opt, rng,
                            epoch, iteration)
    return record


# ---------------------------------------------------------------------------
# evaluation and the N-fold study


def aggregate_reports(reports):
    """mean/std per metric over the defined values."""
    fields = ("dsc", "precision", "sensitivity", "hd", "hd95", "assd")
    agg = {}
    for name in fields:
        vals = [getattr(r, name) for _, r in reports
                if getattr(r, name) is not None]
        if vals:
            agg[name] = (float(np.mean(vals)), float(np.std(vals)))
        else:
            agg[name] = (None, None)
    return agg


def evaluate_run(net, cases, oracle=False):
    """Per-case metric reports plus the mean/std aggregate."""
    reports = []
    for case in cases:
        pred = net.predict(case.image)
        reports.append((case.id, evaluate(pred, case.label, oracle=oracle)))
    return reports, aggregate_reports(reports)


def mean_test_dice_loss(net, cases):
    """1 - DSC averaged over cases (hard predictions)."""
    return 1.0 - hard_dsc(net, cases)


def nfold_study(cases, fractions, net_config, train_config, seed=None):
    """Train one fresh network per training fraction; score a fixed test set.

    Returns a list of (fraction, n_train, mean_test_dice_loss).
    """
    seed = train_config.seed if seed is None else seed
    plan = plan_folds([c.id for c in cases], seed=seed,
                      mode="nfold_fractions", fractions=fractions)
    by_id = {c.id: c for c in cases}
    test_cases = [by_id[i] for i in plan.test]
    curve = []
    for frac, (train_ids, _) in zip(plan.fractions, plan.folds):
        assert not set(train_ids) & set(plan.test)
        net = AutoCENet(net_config)
        cfg = replace(train_config, seed=seed, out_dir="")
        train(net, [by_id[i] for i in train_ids], cfg)
        curve.append((frac, len(train_ids), mean_test_dice_loss(net, test_cases)))
    return curve


def write_curve_csv(path, curve):
    with open(path, "w") as f:
        f.write("fraction,n_train,mean_test_dice_loss\n")
        for frac, n_train, loss in curve:
            f.write(f"{frac},{n_train},{loss!r}\n")


def plot_curve(path, curve, title="training-set size study"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fracs = [c[0] for c in curve]
    vals = [c[2] for c in curve]
    fig, axis = plt.subplots(figsize=(5, 3.5))
    axis.plot(fracs, vals, marker="o")
    axis.set_xlabel("training fraction")
    axis.set_ylabel("test dice loss")
    axis.set_title(title)
    axis.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
