"""Training protocols: layer-wise autoencoder pretraining, the hybrid
reconstruction + classification objective, and evaluation."""

import copy
import csv
import dataclasses
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import layers as L
from .data import read_key_values

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclasses.dataclass
class TrainConfig:
    seed: int = 0
    lr_autoencoder: float = 1.0
    lr_predictor: float = 0.01
    lr_branch_joint: float = 0.002
    momentum: float = 0.9
    batch_size: int = 16
    epochs_pretrain: tuple = (30, 20, 20, 50)
    epochs_autoencoder: int = 5
    epochs_joint: int = 25
    beta_ratio_start: float = 1e3
    beta_ratio_end: float = 1e5
    labeled_ratio: float = 0.25
    loss_normalization: str = "mean"
    normalize_loss_weights: bool = True
    clip_norm: float = 5.0
    init_std: object = "he"
    augment: bool = True
    augment_mirror: bool = False
    augment_rounds: int = 0
    autoencoder_arch: str = ("C(8,5,2)-N-C(16,3,2)-N-C(16,3,1)-N-FC(64)-FC(64)-"
                             "DC(16,3,1)-N-DC(16,3,2)-N-DC(8,5,2)")
    predictor_arch: str = "FC(512)-FC(256)-FC(32)-FC(7)"
    velocity_factors: str = "1,2/3,1/3"
    temporal_plan: str = "(3,2),(2,2),(2,1)"
    input_frames: int = 9

    def __post_init__(self):
        if isinstance(self.epochs_pretrain, int):
            self.epochs_pretrain = (self.epochs_pretrain,)
        self.epochs_pretrain = tuple(int(e) for e in self.epochs_pretrain)
        if min(self.lr_autoencoder, self.lr_predictor) <= 0 or self.lr_branch_joint < 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 < self.beta_ratio_start <= self.beta_ratio_end:
            raise ValueError("need 0 < beta_ratio_start <= beta_ratio_end")
        if not 0 < self.labeled_ratio <= 1:
            raise ValueError("labeled_ratio must lie in (0, 1]")
        if self.loss_normalization not in ("mean", "sum"):
            raise ValueError("loss_normalization must be 'mean' or 'sum'")
        if self.init_std != "he":
            self.init_std = float(self.init_std)

    def pretrain_epochs(self, n_stages):
        e = self.epochs_pretrain
        return list(e) if len(e) == n_stages else [e[0]] * n_stages


def _coerce(field, raw):
    kind = field.type
    if field.name == "epochs_pretrain":
        return tuple(int(x) for x in raw.split(","))
    if field.name == "init_std":
        return raw if raw == "he" else float(raw)
    if kind in (bool, "bool"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{field.name}: not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def load_config(path, **overrides):
    """Read a ``key = value`` config file into a :class:`TrainConfig`."""
    values = read_key_values(path)
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ValueError(f"{path}: unknown config key {key!r}")
        kwargs[key] = _coerce(fields[key], raw)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def format_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "epochs_pretrain":
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# objective -----------------------------------------------------------------

def schedule_loss_weights(step, total_steps, cfg=None):
    """``(alpha, beta)`` with alpha = 1 and beta/alpha ramping geometrically.

    The ratio starts at ``beta_ratio_start`` (1e3) at step 0 and reaches
    ``beta_ratio_end`` (1e5) at ``step == total_steps``.
    """
    start = cfg.beta_ratio_start if cfg is not None else 1e3
    end = cfg.beta_ratio_end if cfg is not None else 1e5
    if total_steps <= 0:
        return 1.0, float(start)
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0, float(start * (end / start) ** frac)


def hybrid_loss(branch_recons, branch_targets, logits=None, labels=None,
                alpha=1.0, beta=1.0, normalize="mean", labeled_mask=None):
    """``alpha * sum_v mse(recon_v, target_v) + beta * cross_entropy(logits, labels)``.

    ``labels`` may cover only the rows selected by ``labeled_mask``; without
    labels the classification term is absent. Returns ``(loss, recon_grads,
    logit_grad, parts)`` where ``parts`` holds the unweighted terms.
    """
    if len(branch_recons) != len(branch_targets):
        raise ValueError("one target per branch reconstruction is required")
    recon_total, recon_grads = 0.0, []
    for r, t in zip(branch_recons, branch_targets):
        value, grad = L.euclidean_loss(r, t, normalize)
        recon_total += value
        recon_grads.append(alpha * grad)
    ce, logit_grad = 0.0, None
    if labels is not None and len(labels):
        if logits is None:
            raise ValueError("labeled samples need logits")
        logits = np.asarray(logits)
        rows = np.arange(logits.shape[0]) if labeled_mask is None \
            else np.flatnonzero(labeled_mask)
        ce, g = L.softmax_loss(logits[rows], labels)
        logit_grad = np.zeros_like(logits)
        logit_grad[rows] = beta * g
    total = alpha * recon_total + beta * ce
    return total, recon_grads, logit_grad, {"recon": recon_total, "ce": ce}


# optimisation --------------------------------------------------------------

class SGD:
    """Momentum SGD over named layers, each with its own learning rate.

    A learning rate of zero freezes the layer: its parameters are never
    written, so they stay bit-identical.
    """

    def __init__(self, groups, momentum=0.9, clip_norm=None):
        self.groups = [(layer, float(lr)) for layer, lr in groups]
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {}

    def step(self, scale=1.0):
        live = [(layer, lr) for layer, lr in self.groups if lr > 0]
        norm = math.sqrt(sum(float(np.sum(g * g)) for layer, _ in live
                             for g in layer.grads.values())) * abs(scale)
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient")
        if self.clip_norm and norm > self.clip_norm:
            scale *= self.clip_norm / norm
        for layer, lr in live:
            for key, p in layer.params.items():
                v = self.velocity.get((id(layer), key))
                update = -lr * scale * layer.grads[key]
                v = update if v is None else self.momentum * v + update
                self.velocity[(id(layer), key)] = v
                p += v
        return norm


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, what):
    if not math.isfinite(value):
        raise DivergenceError(f"{what} diverged (loss is {value})")


# layer-wise pretraining ---------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Stage:
    depth: int            # encoder/decoder pairs kept; None for the whole network
    trainable: tuple      # layer indices with a non-zero learning rate


def default_stage_plan(net):
    """Outer pairs first, then each inner pair, then the fully connected core,
    then a fine-tuning pass over everything."""
    K = net.n_pairs
    if K == 0:
        return [Stage(None, tuple(range(len(net.layers))))]
    first = min(2, K)
    plan = [Stage(first, tuple(net.active_layers(first)))]
    seen = set(net.active_layers(first))
    for d in list(range(first + 1, K + 1)) + [None]:
        active = net.active_layers(d)
        new = tuple(i for i in active if i not in seen)
        if new:
            plan.append(Stage(d, new))
        seen.update(active)
    if len(plan) > 1:
        plan.append(Stage(None, tuple(range(len(net.layers)))))
    return plan


def check_stage_plan(net, plan):
    n = len(net.layers)
    for k, stage in enumerate(plan):
        active = set(net.active_layers(stage.depth))
        bad = [i for i in stage.trainable if not 0 <= i < n]
        if bad:
            raise ValueError(f"stage {k}: layer indices {bad} do not exist")
        if not set(stage.trainable) <= active:
            raise ValueError(f"stage {k}: trains layers outside its sub-network")
    covered = set().union(*(net.active_layers(s.depth) for s in plan))
    if covered != set(range(n)):
        raise ValueError("stage plan does not cover every layer")


def reconstruction_mse(net, X, depth=None, batch_size=64, normalize="mean"):
    total = 0.0
    for i in range(0, len(X), batch_size):
        xb = X[i:i + batch_size]
        value, _ = L.euclidean_loss(net.forward(xb, depth), xb, "sum")
        total += value
    return total / X.size if normalize == "mean" else total


def pretrain_layerwise(net, X, cfg, plan=None, X_val=None, checkpoint_dir=None,
                       start_stage=0, on_epoch=None):
    """Train an autoencoder stage by stage on unlabeled clips ``X``.

    Each stage trains a shallow sub-autoencoder with only ``stage.trainable``
    layers unfrozen; its weights carry into the next stage. Returns a list of
    per-epoch records ``(stage, epoch, train_mse, val_mse)``.
    """
    plan = list(plan) if plan is not None else default_stage_plan(net)
    check_stage_plan(net, plan)
    epochs = cfg.pretrain_epochs(len(plan))
    history = []
    for k in range(start_stage, len(plan)):
        stage = plan[k]
        rng = np.random.default_rng([cfg.seed, k])
        train = set(stage.trainable)
        opt = SGD([(layer, cfg.lr_autoencoder if i in train else 0.0)
                   for i, layer in enumerate(net.layers)], cfg.momentum, cfg.clip_norm)
        for epoch in range(epochs[k]):
            total = 0.0
            for idx in _batches(len(X), cfg.batch_size, rng):
                xb = X[idx]
                net.zero_grad()
                out = net.forward(xb, stage.depth)
                value, grad = L.euclidean_loss(out, xb, cfg.loss_normalization)
                _check_finite(value, "pretraining")
                net.backward(grad, depth=stage.depth)
                opt.step()
                total += value * len(idx)
            val = reconstruction_mse(net, X_val, stage.depth) if X_val is not None else float("nan")
            record = (k, epoch, total / len(X), val)
            history.append(record)
            log.info("pretrain stage %d epoch %d train %.6g val %.6g", *record)
            if on_epoch is not None:
                on_epoch(record)
        if checkpoint_dir is not None:
            L.save_params(net.named_layers(), os.path.join(checkpoint_dir, f"stage{k}"))
    return history


# semi-supervised training -------------------------------------------------

@dataclasses.dataclass
class TrainLog:
    epochs: list = dataclasses.field(default_factory=list)    # (epoch, phase, recon, ce, total)
    schedule: list = dataclasses.field(default_factory=list)  # (step, alpha, beta)

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "loss_curves.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "phase", "recon_loss", "ce_loss", "total"])
            for row in self.epochs:
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])
        with open(os.path.join(directory, "schedule.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "alpha", "beta", "ratio"])
            for step, a, b in self.schedule:
                w.writerow([step, repr(a), repr(b), repr(b / a)])


def _mv_eval_losses(net, X, y, normalize, batch_size=64):
    recon, ce, n = 0.0, 0.0, 0
    for i in range(0, len(X), batch_size):
        xb = X[i:i + batch_size]
        recons, targets, logits = net.forward(xb)
        labels = y[i:i + batch_size] if y is not None else None
        _, _, _, parts = hybrid_loss(recons, targets, logits, labels, 1.0, 1.0, normalize)
        recon += parts["recon"] * len(xb)
        ce += parts["ce"] * len(xb)
        n += len(xb)
    return recon / n, ce / n


def train_semisupervised(net, X_lab, y_lab, X_unlab, cfg, val=None, on_epoch=None):
    """Two-phase protocol on a :class:`~mvnet.netspec.MultiVelocityNet`.

    Phase ``autoencoder``: predictor frozen, branches (velocity layers
    included) learn to reconstruct every clip, labeled or not.
    Phase ``joint``: everything trains on mixed batches of labeled and
    unlabeled clips under the hybrid loss with beta/alpha ramped from
    ``beta_ratio_start`` to ``beta_ratio_end``.
    """
    if len(X_lab) == 0:
        raise ValueError("the labeled set is empty")
    y_lab = np.asarray(y_lab, dtype=np.int64)
    X_unlab = X_unlab if X_unlab is not None and len(X_unlab) else X_lab[:0]
    tlog = TrainLog()
    rng = np.random.default_rng([cfg.seed, 1])
    branch = [layer for _, layer in net.branch_layers()]
    head = [layer for _, layer in net.head_layers()]

    # phase 1: reconstruction only, head frozen
    X_all = np.concatenate([X_lab, X_unlab])
    opt = SGD([(layer, cfg.lr_autoencoder) for layer in branch]
              + [(layer, 0.0) for layer in head], cfg.momentum, cfg.clip_norm)
    for epoch in range(cfg.epochs_autoencoder):
        total = 0.0
        for idx in _batches(len(X_all), cfg.batch_size, rng):
            net.zero_grad()
            recons, targets, _ = net.forward(X_all[idx])
            value, rgrads, _, _ = hybrid_loss(recons, targets, normalize=cfg.loss_normalization)
            _check_finite(value, "autoencoder phase")
            net.backward(rgrads, None)
            opt.step()
            total += value * len(idx)
        _log_epoch(tlog, net, epoch, "autoencoder", total / len(X_all), 0.0, val, cfg, on_epoch)

    # phase 2: joint hybrid loss
    n_lab = max(1, int(round(cfg.batch_size * cfg.labeled_ratio)))
    n_unl = cfg.batch_size - n_lab if len(X_unlab) else 0
    per_epoch = max(math.ceil(len(X_lab) / n_lab),
                    math.ceil(len(X_unlab) / n_unl) if n_unl else 0)
    total_steps = per_epoch * cfg.epochs_joint
    opt = SGD([(layer, cfg.lr_branch_joint) for layer in branch]
              + [(layer, cfg.lr_predictor) for layer in head], cfg.momentum, cfg.clip_norm)
    step = 0
    lab_stream = _Stream(len(X_lab), rng)
    unl_stream = _Stream(len(X_unlab), rng) if n_unl else None
    for epoch in range(cfg.epochs_joint):
        sums = np.zeros(3)
        for _ in range(per_epoch):
            alpha, beta = schedule_loss_weights(step, max(total_steps - 1, 0), cfg)
            tlog.schedule.append((step, alpha, beta))
            li = lab_stream.take(n_lab)
            xb, mask = X_lab[li], np.ones(len(li), dtype=bool)
            if n_unl:
                ui = unl_stream.take(n_unl)
                xb = np.concatenate([xb, X_unlab[ui]])
                mask = np.concatenate([mask, np.zeros(len(ui), dtype=bool)])
            net.zero_grad()
            recons, targets, logits = net.forward(xb)
            value, rgrads, lgrad, parts = hybrid_loss(
                recons, targets, logits, y_lab[li], alpha, beta,
                cfg.loss_normalization, labeled_mask=mask)
            _check_finite(value, "joint phase")
            net.backward(rgrads, lgrad)
            opt.step(1.0 / (alpha + beta) if cfg.normalize_loss_weights else 1.0)
            sums += (parts["recon"], parts["ce"], value)
            step += 1
        sums /= per_epoch
        _log_epoch(tlog, net, epoch, "joint", sums[0], sums[1], val, cfg, on_epoch,
                   total=sums[2])
    return tlog


class _Stream:
    """Endless reshuffled index stream."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.buf = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self.buf:
                self.buf = list(self.rng.permutation(self.n))
            out.append(self.buf.pop(0))
        return np.array(out, dtype=np.int64)


def _log_epoch(tlog, net, epoch, phase, recon, ce, val, cfg, on_epoch, total=None):
    total = recon + ce if total is None else total
    tlog.epochs.append((epoch, phase, recon, ce, total))
    if val is not None:
        vr, vc = _mv_eval_losses(net, val[0], val[1], cfg.loss_normalization)
        tlog.epochs.append((epoch, phase + "-val", vr, vc, vr + vc))
    log.info("%s epoch %d recon %.6g ce %.6g", phase, epoch, recon, ce)
    if on_epoch is not None:
        on_epoch(tlog.epochs[-1])


# evaluation ----------------------------------------------------------------

@dataclasses.dataclass
class EvalReport:
    counts: np.ndarray       # raw [true, predicted] tallies
    confusion: np.ndarray    # rows normalized; all-zero rows for absent classes
    accuracy: float
    n_samples: int

    def write(self, directory, class_names=None):
        os.makedirs(directory, exist_ok=True)
        K = self.confusion.shape[0]
        names = class_names or [str(k) for k in range(K)]
        with open(os.path.join(directory, "confusion.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + names)
            for k in range(K):
                w.writerow([names[k]] + [f"{v:.17g}" for v in self.confusion[k]])
        with open(os.path.join(directory, "accuracy.txt"), "w") as fh:
            fh.write(self.summary() + "\n")

    def summary(self):
        return f"accuracy={self.accuracy:.6f} samples={self.n_samples}"


def confusion_report(true, pred, n_classes):
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.size and (true.min() < 0 or true.max() >= n_classes
                      or pred.min() < 0 or pred.max() >= n_classes):
        raise ValueError(f"class id out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (true, pred), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    confusion = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    acc = float(np.trace(counts) / true.size) if true.size else 0.0
    return EvalReport(counts, confusion, acc, int(true.size))


def predict(net, X, batch_size=64, threads=1):
    """Logits for ``X``; with ``threads > 1`` batches run on private network copies.

    Results are concatenated in batch order, so the output does not depend
    on the thread count.
    """
    starts = range(0, len(X), batch_size)
    run = (lambda m, i: m.predict(X[i:i + batch_size])) if hasattr(net, "predict") \
        else (lambda m, i: m.forward(X[i:i + batch_size]))
    if threads <= 1 or len(starts) <= 1:
        return np.concatenate([run(net, i) for i in starts])
    local = threading.local()

    def work(i):
        if not hasattr(local, "net"):
            local.net = copy.deepcopy(net)
        return run(local.net, i)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(work, starts)))


def evaluate(net, X, y, n_classes=None, threads=1):
    logits = predict(net, X, threads=threads)
    n_classes = n_classes or logits.shape[1]
    return confusion_report(y, logits.argmax(axis=1), n_classes)
