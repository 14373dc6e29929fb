"""Arrays from clips, pretraining, semi-supervised training, and model directories."""

import csv
import os

import numpy as np

from . import layers as L
from .data import Clip, augment, model_input, read_key_values, retime
from .netspec import build_multivelocity, build_network, parse_dims
from .train import format_config, load_config, pretrain_layerwise, train_semisupervised

MODEL_CONFIG = "config.txt"
MODEL_INFO = "model.txt"


def clip_arrays(clips, n_frames=9):
    """Stack clips' network inputs into ``X [N,T,C,H,W]`` and labels ``y``."""
    X = np.stack([model_input(c, n_frames).frames for c in clips])
    y = np.array([-1 if c.label is None else c.label for c in clips], dtype=np.int64)
    return X, y


def retimed_arrays(clips, rng, low=1 / 3, high=1.0, n_frames=9):
    """Inputs re-timed by a random factor in ``[low, high]`` per clip."""
    factors = rng.uniform(low, high, size=len(clips))
    X = np.stack([retime(c, f, n_frames).frames for c, f in zip(clips, factors)])
    return X, factors


def stratified_subset(labels, fraction, seed):
    """Indices of a per-class ``fraction`` of ``labels`` (at least one per class)."""
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise ValueError("labeled fraction must lie in (0, 1]")
    rng = np.random.default_rng([seed, 3])
    picked = []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        n = max(1, int(round(fraction * len(members))))
        picked.append(rng.permutation(members)[:n])
    return np.sort(np.concatenate(picked))


def augment_arrays(X, y, rng, rounds=1, mirror=False):
    """Original samples followed by ``rounds`` batches of augmented copies."""
    xs, ys = [X], [y]
    for _ in range(rounds):
        for x, label in zip(X, y):
            for c in augment(Clip(x, int(label)), rng, mirror=mirror):
                xs.append(c.frames[None])
                ys.append(np.array([label]))
    return np.concatenate(xs), np.concatenate(ys)


def pretrain_autoencoder(X, cfg, X_val=None, checkpoint_dir=None, on_epoch=None):
    net = build_network(cfg.autoencoder_arch, X.shape[1:], cfg.temporal_plan,
                        np.random.default_rng([cfg.seed, 0]), cfg.init_std)
    history = pretrain_layerwise(net, X, cfg, X_val=X_val, checkpoint_dir=checkpoint_dir,
                                 on_epoch=on_epoch)
    return net, history


def build_model(cfg, input_dims, pretrained=None):
    """Multi-velocity network whose branches start from ``pretrained``.

    ``pretrained`` is an autoencoder :class:`~mvnet.netspec.Network` or a
    checkpoint directory written by :func:`~mvnet.layers.save_params`.
    """
    if isinstance(pretrained, (str, os.PathLike)):
        source = build_network(cfg.autoencoder_arch, input_dims, cfg.temporal_plan,
                               allocate=True, rng=np.random.default_rng(0))
        L.load_params(source.named_layers(), pretrained)
        pretrained = source

    def copy_in(branch):
        if pretrained is None:
            return
        for (_, dst), (_, src) in zip(branch.named_layers(), pretrained.named_layers()):
            for key, value in src.params.items():
                dst.params[key] = value.copy()
            dst.zero_grad()

    return build_multivelocity(cfg.autoencoder_arch, cfg.velocity_factors, cfg.predictor_arch,
                               input_dims, cfg.temporal_plan,
                               np.random.default_rng([cfg.seed, 2]), cfg.init_std,
                               branch_init=copy_in)


def train_model(cfg, X, y, labeled, X_val=None, y_val=None, pretrained=None, on_epoch=None,
                net=None):
    """Semi-supervised training where only rows ``labeled`` of ``X`` keep labels.

    ``net`` may be a model already built by :func:`build_model`.
    """
    labeled = np.asarray(labeled, dtype=np.int64)
    unlabeled = np.setdiff1d(np.arange(len(X)), labeled)
    X_lab, y_lab = X[labeled], y[labeled]
    if cfg.augment and cfg.augment_rounds:
        X_lab, y_lab = augment_arrays(X_lab, y_lab, np.random.default_rng([cfg.seed, 4]),
                                      cfg.augment_rounds, cfg.augment_mirror)
    if net is None:
        net = build_model(cfg, X.shape[1:], pretrained)
    val = (X_val, y_val) if X_val is not None else None
    log = train_semisupervised(net, X_lab, y_lab, X[unlabeled], cfg, val=val, on_epoch=on_epoch)
    return net, log


# model directories ---------------------------------------------------------

def save_model(net, cfg, input_dims, directory, n_classes):
    os.makedirs(directory, exist_ok=True)
    L.save_params(net.named_layers(), directory)
    with open(os.path.join(directory, MODEL_CONFIG), "w") as fh:
        fh.write(format_config(cfg))
    with open(os.path.join(directory, MODEL_INFO), "w") as fh:
        fh.write(f"input_dims = {'x'.join(str(d) for d in input_dims)}\n")
        fh.write(f"classes = {n_classes}\n")


def load_model(directory):
    """Return ``(net, cfg, input_dims, n_classes)`` from a model directory."""
    cfg = load_config(os.path.join(directory, MODEL_CONFIG))
    info = read_key_values(os.path.join(directory, MODEL_INFO))
    input_dims = parse_dims(info["input_dims"])
    net = build_model(cfg, input_dims)
    L.load_params(net.named_layers(), directory)
    return net, cfg, input_dims, int(info["classes"])


def write_labeled_ids(path, ids):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"])
        for i in ids:
            w.writerow([i])
