"""Self-distillation pretraining, fine-tuning, and their run artifacts."""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentationConfig, two_views
from .checkpoint import build_classifier, save_checkpoint
from .data import batches, stratified_fraction
from .errors import ContractError, NumericError
from .losses import (LossWeights, cosine_loss, kl_divergence, soft_targets,
                     temperature_softmax, total_loss)
from .metrics import evaluate
from .model import EncoderConfig, MlpHeadConfig, init_networks

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ["step", "epoch", "L", "L_CV", "L_CM", "L_SKD"]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0004
    lam: float = 1.0
    tau: float = 4.0
    omega: float = 0.5
    num_logits: int = 4
    sigma: float = 0.996
    propagation: str = "closed_form"
    propagation_steps: int = 1
    lr_schedule: str = "constant"
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: MlpHeadConfig = field(default_factory=MlpHeadConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ContractError("pretraining batch_size must be >= 2")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError("need lr > 0, 0 <= momentum < 1, weight_decay >= 0")
        if self.num_logits < 2:
            raise ContractError("num_logits must be >= 2")
        if not 0 <= self.sigma <= 1:
            raise ContractError("sigma must lie in [0, 1]")
        if self.propagation not in ("closed_form", "iterative"):
            raise ContractError(f"unknown propagation mode {self.propagation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.propagation_steps < 1:
            raise ContractError("propagation_steps must be >= 1")
        if self.encoder.input_size != self.augment.view_size:
            raise ContractError(
                f"encoder input_size {self.encoder.input_size} != augment view_size {self.augment.view_size}")
        self.weights  # validates tau and omega

    @property
    def weights(self):
        return LossWeights(self.lam, self.tau, self.omega)

    def lr_at(self, epoch):
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * epoch / self.epochs))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 32
    label_fraction: float = 1.0
    mode: str = "full"
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ContractError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.mode not in ("full", "linear_probe"):
            raise ContractError(f"unknown fine-tuning mode {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("need epochs >= 0, batch_size >= 1, lr > 0")


@dataclass
class LossRecord:
    step: int
    epoch: int
    total: float
    cv: float
    cm: float
    skd: float


@dataclass
class TrainState:
    networks: object
    step: int = 0
    log: list = field(default_factory=list)


@dataclass
class StepOutputs:
    total: object
    cv: object
    cm: object
    skd: object
    probs: object
    targets: object


def forward_losses(net, v1, v2, cfg, targets=None):
    """Build the full objective for one batch of view pairs.

    ``targets`` overrides the propagated soft targets (used by tests that
    hold them fixed while perturbing parameters).
    """
    y1, _, q1 = net.forward_online(v1)
    _, _, q2 = net.forward_online(v2)
    z2 = net.forward_target(v2)
    l_cv = cosine_loss(q1, q2)
    l_cm = cosine_loss(q2, z2)
    probs = temperature_softmax(net.forward_skd(None, features=y1), cfg.tau)
    if targets is None:
        targets = soft_targets(T.detach(y1), T.detach(probs), cfg.omega,
                               cfg.propagation, cfg.propagation_steps)
    l_skd = kl_divergence(targets, probs)
    total = total_loss(l_cv, l_cm, l_skd, cfg.weights)
    return StepOutputs(total, l_cv, l_cm, l_skd, probs, targets)


def train_on_views(state, v1, v2, cfg, epoch=0):
    """One optimiser step on the online weights followed by one EMA step."""
    net = state.networks
    params = net.online_parameters()
    T.zero_grad(params)
    try:
        out = forward_losses(net, v1, v2, cfg)
        grads = T.backward(out.total, params)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericError("non-finite gradient")
    except NumericError as exc:
        raise NumericError(f"step {state.step} (epoch {epoch}): {exc}") from exc
    T.sgd_update(params, grads, cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay)
    net.ema_update()
    rec = LossRecord(state.step, epoch, out.total.item(), out.cv.item(), out.cm.item(), out.skd.item())
    state.log.append(rec)
    state.step += 1
    return rec


def pretrain_step(state, images, indices, cfg, epoch=0):
    """Sample both views for a batch, take one optimiser step and one EMA step."""
    if len(indices) < 2:
        raise ContractError("pretrain_step needs at least 2 images")
    v1, v2 = two_views(images, indices, cfg.augment, cfg.seed, epoch)
    dtype = T.get_default_dtype()
    return train_on_views(state, v1.astype(dtype), v2.astype(dtype), cfg, epoch)


def new_state(cfg):
    net = init_networks(cfg.encoder, cfg.head, cfg.num_logits, cfg.sigma, cfg.seed)
    return TrainState(net)


def pretrain(ds, cfg, out_dir=None, state=None, progress=None):
    if len(ds) == 0:
        raise ContractError("cannot pretrain on an empty dataset")
    state = state or new_state(cfg)
    for epoch in range(cfg.epochs):
        for idx in batches(ds, cfg.batch_size, cfg.seed, epoch, pretraining=True):
            rec = pretrain_step(state, ds.images[idx], idx, cfg, epoch)
            if progress is not None:
                progress(rec)
        if state.log:
            tail = [r.total for r in state.log if r.epoch == epoch]
            log.info("epoch %d mean loss %.4f", epoch, float(np.mean(tail)) if tail else float("nan"))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_loss_csv(state.log, os.path.join(out_dir, "pretrain_loss.csv"))
        save_checkpoint(state.networks, os.path.join(out_dir, "model.ckpt"))
    return state


def write_loss_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_CSV_HEADER)
        for r in records:
            w.writerow([r.step, r.epoch, repr(r.total), repr(r.cv), repr(r.cm), repr(r.skd)])


def epoch_means(records):
    out = {}
    for r in records:
        out.setdefault(r.epoch, []).append((r.total, r.cv, r.cm, r.skd))
    return {e: tuple(np.mean(v, axis=0)) for e, v in out.items()}


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def _log_softmax(logits):
    shift = T.Tensor(logits.data.max(axis=-1, keepdims=True))
    centered = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(centered), axis=-1, keepdims=True))
    return T.sub(centered, lse)


def cross_entropy(logits, labels):
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.tsum(T.elementwise_mul(T.Tensor(onehot), _log_softmax(logits)))
    return T.scalar_mul(picked, -1.0 / len(labels))


def finetune(ds_train, encoder, cfg, eval_ds=None, encoder_cfg=None, positive_class="COVID"):
    """Train a linear head (and, in ``full`` mode, the encoder) with cross-entropy.

    ``encoder=None`` starts from freshly initialised weights (the from-scratch
    baseline).  Returns the classifier and one report per epoch when
    ``eval_ds`` is given.
    """
    enc_cfg = encoder.cfg if encoder is not None else (encoder_cfg or EncoderConfig())
    labelled = stratified_fraction(ds_train, cfg.label_fraction, cfg.seed)
    clf = build_classifier(enc_cfg, len(ds_train.class_names), encoder=encoder,
                           class_names=ds_train.class_names, seed=cfg.seed)
    probe = cfg.mode == "linear_probe"
    params = clf.parameters(include_encoder=not probe)
    x_all = clf.prepare(labelled.images)[:, None]
    reports, losses = [], []
    for epoch in range(cfg.epochs):
        flips = np.random.default_rng([cfg.seed, epoch, 0xF11F]).random(len(labelled)) < 0.5
        epoch_loss = []
        for idx in batches(labelled, cfg.batch_size, cfg.seed, epoch, pretraining=False):
            x = x_all[idx]
            if cfg.flip:
                x = np.where(flips[idx][:, None, None, None], x[..., ::-1], x)
            T.zero_grad(params)
            if probe:
                feats = T.detach(clf.encoder(T.Tensor(x), training=False))
            else:
                feats = clf.encoder(T.Tensor(x), training=True)
            loss = cross_entropy(clf.head(feats), labelled.labels[idx])
            grads = T.backward(loss, params)
            T.sgd_update(params, grads, cfg.lr, cfg.momentum, cfg.weight_decay)
            epoch_loss.append(loss.item())
        losses.append(float(np.mean(epoch_loss)) if epoch_loss else float("nan"))
        if eval_ds is not None:
            reports.append(evaluate(clf, eval_ds, positive_class))
    clf.train_losses = losses
    return clf, reports
