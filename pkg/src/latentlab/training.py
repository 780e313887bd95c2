"""SGD loops: natural fitting, frozen-backbone probe heads, adversarial
training with optional latent supervision, and tap-layer selection."""

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .attacks import AttackConfig, Tactics, lafeat, make_rngs, pgd
from .errors import InvalidConfig, NoIntermediateLayers
from .models import build_head, head_logits
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    clip_norm: float | None = 1.0   # global grad-norm ceiling; None disables
    seed: int = 0
    adv_eps: float = 8 / 255
    adv_alpha: float = 2 / 255
    adv_iters: int = 7
    latent_heads_on: bool = False
    latent_layers: tuple | None = None   # default: every intermediate layer

    def validate(self):
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.adv_iters < 1:
            raise InvalidConfig(f"adv_iters must be >= 1, got {self.adv_iters}")
        if self.adv_eps <= 0 or self.adv_alpha <= 0:
            raise InvalidConfig("adversarial eps and alpha must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise InvalidConfig(f"clip_norm must be positive or None, got {self.clip_norm}")


class _SGD:
    """Momentum SGD; weight decay folds into the gradient."""

    def __init__(self, params, cfg):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        wd, mom, clip = self.cfg.weight_decay, self.cfg.momentum, self.cfg.clip_norm
        scale = 1.0
        if clip is not None:
            sq = sum(float((grads[p].data ** 2).sum()) for p in self.params if p in grads)
            norm = sq ** 0.5
            if norm > clip:
                scale = clip / norm
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p)
            if g is None:
                continue
            upd = scale * g.data + wd * p.data
            v *= mom
            v += upd
            p.data -= (lr * v).astype(p.data.dtype)


def _lr_at(cfg, epoch):
    lr = cfg.lr
    for e in cfg.lr_decay_epochs:
        if epoch >= e:
            lr *= cfg.lr_decay_factor
    return lr


def train_natural(model, dataset, cfg):
    """Plain SGD on softmax cross-entropy."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    opt = _SGD(model.parameters(), cfg)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        total_loss, hit, n = 0.0, 0, 0
        for xb, yb in dataset.batches(cfg.batch_size, rng):
            onehot = np.eye(dataset.num_classes, dtype=xb.dtype)[yb]
            with Tape():
                z = model.forward(Tensor(xb))
                loss = L.sce(z, onehot, reduction="mean")
                grads = backward(loss)
            opt.step(grads, lr)
            total_loss += loss.item() * len(xb)
            hit += int((np.argmax(z.data, axis=1) == yb).sum())
            n += len(xb)
        history.append({"epoch": epoch, "lr": lr, "loss": total_loss / n,
                        "accuracy": hit / n})
    return history


def train_heads(model, dataset, cfg, layers=None, head_seed=0):
    """Fit probe heads on a frozen backbone.

    All heads share each batch's single backbone pass; gradients are taken
    with respect to head parameters only, so backbone bytes cannot move.
    Stops early once every head's epoch loss improves by less than 1e-4
    three epochs in a row.
    """
    cfg.validate()
    if layers is None:
        layers = list(range(1, model.num_layers))
    if not layers:
        raise NoIntermediateLayers("no tap layers to fit heads on")
    heads = {l: build_head(model, l, seed=head_seed + l) for l in layers}
    params = [p for h in heads.values() for p in h.parameters()]
    opt = _SGD(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    prev_loss, flat_epochs = None, 0
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        total, n = 0.0, 0
        hits = {l: 0 for l in layers}
        for xb, yb in dataset.batches(cfg.batch_size, rng):
            onehot = np.eye(dataset.num_classes, dtype=xb.dtype)[yb]
            with Tape():
                _, taps = model.forward_with_taps(Tensor(xb))
                loss = None
                for l in layers:
                    zl = head_logits(heads[l], taps[l - 1])
                    term = L.sce(zl, onehot, reduction="mean")
                    loss = term if loss is None else loss + term
                    hits[l] += int((np.argmax(zl.data, axis=1) == yb).sum())
                grads = backward(loss, wrt=params)
            opt.step(grads, lr)
            total += loss.item() * len(xb)
            n += len(xb)
        mean_loss = total / n
        history.append({"epoch": epoch, "lr": lr, "loss": mean_loss,
                        "accuracy": {l: hits[l] / n for l in layers}})
        if prev_loss is not None and prev_loss - mean_loss < 1e-4:
            flat_epochs += 1
            if flat_epochs >= 3:
                break
        else:
            flat_epochs = 0
        prev_loss = mean_loss
    return heads, history


def train_adversarial(model, dataset, cfg, head_seed=0):
    """Adversarial training: inner PGD on the output objective, outer SGD.

    With latent_heads_on the outer loss is the equal-weight mean of the
    output cross-entropy and one cross-entropy per probe head, and the
    heads train jointly with the backbone.  The inner attack always runs
    on the output objective so both variants see the same perturbations.
    """
    cfg.validate()
    layers = list(cfg.latent_layers) if cfg.latent_layers else list(range(1, model.num_layers))
    heads = {}
    params = model.parameters()
    if cfg.latent_heads_on:
        if not layers:
            raise NoIntermediateLayers("latent supervision needs tap layers")
        heads = {l: build_head(model, l, seed=head_seed + l) for l in layers}
        params = params + [p for h in heads.values() for p in h.parameters()]
    opt = _SGD(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        total, hit, n = 0.0, 0, 0
        for xb, yb in dataset.batches(cfg.batch_size, rng):
            onehot = np.eye(dataset.num_classes, dtype=xb.dtype)[yb]
            rngs = [np.random.default_rng(rng.integers(1 << 63)) for _ in range(len(xb))]
            adv = pgd(model, xb, onehot, cfg.adv_eps, cfg.adv_iters,
                      cfg.adv_alpha, rngs=rngs, random_start=True).candidates
            with Tape():
                z, taps = model.forward_with_taps(Tensor(adv))
                loss = L.sce(z, onehot, reduction="mean")
                if heads:
                    for l in layers:
                        zl = head_logits(heads[l], taps[l - 1])
                        loss = loss + L.sce(zl, onehot, reduction="mean")
                    loss = T.mul(loss, 1.0 / (1 + len(layers)))
                grads = backward(loss)
            opt.step(grads, lr)
            total += loss.item() * len(xb)
            hit += int((np.argmax(z.data, axis=1) == yb).sum())
            n += len(xb)
        history.append({"epoch": epoch, "lr": lr, "adv_loss": total / n,
                        "adv_accuracy": hit / n})
    return heads, history


def select_layer(model, heads, dataset, cfg=None, seed=0):
    """Pick the tap whose half-mixed attack hurts the model most.

    One untargeted engine run at beta = 0.5 per candidate layer; the layer
    with the lowest surviving accuracy wins, ties going to the deeper tap.
    """
    if not heads:
        raise NoIntermediateLayers("no heads to select between")
    if cfg is None:
        cfg = AttackConfig(iters=20, tactics=Tactics(multi_target=False), seed=seed)
    x, labels = dataset.images, dataset.labels
    y = np.eye(dataset.num_classes, dtype=x.dtype)[labels]
    scores = {}
    for l in sorted(heads):
        trace = lafeat(model, x, y, cfg, beta=0.5, head=heads[l], layer=l,
                       rngs=make_rngs(cfg.seed, range(len(x))))
        broken = trace.first_hit >= 0
        pred = _final_predictions(model, trace.candidates)
        broken |= pred != labels
        scores[l] = 1.0 - broken.mean()
    best = min(scores.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0], scores


def _final_predictions(model, x):
    with Tape():
        z = model.forward(Tensor(x))
    return np.argmax(z.data, axis=1)
