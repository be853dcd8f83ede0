"""Training loop, optimizer, engine modes and hyperparameter sweeps."""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffcore as dc
from .data import split
from .exceptions import ConfigurationError, MIPLError, NumericAbort
from .losses import MARGIN_VARIANTS, LossConfig, full_loss, init_weights
from .model import TemperatureSchedule, bind, forward, init_params, predict_bag

log = logging.getLogger(__name__)

MODES = ("mipl", "mil", "pll")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 1.0
    tau0: float = 5.0
    tau_min: float = 0.1
    tau_decay: float = 0.95
    anneal: bool = True           # False pins tau at 1 for every epoch
    seed: int = 0
    mode: str = "mipl"
    margin_variant: str = "distribution"
    eval_every: int = 0
    feature_dim: int = 32
    hidden_sizes: tuple = ()
    attention_dim: int = 128
    activation: str = "tanh"
    grad_clip: float = 10.0       # global gradient norm cap; 0 disables

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not self.grad_clip >= 0:
            raise ConfigurationError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.margin_variant not in MARGIN_VARIANTS:
            raise ConfigurationError(f"margin_variant must be one of {MARGIN_VARIANTS}")
        TemperatureSchedule(self.tau0, self.tau_min, self.tau_decay)
        LossConfig(self.lam, self.margin_variant, self.epochs)

    def loss_config(self):
        variant = "off" if self.mode == "mil" else self.margin_variant
        return LossConfig(self.lam, variant, self.epochs)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    tau_final: float = 1.0
    checkpoint: Optional[str] = None

    def write_jsonl(self, path):
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")


def cosine_lr(lr0, t, T):
    """Learning rate for 1-based epoch ``t``: ``lr0 * (1 + cos(pi t / T)) / 2``."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


class MomentumSGD:
    """``v <- mu v + (g + wd theta)``; ``theta <- theta - lr v`` (in place).

    With ``clip > 0`` the loss gradients are rescaled to global L2 norm at most
    ``clip`` before the update; weight decay is not clipped.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4, clip=0.0):
        self.params = params.named()
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip = clip
        self.velocity = {name: np.zeros_like(p) for name, p in self.params.items()}

    def step(self, grads, lr):
        scale = 1.0
        if self.clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                scale = self.clip / norm
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += scale * grads[name] + self.weight_decay * p
            p -= lr * v


# ---------------------------------------------------------------------------
# engine modes


def mil_mode_adapter(ds):
    """Replace every candidate set by the bag's true label."""
    bags = []
    for bag in ds.bags:
        if bag.true_label is None:
            raise ConfigurationError(f"mil mode needs true labels; bag {bag.id} has none")
        bags.append(bag.with_candidates([bag.true_label]))
    return ds.replace_bags(bags)


def pll_mode_adapter(ds):
    """Check every bag holds exactly one instance."""
    for bag in ds.bags:
        if bag.n != 1:
            raise ConfigurationError(f"pll mode needs singleton bags; bag {bag.id} has {bag.n} instances")
    return ds


def _check_mode(cfg, ds):
    if cfg.mode == "mil":
        for bag in ds.bags:
            if len(bag.candidates) != 1:
                raise ConfigurationError(
                    f"mil mode needs singleton candidate sets; bag {bag.id} has {list(bag.candidates)}")
    elif cfg.mode == "pll":
        pll_mode_adapter(ds)


# ---------------------------------------------------------------------------
# training


def train(cfg, train_ds, test_ds=None, on_batch=None):
    """Fit a model; returns ``(params, report, weights)``.

    ``on_batch(epoch, batch_index, weights)`` is called after every optimizer
    step, which is where the per-batch invariant checks hook in.
    """
    cfg.validate()
    if len(train_ds) == 0:
        raise ConfigurationError("empty training set")
    if test_ds is not None and (test_ds.meta.d, test_ds.meta.k) != (train_ds.meta.d, train_ds.meta.k):
        raise ConfigurationError("train and test sets disagree on d or k")
    _check_mode(cfg, train_ds)

    k = train_ds.meta.k
    params = init_params(train_ds.meta.d, k, cfg.feature_dim, cfg.hidden_sizes,
                         cfg.attention_dim, cfg.activation, seed=cfg.seed)
    opt = MomentumSGD(params, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    weights = init_weights(train_ds)
    schedule = TemperatureSchedule(cfg.tau0, cfg.tau_min, cfg.tau_decay)
    loss_cfg = cfg.loss_config()
    rng = np.random.default_rng(cfg.seed)
    bags = train_ds.bags
    T = cfg.epochs
    report = TrainReport()
    tau = 1.0

    for t in range(1, T + 1):
        tau = schedule.step() if cfg.anneal else 1.0
        lr = cosine_lr(cfg.lr, t, T)
        order = rng.permutation(len(bags))
        sums = {"L_d": 0.0, "L_m": 0.0, "L": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [bags[i] for i in order[start:start + cfg.batch_size]]
            tape = dc.Tape()
            bound = bind(tape, params)
            probs = []
            for bag in batch:
                p, _ = forward(tape, bound, bag.instances, tau)
                weights.update(bag.id, p.value, t, T)
                probs.append(p)
            total, parts = full_loss(loss_cfg, [weights[bag.id] for bag in batch], probs,
                                     [bag.candidates for bag in batch], k)
            if not math.isfinite(parts["L"]):
                raise NumericAbort(f"non-finite loss at epoch {t}, batch {b}")
            tape.backward(total)
            grads = {name: node.grad for name, node in bound.named().items()}
            opt.step(grads, lr)
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
            if on_batch is not None:
                on_batch(t, b, weights)

        rec = {"epoch": t, "tau": tau, "lr": lr}
        rec.update({key: val / n_batches for key, val in sums.items()})
        if test_ds is not None and cfg.eval_every and t % cfg.eval_every == 0:
            rec["test_accuracy"] = accuracy(params, test_ds, tau)
        report.epochs.append(rec)
        log.debug("epoch %d: %s", t, rec)

    report.tau_final = tau
    return params, report, weights


def predict(params, bag, tau_final):
    """Argmax class, ties to the lowest index."""
    probs, _, _ = predict_bag(params, bag.instances if hasattr(bag, "instances") else bag, tau_final)
    return int(np.argmax(probs))


def accuracy(params, ds, tau_final):
    hits = sum(predict(params, bag, tau_final) == bag.true_label for bag in ds.bags)
    return hits / len(ds)


# ---------------------------------------------------------------------------
# sweeps


def _sweep_cell(args):
    cfg, ds, ratio, seed = args
    from .evalsuite import evaluate

    train_ds, test_ds = split(ds, ratio, seed)
    if cfg.mode == "mil":
        train_ds = mil_mode_adapter(train_ds)
    params, report, _ = train(cfg, train_ds)
    return evaluate(params, test_ds, report.tau_final).accuracy


def sweep(base, param, values, ds, seeds, ratio=0.7, jobs=1):
    """Train and evaluate for every ``value`` of ``param`` and every seed.

    Each seed draws its own train/test split and initialisation.  Failing
    cells are recorded in the row's ``errors`` rather than raised.
    """
    if param not in ("lam", "tau0"):
        raise ConfigurationError(f"sweep parameter must be 'lam' or 'tau0', got {param!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if not seeds:
        raise ConfigurationError("sweep needs at least one seed")
    cells = []
    for v in values:
        for s in seeds:
            cfg = TrainConfig(**{**asdict(base), param: v, "seed": s})
            cells.append((v, s, (cfg, ds, ratio, s)))

    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_cell, c[2]) for c in cells]
            for (v, s, _), fut in zip(cells, futures):
                try:
                    results.append((v, s, fut.result()))
                except MIPLError as exc:
                    results.append((v, s, exc))
    else:
        for v, s, args in cells:
            try:
                results.append((v, s, _sweep_cell(args)))
            except MIPLError as exc:
                results.append((v, s, exc))

    rows = []
    for v in values:
        accs = [r for vv, _, r in results if vv == v and not isinstance(r, Exception)]
        errs = [f"seed {s}: {r}" for vv, s, r in results if vv == v and isinstance(r, Exception)]
        mean = float(np.mean(accs)) if accs else float("nan")
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        rows.append({"param": param, "value": v, "mean_accuracy": mean, "std_accuracy": std,
                     "n_ok": len(accs), "accuracies": accs, "errors": errs})
    return rows
