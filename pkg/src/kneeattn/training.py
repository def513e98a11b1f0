"""Training recipe: Adam, validation-loss plateau LR scaling, early
stopping, the multi-branch fit loop, and the 2-D loss-weight grid search.

The published recipe is the default configuration: Adam with beta1=0.9,
beta2=0.999, initial learning rate 1e-5, LR scaled by 0.1 after 2 epochs
without validation improvement, early stopping after 3. Batch size defaults
to 16 for desk-scale runs (64 in the original recipe). "Improvement" means
a validation-loss decrease greater than ``min_improvement`` (1e-6).
"""

import csv
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph
from .checkpoint import save_checkpoint
from .models import build_model, combine_losses


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    early_stop_patience: int = 3
    max_epochs: int = 50
    seed: int = 0
    loss_weights: tuple = None  # overrides the model spec's weights when set
    min_improvement: float = 1e-6
    train_acc_stop: float = None  # stop once training accuracy reaches this
    shuffle: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError(f"plateau factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


# ---------------------------------------------------------------------------
# optimizer


def adam_step(value, grad, m, v, t, *, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step number.

    Returns (new_value, new_m, new_v).
    """
    if grad.shape != value.shape or m.shape != value.shape or v.shape != value.shape:
        raise graph.ShapeError(
            f"adam_step state/gradient shapes {grad.shape}/{m.shape}/{v.shape} do not match value {value.shape}"
        )
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params, config):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c = self.config
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.value)
            p.value, self.m[i], self.v[i] = adam_step(
                p.value, grad, self.m[i], self.v[i], self.t, lr=lr, beta1=c.beta1, beta2=c.beta2, eps=c.eps
            )


# ---------------------------------------------------------------------------
# schedules


class PlateauSchedule:
    """Multiply the LR by ``factor`` after ``patience`` consecutive epochs
    without strict validation improvement; the counter resets on improvement
    or on a reduction."""

    def __init__(self, lr0, factor=0.1, patience=2, min_improvement=1e-6):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.min_improvement = min_improvement
        self.best = None
        self.bad = 0

    def observe(self, val_loss):
        if self.best is None or val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


def lr_on_plateau(val_loss_history, lr0, factor=0.1, patience=2, min_improvement=1e-6):
    """LR after replaying a validation-loss history through the schedule."""
    if not len(val_loss_history):
        raise ValueError("empty validation-loss history")
    sched = PlateauSchedule(lr0, factor, patience, min_improvement)
    for v in val_loss_history:
        sched.observe(v)
    return sched.lr


class EarlyStopper:
    """Stop after ``patience`` epochs without strict improvement; remembers
    the best (argmin) epoch, 1-based."""

    def __init__(self, patience=3, min_improvement=1e-6):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best = None
        self.best_epoch = 0
        self.epoch = 0
        self.bad = 0

    def observe(self, val_loss):
        self.epoch += 1
        if self.best is None or val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def early_stop(val_loss_history, patience=3, min_improvement=1e-6):
    """(stopped, best_epoch) after replaying a history."""
    if not len(val_loss_history):
        raise ValueError("empty validation-loss history")
    stopper = EarlyStopper(patience, min_improvement)
    stopped = False
    for v in val_loss_history:
        if stopper.observe(v):
            stopped = True
            break
    return stopped, stopper.best_epoch


# ---------------------------------------------------------------------------
# fitting


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    branch_names: tuple = ()
    best_epoch: int = 0
    stop_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    checkpoint_path: str = None

    def to_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "epochs": len(self.rows),
            "branches": list(self.branch_names),
            "checkpoint": self.checkpoint_path,
        }


def _stack(samples):
    images = np.stack([s.image for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=int)
    return images, labels


def _onehot(labels, classes):
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _forward_loss(model, images, onehot, weights):
    """(loss node, per-head batch stats) for one batch."""
    res = model.forward(images)
    stats = OrderedDict()
    if model.spec.fusion == "early-fusion":
        loss = graph.cross_entropy(res.fused_probs, onehot)
        pred = res.fused_probs.value.argmax(axis=1)
        stats["fused"] = (float(loss.value), pred)
        return loss, stats, res
    losses = []
    for name, br in res.branches.items():
        # the one-hot target is duplicated for every branch
        l = graph.cross_entropy(br.probs, onehot)
        losses.append(l)
        stats[name] = (float(l.value), br.probs.value.argmax(axis=1))
    if model.spec.fusion == "multi-loss":
        loss = combine_losses(losses, weights)
    else:
        loss = losses[0]
    return loss, stats, res


def _resolve_weights(model, config):
    if model.spec.fusion != "multi-loss":
        return None
    weights = config.loss_weights if config.loss_weights is not None else model.spec.loss_weights
    if weights is None or len(weights) != len(model.branches):
        raise ValueError(f"need one loss weight per branch, got {weights}")
    return tuple(float(w) for w in weights)


def evaluate(model, samples, config=None, weights=None, batch_size=64):
    """Loss/accuracy over a tagged sample list (no parameter updates)."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if weights is None:
        weights = _resolve_weights(model, config) if config is not None else None
        if model.spec.fusion == "multi-loss" and weights is None:
            weights = model.spec.loss_weights
    images, labels = _stack(samples)
    onehot = _onehot(labels, model.spec.classes)
    total = len(samples)
    loss_sum = 0.0
    head_loss = {}
    head_correct = {}
    for start in range(0, total, batch_size):
        sl = slice(start, min(start + batch_size, total))
        n = sl.stop - sl.start
        loss, stats, _ = _forward_loss(model, images[sl], onehot[sl], weights)
        loss_sum += float(loss.value) * n
        for name, (l, pred) in stats.items():
            head_loss[name] = head_loss.get(name, 0.0) + l * n
            head_correct[name] = head_correct.get(name, 0) + int((pred == labels[sl]).sum())
    heads = OrderedDict(
        (name, {"loss": head_loss[name] / total, "acc": head_correct[name] / total}) for name in head_loss
    )
    return {"loss": loss_sum / total, "heads": heads}


def predict(model, samples, batch_size=64):
    """Per-branch logits/probabilities/masks (and fused head) for a split."""
    images, _ = _stack(samples)
    out = {name: {"logits": [], "probs": [], "masks": []} for name in model.branches}
    fused = {"logits": [], "probs": []}
    for start in range(0, len(samples), batch_size):
        res = model.forward(images[start : start + batch_size])
        for name, br in res.branches.items():
            out[name]["masks"].append(br.attention.mask.value[..., 0])
            if br.logits is not None:
                out[name]["logits"].append(br.logits.value)
                out[name]["probs"].append(br.probs.value)
        if res.fused_logits is not None:
            fused["logits"].append(res.fused_logits.value)
            fused["probs"].append(res.fused_probs.value)
    result = {
        name: {k: (np.concatenate(v) if v else None) for k, v in d.items()} for name, d in out.items()
    }
    if fused["logits"]:
        result["fused"] = {k: np.concatenate(v) for k, v in fused.items()}
    return result


def fit(model, samples, config, out_dir=None, on_epoch=None):
    """Train on the 'train' split, monitor the 'val' split.

    Checkpoints at every validation improvement (in memory, and to
    ``out_dir/best.ckpt`` when an output directory is given); the best-epoch
    parameters are restored before returning.
    """
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not train:
        raise ValueError("empty train split")
    if not val:
        raise ValueError("empty val split")

    weights = _resolve_weights(model, config)
    images, labels = _stack(train)
    onehot = _onehot(labels, model.spec.classes)
    n = len(train)

    rng = np.random.default_rng(config.seed)
    adam = Adam(model.params.values(), config)
    plateau = PlateauSchedule(config.lr0, config.plateau_factor, config.plateau_patience, config.min_improvement)
    stopper = EarlyStopper(config.early_stop_patience, config.min_improvement)

    metrics = RunMetrics(branch_names=tuple(model.branches))
    best_state = None
    ckpt_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(1, config.max_epochs + 1):
        lr = plateau.lr
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        train_loss_sum = 0.0
        head_loss = {}
        head_correct = {}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, stats, _ = _forward_loss(model, images[idx], onehot[idx], weights)
            graph.zero_grads(model.params.values())
            loss.backward()
            adam.step(lr)
            train_loss_sum += float(loss.value) * len(idx)
            for name, (l, pred) in stats.items():
                head_loss[name] = head_loss.get(name, 0.0) + l * len(idx)
                head_correct[name] = head_correct.get(name, 0) + int((pred == labels[idx]).sum())

        val_metrics = evaluate(model, val, weights=weights, batch_size=config.batch_size)
        val_loss = val_metrics["loss"]
        train_acc = sum(head_correct.values()) / (n * max(len(head_correct), 1))

        row = OrderedDict(epoch=epoch, lr=lr, train_loss=train_loss_sum / n, val_loss=val_loss)
        for name in head_loss:
            row[f"train_loss_{name}"] = head_loss[name] / n
            row[f"train_acc_{name}"] = head_correct[name] / n
        for name, m in val_metrics["heads"].items():
            row[f"val_loss_{name}"] = m["loss"]
            row[f"val_acc_{name}"] = m["acc"]
        metrics.rows.append(row)

        if val_loss < metrics.best_val_loss - config.min_improvement:
            metrics.best_val_loss = val_loss
            metrics.best_epoch = epoch
            best_state = OrderedDict((k, v.copy()) for k, v in model.state().items())
            if ckpt_path:
                save_checkpoint(best_state, ckpt_path)
                metrics.checkpoint_path = ckpt_path

        if on_epoch is not None:
            on_epoch(model, epoch, row)

        plateau.observe(val_loss)
        stop = stopper.observe(val_loss)
        metrics.stop_epoch = epoch
        if config.train_acc_stop is not None and train_acc >= config.train_acc_stop:
            break
        if stop:
            metrics.stopped_early = True
            break

    if best_state is not None:
        model.load_state(best_state)
    if out_dir:
        metrics.to_csv(os.path.join(out_dir, "metrics.csv"))
    return metrics


# ---------------------------------------------------------------------------
# loss-weight grid search


DEFAULT_GRID = tuple(i / 10 for i in range(5, 11))  # 0.5 .. 1.0 step 0.1


@dataclass
class GridSearchResult:
    rows: list
    best_weights: tuple
    best_row: dict

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)


def grid_cells(w0_grid=None, w1_grid=None):
    w0s = tuple(w0_grid) if w0_grid is not None else DEFAULT_GRID
    w1s = tuple(w1_grid) if w1_grid is not None else DEFAULT_GRID
    if not w0s or not w1s:
        raise ValueError("empty weight grid")
    return [(w0, w1) for w0 in w0s for w1 in w1s]


def _cell_seed(base_seed, index):
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def grid_search_weights(spec, samples, config, w0_grid=None, w1_grid=None, budget_epochs=15):
    """Short training run per weight combination; argmin validation loss.

    Exact validation-loss ties break toward the larger weights. Every cell
    trains from the same initial parameters with a seed derived from the
    cell index, so the search is deterministic and cells could run in
    parallel.
    """
    if spec.fusion != "multi-loss":
        raise ValueError("the weight grid search applies to multi-loss models only")
    if len(spec.branches) != 2:
        raise ValueError(f"the 2-D search tunes exactly two branches, spec has {len(spec.branches)}")
    cells = grid_cells(w0_grid, w1_grid)
    rows = []
    best = None
    for index, (w0, w1) in enumerate(cells):
        cell_spec = spec.with_weights((w0, w1))
        cell_config = replace(config, seed=_cell_seed(config.seed, index), max_epochs=budget_epochs,
                              loss_weights=None)
        model = build_model(cell_spec)
        metrics = fit(model, samples, cell_config)
        best_row_idx = metrics.best_epoch - 1 if metrics.best_epoch else len(metrics.rows) - 1
        epoch_row = metrics.rows[best_row_idx]
        val_acc = max(v for k, v in epoch_row.items() if k.startswith("val_acc"))
        row = OrderedDict(
            w0=w0, w1=w1, val_loss=metrics.best_val_loss, val_acc=val_acc, best_epoch=metrics.best_epoch
        )
        rows.append(row)
        key = (row["val_loss"], -w0, -w1)  # ties prefer larger weights
        if best is None or key < best[0]:
            best = (key, (w0, w1), row)
    return GridSearchResult(rows=rows, best_weights=best[1], best_row=best[2])
