"""Loss, SGD with cosine annealing, augmentation, metrics and experiment protocols."""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from adaptconv.config import RunConfig, stream
from adaptconv.data import Dataset, generate
from adaptconv.graph import PointCloud
from adaptconv.net import build_net
from adaptconv.tensor import (
    ConfigError,
    ContractError,
    DimensionError,
    _node,
    backward,
    log_softmax,
    reshape,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    lr_max: float = 0.1
    lr_min: float = 0.001
    total_steps: int = 1
    momentum: float = 0.9
    step: int = 0
    velocity: dict = field(default_factory=dict)


def cosine_lr(step, state: OptimizerState):
    if not 0 <= step <= state.total_steps:
        raise ContractError(f"step {step} outside [0, {state.total_steps}]")
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (
        1.0 + math.cos(math.pi * step / state.total_steps))


def sgd_step(params, state: OptimizerState, lr=None):
    """v <- momentum * v + g;  p <- p - lr * v.  ``params`` maps name -> Tensor."""
    lr = cosine_lr(min(state.step, state.total_steps), state) if lr is None else lr
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise DimensionError(f"{name}: momentum buffer {v.shape} vs {p.data.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v
    state.step += 1
    return lr


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over rows; logits (R, L)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        logits = reshape(logits, (-1, logits.shape[-1]))
    rows, width = logits.shape
    if labels.shape[0] != rows:
        raise DimensionError(f"{rows} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise IndexError(f"label outside [0, {width})")
    logp = log_softmax(logits, axis=1)
    picked = logp.data[np.arange(rows), labels]

    def bw(g):
        out = np.zeros((rows, width))
        out[np.arange(rows), labels] = -g / rows
        return (out,)
    return _node(-picked.mean(), (logp,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# augmentation


def augment(cloud: PointCloud, rng, params):
    """Random global shift, isotropic scale and clipped per-point jitter."""
    if not params.enabled:
        return cloud
    p = cloud.positions
    shift = rng.uniform(-params.shift, params.shift, 3)
    scale = rng.uniform(params.scale_low, params.scale_high)
    jitter = np.clip(rng.normal(0.0, params.jitter_std, p.shape) if params.jitter_std > 0
                     else np.zeros(p.shape), -params.jitter_clip, params.jitter_clip)
    return cloud.with_positions(p * scale + shift + jitter)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    overall_accuracy: float
    mean_class_accuracy: Optional[float] = None
    per_class_iou: Optional[list] = None
    mean_instance_iou: Optional[float] = None
    mean_class_iou: Optional[float] = None
    shape_iou: Optional[list] = None

    def summary(self):
        rows = [("OA", self.overall_accuracy), ("mAcc", self.mean_class_accuracy),
                ("mIoU", self.mean_instance_iou), ("mcIoU", self.mean_class_iou)]
        return "\n".join(f"{k:<6}{v:.4f}" for k, v in rows if v is not None) + "\n"


def evaluate_classification(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ContractError("no predictions to evaluate")
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions vs {labels.size} labels")
    oa = float((preds == labels).mean())
    recalls = [float((preds[labels == c] == c).mean()) for c in np.unique(labels)]
    return MetricsReport(oa, float(np.mean(recalls)))


def shape_iou(pred, label, parts):
    """Mean part IoU of one shape; a part absent from both counts as 1."""
    ious = []
    for part in parts:
        p, t = pred == part, label == part
        union = np.logical_or(p, t).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def evaluate_segmentation(preds, labels, categories, part_sets):
    """Instance mIoU and category mcIoU over a list of shapes."""
    if len(preds) == 0:
        raise ContractError("no shapes to evaluate")
    per_shape, by_cat = [], {}
    correct = total = 0
    for pred, label, cat in zip(preds, labels, categories):
        pred, label = np.asarray(pred), np.asarray(label)
        parts = part_sets[cat]
        legal = np.isin(pred, parts)
        if not legal.all():
            raise ContractError(f"prediction uses part {pred[~legal][0]} outside category "
                                f"{cat}'s parts {parts}")
        if not np.isin(label, parts).all():
            raise ContractError(f"label outside category {cat}'s parts {parts}")
        iou = shape_iou(pred, label, parts)
        per_shape.append(iou)
        by_cat.setdefault(cat, []).append(iou)
        correct += int((pred == label).sum())
        total += label.size
    cats = sorted(by_cat)
    per_cat = [float(np.mean(by_cat[c])) for c in cats]
    return MetricsReport(correct / total, None, per_cat, float(np.mean(per_shape)),
                         float(np.mean(per_cat)), per_shape)


# ---------------------------------------------------------------------------
# training


def _batches(n, size, order):
    starts = list(range(0, n, size))
    out = [order[s:s + size] for s in starts]
    # batch statistics need two rows: fold a lone trailing cloud into its neighbour
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def in_width_for(cfg, dataset):
    if cfg.task == "seg" and dataset.train[0].normals is not None:
        return 6
    return 3


def make_net(cfg, dataset):
    return build_net(cfg, dataset.num_classes, dataset.num_categories, in_width_for(cfg, dataset))


def predict(net, clouds, batch_size=16, part_sets=None):
    """Eval-mode predictions: class ids (cls) or per-point part ids (seg)."""
    out = []
    for s in range(0, len(clouds), batch_size):
        chunk = clouds[s:s + batch_size]
        logits = net.forward(chunk).data
        if net.cfg.task == "cls":
            out.extend(np.argmax(logits, axis=1).tolist())
            continue
        for cloud, lg in zip(chunk, logits):
            if part_sets is not None:
                parts = np.asarray(part_sets[cloud.category])
                out.append(parts[np.argmax(lg[:, parts], axis=1)])
            else:
                out.append(np.argmax(lg, axis=1))
    return out


def evaluate(net, dataset, clouds=None):
    clouds = dataset.test if clouds is None else clouds
    preds = predict(net, clouds, part_sets=dataset.part_sets)
    if net.cfg.task == "cls":
        return evaluate_classification(preds, [c.shape_label for c in clouds])
    return evaluate_segmentation(preds, [c.point_labels for c in clouds],
                                 [c.category for c in clouds], dataset.part_sets)


@dataclass
class TrainResult:
    net: object
    history: list
    metrics: MetricsReport
    dataset: Dataset


def train(cfg: RunConfig, dataset: Optional[Dataset] = None, progress=None) -> TrainResult:
    """Train per ``cfg``; ``history`` rows are (epoch, lr, loss, test metric)."""
    cfg.validate()
    dataset = generate(cfg.dataset) if dataset is None else dataset
    net = make_net(cfg, dataset)
    params = net.param_store()
    data_rng = stream(cfg.seed, "data")
    aug_rng = stream(cfg.seed, "augment")
    drop_rng = stream(cfg.seed, "dropout")
    n = len(dataset.train)
    if n < 2:
        raise ConfigError("need at least two training clouds")
    per_epoch = len(_batches(n, cfg.batch_size, np.arange(n)))
    state = OptimizerState(cfg.lr_max, cfg.lr_min, cfg.epochs * per_epoch, cfg.momentum)
    history = []
    metrics = None
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr = None
        for batch in _batches(n, cfg.batch_size, data_rng.permutation(n)):
            clouds = [augment(dataset.train[i], aug_rng, cfg.augment) for i in batch]
            logits = net.forward(clouds, training=True, rng=drop_rng)
            if cfg.task == "cls":
                labels = [c.shape_label for c in clouds]
            else:
                labels = np.concatenate([c.point_labels for c in clouds])
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss {float(loss.data)} at epoch {epoch}, "
                                    f"step {state.step}")
            net.zero_grad()
            backward(loss)
            lr = sgd_step(params, state)
            losses.append(float(loss.data))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            metrics = evaluate(net, dataset)
        score = metrics.overall_accuracy if cfg.task == "cls" else metrics.mean_instance_iou
        row = (epoch, lr, float(np.mean(losses)), score)
        history.append(row)
        log.info("epoch %d lr %.5f loss %.4f metric %.4f", *row)
        if progress is not None:
            progress(row)
    return TrainResult(net, history, metrics, dataset)


def write_history(path, history, task):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss", "oa" if task == "cls" else "miou"])
        for epoch, lr, loss, score in history:
            w.writerow([epoch, repr(float(lr)), repr(float(loss)), repr(float(score))])


# ---------------------------------------------------------------------------
# robustness and feature maps

NOISE_LEVELS = (0.0, 0.01, 0.02, 0.05, 0.1)


def bounding_radius(points):
    """Radius of the centroid-centred sphere enclosing every point."""
    return float(np.sqrt(((points - points.mean(axis=0)) ** 2).sum(axis=1)).max())


def perturb(cloud, mode, level, rng, k=1):
    if mode == "dropout":
        keep = int(level)
        if keep < k:
            raise ConfigError(f"dropout level {keep} leaves fewer than k={k} points")
        if keep >= len(cloud):
            return cloud
        idx = np.sort(rng.choice(len(cloud), keep, replace=False))
        return cloud.subset(idx)
    if mode == "noise":
        if level == 0:
            return cloud
        std = level * bounding_radius(cloud.positions)
        return cloud.with_positions(cloud.positions + rng.normal(0.0, std, cloud.positions.shape))
    raise ConfigError(f"robustness mode must be 'dropout' or 'noise', got {mode!r}")


def robustness_sweep(net, clouds, mode, levels, seed=0):
    """[(level, OA)] with every test cloud perturbed at each level."""
    levels = list(levels)
    if levels != sorted(levels) and levels != sorted(levels, reverse=True):
        raise ConfigError("robustness levels must be monotone")
    labels = [c.shape_label for c in clouds]
    curve = []
    for level in levels:
        rng = stream(seed, f"robustness-{mode}-{level!r}")
        perturbed = [perturb(c, mode, level, rng, net.cfg.k) for c in clouds]
        preds = predict(net, perturbed)
        curve.append((level, evaluate_classification(preds, labels).overall_accuracy))
    return curve


def write_curve(path, curve, mode):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "level", "oa"])
        for level, oa in curve:
            w.writerow([mode, level, repr(float(oa))])


def feature_distance_map(net, cloud, layer_index, target):
    """Euclidean distance from ``target``'s layer features to every point's."""
    if not 0 <= layer_index < len(net.convs):
        raise ContractError(f"layer index {layer_index} outside [0, {len(net.convs)})")
    if not 0 <= target < len(cloud):
        raise ContractError(f"target point {target} outside [0, {len(cloud)})")
    _, layers = net.forward([cloud], return_layers=True)
    feats = layers[layer_index].data
    if feats.shape[0] != len(cloud):
        # pooled level: bring features back to full resolution
        levels = net.pyramid([cloud])
        lvl = sum(1 for p in net.cfg.pool_after if p < layer_index)
        feats = feats[levels[lvl]["up"]]
    return np.sqrt(((feats - feats[target]) ** 2).sum(axis=1))


def write_featmap(path, cloud, distances):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z", "distance"])
        for i, (p, d) in enumerate(zip(cloud.positions, distances)):
            w.writerow([i] + [repr(float(v)) for v in p] + [repr(float(d))])
