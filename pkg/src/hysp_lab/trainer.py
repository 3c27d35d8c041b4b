"""Pretraining loop, evaluation protocols and the experiments built on them."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .checkpoint import Checkpoint
from .config import LabConfig
from .data import (INIT, PROBE, SHUFFLE, SPLIT, SkeletonSequence, amplitude_classes, generate_dataset,
                   make_view_pair, stack, stream)
from .errors import InvalidInput, NonFiniteError, TrainingDiverged
from .model import ModelConfig, TwinModel, default_skeleton, ema_update
from .objectives import CurriculumSchedule, NegativeQueue, alpha_schedule, cosine_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "loss", "radius_online", "radius_target", "grad_norm", "alpha")


@dataclass
class MetricsRow:
    epoch: int
    loss: float
    radius_online: float
    radius_target: float
    grad_norm: float
    alpha: float
    wall_time: float = 0.0


def build_twin(cfg: LabConfig, rng: np.random.Generator | None = None) -> TwinModel:
    mcfg = dataclasses.replace(cfg.model, use_predictor=cfg.model.use_predictor and not cfg.train.with_negatives)
    rng = rng if rng is not None else stream(cfg.seed, INIT)
    return TwinModel.initialize(rng, mcfg, default_skeleton(), cfg.train.ema_coefficient)


def init_checkpoint(cfg: LabConfig) -> Checkpoint:
    twin = build_twin(cfg)
    momentum = {k: np.zeros_like(v) for k, v in twin.online.items()}
    queue = np.zeros((0, cfg.model.embed_dim)) if cfg.train.with_negatives else None
    return Checkpoint(twin, cfg, 0, momentum, queue)


def make_dataset(cfg: LabConfig) -> list[SkeletonSequence]:
    d = cfg.data
    specs = amplitude_classes(d.amplitudes, motion_frequency=d.motion_frequency, noise_sigma=d.noise_sigma)
    return generate_dataset(specs, d.n_per_class, d.frames, cfg.seed)


def split_dataset(dataset, test_fraction: float, seed: int, salt: int = 0):
    """Deterministic per-class split into (train, test); ``salt`` selects an independent split."""
    by_class: dict[int, list[SkeletonSequence]] = {}
    for s in sorted(dataset, key=lambda s: s.sample_id):
        by_class.setdefault(s.class_id, []).append(s)
    train, test = [], []
    for cid, items in sorted(by_class.items()):
        ids = (SPLIT, cid) if salt == 0 else (SPLIT, cid, salt)
        order = stream(seed, *ids).permutation(len(items))
        n_test = int(round(test_fraction * len(items)))
        if len(items) > 1:
            n_test = min(max(n_test, 1), len(items) - 1)
        test += [items[i] for i in order[:n_test]]
        train += [items[i] for i in order[n_test:]]
    key = lambda s: s.sample_id  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


def train_part(dataset, cfg: LabConfig):
    return split_dataset(dataset, cfg.data.test_fraction, cfg.seed)[0]


def _workers() -> int:
    try:
        return max(0, int(os.environ.get("HYSP_LAB_THREADS", "0")))
    except ValueError:
        return 0


def _views(batch, cfg: LabConfig, epoch: int):
    mirror = default_skeleton().mirror

    def one(s):
        return make_view_pair(s, cfg.augmentation, cfg.seed, epoch, mirror)

    threads = _workers()
    if threads:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, batch))
    else:
        pairs = [one(s) for s in batch]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def batch_slices(n: int, size: int) -> list[slice]:
    """Consecutive batches of ``size``; a lone trailing sample joins the previous batch.

    Batch-norm heads need at least two rows per batch.
    """
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds, bounds[1:])]


def current_alpha(cfg: LabConfig, epoch: int) -> float:
    t = cfg.train
    if t.with_negatives or t.without_hyperbolic:
        return 0.0
    if t.without_curriculum:
        return 1.0
    return alpha_schedule(epoch, CurriculumSchedule(t.e1, t.e2))


def embedding_gradient(h, h_hat, alpha: float, c: float = 1.0) -> np.ndarray:
    """Per-sample training signal at ``h``.

    The Poincare term contributes its Riemannian gradient; the angle-only
    cosine term, being Euclidean, contributes its Euclidean gradient.
    """
    g = np.zeros_like(np.asarray(h, dtype=np.float64))
    if alpha > 0:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=geometry.AtMinimum)
            g = g + alpha * geometry.riemannian_grad_poincare(h, h_hat, c)
    if alpha < 1:
        g = g + (1.0 - alpha) * cosine_grad(h, h_hat)
    return g


def _contrastive_loss(z_raw, keys, queue: np.ndarray, tau: float, similarity: str):
    n = z_raw.shape[0]
    z = ad.l2_normalize(z_raw)
    labels = np.zeros(n, dtype=np.int64)
    if similarity == "cosine":
        pos = ad.sum_(ad.mul_const(z, keys), axis=1, keepdims=True)
        logits = ad.concat([pos, ad.matmul(z, queue.T)], axis=1) if len(queue) else pos
    else:
        h = ad.exp_map0(z)
        pos = ad.reshape(ad.mul_const(ad.poincare_loss(h, geometry.exp_map0(keys)), -1.0), (n, 1))
        if len(queue):
            neg = ad.mul_const(ad.poincare_loss(ad.reshape(h, (n, 1, -1)), geometry.exp_map0(queue)[None]), -1.0)
            logits = ad.concat([pos, neg], axis=1)
        else:
            logits = pos
    logits = ad.mul_const(logits, 1.0 / tau)
    return ad.mean(ad.softmax_cross_entropy(logits, labels)), z, logits


def _step(ckpt: Checkpoint, x_on, x_tg, alpha: float, queue: NegativeQueue | None):
    """One optimisation step; returns per-batch diagnostics."""
    cfg = ckpt.config
    t = cfg.train
    twin = ckpt.twin
    c = t.curvature
    params = twin.online_tensors()
    with ad.Tape() as tape:
        p = twin.embed_online(x_on, params)
        z_hat = twin.embed_target(x_tg)
        h_hat = geometry.exp_map0(z_hat, c)
        if queue is not None:
            keys = z_hat / np.linalg.norm(z_hat, axis=1, keepdims=True)
            loss, z, logits = _contrastive_loss(p, keys, queue.as_array(), t.tau, t.negative_similarity)
            h = geometry.exp_map0(p.data, c)
        else:
            h_t = ad.exp_map0(p, c)
            terms = []
            if alpha > 0:
                terms.append(ad.mul_const(ad.mean(ad.poincare_loss(h_t, h_hat, c)), alpha))
            if alpha < 1:
                terms.append(ad.mul_const(ad.mean(ad.cosine_loss(h_t, h_hat)), 1.0 - alpha))
            loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
            h = h_t.data
    ad.backward(tape, loss)

    if queue is not None:
        prob = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        prob /= prob.sum(axis=1, keepdims=True)
        bank = np.concatenate([keys[:, None, :], np.broadcast_to(queue.as_array()[None], (len(keys),) + queue.as_array().shape)], axis=1)
        weights = prob.copy()
        weights[:, 0] -= 1.0
        gz = np.einsum("nk,nkd->nd", weights, bank) / t.tau
        grad_norms = np.linalg.norm(gz, axis=1)
        queue.enqueue(keys)
    else:
        grad_norms = np.linalg.norm(embedding_gradient(h, h_hat, alpha, c), axis=1)

    for name, tensor in params.items():
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        g = g + t.weight_decay * twin.online[name]
        buf = t.momentum * ckpt.momentum[name] + g
        ckpt.momentum[name] = buf
        twin.online[name] = twin.online[name] - t.lr * buf
    ema_update(twin)
    return {
        "loss": float(loss.data),
        "radius_online": float(np.linalg.norm(h, axis=1).mean()),
        "radius_target": float(np.linalg.norm(h_hat, axis=1).mean()),
        "grad_norm": float(grad_norms.mean()),
    }


def pretrain(cfg: LabConfig, dataset, resume: Checkpoint | None = None,
             stop_epoch: int | None = None) -> tuple[Checkpoint, list[MetricsRow]]:
    """Self-supervised pretraining on ``dataset``.

    Starts from ``resume`` (or a fresh initialisation) and runs until
    ``stop_epoch`` (default: ``cfg.train.epochs``). Returns the final
    checkpoint and one metrics row per epoch run.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidInput("empty dataset")
    ckpt = resume if resume is not None else init_checkpoint(cfg)
    cfg = ckpt.config if resume is not None else cfg
    t = cfg.train
    end = t.epochs if stop_epoch is None else min(stop_epoch, t.epochs)
    queue = None
    if t.with_negatives:
        queue = NegativeQueue(t.queue_capacity, cfg.model.embed_dim)
        if ckpt.queue is not None and len(ckpt.queue):
            queue.enqueue(ckpt.queue)
    selector = _Selector(cfg, dataset) if t.select_best else None
    rows = []
    for epoch in range(ckpt.epoch, end):
        start = time.perf_counter()
        alpha = current_alpha(cfg, epoch)
        order = stream(cfg.seed, SHUFFLE, epoch).permutation(len(dataset))
        sums = dict.fromkeys(("loss", "radius_online", "radius_target", "grad_norm"), 0.0)
        for b, idx in enumerate(batch_slices(len(order), t.batch_size)):
            batch = [dataset[i] for i in order[idx]]
            x_on, x_tg = _views(batch, cfg, epoch)
            try:
                stats = _step(ckpt, x_on, x_tg, alpha, queue)
            except NonFiniteError as exc:
                radii = np.linalg.norm(ckpt.twin.embed_target(x_tg), axis=1)
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch {b}: {exc}; "
                    f"target pre-map norms min={radii.min():.3g} max={radii.max():.3g}") from exc
            if not np.isfinite(stats["loss"]):
                raise TrainingDiverged(f"loss {stats['loss']} at epoch {epoch}, batch {b}; stats {stats}")
            for k in sums:
                sums[k] += stats[k] * len(batch)
        ckpt.epoch = epoch + 1
        n = len(dataset)
        row = MetricsRow(epoch, *(sums[k] / n for k in ("loss", "radius_online", "radius_target", "grad_norm")),
                         alpha, time.perf_counter() - start)
        log.info("epoch %d loss %.4f |h| %.4f |h_hat| %.4f grad %.3g alpha %.2f", row.epoch, row.loss,
                 row.radius_online, row.radius_target, row.grad_norm, row.alpha)
        rows.append(row)
        if selector is not None and (ckpt.epoch % t.eval_every == 0 or ckpt.epoch == end):
            if queue is not None:
                ckpt.queue = queue.as_array()
            selector.offer(ckpt)
    if queue is not None:
        ckpt.queue = queue.as_array()
    if selector is not None and selector.best is not None:
        log.info("selected epoch %d (validation accuracy %.4f)", selector.best.epoch - 1, selector.score)
        return selector.best, rows
    return ckpt, rows


class _Selector:
    """Keeps the checkpoint whose frozen-encoder probe scores best on a validation split.

    Both parts come from the pretraining data; ties go to the later epoch.
    """

    def __init__(self, cfg: LabConfig, dataset):
        self.cfg = cfg
        self.fit, self.val = split_dataset(dataset, cfg.train.val_fraction, cfg.seed, salt=1)
        self.best: Checkpoint | None = None
        self.score = -1.0

    def offer(self, ckpt: Checkpoint) -> None:
        if not self.val or len({s.class_id for s in self.fit}) < 2:
            return
        classes = sorted({s.class_id for s in self.fit + self.val})
        acc = _frozen_accuracy(ckpt.twin, self.fit, self.val, classes, self.cfg, self.cfg.probe.batch_size)
        log.info("epoch %d validation accuracy %.4f", ckpt.epoch - 1, acc)
        if acc >= self.score:
            self.best, self.score = copy.deepcopy(ckpt), acc


def write_metrics(rows, path, timings_path=None) -> None:
    """Deterministic metrics CSV; wall-clock times go to a separate file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in METRIC_FIELDS[1:]])
    if timings_path is not None:
        with open(timings_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "wall_time"))
            for r in rows:
                w.writerow([r.epoch, f"{r.wall_time:.6f}"])


# --- evaluation ------------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray


def _lr_at(base: float, epoch: int, epochs: int) -> float:
    drops = sum(epoch >= int(round(f * epochs)) for f in (0.6, 0.8))
    return base * 0.1**drops


def _sgd(params: dict, tensors: dict, bufs: dict, lr: float, momentum: float) -> None:
    for k, t in tensors.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        bufs[k] = momentum * bufs[k] + g
        params[k] = params[k] - lr * bufs[k]


def fit_linear_classifier(features, labels, n_classes: int, epochs: int, lr: float, batch_size: int,
                          momentum: float = 0.9, seed: int = 0) -> dict[str, np.ndarray]:
    """Softmax regression trained with momentum SGD and no weight decay."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    params = {"w": np.zeros((features.shape[1], n_classes)), "b": np.zeros(n_classes)}
    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    for epoch in range(epochs):
        lr_e = _lr_at(lr, epoch, epochs)
        order = stream(seed, PROBE, epoch).permutation(len(labels))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            with ad.Tape() as tape:
                logits = ad.add(ad.matmul(features[idx], tensors["w"]), tensors["b"])
                loss = ad.mean(ad.softmax_cross_entropy(logits, labels[idx]))
            ad.backward(tape, loss)
            _sgd(params, tensors, bufs, lr_e, momentum)
    return params


def linear_probe(ckpt: Checkpoint, dataset, label_fraction: float = 1.0, finetune_encoder: bool = False,
                 batch_size: int | None = None) -> ProbeResult:
    """Supervised evaluation of the online encoder on a held-out split.

    With ``finetune_encoder`` false the encoder is frozen (linear protocol);
    otherwise encoder and classifier are trained jointly on ``label_fraction``
    of the labelled training split (semi-supervised / finetune protocols).
    """
    if not 0 < label_fraction <= 1:
        raise InvalidInput(f"label_fraction must lie in (0, 1], got {label_fraction}")
    cfg = ckpt.config
    pc = cfg.probe
    batch_size = batch_size or pc.batch_size
    train, test = split_dataset(dataset, cfg.data.test_fraction, cfg.seed)
    if label_fraction < 1:
        keep = []
        for cid in sorted({s.class_id for s in train}):
            items = [s for s in train if s.class_id == cid]
            order = stream(cfg.seed, PROBE, 10_000 + cid).permutation(len(items))
            keep += [items[i] for i in order[: max(1, int(round(label_fraction * len(items))))]]
        train = sorted(keep, key=lambda s: s.sample_id)
    classes = sorted({s.class_id for s in dataset})
    index = {c: i for i, c in enumerate(classes)}
    y_train = np.array([index[s.class_id] for s in train])
    y_test = np.array([index[s.class_id] for s in test])
    twin = ckpt.twin
    if not finetune_encoder:
        logits = _frozen_logits(twin, stack(train), y_train, stack(test), len(classes), cfg, batch_size)
    else:
        logits = _finetune(twin, stack(train), y_train, stack(test), len(classes), cfg, batch_size)
    pred = np.argmax(logits, axis=1)
    return ProbeResult(float(np.mean(pred == y_test)), np.array(classes)[pred], np.array(classes)[y_test],
                       np.array([s.sample_id for s in test]))


def _frozen_logits(twin: TwinModel, x_train, y_train, x_test, n_classes: int, cfg: LabConfig, batch_size: int):
    pc = cfg.probe
    with ad.no_grad():
        f_train = twin.encode(x_train).data
        f_test = twin.encode(x_test).data
    shift, gain = feature_standardizer(f_train) if pc.standardize else (0.0, 1.0)
    params = fit_linear_classifier((f_train - shift) * gain, y_train, n_classes, pc.epochs, pc.lr, batch_size,
                                   pc.momentum, cfg.seed)
    return ((f_test - shift) * gain) @ params["w"] + params["b"]


def _frozen_accuracy(twin: TwinModel, train, test, classes, cfg: LabConfig, batch_size: int) -> float:
    index = {c: i for i, c in enumerate(classes)}
    y_train = np.array([index[s.class_id] for s in train])
    y_test = np.array([index[s.class_id] for s in test])
    logits = _frozen_logits(twin, stack(train), y_train, stack(test), len(classes), cfg, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == y_test))


def feature_standardizer(features, eps: float = 1e-12):
    """Per-dimension ``(shift, gain)`` mapping training features to zero mean, unit variance."""
    features = np.asarray(features, dtype=np.float64)
    return features.mean(axis=0), 1.0 / (features.std(axis=0) + eps)


def _finetune(twin: TwinModel, x_train, y_train, x_test, n_classes: int, cfg: LabConfig, batch_size: int):
    """Joint encoder and classifier training; returns test logits.

    With ``probe.standardize`` the features pass through a parameter-free
    batch normalisation, using training-split statistics at evaluation.
    """
    pc = cfg.probe
    d = cfg.model.embed_dim
    enc = {k: v.copy() for k, v in twin.online.items() if k.startswith("encoder.")}
    params = dict(enc, **{"cls.w": np.zeros((d, n_classes)), "cls.b": np.zeros(n_classes)})
    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    ones, zeros = np.ones(d), np.zeros(d)
    for epoch in range(pc.epochs):
        lr_e = _lr_at(pc.finetune_lr, epoch, pc.epochs)
        order = stream(cfg.seed, PROBE, 20_000 + epoch).permutation(len(y_train))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            if pc.standardize and len(idx) < 2:
                continue
            tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            with ad.Tape() as tape:
                feats = twin.encode(x_train[idx], tensors)
                if pc.standardize:
                    feats = ad.batch_norm(feats, ones, zeros)
                logits = ad.add(ad.matmul(feats, tensors["cls.w"]), tensors["cls.b"])
                loss = ad.mean(ad.softmax_cross_entropy(logits, y_train[idx]))
            ad.backward(tape, loss)
            _sgd(params, tensors, bufs, lr_e, pc.momentum)
    with ad.no_grad():
        f_test = twin.encode(x_test, params).data
        if pc.standardize:
            shift, gain = feature_standardizer(twin.encode(x_train, params).data, eps=1e-5)
            f_test = (f_test - shift) * gain
    return f_test @ params["cls.w"] + params["cls.b"]


# --- experiments -----------------------------------------------------------------


def hard_easy_split_experiment(ckpt: Checkpoint, dataset, cfg: LabConfig | None = None) -> dict:
    """Retrain on the most and least uncertain halves of the pretraining split.

    Uncertainties come from ``ckpt`` (pretrained on the full split). With an
    odd count the hard half receives the extra sample.
    """
    from .analytics import collect_records

    cfg = cfg or ckpt.config
    train = train_part(dataset, cfg)
    records = collect_records(ckpt, train, cfg.analytics.n_views)
    ranked = sorted(records, key=lambda r: (-r.uncertainty, r.sample_id))
    cut = (len(ranked) + 1) // 2
    by_id = {s.sample_id: s for s in train}
    hard = [by_id[r.sample_id] for r in ranked[:cut]]
    easy = [by_id[r.sample_id] for r in ranked[cut:]]
    out = {"full_acc": linear_probe(ckpt, dataset).accuracy, "n_hard": len(hard), "n_easy": len(easy),
           "hard_ids": sorted(s.sample_id for s in hard), "easy_ids": sorted(s.sample_id for s in easy)}
    for name, subset in (("hard", hard), ("easy", easy)):
        sub_ckpt, _ = pretrain(cfg, sorted(subset, key=lambda s: s.sample_id))
        out[f"{name}_half_acc"] = linear_probe(sub_ckpt, dataset).accuracy
    return out


ABLATIONS = {
    "hysp": {},
    "with_negatives": {"with_negatives": True},
    "without_hyperbolic": {"without_hyperbolic": True},
    "without_curriculum": {"without_curriculum": True},
}


def ablation_grid(cfg: LabConfig, dataset) -> list[dict]:
    """Pretrain and linearly probe every ablation configuration."""
    rows = []
    train = train_part(dataset, cfg)
    for name, flags in ABLATIONS.items():
        run_cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **flags))
        ckpt, metrics = pretrain(run_cfg, train)
        losses = [m.loss for m in metrics]
        rows.append({
            "variant": name,
            "linear_acc": linear_probe(ckpt, dataset).accuracy,
            "final_loss": losses[-1] if losses else float("nan"),
            "all_losses_finite": bool(np.all(np.isfinite(losses))),
            "final_radius_target": metrics[-1].radius_target if metrics else float("nan"),
        })
    return rows


def batch_size_sweep(ckpt: Checkpoint, dataset, sizes=(512, 256, 128, 64, 32)) -> list[dict]:
    return [{"batch_size": b, "linear_acc": linear_probe(ckpt, dataset, batch_size=b).accuracy} for b in sizes]
