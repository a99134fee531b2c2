"""Training-set assembly, the training loop, and rotation-fused prediction."""

from __future__ import annotations

import logging
import math
import zlib
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from . import nn
from .metrics import classification_metrics, confusion_from_labels
from .model import MultiScaleModel, forward, train_step
from .sampler import (DEFAULT_SCALES, N_FLIPS, N_SHIFTS, SampleStore, augment_sample, extract_sample,
                      theta_schedule)
from .volume import LABELS, NoduleRecord, load_volume

log = logging.getLogger(__name__)

N_CLASSES = len(LABELS)
AUG_PER_ANGLE = (N_SHIFTS + 1) * N_FLIPS  # 16


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    scales: tuple = DEFAULT_SCALES
    plane_counts: tuple | None = None  # N_c per class; derived from the target when None
    target_per_class: int = 5000  # planes per class before augmentation
    max_samples_per_class: int | None = None  # cap on the augmented store, by random subsampling
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 3.0
    lr_decay_every: int = 50
    epochs: int = 200
    dropout: float = 0.5
    weight_decay: float = 1e-6
    val_fusion_n: int = 30
    test_fusion_n: int = 30
    stream_width: float = 1.0
    workers: int = 1

    def __post_init__(self):
        for name in ("target_per_class", "batch_size", "lr", "lr_decay", "lr_decay_every", "epochs",
                     "val_fusion_n", "test_fusion_n", "stream_width", "workers"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.plane_counts is not None and (len(self.plane_counts) != N_CLASSES
                                              or min(self.plane_counts) < 1):
            raise ValueError(f"plane_counts needs {N_CLASSES} positive entries")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    @classmethod
    def desk(cls, seed: int, **overrides) -> "TrainConfig":
        """Small preset that trains on a single CPU core in minutes."""
        base = dict(seed=seed, target_per_class=200, max_samples_per_class=200, batch_size=32,
                    epochs=30, lr=2e-3, val_fusion_n=4, test_fusion_n=8, stream_width=0.25)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        if self.plane_counts is not None:
            d["plane_counts"] = list(self.plane_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("scales", "plane_counts"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr / config.lr_decay ** (epoch // config.lr_decay_every)


# ---------------------------------------------------------------- sample arithmetic


def default_plane_counts(nodules_per_class, target=5000) -> tuple:
    """Angles per nodule so each class reaches ``target`` planes: ceil(target / nodules)."""
    out = []
    for c, n in enumerate(nodules_per_class):
        if n <= 0:
            raise ValueError(f"class {LABELS[c]} has no training nodules")
        out.append(max(1, math.ceil(target / n)))
    return tuple(out)


def sample_counts(nodules_per_class, plane_counts) -> tuple:
    """Augmented store size per class: nodules x N_c x 16."""
    return tuple(int(n) * int(k) * AUG_PER_ANGLE for n, k in zip(nodules_per_class, plane_counts))


def nodule_counts(records) -> np.ndarray:
    return np.bincount([r.label for r in records], minlength=N_CLASSES)[:N_CLASSES]


def check_splits(records) -> None:
    """No nodule may sit in two splits."""
    where = {}
    for r in records:
        key = (r.volume_id, tuple(r.center))
        if where.setdefault(key, r.split) != r.split:
            raise ValueError(f"nodule {r.id} appears in splits {where[key]!r} and {r.split!r}")


# ---------------------------------------------------------------- volume access


class VolumeLoader:
    """Loads volumes by record (``volume_id`` is the file path), keeping a small LRU cache."""

    def __init__(self, fmt="metaimage", cache_size=8):
        self._load = lru_cache(maxsize=cache_size)(lambda p: load_volume(p, fmt))

    def __call__(self, record: NoduleRecord):
        return self._load(record.volume_id)


def _volume_source(volumes):
    if volumes is None:
        return VolumeLoader()
    if isinstance(volumes, Mapping):
        return lambda rec: volumes[rec.volume_id]
    return volumes


def _aug_seed(seed, rec: NoduleRecord, theta_index: int) -> int:
    key = zlib.crc32(f"{rec.id}|{rec.volume_id}".encode())
    return int(np.random.SeedSequence([seed, key, theta_index]).generate_state(1)[0])


def _pmap(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- assembly


def assemble_training_set(records, config: TrainConfig, volumes=None, count_only=False):
    """Augmented multi-scale training store from the ``train`` split of ``records``.

    Each nodule of class c contributes N_c angles x 16 augmented views.  When
    ``config.max_samples_per_class`` is smaller than that pool, a seeded
    random subset of (nodule, angle, shift, flip) tags is extracted instead.
    With ``count_only`` no volume is touched and the per-class pool sizes are
    returned as a tuple.
    """
    train = [r for r in records if r.split in ("train", "")]
    counts = nodule_counts(train)
    missing = [LABELS[c] for c in range(N_CLASSES) if counts[c] == 0]
    if missing:
        raise ValueError(f"no training nodules for class(es): {', '.join(missing)}")
    planes = config.plane_counts or default_plane_counts(counts, config.target_per_class)
    pool = sample_counts(counts, planes)
    if count_only:
        return pool

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    jobs = {}  # (record index, angle index) -> set of (shift, flip) tags
    for c in range(N_CLASSES):
        members = [i for i, r in enumerate(train) if r.label == c]
        per_nodule = planes[c] * AUG_PER_ANGLE
        keep = np.arange(pool[c])
        cap = config.max_samples_per_class
        if cap is not None and cap < pool[c]:
            keep = np.sort(rng.choice(pool[c], size=cap, replace=False))
        for flat in keep:
            m, rest = divmod(int(flat), per_nodule)
            a, tag = divmod(rest, AUG_PER_ANGLE)
            jobs.setdefault((members[m], a), set()).add(divmod(tag, N_FLIPS))

    source = _volume_source(volumes)

    def run(job):
        (i, a), tags = job
        rec = train[i]
        theta = theta_schedule(planes[rec.label])[a]
        return augment_sample(source(rec), rec, theta, _aug_seed(config.seed, rec, a), config.scales,
                              only=tags)

    samples = [s for batch in _pmap(run, sorted(jobs.items()), config.workers) for s in batch]
    log.info("assembled %d samples (%s per class)", len(samples),
             ", ".join(str(int(n)) for n in np.bincount([s.label for s in samples], minlength=N_CLASSES)))
    return SampleStore.from_samples(samples, config.scales)


# ---------------------------------------------------------------- fusion


def fuse(probs) -> tuple:
    """Average per-angle probability vectors and take the argmax (lowest index on ties).

    The mean is computed with exactly rounded sums, so it does not depend on
    the order of the angles.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need at least one probability vector")
    mean = np.array([math.fsum(probs[:, k]) / probs.shape[0] for k in range(probs.shape[1])])
    return int(np.argmax(mean)), mean


def fusion_patches(model: MultiScaleModel, volume, record: NoduleRecord, n: int, thetas=None):
    if n < 1:
        raise ValueError("fusion needs N >= 1")
    thetas = theta_schedule(n) if thetas is None else np.asarray(thetas, dtype=np.float64)
    return np.stack([extract_sample(volume, record, t, model.scales).patches for t in thetas])


def _per_angle_probs(model, patches):
    # one forward call per angle keeps each vector independent of batch position
    return np.stack([forward(model, p) for p in patches])


def predict_nodule(model: MultiScaleModel, volume, record: NoduleRecord, n=30, thetas=None):
    """Rotation-fused class prediction; returns ``(label, mean probabilities)``."""
    return fuse(_per_angle_probs(model, fusion_patches(model, volume, record, n, thetas)))


@dataclass
class Evaluation:
    confusion: object
    ids: list = field(default_factory=list)
    reference: list = field(default_factory=list)
    predicted: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (nodule id, message)


def evaluate_manifest(model: MultiScaleModel, records, n=30, volumes=None, workers=1,
                      patches=None) -> Evaluation:
    """Predict every record; unreadable volumes are reported and skipped.

    ``patches`` may hold pre-extracted fusion patches per record (used by the
    training loop to avoid re-sampling the validation set every epoch).
    """
    if not records:
        raise ValueError("nothing to evaluate")
    source = _volume_source(volumes)

    def run(i):
        rec = records[i]
        try:
            p = patches[i] if patches is not None else fusion_patches(model, source(rec), rec, n)
        except (OSError, ValueError) as exc:
            return rec, None, f"{type(exc).__name__}: {exc}"
        return rec, fuse(_per_angle_probs(model, p)), None

    ev = Evaluation(None)
    for rec, result, err in _pmap(run, range(len(records)), workers):
        if err is not None:
            log.warning("skipping %s: %s", rec.id, err)
            ev.failures.append((rec.id, err))
            continue
        ev.ids.append(rec.id)
        ev.reference.append(rec.label)
        ev.predicted.append(result[0])
        ev.probabilities.append(result[1])
    if not ev.ids:
        raise ValueError("no record could be evaluated")
    ev.confusion = confusion_from_labels(ev.reference, ev.predicted, N_CLASSES)
    return ev


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    f: list
    mean_f: float
    accuracy: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def to_text(self) -> str:
        head = ["epoch", "lr", "loss"] + [f"f_{n}" for n in LABELS] + ["mean_f", "accuracy", "best"]
        lines = ["\t".join(head)]
        for e in self.epochs:
            row = [str(e.epoch), repr(e.lr), repr(e.loss)] + [repr(x) for x in e.f]
            row += [repr(e.mean_f), repr(e.accuracy), "1" if e.epoch == self.best_epoch else "0"]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @property
    def losses(self):
        return [e.loss for e in self.epochs]


def train(model: MultiScaleModel, store: SampleStore, validation, config: TrainConfig, volumes=None,
          progress=None):
    """Mini-batch ADAM training with per-epoch validation; returns ``(best model, TrainLog)``.

    After every epoch each validation nodule is predicted by fusing
    ``config.val_fusion_n`` un-augmented angles, and the parameters with the
    highest mean F over classes are kept (earliest epoch on ties).  With no
    validation records the final epoch is returned.
    """
    if len(store) == 0:
        raise ValueError("sample store is empty")
    if tuple(store.scales) != tuple(model.scales):
        store = store.select_scales(model.scales)
    shuffle_seq, dropout_seq = np.random.SeedSequence([config.seed, 2]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    adam = nn.AdamState()
    source = _volume_source(volumes)
    validation = list(validation or [])
    val_patches = _pmap(lambda r: fusion_patches(model, source(r), r, config.val_fusion_n),
                        validation, config.workers)

    tlog = TrainLog()
    best, best_f = model.copy(), -np.inf
    n = len(store)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss = train_step(model, store.patches[idx], store.labels[idx], lr, adam, dropout_rng,
                              config.weight_decay)
            total += loss * len(idx)
        mean_loss = total / n
        if validation:
            ev = evaluate_manifest(model, validation, config.val_fusion_n, patches=val_patches)
            rep = classification_metrics(ev.confusion)
            f, mean_f, acc = rep.f_measure, rep.mean_f, rep.accuracy
        else:
            f, mean_f, acc = [float("nan")] * N_CLASSES, float("nan"), float("nan")
        tlog.epochs.append(EpochLog(epoch, lr, mean_loss, f, mean_f, acc))
        if (validation and mean_f > best_f) or not validation:
            best, best_f = model.copy(), mean_f
            tlog.best_epoch = epoch
        if progress is not None:
            progress(tlog.epochs[-1])
        log.info("epoch %d lr %.3g loss %.4f mean F %.3f acc %.3f", epoch, lr, mean_loss, mean_f, acc)
    best.meta = dict(best.meta, best_epoch=tlog.best_epoch)
    return best, tlog


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
