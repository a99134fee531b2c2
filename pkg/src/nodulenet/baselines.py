"""Classical comparators: raw-intensity and K-means features fed to a linear SVM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import kernels
from .container import read_container, write_container
from .sampler import PATCH_SIDE, extract_patch, theta_schedule, triplet_planes

log = logging.getLogger(__name__)

SVM_MAGIC = b"TPSV"
KMEANS_MAGIC = b"TPKM"
SVM_SCALE = 40.0
N_VOTE_PATCHES = 30


def _check_patch(patch):
    patch = np.asarray(patch)
    if patch.shape != (PATCH_SIDE, PATCH_SIDE):
        raise ValueError(f"expected a {PATCH_SIDE}x{PATCH_SIDE} patch, got {patch.shape}")
    return patch


def intensity_features(patch) -> np.ndarray:
    """Row-major pixel vector (4096 values)."""
    return _check_patch(patch).astype(np.float64).reshape(-1)


def vote_patches(volume, record, n=N_VOTE_PATCHES, scale=SVM_SCALE) -> np.ndarray:
    """``n`` single-view patches: patch i is view i mod 3 of the triplet at angle i."""
    out = np.empty((n, PATCH_SIDE, PATCH_SIDE), dtype=np.float32)
    for i, theta in enumerate(theta_schedule(n)):
        tri = triplet_planes(record.center, theta)
        out[i] = extract_patch(volume, tri.frames[i % 3], record.center, scale)
    return out


def store_patches(store, scale=SVM_SCALE):
    """All views of one scale from a sample store, as ``(patches, labels)``."""
    s = store.scales.index(float(scale))
    p = store.patches[:, s]
    n = p.shape[0]
    return p.reshape(n * 3, *p.shape[-2:]), np.repeat(store.labels.astype(np.int64), 3)


# ---------------------------------------------------------------- linear SVM


@dataclass
class LinearSvmModel:
    classes: tuple
    pairs: list  # (class a, class b); positive score votes for a
    weights: np.ndarray  # (n_pairs, D)
    bias: np.ndarray  # (n_pairs,)
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)
    C: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.mean.size


class SingleClassError(ValueError):
    pass


def _binary_dual_cd(X, y, C, seed, tol, max_passes):
    """L1-loss linear SVM by dual coordinate descent; X already holds the bias column."""
    n, d = X.shape
    w = np.zeros(d)
    alpha = np.zeros(n)
    qdiag = np.einsum("ij,ij->i", X, X)
    rng = np.random.default_rng(seed)
    for it in range(max_passes):
        order = rng.permutation(n).astype(np.intp)
        pg_max, pg_min = kernels.svm_dual_cd_pass(X, y, w, alpha, order, qdiag, C)
        if pg_max - pg_min < tol:
            return w, it + 1
    log.warning("dual coordinate descent stopped at %d passes without reaching tol %g", max_passes, tol)
    return w, max_passes


def svm_objective(w, b, X, y, C) -> float:
    """Primal objective 0.5 * |[w, b]|^2 + C * sum(hinge)."""
    margins = 1.0 - y * (X @ w + b)
    return 0.5 * float(w @ w + b * b) + C * float(np.maximum(margins, 0.0).sum())


def _standardize_stats(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def svm_train(features, labels, C=1.0, seed=0, tol=1e-4, max_passes=1000, meta=None) -> LinearSvmModel:
    """One-vs-one linear SVMs on standardized features (train-set mean and std)."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != labels.size:
        raise ValueError("features must be (n, D) with one label per row")
    classes = tuple(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise SingleClassError("SVM training needs at least two classes")
    # stored in float32, so keep the in-memory model identical to a reloaded one
    mean, std = (a.astype(np.float32).astype(np.float64) for a in _standardize_stats(X))
    Xs = np.empty((X.shape[0], X.shape[1] + 1))
    Xs[:, :-1] = (X - mean) / std
    Xs[:, -1] = 1.0
    pairs = list(combinations(classes, 2))
    W = np.empty((len(pairs), X.shape[1]))
    b = np.empty(len(pairs))
    for k, (ca, cb) in enumerate(pairs):
        idx = np.flatnonzero((labels == ca) | (labels == cb))
        y = np.where(labels[idx] == ca, 1.0, -1.0)
        w, passes = _binary_dual_cd(np.ascontiguousarray(Xs[idx]), y, C, [seed, k], tol, max_passes)
        W[k], b[k] = w[:-1], w[-1]
        log.debug("pair %s/%s converged in %d passes", ca, cb, passes)
    W = W.astype(np.float32).astype(np.float64)
    b = b.astype(np.float32).astype(np.float64)
    return LinearSvmModel(classes, pairs, W, b, mean, std, float(C), dict(meta or {}))


def svm_pair_votes(model: LinearSvmModel, features, n_classes=6) -> np.ndarray:
    """``(n, n_classes)`` one-vs-one vote counts for each feature row."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ValueError(f"model expects {model.dim} features, got {X.shape[1]}")
    scores = ((X - model.mean) / model.std) @ model.weights.T + model.bias
    votes = np.zeros((X.shape[0], n_classes), dtype=np.int64)
    for k, (ca, cb) in enumerate(model.pairs):
        pos = scores[:, k] > 0
        votes[:, ca] += pos
        votes[:, cb] += ~pos
    return votes


def svm_predict(model: LinearSvmModel, features) -> np.ndarray:
    """Per-row label by one-vs-one voting; lowest index wins ties."""
    return np.argmax(svm_pair_votes(model, features), axis=1)


def majority_vote(patch_labels, pair_votes, n_classes=6) -> int:
    """Most frequent patch label; ties go to the larger total pairwise vote, then lowest index."""
    counts = np.bincount(np.asarray(patch_labels), minlength=n_classes)
    totals = np.asarray(pair_votes).sum(axis=0)
    tied = np.flatnonzero(counts == counts.max())
    best = tied[totals[tied] == totals[tied].max()]
    return int(best[0])


def svm_predict_vote(model: LinearSvmModel, volume, record, extractor=intensity_features,
                     n_patches=N_VOTE_PATCHES) -> int:
    scale = model.meta.get("scale", SVM_SCALE)
    feats = np.stack([extractor(p) for p in vote_patches(volume, record, n_patches, scale)])
    votes = svm_pair_votes(model, feats)
    return majority_vote(np.argmax(votes, axis=1), votes)


def save_svm(model: LinearSvmModel, path) -> None:
    tensors = {
        "weights": model.weights,
        "bias": model.bias,
        "mean": model.mean,
        "std": model.std,
        "pairs": np.asarray(model.pairs, dtype=np.float32).reshape(-1, 2),
    }
    meta = {"classes": list(model.classes), "C": model.C, **model.meta}
    write_container(path, SVM_MAGIC, tensors, scales=(model.meta.get("scale", SVM_SCALE),), meta=meta)


def load_svm(path) -> LinearSvmModel:
    t, _, meta = read_container(path, SVM_MAGIC)
    classes = tuple(meta.pop("classes"))
    C = meta.pop("C")
    pairs = [tuple(int(v) for v in p) for p in t["pairs"]]
    f64 = {k: t[k].astype(np.float64) for k in ("weights", "bias", "mean", "std")}
    return LinearSvmModel(classes, pairs, f64["weights"], f64["bias"], f64["mean"], f64["std"], C, meta)


# ---------------------------------------------------------------- K-means features


@dataclass
class KmeansCodebook:
    centroids: np.ndarray  # (k, rf * rf), unit rows, in whitened space
    whiten_mean: np.ndarray  # (rf * rf,)
    whiten_matrix: np.ndarray  # (rf * rf, rf * rf)
    rf: int = 12
    norm_eps: float = 10.0 / 255.0**2
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return 4 * self.k


def normalize_windows(w, eps):
    """Per-window brightness and contrast normalization."""
    w = w - w.mean(axis=1, keepdims=True)
    return w / np.sqrt(w.var(axis=1, keepdims=True) + eps)


def zca_fit(x, reg=0.01):
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    return mean, (evecs / np.sqrt(evals + reg)) @ evecs.T


def whiten(codebook: KmeansCodebook, windows):
    x = normalize_windows(np.asarray(windows, dtype=np.float64), codebook.norm_eps)
    return (x - codebook.whiten_mean) @ codebook.whiten_matrix


def random_windows(patches, n, rf, rng):
    patches = np.asarray(patches)
    idx = rng.integers(patches.shape[0], size=n)
    r = rng.integers(patches.shape[1] - rf + 1, size=n)
    c = rng.integers(patches.shape[2] - rf + 1, size=n)
    out = np.empty((n, rf * rf))
    for i in range(n):
        out[i] = patches[idx[i], r[i]:r[i] + rf, c[i]:c[i] + rf].reshape(-1)
    return out


def _best_projection(x, d, chunk=8192):
    """Index and value of the centroid with the largest |d . x| for each row."""
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    val = np.empty(n)
    for i in range(0, n, chunk):
        proj = x[i:i + chunk] @ d.T
        j = np.argmax(np.abs(proj), axis=1)
        idx[i:i + chunk] = j
        val[i:i + chunk] = proj[np.arange(j.size), j]
    return idx, val


def spherical_kmeans(x, k, iterations=10, seed=0, history=None):
    """Gain-shape K-means: each point is coded by its best-aligned unit centroid.

    The update ``d_j <- normalize(sum_i s_i x_i + d_j)`` over the points with
    code ``s_i = d_j . x_i`` never decreases the captured energy, so the
    reconstruction objective ``sum(|x|^2 - s^2)`` is non-increasing.
    """
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(k, x.shape[1]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    energy = float((x * x).sum())
    for _ in range(iterations):
        idx, s = _best_projection(x, d)
        if history is not None:
            history.append(energy - float(s @ s))
        upd = np.zeros_like(d)
        np.add.at(upd, idx, s[:, None] * x)
        d = upd + d
        d /= np.linalg.norm(d, axis=1, keepdims=True)
    if history is not None:
        _, s = _best_projection(x, d)
        history.append(energy - float(s @ s))
    return d


def kmeans_learn_codebook(patches, seed, k=1600, rf=12, n_windows=50000, iterations=10,
                          zca_reg=0.01, history=None) -> KmeansCodebook:
    """Learn a whitened spherical K-means codebook from random ``rf x rf`` sub-windows."""
    patches = np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (PATCH_SIDE, PATCH_SIDE):
        raise ValueError(f"expected (n, {PATCH_SIDE}, {PATCH_SIDE}) patches, got {patches.shape}")
    if patches.shape[0] < k:
        raise ValueError(f"need at least {k} patches for {k} centroids, got {patches.shape[0]}")
    rng = np.random.default_rng(seed)
    eps = 10.0 / 255.0**2
    x = normalize_windows(random_windows(patches, n_windows, rf, rng), eps)
    mean, P = zca_fit(x, zca_reg)
    mean = mean.astype(np.float32).astype(np.float64)
    P = P.astype(np.float32).astype(np.float64)
    xw = (x - mean) @ P
    d = spherical_kmeans(xw, k, iterations, int(rng.integers(2**31)), history)
    # stored as float32; keep the in-memory copy identical to a reloaded one
    d = d.astype(np.float32).astype(np.float64)
    meta = {"seed": seed, "n_windows": n_windows, "iterations": iterations, "zca_reg": zca_reg}
    return KmeansCodebook(d, mean, P, rf, eps, meta)


def _all_windows(patch, rf):
    v = np.lib.stride_tricks.sliding_window_view(np.asarray(patch, dtype=np.float64), (rf, rf))
    return v.reshape(-1, rf * rf), v.shape[0]


def kmeans_encode(codebook: KmeansCodebook, patch) -> np.ndarray:
    """Triangle-activation features sum-pooled over the 2x2 quadrants (4k values)."""
    patch = _check_patch(patch)
    win, n = _all_windows(patch, codebook.rf)
    z = whiten(codebook, win)
    c = codebook.centroids
    d2 = (z * z).sum(1)[:, None] - 2.0 * (z @ c.T) + (c * c).sum(1)[None, :]
    dist = np.sqrt(np.maximum(d2, 0.0))
    act = np.maximum(0.0, dist.mean(axis=1, keepdims=True) - dist).reshape(n, n, -1)
    h = (n + 1) // 2
    quads = [act[:h, :h], act[:h, h:], act[h:, :h], act[h:, h:]]
    return np.concatenate([q.sum(axis=(0, 1)) for q in quads])


def save_codebook(cb: KmeansCodebook, path) -> None:
    tensors = {"centroids": cb.centroids, "whiten_mean": cb.whiten_mean, "whiten_matrix": cb.whiten_matrix}
    meta = {"rf": cb.rf, "norm_eps": cb.norm_eps, **cb.meta}
    write_container(path, KMEANS_MAGIC, tensors, meta=meta)


def load_codebook(path) -> KmeansCodebook:
    t, _, meta = read_container(path, KMEANS_MAGIC)
    rf = meta.pop("rf")
    eps = meta.pop("norm_eps")
    return KmeansCodebook(t["centroids"].astype(np.float64), t["whiten_mean"].astype(np.float64),
                          t["whiten_matrix"].astype(np.float64), rf, eps, meta)
