"""Exact t-SNE for small embedding sets, with TSV and SVG writers."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .volume import LABELS


class DegenerateInputError(ValueError):
    """All input points coincide; there is no structure to embed."""


@dataclass
class EmbeddingResult:
    points: np.ndarray  # (n, 2)
    labels: list
    ids: list
    kl: float


def _sq_dists(x):
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d2, perplexity, tol=1e-5, max_iter=200):
    """Row-wise Gaussian affinities whose entropy matches log(perplexity) (bisection on beta)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()  # shift for stability; cancels in the normalization
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p = np.exp(-di * beta)
            sp = p.sum()
            h = np.log(sp) + beta * float(di @ p) / sp
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        P[i, np.arange(n) != i] = p / sp
    return P


def _kl_and_grad(P, Y):
    d2 = _sq_dists(Y)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    kl = float(np.sum(P * np.log(P / Q)))
    W = (P - Q) * num
    grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
    return kl, grad


def kl_divergence(P, Y):
    return _kl_and_grad(P, Y)[0]


def tsne_embed(features, perplexity=30.0, iterations=1000, seed=0, labels=None, ids=None,
               learning_rate=200.0, exaggeration=12.0, exaggeration_iters=250, momentum_switch=250,
               final_descent=200, history=None) -> EmbeddingResult:
    """Embed ``features`` (n x d) in 2-D.

    Momentum gradient descent with per-coordinate gains runs until the last
    ``final_descent`` iterations, which use plain gradient steps with a
    halving step size so the KL divergence never increases.
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or n < 5:
        raise ValueError("t-SNE needs at least 5 points in an (n, d) array")
    if not perplexity < n / 3:
        raise ValueError(f"perplexity {perplexity} must be below n/3 = {n / 3:.1f}")
    if np.ptp(X, axis=0).max() == 0.0:
        raise DegenerateInputError("all input points are identical")
    d2 = _sq_dists(X)
    P = conditional_probabilities(d2, perplexity)
    P = np.maximum((P + P.T) / (2.0 * n), 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    vel = np.zeros_like(Y)
    gains = np.ones_like(Y)
    n_momentum = max(iterations - final_descent, 0)
    for it in range(n_momentum):
        Pe = P * exaggeration if it < exaggeration_iters else P
        kl, grad = _kl_and_grad(Pe, Y)
        mom = 0.5 if it < momentum_switch else 0.8
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        vel = mom * vel - learning_rate * gains * grad
        Y = Y + vel
        Y -= Y.mean(axis=0)
        if history is not None:
            history.append(kl_divergence(P, Y))

    kl, grad = _kl_and_grad(P, Y)
    step = learning_rate
    for _ in range(iterations - n_momentum):
        while step > 1e-12:
            cand = Y - step * grad
            kl_new, grad_new = _kl_and_grad(P, cand)
            if kl_new <= kl:
                Y, kl, grad = cand, kl_new, grad_new
                step *= 1.2
                break
            step *= 0.5
        if history is not None:
            history.append(kl)
    labels = list(labels) if labels is not None else [None] * n
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    return EmbeddingResult(Y, labels, ids, kl)


# ---------------------------------------------------------------- output

CLASS_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")


def write_embedding_tsv(res: EmbeddingResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("id\tx\ty\tlabel\n")
        for nid, (x, y), lab in zip(res.ids, res.points, res.labels):
            name = LABELS[lab] if isinstance(lab, (int, np.integer)) and lab < len(LABELS) else lab
            fh.write(f"{nid}\t{x!r}\t{y!r}\t{'' if name is None else name}\n")


def write_embedding_svg(res: EmbeddingResult, path, size=600, margin=40) -> None:
    """Scatter plot with one color per class and a legend."""
    pts = res.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = margin + (pts - lo) / span * (size - 2 * margin)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size}" '
           f'viewBox="0 0 {size + 160} {size}">',
           f'<rect width="{size + 160}" height="{size}" fill="white"/>']
    for (x, y), lab, nid in zip(xy, res.labels, res.ids):
        c = CLASS_COLORS[int(lab) % len(CLASS_COLORS)] if lab is not None else "#000000"
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="4" fill="{c}" fill-opacity="0.8">'
                   f'<title>{escape(str(nid))}</title></circle>')
    present = sorted({int(lab) for lab in res.labels if lab is not None})
    for row, lab in enumerate(present):
        y = margin + 20 * row
        name = LABELS[lab] if lab < len(LABELS) else "not-a-nodule"
        out.append(f'<circle cx="{size + 15}" cy="{y}" r="5" fill="{CLASS_COLORS[lab % len(CLASS_COLORS)]}"/>')
        out.append(f'<text x="{size + 27}" y="{y + 4}" font-family="sans-serif" font-size="12">'
                   f'{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
