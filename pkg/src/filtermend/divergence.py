"""Per-filter domain divergence: histogram KL scores and the proxy A-distance."""
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError, FilterMendError

log = logging.getLogger(__name__)

DEFAULT_BINS = 64
DEFAULT_SMOOTHING = 1.0


@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    probs: np.ndarray

    @property
    def n_bins(self):
        return self.probs.shape[0]


@dataclass(eq=False)
class DivergenceReport:
    kl: np.ndarray
    a_distance: np.ndarray
    n_source_samples: int
    n_target_samples: int
    edges: np.ndarray  # (n_filters, bins + 1), shared source/target edges
    degenerate: np.ndarray = field(default=None)  # zero-variance on both domains

    @property
    def n_filters(self):
        return self.kl.shape[0]

    def rows(self):
        for j in range(self.n_filters):
            yield j, float(self.kl[j]), float(self.a_distance[j])


def shared_edges(values_a, values_b, bins=DEFAULT_BINS):
    """Equal-width edges spanning the combined range of two samples."""
    lo = min(float(np.min(values_a)), float(np.min(values_b)))
    hi = max(float(np.max(values_a)), float(np.max(values_b)))
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, int(bins) + 1)


def build_histogram(samples, edges, smoothing=DEFAULT_SMOOTHING):
    """Additively smoothed histogram; out-of-range values clamp to the end bins."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    edges = np.asarray(edges, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot build a histogram from an empty sample")
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly ascending sequence of length >= 2")
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    counts = kernels.bin_counts(samples, edges)
    n_bins = edges.size - 1
    probs = (counts + smoothing) / (samples.size + n_bins * smoothing)
    return Histogram(edges, probs)


def kl_divergence(p_target, p_source):
    """Natural-log KL(P_T || P_S) between two histograms on identical edges."""
    if p_target.bin_edges.shape != p_source.bin_edges.shape or not np.array_equal(
        p_target.bin_edges, p_source.bin_edges
    ):
        raise ValueError("histograms were built on different bin edges")
    pt, ps = p_target.probs, p_source.probs
    support = pt > 0
    if np.any(ps[support] <= 0):
        raise ValueError("source histogram has empty bins where the target has mass; use smoothing > 0")
    value = float(np.sum(pt[support] * np.log(pt[support] / ps[support])))
    return max(value, 0.0)


def filter_kl_scores(source, target, bins=DEFAULT_BINS, smoothing=DEFAULT_SMOOTHING):
    """KL(target || source) for every filter column of two sample matrices."""
    src = np.asarray(getattr(source, "values", source), dtype=np.float64)
    tgt = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2:
        raise DimensionError("expected 2-D sample matrices", axis="ndim")
    if src.shape[1] != tgt.shape[1]:
        raise DimensionError(
            f"source has {src.shape[1]} filters, target has {tgt.shape[1]}", axis="filters"
        )
    p = src.shape[1]
    kl = np.zeros(p)
    edges = np.empty((p, int(bins) + 1))
    degenerate = np.zeros(p, dtype=bool)
    for j in range(p):
        s, t = src[:, j], tgt[:, j]
        edges[j] = shared_edges(s, t, bins)
        if np.ptp(s) == 0 and np.ptp(t) == 0:
            degenerate[j] = True
            log.warning("filter %d has zero variance on both domains; KL recorded as 0", j)
            continue
        kl[j] = kl_divergence(build_histogram(t, edges[j], smoothing), build_histogram(s, edges[j], smoothing))
    return DivergenceReport(
        kl=kl,
        a_distance=np.full(p, np.nan),
        n_source_samples=src.shape[0],
        n_target_samples=tgt.shape[0],
        edges=edges,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# proxy A-distance
# ---------------------------------------------------------------------------

MIN_A_DISTANCE_SAMPLES = 4


def _split(n, seed):
    # depends only on (n, seed) so relabelling the domains keeps each split
    perm = np.random.default_rng([seed, n]).permutation(n)
    half = n // 2
    return perm[:half], perm[half:]


def train_linear_hinge(X, y, sample_weight, C=1.0, epochs=200, lr=1.0):
    """Full-batch subgradient descent on an L2-regularised weighted hinge loss.

    Minimises ``|w|^2 / (2 C n) + mean_i s_i max(0, 1 - t_i (w.x_i + b))``
    with ``t_i = 2 y_i - 1`` and returns the best iterate seen.
    """
    n, d = X.shape
    t = 2.0 * y - 1.0
    w = np.zeros(d)
    b = 0.0
    reg = 1.0 / (C * n)
    best = (np.inf, w.copy(), b)
    for epoch in range(1, epochs + 1):
        margin = t * (X @ w + b)
        viol = margin < 1.0
        loss = 0.5 * reg * (w @ w) + np.mean(sample_weight * np.maximum(0.0, 1.0 - margin))
        if loss < best[0]:
            best = (loss, w.copy(), b)
        coef = np.where(viol, -t * sample_weight, 0.0) / n
        gw = reg * w + X.T @ coef
        gb = coef.sum()
        step = lr / np.sqrt(epoch)
        w = w - step * gw
        b = b - step * gb
    margin = t * (X @ w + b)
    loss = 0.5 * reg * (w @ w) + np.mean(sample_weight * np.maximum(0.0, 1.0 - margin))
    if loss < best[0]:
        best = (loss, w.copy(), b)
    return best[1], best[2]


def a_distance(source, target, C=1.0, epochs=200, seed=0):
    """Proxy A-distance ``2 (1 - 2 eps)`` from a held-out linear discriminator.

    ``eps`` is the balanced test error of a hinge-loss classifier separating
    source (label 0) from target (label 1) trained on half of each domain.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.ndim == 1:
        src = src[:, None]
    if tgt.ndim == 1:
        tgt = tgt[:, None]
    if src.shape[0] < MIN_A_DISTANCE_SAMPLES or tgt.shape[0] < MIN_A_DISTANCE_SAMPLES:
        raise FilterMendError(
            f"a_distance needs >= {MIN_A_DISTANCE_SAMPLES} vectors per domain, "
            f"got {src.shape[0]} and {tgt.shape[0]}"
        )
    if src.shape[1] != tgt.shape[1]:
        raise DimensionError("source and target feature lengths differ", axis="features")
    s_tr, s_te = _split(src.shape[0], seed)
    t_tr, t_te = _split(tgt.shape[0], seed)
    X_tr = np.vstack([src[s_tr], tgt[t_tr]])
    y_tr = np.concatenate([np.zeros(s_tr.size), np.ones(t_tr.size)])
    mu = X_tr.mean(axis=0)
    sd = X_tr.std(axis=0)
    sd[sd == 0] = 1.0
    X_tr = (X_tr - mu) / sd
    n_tr = y_tr.size
    weights = np.where(y_tr == 0, n_tr / (2.0 * s_tr.size), n_tr / (2.0 * t_tr.size))
    w, b = train_linear_hinge(X_tr, y_tr, weights, C=C, epochs=epochs)
    err_s = np.mean(((src[s_te] - mu) / sd) @ w + b > 0)
    err_t = np.mean(((tgt[t_te] - mu) / sd) @ w + b <= 0)
    eps = 0.5 * (err_s + err_t)
    return float(2.0 * (1.0 - 2.0 * eps))


def per_image_features(responses, j):
    """Filter ``j``'s maps flattened to one feature vector per image."""
    data = getattr(responses, "data", responses)
    return np.asarray(data[:, j]).reshape(data.shape[0], -1)


def filter_a_distances(source_resp, target_resp, C=1.0, epochs=200, seed=0):
    n_f = source_resp.data.shape[1]
    return np.array(
        [
            a_distance(per_image_features(source_resp, j), per_image_features(target_resp, j), C, epochs, seed)
            for j in range(n_f)
        ]
    )


def pca_projection(source, target, n_components=2):
    """Project both domains onto the top principal axes of their union."""
    pooled = np.vstack([source, target])
    mean = pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(pooled - mean, full_matrices=False)
    axes = vt[:n_components]
    # fix the sign of each axis so the output is deterministic
    signs = np.sign(axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)])
    signs[signs == 0] = 1.0
    axes = axes * signs[:, None]
    proj_s = (source - mean) @ axes.T
    proj_t = (target - mean) @ axes.T
    if axes.shape[0] < n_components:
        pad = n_components - axes.shape[0]
        proj_s = np.hstack([proj_s, np.zeros((proj_s.shape[0], pad))])
        proj_t = np.hstack([proj_t, np.zeros((proj_t.shape[0], pad))])
    return proj_s, proj_t


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filter", "kl", "a_distance", "n_src", "n_tgt"])
        for j, kl, ad in report.rows():
            writer.writerow(
                [j, f"{kl:.6f}", f"{ad:.6f}", report.n_source_samples, report.n_target_samples]
            )
