"""Diagnostics: feature compactness, loss-update correlation and attention clustering."""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Registry
from .errors import ContractError, DegenerateInputError
from .teachers import FeatureFile, write_features
from .vit import TokenSet


@dataclass
class FeatureMatrix:
    values: np.ndarray
    source: str = ""
    dataset: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise ContractError("feature matrix needs shape (n >= 2, d)")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("feature matrix has non-finite entries")


def features_from_file(ff: FeatureFile, pool: str = "patch", prefix: str | None = None,
                       source: str = "") -> FeatureMatrix:
    """Stack features from a DUNEFEAT file: patch tokens, CLS tokens, or both."""
    if pool not in ("patch", "cls", "all"):
        raise ContractError(f"pool must be patch, cls or all, got {pool!r}")
    rows = []
    for image_id, (cls, patches) in ff.records.items():
        if prefix is not None and not image_id.startswith(prefix):
            continue
        if pool in ("cls", "all"):
            rows.append(cls[None].astype(np.float64))
        if pool in ("patch", "all"):
            rows.append(patches.astype(np.float64))
    if not rows:
        raise ContractError("no feature records selected")
    return FeatureMatrix(np.concatenate(rows), source, prefix or "")


def covariance(x: np.ndarray) -> np.ndarray:
    """Column-centred sample covariance with 1/(n-1) normalisation."""
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (x.shape[0] - 1)


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted descending.

    Sweeps stop once the off-diagonal Frobenius norm falls below ``tol`` times
    the Frobenius norm of the input.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractError("jacobi_eigenvalues needs a square matrix")
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p].copy(), a[q].copy()
                a[p], a[q] = c * rp - s * rq, s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * cp - s * cq, s * cp + c * cq
    else:
        warnings.warn("Jacobi iteration did not converge", RuntimeWarning, stacklevel=2)
    return np.sort(np.diag(a))[::-1]


def explained_variance_curve(features) -> np.ndarray:
    """Cumulative fraction of variance captured by the leading principal components."""
    f = features.values if isinstance(features, FeatureMatrix) else FeatureMatrix(features).values
    n, d = f.shape
    if n <= d:
        warnings.warn(f"only {n} samples for {d} dimensions", RuntimeWarning, stacklevel=2)
    lam = np.clip(jacobi_eigenvalues(covariance(f)), 0.0, None)
    total = lam.sum()
    if not total > 0.0:
        raise DegenerateInputError("features have zero total variance")
    return np.cumsum(lam) / total


@dataclass
class LossHistory:
    steps: np.ndarray
    losses: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.losses.values()} | {len(self.steps)}
        if len(lengths) > 1:
            raise ContractError("loss sequences have different lengths")


def read_loss_history(path) -> LossHistory:
    """Per-teacher (cosine + smooth-l1) losses from a training-log CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        teachers = [c[:-4] for c in cols if c.endswith("_cos")]
        steps, vals = [], {t: [] for t in teachers}
        for row in reader:
            steps.append(int(row["step"]))
            for t in teachers:
                vals[t].append(float(row[f"{t}_cos"]) + float(row[f"{t}_sl1"]))
    return LossHistory(np.array(steps), {t: np.array(v) for t, v in vals.items()})


def loss_update_correlation(history: LossHistory, teacher_a: str, teacher_b: str) -> float:
    """Pearson r between the per-step loss changes of two teachers."""
    for t in (teacher_a, teacher_b):
        if t not in history.losses:
            raise ContractError(f"unknown teacher {t!r} in loss history")
    la, lb = history.losses[teacher_a], history.losses[teacher_b]
    if len(la) < 3:
        raise ContractError("loss-update correlation needs at least 3 steps")
    da, db = np.diff(la), np.diff(lb)
    da = da - da.mean()
    db = db - db.mean()
    va, vb = np.dot(da, da), np.dot(db, db)
    if va == 0.0 or vb == 0.0:
        raise DegenerateInputError("a loss-delta sequence has zero variance")
    return float(np.clip(np.dot(da, db) / np.sqrt(va * vb), -1.0, 1.0))


def correlation_table(history: LossHistory) -> list[tuple[str, str, float]]:
    return [
        (a, b, loss_update_correlation(history, a, b))
        for a, b in itertools.combinations(history.losses, 2)
    ]


@dataclass
class KMedoidsResult:
    medoids: np.ndarray
    labels: np.ndarray  # index into ``medoids`` per point
    cost: float
    history: list[float]
    iterations: int


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def kmedoids(x: np.ndarray, k: int, max_iters: int = 100, rng=None) -> KMedoidsResult:
    """Alternating k-medoids: assign to the nearest medoid, then move each medoid to
    the member minimising total in-cluster distance. Stops when medoids stop changing.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    n = x.shape[0]
    if k <= 0 or k > n:
        raise ContractError(f"k must be in [1, {n}], got {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = pairwise_distances(x)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    labels = np.argmin(dist[:, medoids], axis=1)
    cost = float(dist[np.arange(n), medoids[labels]].sum())
    history = [cost]
    it = 0
    for it in range(1, max_iters + 1):
        new = medoids.copy()
        for j in range(k):
            members = np.flatnonzero(labels == j)
            if members.size == 0:
                continue
            within = dist[np.ix_(members, members)].sum(axis=1)
            best = members[int(np.argmin(within))]
            current = within[members == medoids[j]]
            if current.size and current[0] <= within.min():
                best = medoids[j]
            new[j] = best
        if np.array_equal(new, medoids):
            break
        medoids = new
        labels = np.argmin(dist[:, medoids], axis=1)
        cost = float(dist[np.arange(n), medoids[labels]].sum())
        history.append(cost)
    return KMedoidsResult(medoids, labels, cost, history, it)


def kmedoids_attention(maps, k: int = 9, max_iters: int = 100, rng=None) -> KMedoidsResult:
    """Cluster flattened attention maps (one row per query patch) with k-medoids."""
    maps = np.asarray(maps, dtype=np.float64)
    return kmedoids(maps.reshape(maps.shape[0], -1), k, max_iters, rng)


def patch_attention_maps(probs: np.ndarray) -> np.ndarray:
    """Head-averaged patch-to-patch attention, one flattened map per query patch.

    ``probs`` is (B, heads, HW+1, HW+1); the result is (B*HW, HW).
    """
    avg = probs.mean(axis=1)[:, 1:, 1:]
    return avg.reshape(-1, avg.shape[-1])


def dump_features(
    producer: Callable[[np.ndarray, list[str]], TokenSet],
    registry: Registry,
    dataset_ids: Sequence[str],
    path,
    batch_size: int = 32,
) -> int:
    """Run ``producer`` over every image of the given datasets and write a DUNEFEAT file."""
    records = []
    width = grid = None
    for ds in dataset_ids:
        n = registry.size(ds)
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            ids = [registry.image_id(ds, i) for i in idx]
            images = np.stack([registry.pixels(ds, i) for i in idx])
            out = producer(images, ids)
            width, grid = out.width, out.grid
            data = out.tokens.data
            for j, image_id in enumerate(ids):
                records.append((image_id, data[j, 0], data[j, 1:]))
    if width is None:
        raise ContractError("no images to dump")
    try:
        return write_features(Path(path), width, grid, records)
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def write_rows(path_or_file, header: Sequence[str], rows) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)
