"""K-means and Birch clustering over flattened scaled sample windows.

Both estimators follow the sklearn fit/predict surface but are implemented
here: K-means as Lloyd iterations with a recorded objective trace and
deterministic seeding, Birch as single-pass clustering-feature insertion with
a merge-radius threshold and an agglomerative reduction to at most the
requested number of final clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DimensionMismatch, TooFewSamples


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D sample matrix, got shape {X.shape}")
    return X


def _squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, [n_samples, n_centers]."""
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


class KMeans(BaseEstimator):
    """Lloyd's algorithm with k-means++ (default) or uniform seeding.

    Fitted attributes: cluster_centers_, labels_, inertia_, n_iter_ and
    inertia_history_ (the objective after every assignment step, which is
    non-increasing). Empty clusters are re-seeded from the point farthest
    from its assigned centroid. ``n_init`` restarts keep the best objective.
    """

    def __init__(self, n_clusters=8, init="kmeans++", n_init=1, max_iter=300,
                 tol=0.0, seed=0):
        self.n_clusters = n_clusters
        self.init = init
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def fit(self, X, y=None):
        X = _as_matrix(X)
        if X.shape[0] < self.n_clusters:
            raise TooFewSamples(
                f"{X.shape[0]} samples cannot form {self.n_clusters} clusters"
            )
        best = None
        for run in range(self.n_init):
            rng = np.random.default_rng([self.seed, run])
            result = self._fit_once(X, rng)
            if best is None or result["inertia"] < best["inertia"]:
                best = result
        self.cluster_centers_ = best["centers"]
        self.labels_ = best["labels"]
        self.inertia_ = best["inertia"]
        self.n_iter_ = best["n_iter"]
        self.inertia_history_ = best["history"]
        return self

    def _init_centers(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        if self.init == "random":
            return X[rng.choice(n, size=self.n_clusters, replace=False)].copy()
        if self.init != "kmeans++":
            raise ValueError(f"unknown init {self.init!r}")
        centers = np.empty((self.n_clusters, X.shape[1]))
        centers[0] = X[rng.integers(n)]
        closest = _squared_distances(X, centers[:1]).ravel()
        for k in range(1, self.n_clusters):
            total = closest.sum()
            if total == 0.0:
                centers[k] = X[rng.integers(n)]
                continue
            probs = closest / total
            centers[k] = X[rng.choice(n, p=probs)]
            closest = np.minimum(closest, _squared_distances(X, centers[k : k + 1]).ravel())
        return centers

    def _fit_once(self, X: np.ndarray, rng: np.random.Generator) -> dict:
        centers = self._init_centers(X, rng)
        history: list[float] = []
        labels = None
        n_updates = 0
        for _ in range(self.max_iter):
            d2 = _squared_distances(X, centers)
            new_labels = np.argmin(d2, axis=1)  # ties break to the lowest id
            history.append(float(d2[np.arange(len(X)), new_labels].sum()))
            if labels is not None and np.array_equal(labels, new_labels):
                break
            labels = new_labels
            old_centers = centers
            centers = self._update_centers(X, labels, centers, d2)
            n_updates += 1
            shift = float(np.max(np.linalg.norm(centers - old_centers, axis=1)))
            if shift <= self.tol:
                d2 = _squared_distances(X, centers)
                labels = np.argmin(d2, axis=1)
                history.append(float(d2[np.arange(len(X)), labels].sum()))
                break
        else:
            d2 = _squared_distances(X, centers)
            labels = np.argmin(d2, axis=1)
            history.append(float(d2[np.arange(len(X)), labels].sum()))
        return {
            "centers": centers,
            "labels": labels,
            "inertia": history[-1],
            "n_iter": n_updates,
            "history": history,
        }

    def _update_centers(self, X, labels, centers, d2) -> np.ndarray:
        new_centers = centers.copy()
        for k in range(self.n_clusters):
            members = labels == k
            if members.any():
                new_centers[k] = X[members].mean(axis=0)
        empty = [k for k in range(self.n_clusters) if not np.any(labels == k)]
        if empty:
            # farthest points (from their own centroid), one per empty cluster
            own = d2[np.arange(len(X)), labels]
            order = np.argsort(-own, kind="stable")
            for k, idx in zip(empty, order):
                new_centers[k] = X[idx]
        return new_centers

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("KMeans is not fitted")
        X = _as_matrix(X)
        if X.shape[1] != self.cluster_centers_.shape[1]:
            raise DimensionMismatch(
                f"sample dim {X.shape[1]} != centroid dim {self.cluster_centers_.shape[1]}"
            )
        return np.argmin(_squared_distances(X, self.cluster_centers_), axis=1)

    def assign(self, sample) -> int:
        """Cluster id for one flattened sample (ties go to the lowest id)."""
        return int(self.predict(np.asarray(sample).reshape(1, -1))[0])

    def to_dict(self) -> dict:
        return {
            "kind": "kmeans",
            "n_clusters": self.n_clusters,
            "init": self.init,
            "n_init": self.n_init,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "seed": self.seed,
            "cluster_centers": self.cluster_centers_.tolist(),
            "inertia": self.inertia_,
            "n_iter": self.n_iter_,
            "inertia_history": self.inertia_history_,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "KMeans":
        model = cls(
            n_clusters=payload["n_clusters"],
            init=payload["init"],
            n_init=payload["n_init"],
            max_iter=payload["max_iter"],
            tol=payload["tol"],
            seed=payload["seed"],
        )
        model.cluster_centers_ = np.array(payload["cluster_centers"], dtype=np.float64)
        model.inertia_ = payload["inertia"]
        model.n_iter_ = payload["n_iter"]
        model.inertia_history_ = list(payload["inertia_history"])
        model.labels_ = None
        return model


@dataclass
class CFEntry:
    """Clustering feature: point count, linear sum and scalar squared sum."""

    n: int
    linear_sum: np.ndarray
    squared_sum: float

    @property
    def centroid(self) -> np.ndarray:
        return self.linear_sum / self.n

    @property
    def radius(self) -> float:
        mean_sq = self.squared_sum / self.n
        centroid = self.centroid
        return float(np.sqrt(max(0.0, mean_sq - centroid @ centroid)))

    def merged(self, other: "CFEntry") -> "CFEntry":
        return CFEntry(
            self.n + other.n,
            self.linear_sum + other.linear_sum,
            self.squared_sum + other.squared_sum,
        )


class Birch(BaseEstimator):
    """Single-pass CF-list clustering with a merge-radius threshold.

    Each point joins its nearest clustering-feature entry if the merged
    entry's radius stays within ``threshold``, otherwise it starts a new
    entry. Entries are then agglomeratively merged (nearest centroid pairs)
    down to at most ``n_clusters`` final centroids; fewer entries than
    requested clusters means the final count is reduced, which
    ``reduced_`` records.
    """

    def __init__(self, threshold=0.1, n_clusters=10):
        self.threshold = threshold
        self.n_clusters = n_clusters

    def fit(self, X, y=None):
        X = _as_matrix(X)
        if X.shape[0] == 0:
            raise TooFewSamples("cannot fit Birch on zero samples")
        entries: list[CFEntry] = []
        for x in X:
            candidate = CFEntry(1, x.copy(), float(x @ x))
            if not entries:
                entries.append(candidate)
                continue
            centroids = np.array([e.centroid for e in entries])
            nearest = int(np.argmin(((centroids - x) ** 2).sum(axis=1)))
            merged = entries[nearest].merged(candidate)
            if merged.radius <= self.threshold:
                entries[nearest] = merged
            else:
                entries.append(candidate)
        self.cf_entries_ = entries
        final = self._reduce(list(entries))
        self.cluster_centers_ = np.array([e.centroid for e in final])
        self.n_clusters_ = len(final)
        self.reduced_ = self.n_clusters_ < self.n_clusters
        self.labels_ = self.predict(X)
        return self

    def _reduce(self, entries: list[CFEntry]) -> list[CFEntry]:
        while len(entries) > self.n_clusters:
            centroids = np.array([e.centroid for e in entries])
            d2 = _squared_distances(centroids, centroids)
            d2[np.tril_indices(len(entries))] = np.inf
            i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
            entries[i] = entries[i].merged(entries[j])
            del entries[j]
        return entries

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("Birch is not fitted")
        X = _as_matrix(X)
        if X.shape[1] != self.cluster_centers_.shape[1]:
            raise DimensionMismatch(
                f"sample dim {X.shape[1]} != centroid dim {self.cluster_centers_.shape[1]}"
            )
        return np.argmin(_squared_distances(X, self.cluster_centers_), axis=1)

    def assign(self, sample) -> int:
        return int(self.predict(np.asarray(sample).reshape(1, -1))[0])

    def to_dict(self) -> dict:
        return {
            "kind": "birch",
            "threshold": self.threshold,
            "n_clusters": self.n_clusters,
            "cf_entries": [
                {"n": e.n, "linear_sum": e.linear_sum.tolist(), "squared_sum": e.squared_sum}
                for e in self.cf_entries_
            ],
            "cluster_centers": self.cluster_centers_.tolist(),
            "n_clusters_final": self.n_clusters_,
            "reduced": self.reduced_,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Birch":
        model = cls(threshold=payload["threshold"], n_clusters=payload["n_clusters"])
        model.cf_entries_ = [
            CFEntry(e["n"], np.array(e["linear_sum"], dtype=np.float64), e["squared_sum"])
            for e in payload["cf_entries"]
        ]
        model.cluster_centers_ = np.array(payload["cluster_centers"], dtype=np.float64)
        model.n_clusters_ = payload["n_clusters_final"]
        model.reduced_ = payload["reduced"]
        model.labels_ = None
        return model


def load_clusterer(payload: dict):
    if payload.get("kind") == "kmeans":
        return KMeans.from_dict(payload)
    if payload.get("kind") == "birch":
        return Birch.from_dict(payload)
    raise ValueError(f"unknown clusterer kind {payload.get('kind')!r}")


@dataclass
class ClusterAssignment:
    """Sample-to-cluster routing with per-cluster sizes and percentages."""

    labels: np.ndarray
    n_clusters: int
    sizes: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.sizes = {
            k: int(np.sum(self.labels == k)) for k in range(self.n_clusters)
        }

    @property
    def percentages(self) -> dict[int, float]:
        total = len(self.labels)
        return {k: 100.0 * n / total for k, n in self.sizes.items()}


def cluster_report(assignment: ClusterAssignment, per_cluster_eval: dict | None = None) -> list[dict]:
    """Per-cluster size/percentage rows ordered by size descending.

    ``per_cluster_eval`` optionally maps cluster id -> {"mse","rmse","mae"}.
    """
    pct = assignment.percentages
    order = sorted(assignment.sizes, key=lambda k: (-assignment.sizes[k], k))
    rows = []
    cumulative = 0.0
    for k in order:
        cumulative += pct[k]
        row = {
            "cluster": k,
            "size": assignment.sizes[k],
            "percentage": pct[k],
            "cumulative_percentage": cumulative,
        }
        if per_cluster_eval and k in per_cluster_eval:
            row.update({m: per_cluster_eval[k][m] for m in ("mse", "rmse", "mae")})
        rows.append(row)
    return rows


def cluster_report_csv(rows: list[dict]) -> str:
    has_eval = any("mse" in row for row in rows)
    header = ["cluster", "size", "percentage", "cumulative_percentage"]
    if has_eval:
        header += ["mse", "rmse", "mae"]
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row["cluster"]), str(row["size"]),
                 f"{row['percentage']:.6f}", f"{row['cumulative_percentage']:.6f}"]
        if has_eval:
            for m in ("mse", "rmse", "mae"):
                cells.append(repr(row[m]) if m in row else "")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
