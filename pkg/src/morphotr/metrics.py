"""Integration metrics: batch mixing, biological conservation, replicate retrieval, aggregates.

All scores are oriented so that higher is better and lie in [0, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.metrics import adjusted_rand_score, f1_score, normalized_mutual_info_score, silhouette_samples
from sklearn.model_selection import StratifiedKFold, cross_val_predict
from sklearn.neighbors import KNeighborsClassifier, NearestNeighbors

from .dataio import Dataset
from .errors import ConfigError

log = logging.getLogger(__name__)

BATCH_METRICS = ("graph_conn", "silh_batch", "batch_corr_control", "batch_corr_no_control")
BIO_METRICS = ("leiden_nmi", "leiden_ari", "silh_label", "map_control", "map_no_rep")
ALL_METRICS = BATCH_METRICS + BIO_METRICS
AGGREGATES = ("batch_corr", "bio", "overall")


@dataclass
class EmbeddingTable:
    X: np.ndarray
    batch: np.ndarray
    bio: np.ndarray
    compound: np.ndarray
    plate: np.ndarray
    control: np.ndarray
    source: np.ndarray | None = None
    well: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        n = self.X.shape[0]
        for name in ("batch", "bio", "compound", "plate", "control"):
            arr = np.asarray(getattr(self, name))
            if arr.shape[0] != n:
                raise ConfigError(f"label array {name!r} has {arr.shape[0]} entries for {n} samples")
            setattr(self, name, arr)
        self.control = self.control.astype(bool)
        if not np.isfinite(self.X).all():
            raise ConfigError("embedding contains NaN/Inf")

    @classmethod
    def from_dataset(cls, ds: Dataset, X=None, batch_key: str = "source") -> "EmbeddingTable":
        return cls(ds.X if X is None else X, ds.meta[batch_key].to_numpy(), ds.moa, ds.compound, ds.plate,
                   ds.is_control, ds.source, ds.meta["well"].to_numpy())

    def subset(self, mask) -> "EmbeddingTable":
        mask = np.asarray(mask)
        opt = lambda a: None if a is None else a[mask]  # noqa: E731
        return EmbeddingTable(self.X[mask], self.batch[mask], self.bio[mask], self.compound[mask],
                              self.plate[mask], self.control[mask], opt(self.source), opt(self.well))


# --------------------------------------------------------------------------- graph metrics


def knn_graph(X, k: int) -> csr_matrix:
    """Symmetric unweighted k-nearest-neighbour graph (Euclidean, self excluded)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < n_samples ({n}), got {k}")
    nn = NearestNeighbors(n_neighbors=k + 1).fit(X)
    _, ind = nn.kneighbors(X)
    rows, cols = [], []
    for i in range(n):
        nbrs = [j for j in ind[i] if j != i][:k]
        rows.extend([i] * len(nbrs))
        cols.extend(nbrs)
    A = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return ((A + A.T) > 0).astype(np.float64).tocsr()


def graph_connectivity(X, labels, k: int = 15) -> float:
    """Mean over labels of the largest-connected-component fraction of the label's kNN subgraph."""
    labels = np.asarray(labels)
    A = knn_graph(X, k)
    scores = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if idx.size < 2:
            continue
        _, comp = connected_components(A[idx][:, idx], directed=False)
        scores.append(np.bincount(comp).max() / idx.size)
    if not scores:
        raise ConfigError("graph connectivity needs a label with at least 2 samples")
    return float(np.mean(scores))


# --------------------------------------------------------------------------- silhouettes


def silhouette_label(X, labels) -> float:
    labels = np.asarray(labels)
    if not 2 <= np.unique(labels).size < len(labels):
        raise ConfigError("label silhouette needs between 2 and n_samples - 1 labels")
    return float((silhouette_samples(X, labels).mean() + 1.0) / 2.0)


def silhouette_batch(X, batch) -> float:
    """Per-sample ``1 - |s|`` of the silhouette computed on batch labels, averaged."""
    batch = np.asarray(batch)
    n_b = np.unique(batch).size
    if not 2 <= n_b < len(batch):
        raise ConfigError("batch silhouette needs between 2 and n_samples - 1 batches")
    return float(np.mean(1.0 - np.abs(silhouette_samples(X, batch))))


def silhouette_scores(X, batch, labels) -> dict:
    return {"silh_batch": silhouette_batch(X, batch), "silh_label": silhouette_label(X, labels)}


# --------------------------------------------------------------------------- batch classifier


def batch_classifier_score(X, batch, k: int = 15, n_folds: int = 5, seed: int = 0) -> float:
    """``1 - macro F1`` of a cross-validated k-NN batch classifier."""
    X = np.asarray(X, dtype=np.float64)
    batch = np.asarray(batch)
    _, counts = np.unique(batch, return_counts=True)
    if counts.size < 2:
        raise ConfigError("batch classifier needs at least 2 batches")
    if counts.min() < n_folds:
        raise ConfigError(f"a batch has fewer samples ({counts.min()}) than folds ({n_folds})")
    train_size = X.shape[0] - int(np.ceil(X.shape[0] / n_folds))
    clf = KNeighborsClassifier(n_neighbors=min(k, train_size))
    folds = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    pred = cross_val_predict(clf, X, batch, cv=folds)
    return float(1.0 - f1_score(batch, pred, average="macro"))


# --------------------------------------------------------------------------- clustering


def leiden_clusters(X, k: int = 15, resolution: float = 1.0, seed: int = 0) -> np.ndarray:
    import igraph as ig
    import leidenalg

    A = knn_graph(X, k).tocoo()
    keep = A.row < A.col
    g = ig.Graph(n=A.shape[0], edges=list(zip(A.row[keep].tolist(), A.col[keep].tolist())))
    part = leidenalg.find_partition(g, leidenalg.RBConfigurationVertexPartition,
                                    resolution_parameter=resolution, seed=seed)
    return np.asarray(part.membership)


def agreement_scores(clusters, labels) -> dict:
    return {"nmi": float(normalized_mutual_info_score(labels, clusters)),
            "ari": float(adjusted_rand_score(labels, clusters))}


def cluster_agreement(X, labels, k: int = 15, resolution: float = 1.0, seed: int = 0) -> dict:
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ConfigError("cluster agreement needs at least 2 biological labels")
    return agreement_scores(leiden_clusters(X, k, resolution, seed), labels)


# --------------------------------------------------------------------------- retrieval


def average_precision(scores, relevant) -> float:
    """AP of a ranking by descending score; ties rank non-relevant items first."""
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    order = np.lexsort((relevant, -scores))
    hits = relevant[order]
    if not hits.any():
        raise ConfigError("average precision needs at least one relevant item")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


@dataclass
class RetrievalResult:
    value: float
    ap: np.ndarray
    queries: np.ndarray
    n_skipped: int


def replicate_retrieval(X, compound, plate, control, mode: str = "control") -> RetrievalResult:
    """Per-query AP of same-compound replicates against same-plate negatives, by cosine similarity.

    ``mode='control'`` uses the plate's negative-control wells as negatives;
    ``mode='no_rep'`` uses the plate's wells treated with other compounds.
    """
    if mode not in ("control", "no_rep"):
        raise ConfigError(f"unknown retrieval mode {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    compound, plate = np.asarray(compound), np.asarray(plate)
    control = np.asarray(control, dtype=bool)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    U = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    aps, queries, skipped = [], [], 0
    for q in np.flatnonzero(~control):
        pos = (compound == compound[q]) & ~control
        pos[q] = False
        if not pos.any():
            continue
        same_plate = plate == plate[q]
        if mode == "control":
            neg = same_plate & control
        else:
            neg = same_plate & ~control & (compound != compound[q])
        if not neg.any():
            skipped += 1
            continue
        cand = np.flatnonzero(pos | neg)
        aps.append(average_precision(U[cand] @ U[q], pos[cand]))
        queries.append(q)
    if skipped:
        log.info("retrieval (%s): skipped %d queries without admissible negatives", mode, skipped)
    if not aps:
        raise ConfigError("no query has both a replicate and an admissible negative")
    aps = np.asarray(aps)
    return RetrievalResult(float(aps.mean()), aps, np.asarray(queries), skipped)


def mean_average_precision(X, compound, plate, control, mode: str = "control") -> float:
    return replicate_retrieval(X, compound, plate, control, mode).value


# --------------------------------------------------------------------------- reports


@dataclass
class MetricReport:
    method: str
    scores: dict
    batch_corr: float
    bio: float
    overall: float
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"method": self.method}
        out.update({m: self.scores[m] for m in ALL_METRICS})
        out.update({"batch_corr": self.batch_corr, "bio": self.bio, "overall": self.overall})
        return out


def aggregate(scores: dict, method: str = "method") -> MetricReport:
    """Batch aggregate = mean of batch metrics, bio aggregate = mean of bio metrics, overall = their mean."""
    missing = [m for m in ALL_METRICS if m not in scores or scores[m] is None]
    if missing:
        raise ConfigError(f"missing metric(s) {missing}")
    batch_corr = float(np.mean([scores[m] for m in BATCH_METRICS]))
    bio = float(np.mean([scores[m] for m in BIO_METRICS]))
    return MetricReport(method, {m: float(scores[m]) for m in ALL_METRICS}, batch_corr, bio, (batch_corr + bio) / 2)


def evaluate_embedding(table: EmbeddingTable, method: str = "method", k: int = 15, resolution: float = 1.0,
                       seed: int = 0) -> MetricReport:
    X = table.X
    treated = ~table.control
    scores = {
        "graph_conn": graph_connectivity(X, table.bio, k),
        "batch_corr_control": batch_classifier_score(X, table.batch, k, seed=seed),
        "batch_corr_no_control": batch_classifier_score(X[treated], table.batch[treated], k, seed=seed),
    }
    scores.update(silhouette_scores(X, table.batch, table.bio))
    agree = cluster_agreement(X, table.bio, k, resolution, seed)
    scores["leiden_nmi"], scores["leiden_ari"] = agree["nmi"], agree["ari"]
    ctrl = replicate_retrieval(X, table.compound, table.plate, table.control, "control")
    norep = replicate_retrieval(X, table.compound, table.plate, table.control, "no_rep")
    scores["map_control"], scores["map_no_rep"] = ctrl.value, norep.value
    report = aggregate(scores, method)
    report.extras = {"map_control_skipped": ctrl.n_skipped, "map_no_rep_skipped": norep.n_skipped}
    return report


REPORT_FIELDS = ["method", *ALL_METRICS, *AGGREGATES]


def write_reports(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.row().items()})


def read_reports(path) -> list[MetricReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            missing = [f for f in REPORT_FIELDS if f not in row]
            if missing:
                raise ConfigError(f"{path}: missing column(s) {missing}")
            scores = {m: float(row[m]) for m in ALL_METRICS}
            out.append(MetricReport(row["method"], scores, float(row["batch_corr"]), float(row["bio"]),
                                    float(row["overall"])))
    return out


HEADERS = {
    "graph_conn": "GraphConn", "silh_batch": "SilhBatch", "batch_corr_control": "BatchCorr(ctl)",
    "batch_corr_no_control": "BatchCorr(noctl)", "leiden_nmi": "NMI", "leiden_ari": "ARI",
    "silh_label": "SilhLabel", "map_control": "mAP(ctl)", "map_no_rep": "mAP(norep)",
    "batch_corr": "Batch", "bio": "Bio", "overall": "Overall",
}


def format_table(reports: Sequence[MetricReport]) -> str:
    cols = [*ALL_METRICS, *AGGREGATES]
    name_w = max([len("Method")] + [len(r.method) for r in reports])
    widths = [max(len(HEADERS[c]), 5) for c in cols]
    lines = ["  ".join(["Method".ljust(name_w)] + [HEADERS[c].rjust(w) for c, w in zip(cols, widths)])]
    lines.append("-" * len(lines[0]))
    for r in reports:
        row = r.row()
        lines.append("  ".join([r.method.ljust(name_w)] + [f"{row[c]:.3f}".rjust(w) for c, w in zip(cols, widths)]))
    return "\n".join(lines)
