"""Single-query CMC / mAP evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError
from .reid import EmbeddingSet

REPORT_KEYS = ("rank1", "rank5", "rank10", "mAP", "query_count", "skipped_queries")


@dataclass
class EvalReport:
    rank_accuracies: dict[int, float]
    mAP: float
    query_count: int
    skipped_queries: int
    cmc: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def as_dict(self) -> dict:
        return {
            "rank1": self.rank_accuracies.get(1, 0.0),
            "rank5": self.rank_accuracies.get(5, 0.0),
            "rank10": self.rank_accuracies.get(10, 0.0),
            "mAP": self.mAP,
            "query_count": self.query_count,
            "skipped_queries": self.skipped_queries,
        }

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k} = {v}" if isinstance(v, int) else f"{k} = {v:.6f}")
        return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text(), encoding="utf-8")
    return path


def read_report(path) -> dict:
    """Parse a report file into {key: float|int}."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if "=" not in line:
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = int(value) if key in ("query_count", "skipped_queries") else float(value)
    missing = set(REPORT_KEYS) - set(out)
    if missing:
        raise DataError(f"{path} lacks keys {sorted(missing)}")
    return out


def pairwise_distances(queries: EmbeddingSet, gallery: EmbeddingSet, chunk: int = 256) -> np.ndarray:
    """Exact Euclidean distances, computed from explicit differences."""
    if queries.dim != gallery.dim:
        raise ValidationError(f"dimension mismatch: {queries.dim} vs {gallery.dim}")
    if queries.normalized != gallery.normalized:
        raise ValidationError("query and gallery embeddings disagree on L2 normalization")
    q = queries.vectors.astype(np.float64)
    g = gallery.vectors.astype(np.float64)
    out = np.empty((len(q), len(g)))
    for s in range(0, len(q), chunk):
        diff = q[s:s + chunk, None, :] - g[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def evaluate_single_query(dist, query_ids, query_cams, gallery_ids, gallery_cams,
                          ranks=(1, 5, 10), exclude_same_camera: bool = True) -> EvalReport:
    """CMC and mAP with each query evaluated on its own.

    Gallery items sharing the query's identity *and* camera are removed
    before ranking. Gallery ids of -1 are junk and never count as relevant.
    Queries left with no relevant gallery item are skipped.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_ids, q_cams = np.asarray(query_ids), np.asarray(query_cams)
    g_ids, g_cams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    if dist.shape != (len(q_ids), len(g_ids)) or len(q_cams) != len(q_ids) or len(g_cams) != len(g_ids):
        raise ValidationError("distance matrix and metadata sizes disagree")
    max_rank = max(max(ranks), 1)
    cmc_hits = np.zeros(max(dist.shape[1], max_rank))
    aps = []
    skipped = 0
    for i in range(len(q_ids)):
        keep = ~((g_ids == q_ids[i]) & (g_cams == q_cams[i])) if exclude_same_camera else np.ones(len(g_ids), bool)
        order = np.argsort(dist[i], kind="stable")
        order = order[keep[order]]
        relevant = (g_ids[order] == q_ids[i]) & (g_ids[order] >= 0)
        if not relevant.any():
            skipped += 1
            continue
        hits = np.flatnonzero(relevant)
        cmc_hits[hits[0]:] += 1
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        aps.append(precision.mean())
    valid = len(q_ids) - skipped
    cmc = cmc_hits / valid if valid else np.zeros_like(cmc_hits)
    rank_acc = {k: float(cmc[min(k, len(cmc)) - 1]) if len(cmc) else 0.0 for k in ranks}
    return EvalReport(rank_acc, float(np.mean(aps)) if aps else 0.0, len(q_ids), skipped, cmc)


def evaluate_embeddings(queries: EmbeddingSet, gallery: EmbeddingSet, **kwargs) -> EvalReport:
    dist = pairwise_distances(queries, gallery)
    return evaluate_single_query(dist, queries.person_ids, queries.camera_indices,
                                 gallery.person_ids, gallery.camera_indices, **kwargs)
