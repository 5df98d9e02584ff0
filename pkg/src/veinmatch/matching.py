"""Cosine matching, threshold decisions and verification metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstraintError, DegenerateEmbeddingError, ParameterError

DEFAULT_CANDIDATES = (0.6, 0.65, 0.7, 0.75, 0.8)


@dataclass(frozen=True)
class SimilarityRecord:
    id_a: str
    id_b: str
    score: float
    same_identity: bool | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class ThresholdModel:
    center_p: float
    center_n: float
    iterations: int = 0

    @property
    def alpha(self) -> float:
        return (self.center_p + self.center_n) / 2.0

    def to_json(self) -> dict:
        return {"center_p": self.center_p, "center_n": self.center_n, "alpha": self.alpha,
                "iterations": self.iterations}


@dataclass
class EvalReport:
    correctly_accepted: int
    wrong_accepted: int
    wrong_rejected: int
    correctly_rejected: int
    correct_rate: float
    auc: float
    mg: float
    threshold: float
    mean_latency_s: float | None = None
    max_latency_s: float | None = None

    @property
    def total(self) -> int:
        return self.correctly_accepted + self.wrong_accepted + self.wrong_rejected + self.correctly_rejected

    def to_json(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"threshold            {self.threshold:.6f}",
            f"correctly accepted   {self.correctly_accepted}",
            f"wrong accepted       {self.wrong_accepted}",
            f"wrong rejected       {self.wrong_rejected}",
            f"correctly rejected   {self.correctly_rejected}",
            f"total pairs          {self.total}",
            f"correct rate         {100 * self.correct_rate:.2f}%",
            f"AUC                  {self.auc:.4f}",
            f"MG                   {self.mg:.4f}",
        ]
        if self.mean_latency_s is not None:
            lines.append(f"mean latency (s)     {self.mean_latency_s:.4f}")
            lines.append(f"max latency (s)      {self.max_latency_s:.4f}")
        return "\n".join(lines) + "\n"


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm embedding")
    s = float(a @ b / (na * nb))
    return min(1.0, max(-1.0, s))


def cosine_matrix(gallery: np.ndarray, probes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs cosine scores ``[G, P]`` plus a mask of pairs touching a zero-norm row."""
    g = np.asarray(gallery, dtype=np.float64)
    p = np.asarray(probes, dtype=np.float64)
    gn = np.linalg.norm(g, axis=1)
    pn = np.linalg.norm(p, axis=1)
    bad = (gn == 0)[:, None] | (pn == 0)[None, :]
    safe_g = g / np.where(gn == 0, 1.0, gn)[:, None]
    safe_p = p / np.where(pn == 0, 1.0, pn)[:, None]
    scores = np.clip(safe_g @ safe_p.T, -1.0, 1.0)
    return np.where(bad, np.nan, scores), bad


def similarity_matrix(gallery: Sequence, probes: Sequence, gallery_ids: Sequence[str] | None = None,
                      probe_ids: Sequence[str] | None = None,
                      gallery_labels: Sequence[str] | None = None,
                      probe_labels: Sequence[str] | None = None) -> list[SimilarityRecord]:
    """Score every gallery x probe pair, gallery-major.

    ``*_ids`` name the images; ``*_labels`` give identities and, when both are
    present, fill ``same_identity``. Zero-norm embeddings yield records flagged
    ``degenerate`` with a NaN score instead of failing the whole matrix.
    """
    if len(gallery) == 0 or len(probes) == 0:
        raise ParameterError("similarity matrix needs non-empty gallery and probe lists")
    scores, bad = cosine_matrix(np.stack([np.ravel(g) for g in gallery]),
                                np.stack([np.ravel(p) for p in probes]))
    gids = list(gallery_ids) if gallery_ids is not None else [f"g{i}" for i in range(len(gallery))]
    pids = list(probe_ids) if probe_ids is not None else [f"p{j}" for j in range(len(probes))]
    labelled = gallery_labels is not None and probe_labels is not None
    records = []
    for i in range(len(gallery)):
        for j in range(len(probes)):
            same = (gallery_labels[i] == probe_labels[j]) if labelled else None
            records.append(SimilarityRecord(gids[i], pids[j], float(scores[i, j]), same, bool(bad[i, j])))
    return records


def decide(s: float, alpha: float) -> bool:
    """Accept iff the score strictly exceeds the threshold."""
    return s > alpha


def _split_scores(records: Iterable[SimilarityRecord]) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = [], []
    for r in records:
        if r.degenerate:
            raise DegenerateEmbeddingError(f"record ({r.id_a}, {r.id_b}) involves a zero-norm embedding")
        if r.same_identity is None:
            raise ConstraintError(f"record ({r.id_a}, {r.id_b}) has no ground-truth label")
        (pos if r.same_identity else neg).append(r.score)
    return np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)


def mg_eval(records: Iterable[SimilarityRecord]) -> float:
    """Mean same-identity score minus mean different-identity score."""
    pos, neg = _split_scores(records)
    if not len(pos) or not len(neg):
        raise ConstraintError("MG needs both same-identity and different-identity records")
    return float(pos.mean() - neg.mean())


def auc_scores(pos: np.ndarray, neg: np.ndarray, ties: float = 0.0) -> float:
    """Fraction of (positive, negative) pairs where the positive scores higher.

    Ties count ``ties`` (0 by default; 0.5 gives the Mann-Whitney convention).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    if not len(pos) or not len(neg):
        raise ConstraintError("AUC needs at least one positive and one negative score")
    below = np.searchsorted(neg, pos, side="left")
    wins = int(below.sum())
    if ties:
        equal = int((np.searchsorted(neg, pos, side="right") - below).sum())
        return (wins + ties * equal) / (len(pos) * len(neg))
    return wins / (len(pos) * len(neg))


def auc(records: Iterable[SimilarityRecord], ties: float = 0.0) -> float:
    pos, neg = _split_scores(records)
    return auc_scores(pos, neg, ties)


def kmeans_threshold(scores: Sequence[float], max_iters: int = 100, tol: float = 1e-9) -> ThresholdModel:
    """Two-centre Lloyd clustering of 1-D scores, initialised at (min, max).

    A score equidistant from both centres joins the lower cluster.
    """
    x = np.asarray(list(scores), dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size < 2 or np.all(x == x[0]):
        raise ConstraintError("K-means threshold needs at least two distinct scores")
    lo, hi = float(x.min()), float(x.max())
    it = 0
    for it in range(1, max_iters + 1):
        upper = np.abs(x - hi) < np.abs(x - lo)
        new_hi = float(x[upper].mean()) if upper.any() else hi
        new_lo = float(x[~upper].mean()) if (~upper).any() else lo
        shift = max(abs(new_hi - hi), abs(new_lo - lo))
        lo, hi = new_lo, new_hi
        if shift < tol:
            break
    return ThresholdModel(center_p=hi, center_n=lo, iterations=it)


def confusion(records: Iterable[SimilarityRecord], alpha: float) -> tuple[int, int, int, int]:
    ca = wa = wr = cr = 0
    for r in records:
        if r.same_identity is None:
            raise ConstraintError(f"record ({r.id_a}, {r.id_b}) has no ground-truth label")
        accepted = (not r.degenerate) and decide(r.score, alpha)
        if r.same_identity:
            ca, wr = (ca + 1, wr) if accepted else (ca, wr + 1)
        else:
            wa, cr = (wa + 1, cr) if accepted else (wa, cr + 1)
    return ca, wa, wr, cr


def correct_rate(ca: int, wa: int, wr: int, cr: int) -> float:
    return (ca + cr) / (ca + wa + wr + cr)


def evaluate(records: Sequence[SimilarityRecord], alpha: float, latencies: Sequence[float] | None = None,
             ties: float = 0.0) -> EvalReport:
    ca, wa, wr, cr = confusion(records, alpha)
    lat = np.asarray(latencies, dtype=np.float64) if latencies is not None and len(latencies) else None
    return EvalReport(
        correctly_accepted=ca, wrong_accepted=wa, wrong_rejected=wr, correctly_rejected=cr,
        correct_rate=correct_rate(ca, wa, wr, cr), auc=auc(records, ties), mg=mg_eval(records),
        threshold=float(alpha),
        mean_latency_s=float(lat.mean()) if lat is not None else None,
        max_latency_s=float(lat.max()) if lat is not None else None,
    )


@dataclass
class SweepResult:
    reports: dict[float, EvalReport] = field(default_factory=dict)
    best_candidate: float = 0.0

    def to_json(self) -> dict:
        return {"best_candidate": self.best_candidate,
                "reports": {f"{a:g}": r.to_json() for a, r in self.reports.items()}}


def _decision_auc(records: Sequence[SimilarityRecord], alpha: float) -> float:
    # AUC of the binary accept/reject decision; this is what varies with the
    # threshold (the score AUC does not). Ties score half here.
    pos, neg = _split_scores(records)
    return auc_scores((pos > alpha).astype(float), (neg > alpha).astype(float), ties=0.5)


def sweep_thresholds(records: Sequence[SimilarityRecord],
                     candidates: Sequence[float] = DEFAULT_CANDIDATES) -> SweepResult:
    """Evaluate every candidate threshold; the best is chosen by decision AUC,
    ties broken by correct rate then by the smaller threshold."""
    result = SweepResult()
    best_key = None
    for a in candidates:
        rep = evaluate(records, a)
        result.reports[float(a)] = rep
        key = (_decision_auc(records, a), rep.correct_rate, -a)
        if best_key is None or key > best_key:
            best_key, result.best_candidate = key, float(a)
    return result


# --- record files -------------------------------------------------------------

CSV_HEADER = ("id_a", "id_b", "score", "same_identity")


def records_to_csv(records: Iterable[SimilarityRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        same = "" if r.same_identity is None else int(r.same_identity)
        w.writerow([r.id_a, r.id_b, "nan" if r.degenerate else repr(float(r.score)), same])
    return buf.getvalue()


def records_from_csv(text: str) -> list[SimilarityRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ParameterError(f"records CSV must start with header {','.join(CSV_HEADER)}")
    out = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParameterError(f"records CSV line {line_no}: expected 4 fields")
        score = float(row[2])
        same = None if row[3] == "" else bool(int(row[3]))
        out.append(SimilarityRecord(row[0], row[1], score, same, degenerate=bool(np.isnan(score))))
    return out


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
