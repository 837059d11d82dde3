"""Hamming-space retrieval metrics and the attack evaluation protocol.

Relevance between a query and a database item is label overlap: they
share at least one class. mAP is computed over the full ranked database
(no top-R cutoff); t-mAP is mAP after replacing every query's label with
the one-hot target label. PR curves are averaged across queries at the
standard 11 interpolated recall levels so plots are reproducible
bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledImage, stack_labels
from .hashspace import CodeDatabase, InvalidInputError, hamming_distances
from .models import HashModel, encode_codes

log = logging.getLogger(__name__)

RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


@dataclass
class EvalReport:
    map: float
    t_map: float | None = None
    pr_points: list[tuple[float, float]] | None = None
    precision_at: dict[int, float] | None = None
    identified_target: int | None = None

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        if d["pr_points"] is not None:
            d["pr_points"] = [[float(r), float(p)] for r, p in d["pr_points"]]
        return json.dumps(d, indent=2, sort_keys=True)


def average_precision(ranked_relevance) -> float:
    """AP of a binary relevance list: mean of precision@k over relevant ranks."""
    rel = np.asarray(ranked_relevance, dtype=np.float64)
    if rel.size == 0:
        raise InvalidInputError("relevance list is empty")
    n_rel = rel.sum()
    if n_rel == 0:
        return 0.0
    precision_at_k = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision_at_k * rel).sum() / n_rel)


def _ranked_relevance(query_code: np.ndarray, query_label: np.ndarray,
                      db: CodeDatabase) -> np.ndarray:
    dists = hamming_distances(query_code, db.codes)
    order = np.lexsort((np.arange(len(db)), dists))
    relevant = (db.labels.astype(np.int64) @ query_label.astype(np.int64)) >= 1
    return relevant[order]


def map_from_codes(query_codes: np.ndarray, query_labels: np.ndarray,
                   db: CodeDatabase) -> float:
    if query_codes.shape[0] == 0:
        raise InvalidInputError("empty query set")
    if len(db) == 0:
        raise InvalidInputError("empty database")
    aps = [average_precision(_ranked_relevance(c, l, db))
           for c, l in zip(query_codes, query_labels)]
    return float(np.mean(aps))


def t_map_from_codes(query_codes: np.ndarray, db: CodeDatabase,
                     target: int) -> float:
    target_label = np.zeros(db.n_classes, dtype=np.uint8)
    target_label[target] = 1
    labels = np.tile(target_label, (query_codes.shape[0], 1))
    return map_from_codes(query_codes, labels, db)


def build_code_database(model: HashModel, images: list[LabeledImage]) -> CodeDatabase:
    return CodeDatabase(codes=encode_codes(model, images),
                        labels=stack_labels(images),
                        ids=[im.id for im in images])


def map_score(model: HashModel, queries: list[LabeledImage],
              db: CodeDatabase) -> float:
    """Benign mAP of a model over a query set against a coded database."""
    if not queries:
        raise InvalidInputError("empty query set")
    return map_from_codes(encode_codes(model, queries), stack_labels(queries), db)


def t_map_score(model: HashModel, triggered_queries: list[LabeledImage],
                db: CodeDatabase, target: int) -> float:
    """mAP with every query label replaced by the one-hot target label."""
    if not triggered_queries:
        raise InvalidInputError("empty query set")
    return t_map_from_codes(encode_codes(model, triggered_queries), db, target)


def identify_target_class(model: HashModel, probe_queries: list[LabeledImage],
                          db: CodeDatabase) -> int:
    """Majority class among the rank-1 items retrieved for triggered probes.

    Every item tied at the minimum distance votes for all its set
    classes (each probe's votes are normalized so probes with large tie
    sets do not outweigh the others); vote ties go to the smallest class
    index. Voting over the whole tie set rather than one index-favored
    item keeps the identification from being hijacked by a stray item
    that happens to sort first among equals.
    """
    if len(db) == 0:
        raise InvalidInputError("empty database")
    codes = encode_codes(model, probe_queries)
    votes = np.zeros(db.n_classes, dtype=np.float64)
    for code in codes:
        dists = hamming_distances(code, db.codes)
        tied = db.labels[dists == dists.min()]
        votes += tied.sum(axis=0) / len(tied)
    return int(np.argmax(votes))


def _query_pr(rel: np.ndarray) -> np.ndarray | None:
    """11-point interpolated precision for one query; None if nothing relevant."""
    n_rel = rel.sum()
    if n_rel == 0:
        return None
    cum = np.cumsum(rel)
    precision = cum / np.arange(1, rel.size + 1)
    recall = cum / n_rel
    interp = np.empty_like(RECALL_LEVELS)
    for i, level in enumerate(RECALL_LEVELS):
        at_least = precision[recall >= level - 1e-12]
        interp[i] = at_least.max() if at_least.size else 0.0
    return interp


def pr_curve_from_codes(query_codes: np.ndarray, query_labels: np.ndarray,
                        db: CodeDatabase) -> list[tuple[float, float]]:
    curves = []
    for code, label in zip(query_codes, query_labels):
        curve = _query_pr(_ranked_relevance(code, label, db))
        if curve is not None:
            curves.append(curve)
    if not curves:
        log.warning("no query had any relevant item; PR curve is empty")
        return [(float(r), 0.0) for r in RECALL_LEVELS]
    mean = np.mean(curves, axis=0)
    return [(float(r), float(p)) for r, p in zip(RECALL_LEVELS, mean)]


def pr_curve(model: HashModel, queries: list[LabeledImage],
             db: CodeDatabase) -> list[tuple[float, float]]:
    return pr_curve_from_codes(encode_codes(model, queries),
                               stack_labels(queries), db)


def precision_at_topn_from_codes(query_codes: np.ndarray, query_labels: np.ndarray,
                                 db: CodeDatabase, n: int) -> float:
    if n > len(db):
        log.warning("precision@%d clipped to database size %d", n, len(db))
        n = len(db)
    fracs = [_ranked_relevance(c, l, db)[:n].mean()
             for c, l in zip(query_codes, query_labels)]
    return float(np.mean(fracs))


def precision_at_topn(model: HashModel, queries: list[LabeledImage],
                      db: CodeDatabase, n: int) -> float:
    """Mean fraction of relevant items among each query's top n."""
    return precision_at_topn_from_codes(encode_codes(model, queries),
                                        stack_labels(queries), db, n)


def write_pr_csv(points: list[tuple[float, float]], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "precision"])
        writer.writerows(points)
