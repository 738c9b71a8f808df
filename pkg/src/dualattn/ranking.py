"""Rank aggregation across models and retrieval metrics.

A RankingTable is a list of per-turn results. Aggregation consumes ranks
only (never raw scores), so discriminative and generative score scales can
be fused without calibration. Fused tables carry a synthetic higher-is-
better score column (negated mean rank, or mean reciprocal rank) so that
re-ranking the scores reproduces the fused ranks.
"""

from __future__ import annotations

import json

import numpy as np

from .decoders import rank_candidates


class TurnRanking:
    """One turn's candidate ranks (a permutation of 1..N) plus metadata."""

    __slots__ = ("dialog_id", "turn", "ranks", "scores", "gt", "relevance")

    def __init__(self, dialog_id, turn, ranks, gt, scores=None, relevance=None):
        self.dialog_id = dialog_id
        self.turn = turn
        self.ranks = np.asarray(ranks, dtype=np.int64)
        self.gt = int(gt)
        self.scores = None if scores is None else np.asarray(scores, dtype=np.float64)
        self.relevance = None if relevance is None else np.asarray(relevance, dtype=np.float64)
        n = self.ranks.size
        if sorted(self.ranks.tolist()) != list(range(1, n + 1)):
            raise ValueError(f"ranks must be a permutation of 1..{n}")
        if not (0 <= self.gt < n):
            raise ValueError(f"gt index {self.gt} out of range for {n} candidates")
        if self.relevance is not None and self.relevance.size != n:
            raise ValueError("relevance length does not match candidate count")

    def key(self):
        return (self.dialog_id, self.turn)


def write_table(path, table):
    """One JSON object per line: dialog_id, turn, ranks, scores?, gt, relevance?."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in table:
            fh.write(table_line(row) + "\n")


def table_line(row):
    obj = {"dialog_id": row.dialog_id, "turn": row.turn,
           "ranks": row.ranks.tolist(), "gt": row.gt}
    if row.scores is not None:
        obj["scores"] = row.scores.tolist()
    if row.relevance is not None:
        obj["relevance"] = row.relevance.tolist()
    return json.dumps(obj)


def read_table(path):
    table = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}") from None
            table.append(TurnRanking(obj["dialog_id"], obj["turn"], obj["ranks"], obj["gt"],
                                     scores=obj.get("scores"), relevance=obj.get("relevance")))
    return table


def _align(tables):
    if len(tables) < 1:
        raise ValueError("need at least one ranking table")
    keys = [row.key() for row in tables[0]]
    n = tables[0][0].ranks.size if tables[0] else 0
    for t, table in enumerate(tables):
        got = [row.key() for row in table]
        if got != keys:
            raise ValueError(f"table {t} covers different turns than table 0")
        for row in table:
            if row.ranks.size != n:
                raise ValueError(f"table {t} has a different candidate count")
    return keys


def _fuse(tables, per_model_value, sign):
    _align(tables)
    k = len(tables)
    fused = []
    for rows in zip(*tables):
        base = rows[0]
        stacked = per_model_value(np.stack([r.ranks for r in rows]).astype(np.float64))
        # summing in sorted order makes the fused value independent of the
        # order the model tables were passed in (reciprocals are inexact)
        stacked.sort(axis=0)
        scores = sign * stacked.sum(axis=0) / k
        fused.append(TurnRanking(base.dialog_id, base.turn, rank_candidates(scores),
                                 base.gt, scores=scores, relevance=base.relevance))
    return fused


def aggregate_average(tables):
    """Re-rank candidates by ascending mean rank over the K input tables."""
    return _fuse(tables, lambda r: r, -1.0)


def aggregate_reciprocal(tables):
    """Re-rank candidates by descending mean reciprocal rank."""
    return _fuse(tables, lambda r: 1.0 / r, 1.0)


def ndcg_turn(row):
    """VisDial-convention NDCG for one turn, in [0, 1].

    DCG is truncated at the number of positively-relevant candidates, with
    1/log2(i+1) discounts over the predicted order; an all-zero relevance
    turn scores 0 (and still counts in averages).
    """
    rel = row.relevance
    if rel is None:
        raise ValueError("turn has no relevance annotations")
    k_rel = int((rel > 0).sum())
    if k_rel == 0:
        return 0.0
    order = np.argsort(row.ranks)  # candidate indices at predicted ranks 1..N
    discounts = 1.0 / np.log2(np.arange(1, k_rel + 1) + 1)
    dcg = float((rel[order[:k_rel]] * discounts).sum())
    ideal = np.sort(rel)[::-1]
    idcg = float((ideal[:k_rel] * discounts).sum())
    return dcg / idcg


def compute_metrics(table, ks=(1, 5, 10)):
    """MRR, R@k, mean rank over ground-truth ranks; NDCG when every turn
    carries relevance annotations."""
    if len(table) == 0:
        raise ValueError("empty ranking table")
    gt_ranks = np.array([row.ranks[row.gt] for row in table], dtype=np.float64)
    n = len(table)
    out = {"mrr": float((1.0 / gt_ranks).sum() / n)}
    for k in ks:
        out[f"r_at_{k}"] = float((gt_ranks <= k).sum() / n)
    out["mean_rank"] = float(gt_ranks.sum() / n)
    if all(row.relevance is not None for row in table):
        out["ndcg"] = float(sum(ndcg_turn(row) for row in table) / n)
    out["turns"] = n
    return out
