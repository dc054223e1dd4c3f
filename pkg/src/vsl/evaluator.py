"""Recall@K for image-to-text and text-to-image retrieval.

Ranking is by descending score with ties broken toward the lower gallery
index. An image query succeeds at K when any of its positive texts is within
the top K.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KS = (1, 5, 10)


@dataclass
class GroundTruth:
    img_to_txts: list[list[int]]
    txt_to_img: np.ndarray

    def __post_init__(self):
        self.txt_to_img = np.asarray(self.txt_to_img, dtype=np.int64)
        seen = np.zeros(len(self.txt_to_img), dtype=np.int64)
        for i, txts in enumerate(self.img_to_txts):
            for t in txts:
                if self.txt_to_img[t] != i:
                    raise ValueError(f"text {t} is listed under image {i} but maps to {self.txt_to_img[t]}")
                seen[t] += 1
        if np.any(seen != 1):
            raise ValueError("every text must belong to exactly one image")

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "GroundTruth":
        """Texts stored contiguously per image, ``counts[i]`` texts for image i."""
        img_to_txts, owners, start = [], [], 0
        for i, q in enumerate(counts):
            img_to_txts.append(list(range(start, start + q)))
            owners.extend([i] * q)
            start += q
        return cls(img_to_txts, np.asarray(owners, dtype=np.int64))

    @property
    def n_images(self) -> int:
        return len(self.img_to_txts)

    @property
    def n_texts(self) -> int:
        return len(self.txt_to_img)


@dataclass
class RecallTable:
    direction: str
    r_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"direction": self.direction, "r_at": {str(k): v for k, v in self.r_at.items()}}


def rank_of_ground_truth(scores, gt_indices) -> int:
    """1-based position of the best-placed ground-truth item."""
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(sorted(gt_indices), dtype=np.int64)
    if gt.size == 0:
        raise ValueError("empty ground-truth set")
    if gt.min() < 0 or gt.max() >= scores.size:
        raise ValueError("ground-truth index out of range")
    idx = np.arange(scores.size)
    best = None
    for g in gt:
        ahead = np.count_nonzero((scores > scores[g]) | ((scores == scores[g]) & (idx < g)))
        best = ahead if best is None else min(best, ahead)
    return int(best) + 1


def _ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised rank of column targets[q] within row q of scores."""
    q = np.arange(scores.shape[0])
    target_scores = scores[q, targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > target_scores) | ((scores == target_scores) & (idx < targets[:, None]))
    return ahead.sum(axis=1) + 1


def query_ranks(S_full, gt: GroundTruth, direction: str) -> np.ndarray:
    S_full = np.asarray(S_full, dtype=np.float64)
    if S_full.shape != (gt.n_images, gt.n_texts):
        raise ValueError(
            f"score matrix shape {S_full.shape} does not match ground truth "
            f"({gt.n_images} images, {gt.n_texts} texts)"
        )
    if direction == "t2i":
        return _ranks(S_full.T, gt.txt_to_img)
    if direction == "i2t":
        best = np.full(gt.n_images, np.iinfo(np.int64).max)
        # pair every image with each of its texts, one slot at a time
        depth = max(len(t) for t in gt.img_to_txts)
        for slot in range(depth):
            has = np.array([len(t) > slot for t in gt.img_to_txts])
            rows = np.nonzero(has)[0]
            targets = np.array([gt.img_to_txts[i][slot] for i in rows], dtype=np.int64)
            best[rows] = np.minimum(best[rows], _ranks(S_full[rows], targets))
        return best
    raise ValueError(f"unknown direction {direction!r}")


def recall_table(S_full, gt: GroundTruth, direction: str, ks: Sequence[int] = KS) -> RecallTable:
    ranks = query_ranks(S_full, gt, direction)
    return RecallTable(direction, {k: float(np.mean(ranks <= k)) for k in ks})


def recall_table_folds(S_full, gt: GroundTruth, direction: str, folds: int = 5,
                       ks: Sequence[int] = KS) -> RecallTable:
    """Average recall over contiguous image folds (the 1K-style protocol)."""
    S_full = np.asarray(S_full, dtype=np.float64)
    if folds <= 1:
        return recall_table(S_full, gt, direction, ks)
    bounds = np.linspace(0, gt.n_images, folds + 1).round().astype(int)
    tables = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        texts = [t for i in range(lo, hi) for t in gt.img_to_txts[i]]
        sub_gt = GroundTruth.from_counts([len(gt.img_to_txts[i]) for i in range(lo, hi)])
        sub = S_full[lo:hi][:, texts]
        tables.append(recall_table(sub, sub_gt, direction, ks))
    return RecallTable(direction, {k: float(np.mean([t.r_at[k] for t in tables])) for k in ks})


def format_tables(i2t: RecallTable, t2i: RecallTable, label: str = "model") -> str:
    """Plain-text table: i2t R@1/5/10 then t2i R@1/5/10, values in percent."""
    ks = sorted(i2t.r_at)
    head = ["Method"] + [f"i2t R@{k}" for k in ks] + [f"t2i R@{k}" for k in ks]
    vals = [label] + [f"{100 * i2t.r_at[k]:.1f}" for k in ks] + [f"{100 * t2i.r_at[k]:.1f}" for k in ks]
    widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
    line = lambda cells: "  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(head), line(vals)])


def tables_to_json(i2t: RecallTable, t2i: RecallTable) -> str:
    return json.dumps({"i2t": i2t.to_dict(), "t2i": t2i.to_dict()}, indent=2, sort_keys=True)


def confuser_outranks(S_full, gt: GroundTruth, confuser_target: Sequence[int]) -> int:
    """Count text queries whose planted confuser image scores above the true image.

    ``confuser_target[b] = a`` means image b carries image a's main content as
    secondary content; every text of a is then a query where b competes with a.
    """
    S_full = np.asarray(S_full, dtype=np.float64)
    count = 0
    for b, a in enumerate(confuser_target):
        if a < 0:
            continue
        texts = gt.img_to_txts[a]
        count += int(np.count_nonzero(S_full[b, texts] > S_full[a, texts]))
    return count
