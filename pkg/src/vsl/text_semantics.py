"""CIDEr-style TF-IDF n-gram vectors and the image-level semantic kernel.

Two images are compared through their positive texts (the captions attached
to each image): every caption becomes a set of TF-IDF weighted n-gram vectors
(n = 1..4), caption pairs are compared by per-level cosine averaged over the
four levels, and the image kernel is the mean over all caption pairs.
"""

from __future__ import annotations

import json
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

MAX_N = 4
STATS_FORMAT_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(raw: str) -> list[str]:
    """Lowercase, drop punctuation characters and split on whitespace."""
    return raw.lower().translate(_PUNCT_TABLE).split()


@dataclass(frozen=True)
class Caption:
    raw: str
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(tokenize(self.raw)))


def _as_tokens(c) -> Sequence[str]:
    if isinstance(c, Caption):
        return c.tokens
    if isinstance(c, str):
        return tokenize(c)
    return c


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


@dataclass
class CorpusStats:
    """Image-level document frequencies for n = 1..4.

    ``doc_freq[n]`` maps an n-gram tuple to the number of images whose
    positive-text set contains it at least once.
    """

    num_documents: int
    doc_freq: dict[int, dict[tuple[str, ...], int]]

    def df(self, n: int, gram: tuple[str, ...]) -> int:
        # unseen grams count as rare
        return self.doc_freq.get(n, {}).get(gram, 1)

    def to_json(self) -> dict:
        return {
            "format_version": STATS_FORMAT_VERSION,
            "num_documents": self.num_documents,
            "doc_freq": {
                str(n): {" ".join(g): c for g, c in sorted(table.items())}
                for n, table in sorted(self.doc_freq.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusStats":
        version = obj.get("format_version")
        if version != STATS_FORMAT_VERSION:
            raise ValueError(f"unsupported corpus stats format version: {version!r}")
        doc_freq = {
            int(n): {tuple(g.split(" ")): int(c) for g, c in table.items()}
            for n, table in obj["doc_freq"].items()
        }
        return cls(num_documents=int(obj["num_documents"]), doc_freq=doc_freq)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusStats":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_corpus_stats(pt_sets: Sequence[Sequence]) -> CorpusStats:
    """Count, per n-gram, how many images mention it in any of their captions."""
    if len(pt_sets) == 0:
        raise ValueError("empty corpus")
    doc_freq: dict[int, Counter] = {n: Counter() for n in range(1, MAX_N + 1)}
    for pts in pt_sets:
        if len(pts) == 0:
            raise ValueError("image has no positive texts")
        for n in range(1, MAX_N + 1):
            seen = set()
            for c in pts:
                seen.update(ngrams(_as_tokens(c), n))
            doc_freq[n].update(seen)
    return CorpusStats(len(pt_sets), {n: dict(t) for n, t in doc_freq.items()})


@dataclass(frozen=True)
class NGramProfile:
    """TF-IDF weights of one caption, one sparse map per n-gram order."""

    levels: dict[int, dict[tuple[str, ...], float]]

    def level(self, n: int) -> dict[tuple[str, ...], float]:
        return self.levels.get(n, {})


def tfidf_vector(caption, stats: CorpusStats) -> NGramProfile:
    tokens = _as_tokens(caption)
    levels = {}
    for n in range(1, MAX_N + 1):
        counts = ngrams(tokens, n)
        total = sum(counts.values())
        levels[n] = {
            g: (c / total) * math.log(stats.num_documents / stats.df(n, g))
            for g, c in counts.items()
        }
    return NGramProfile(levels)


def caption_cosine(a: NGramProfile, b: NGramProfile) -> float:
    """Per-level cosine averaged over the four n-gram orders.

    Empty or zero-norm levels contribute 0; the denominator stays 4. Sums go
    through ``math.fsum`` so the result does not depend on argument order.
    """
    per_level = []
    for n in range(1, MAX_N + 1):
        va, vb = a.level(n), b.level(n)
        na = math.sqrt(math.fsum(w * w for w in va.values()))
        nb = math.sqrt(math.fsum(w * w for w in vb.values()))
        if na == 0.0 or nb == 0.0:
            per_level.append(0.0)
            continue
        dot = math.fsum(w * vb[g] for g, w in va.items() if g in vb)
        per_level.append(dot / (na * nb))
    value = math.fsum(per_level) / MAX_N
    return min(1.0, max(0.0, value))


def _profiles(pts: Sequence, stats: CorpusStats) -> list[NGramProfile]:
    if len(pts) == 0:
        raise ValueError("image has no positive texts")
    return [c if isinstance(c, NGramProfile) else tfidf_vector(c, stats) for c in pts]


def semantic_similarity(pts_i: Sequence, pts_j: Sequence, stats: CorpusStats) -> float:
    """Mean caption cosine over all positive-text pairs of two images."""
    prof_i = _profiles(pts_i, stats)
    prof_j = _profiles(pts_j, stats)
    total = math.fsum(caption_cosine(a, b) for a in prof_i for b in prof_j)
    return min(1.0, max(0.0, total / (len(prof_i) * len(prof_j))))


class CaptionIndex:
    """Sparse, level-wise L2-normalised TF-IDF matrix for a list of captions.

    Makes full caption-by-caption cosine matrices cheap, which the batched
    kernel and the trainer need.
    """

    def __init__(self, captions: Sequence, stats: CorpusStats):
        self.stats = stats
        profiles = [tfidf_vector(c, stats) for c in captions]
        self.n = len(profiles)
        self._levels = []
        for n in range(1, MAX_N + 1):
            vocab: dict[tuple[str, ...], int] = {}
            rows, cols, vals = [], [], []
            for r, p in enumerate(profiles):
                lvl = p.level(n)
                norm = math.sqrt(math.fsum(w * w for w in lvl.values()))
                if norm == 0.0:
                    continue
                for g, w in lvl.items():
                    if w == 0.0:
                        continue
                    rows.append(r)
                    cols.append(vocab.setdefault(g, len(vocab)))
                    vals.append(w / norm)
            mat = sparse.csr_matrix(
                (vals, (rows, cols)), shape=(self.n, max(len(vocab), 1)), dtype=np.float64
            )
            self._levels.append(mat)

    def cosine_matrix(self, rows: np.ndarray | None = None, cols: np.ndarray | None = None) -> np.ndarray:
        """Caption cosine matrix between the selected captions (all by default)."""
        out = None
        for mat in self._levels:
            a = mat if rows is None else mat[rows]
            b = mat if cols is None else mat[cols]
            block = (a @ b.T).toarray()
            out = block if out is None else out + block
        return np.clip(out / MAX_N, 0.0, 1.0)


def semantic_matrix(batch: Sequence[Sequence], stats: CorpusStats) -> np.ndarray:
    """Image-by-image kernel matrix C for a batch of positive-text sets.

    Entry (i, j) equals ``semantic_similarity(batch[i], batch[j], stats)``.
    Computed through a sparse caption-cosine matrix and symmetrised, so the
    result equals its transpose bit for bit.
    """
    if len(batch) < 2:
        raise ValueError("semantic matrix needs at least two images")
    owners = []
    flat = []
    for i, pts in enumerate(batch):
        if len(pts) == 0:
            raise ValueError("image has no positive texts")
        owners.extend([i] * len(pts))
        flat.extend(pts)
    return image_kernel(CaptionIndex(flat, stats).cosine_matrix(), np.asarray(owners), len(batch))


def image_kernel(caption_cos: np.ndarray, owners: np.ndarray, n_images: int) -> np.ndarray:
    """Average a caption cosine matrix into image blocks.

    ``owners[t]`` is the image index of caption t.
    """
    pool = sparse.csr_matrix(
        (np.ones(len(owners)), (owners, np.arange(len(owners)))), shape=(n_images, len(owners))
    )
    counts = np.asarray(pool.sum(axis=1)).ravel()
    sums = pool @ (pool @ caption_cos.T).T
    k = sums / np.outer(counts, counts)
    k = 0.5 * (k + k.T)
    return np.clip(k, 0.0, 1.0)


def caption_pt_sets(captions: Iterable[Sequence[str]]) -> list[list[Caption]]:
    return [[Caption(c) for c in pts] for pts in captions]
