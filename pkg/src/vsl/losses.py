"""Triplet, visual-semantic and text-semantic rank losses.

Every loss returns its value together with the gradient with respect to the
matrix it consumes, so the trainer can chain them back to the encoder
weights without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from .smooth_rank import rank_matrix, rank_matrix_vjp


class Mining(str, Enum):
    HARDEST = "hardest"
    SUM_ALL = "sum_all"


@dataclass
class LossConfig:
    margin: float = 0.2
    alpha: float = 1.0
    beta: float = 10.0
    tau: float = 0.001
    negative_mining: Mining = Mining.HARDEST
    include_tsl: bool = False

    def __post_init__(self):
        self.negative_mining = Mining(self.negative_mining)
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not self.tau > 0:
            raise ValueError("non-positive temperature")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["negative_mining"] = self.negative_mining.value
        return d


@dataclass
class LossOutput:
    total: float
    triplet: float
    vsl: float
    tsl: float
    grad_S: np.ndarray


def cosine_similarity_matrix(img_emb, txt_emb) -> np.ndarray:
    img_emb = np.asarray(img_emb, dtype=np.float64)
    txt_emb = np.asarray(txt_emb, dtype=np.float64)
    if img_emb.ndim != 2 or txt_emb.ndim != 2 or img_emb.shape[1] != txt_emb.shape[1]:
        raise ValueError(f"embedding shapes {img_emb.shape} and {txt_emb.shape} do not agree")
    ni = np.linalg.norm(img_emb, axis=1)
    nt = np.linalg.norm(txt_emb, axis=1)
    if np.any(ni == 0) or np.any(nt == 0):
        raise ValueError("degenerate embedding")
    s = (img_emb / ni[:, None]) @ (txt_emb / nt[:, None]).T
    return np.clip(s, -1.0, 1.0)


def triplet_loss(S, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Bidirectional hinge loss, averaged over the n positive pairs on the diagonal.

    Hardest mining uses, for anchor i, the most similar non-matching image in
    column i and the most similar non-matching text in row i.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise ValueError("triplet loss needs a square similarity matrix")
    if n < 2:
        raise ValueError("triplet loss needs at least one negative")
    m = cfg.margin
    diag = np.diag(S)
    off = ~np.eye(n, dtype=bool)
    grad = np.zeros_like(S)
    rows = np.arange(n)

    if cfg.negative_mining is Mining.HARDEST:
        masked = np.where(off, S, -np.inf)
        neg_img = masked.argmax(axis=0)  # v- for anchor text i: row index in column i
        neg_txt = masked.argmax(axis=1)  # t- for anchor image i: column index in row i
        h_img = m - diag + S[neg_img, rows]
        h_txt = m - diag + S[rows, neg_txt]
        a_img = h_img > 0
        a_txt = h_txt > 0
        loss = (np.where(a_img, h_img, 0.0).sum() + np.where(a_txt, h_txt, 0.0).sum()) / n
        np.add.at(grad, (neg_img[a_img], rows[a_img]), 1.0 / n)
        np.add.at(grad, (rows[a_txt], neg_txt[a_txt]), 1.0 / n)
        grad[rows, rows] -= (a_img.astype(float) + a_txt.astype(float)) / n
    else:
        # cost_img[k, i]: image k as negative for text i; cost_txt[i, k]: text k for image i
        h_img = (m - diag[None, :] + S) * off
        h_txt = (m - diag[:, None] + S) * off
        a_img = (h_img > 0) & off
        a_txt = (h_txt > 0) & off
        loss = (h_img[a_img].sum() + h_txt[a_txt].sum()) / n
        grad += (a_img.astype(float) + a_txt.astype(float)) / n
        grad[rows, rows] -= (a_img.sum(axis=0) + a_txt.sum(axis=1)) / n
    return float(loss), grad


def vsl_loss(SR, CR) -> tuple[float, np.ndarray]:
    """1 - mean(min / max) between two rank matrices; gradient flows to SR only."""
    SR = np.asarray(SR, dtype=np.float64)
    CR = np.asarray(CR, dtype=np.float64)
    if SR.shape != CR.shape:
        raise ValueError(f"rank matrix shapes differ: {SR.shape} vs {CR.shape}")
    count = SR.size
    ratio = np.minimum(SR, CR) / np.maximum(SR, CR)
    loss = 1.0 - ratio.sum() / count
    grad = np.zeros_like(SR)
    below = SR < CR
    above = SR > CR
    grad[below] = -1.0 / CR[below]
    grad[above] = CR[above] / SR[above] ** 2
    return float(max(loss, 0.0)), grad / count


def tsl_loss(SprimeR, TCR) -> tuple[float, np.ndarray]:
    """Text-side counterpart of :func:`vsl_loss`, over ranks of S transposed."""
    return vsl_loss(SprimeR, TCR)


def total_loss(S, C, TC, cfg: LossConfig) -> LossOutput:
    """alpha * triplet + beta * (vsl [+ tsl]) with the gradient on S."""
    S = np.asarray(S, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != S.shape:
        raise ValueError(f"semantic matrix shape {C.shape} does not match {S.shape}")
    if cfg.include_tsl and TC is None:
        raise ValueError("include_tsl is set but no textual semantic matrix was given")

    trip, grad = triplet_loss(S, cfg)
    grad = cfg.alpha * grad

    # the rank terms are reported even when beta = 0
    SR, sr_vjp = rank_matrix_vjp(S, cfg.tau)
    vsl, g_sr = vsl_loss(SR, rank_matrix(C, cfg.tau))
    if cfg.beta != 0:
        grad = grad + cfg.beta * sr_vjp(g_sr)
    tsl = 0.0
    if cfg.include_tsl:
        TC = np.asarray(TC, dtype=np.float64)
        StR, st_vjp = rank_matrix_vjp(S.T, cfg.tau)
        tsl, g_str = tsl_loss(StR, rank_matrix(TC, cfg.tau))
        if cfg.beta != 0:
            grad = grad + cfg.beta * st_vjp(g_str).T
    total = cfg.alpha * trip + cfg.beta * (vsl + tsl)
    return LossOutput(total=float(total), triplet=trip, vsl=vsl, tsl=tsl, grad_S=grad)
