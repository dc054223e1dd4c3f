"""Linear two-branch encoder trained with Adam on the combined rank objective."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data_io import RetrievalDataset, atomic_write_bytes, batch_sampler
from .evaluator import recall_table
from .losses import LossConfig, cosine_similarity_matrix, total_loss
from .text_semantics import CaptionIndex, build_corpus_stats, image_kernel

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"VSLM"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIII")


class TrainingError(RuntimeError):
    pass


@dataclass
class TwoBranchEncoder:
    w_img: np.ndarray  # d_img x d_emb
    w_txt: np.ndarray  # d_txt x d_emb

    def __post_init__(self):
        self.w_img = np.asarray(self.w_img, dtype=np.float64)
        self.w_txt = np.asarray(self.w_txt, dtype=np.float64)
        if self.w_img.shape[1] != self.w_txt.shape[1]:
            raise ValueError("both branches must project to the same embedding dimension")

    @property
    def d_emb(self) -> int:
        return self.w_img.shape[1]

    @classmethod
    def init(cls, d_img: int, d_txt: int, d_emb: int, rng: np.random.Generator) -> "TwoBranchEncoder":
        lim_i, lim_t = 1 / np.sqrt(d_img), 1 / np.sqrt(d_txt)
        return cls(rng.uniform(-lim_i, lim_i, (d_img, d_emb)), rng.uniform(-lim_t, lim_t, (d_txt, d_emb)))

    def to_bytes(self) -> bytes:
        d_img, d_emb = self.w_img.shape
        head = _SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, d_img, self.w_txt.shape[0], d_emb)
        return (head + np.ascontiguousarray(self.w_img, dtype="<f8").tobytes()
                + np.ascontiguousarray(self.w_txt, dtype="<f8").tobytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TwoBranchEncoder":
        if len(raw) < _SNAPSHOT_HEADER.size or raw[:4] != SNAPSHOT_MAGIC:
            raise ValueError("bad magic: not a VSLM encoder snapshot")
        _, version, d_img, d_txt, d_emb = _SNAPSHOT_HEADER.unpack_from(raw)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        body = raw[_SNAPSHOT_HEADER.size:]
        if len(body) != 8 * d_emb * (d_img + d_txt):
            raise ValueError("truncated encoder snapshot")
        w = np.frombuffer(body, dtype="<f8").astype(np.float64)
        return cls(w[: d_img * d_emb].reshape(d_img, d_emb), w[d_img * d_emb:].reshape(d_txt, d_emb))

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "TwoBranchEncoder":
        return cls.from_bytes(Path(path).read_bytes())


def encode(enc: TwoBranchEncoder, img_feats, txt_feats) -> tuple[np.ndarray, np.ndarray]:
    img_feats = np.asarray(img_feats, dtype=np.float64)
    txt_feats = np.asarray(txt_feats, dtype=np.float64)
    if img_feats.shape[-1] != enc.w_img.shape[0]:
        raise ValueError(f"image features have dim {img_feats.shape[-1]}, encoder expects {enc.w_img.shape[0]}")
    if txt_feats.shape[-1] != enc.w_txt.shape[0]:
        raise ValueError(f"text features have dim {txt_feats.shape[-1]}, encoder expects {enc.w_txt.shape[0]}")
    return img_feats @ enc.w_img, txt_feats @ enc.w_txt


def _normalize_backward(emb: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / norm
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=1, keepdims=True)) / norm


def backward(enc: TwoBranchEncoder, img_feats, txt_feats, grad_S) -> tuple[np.ndarray, np.ndarray]:
    """Weight gradients of a loss given its gradient on S = cos(img_i, txt_j)."""
    img_feats = np.asarray(img_feats, dtype=np.float64)
    txt_feats = np.asarray(txt_feats, dtype=np.float64)
    e_img, e_txt = encode(enc, img_feats, txt_feats)
    u_img = e_img / np.linalg.norm(e_img, axis=1, keepdims=True)
    u_txt = e_txt / np.linalg.norm(e_txt, axis=1, keepdims=True)
    g_img = _normalize_backward(e_img, grad_S @ u_txt)
    g_txt = _normalize_backward(e_txt, grad_S.T @ u_img)
    return img_feats.T @ g_img, txt_feats.T @ g_txt


@dataclass
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, state: AdamState, grads, lr: float, hp: AdamParams = AdamParams()):
    """One bias-corrected Adam update; returns new parameter arrays (state is updated in place)."""
    state.t += 1
    c1 = 1 - hp.beta1 ** state.t
    c2 = 1 - hp.beta2 ** state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = hp.beta1 * state.m[k] + (1 - hp.beta1) * g
        state.v[k] = hp.beta2 * state.v[k] + (1 - hp.beta2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + hp.epsilon))
    return out


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 25
    lr_initial: float = 0.0003
    lr_decayed: float = 0.00003
    decay_epoch: int = 10
    seed: int = 0
    d_emb: int = 64
    grad_clip: float | None = None
    check_grad_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    adam: AdamParams = field(default_factory=AdamParams)

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size must be >= 2 and epochs >= 1")
        if not (self.lr_initial > 0 and self.lr_decayed > 0):
            raise ValueError("learning rates must be positive")
        if self.decay_epoch > self.epochs:
            raise ValueError("decay_epoch cannot exceed epochs")

    def lr_at(self, epoch: int) -> float:
        return self.lr_initial if epoch < self.decay_epoch else self.lr_decayed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    steps: int
    total: float
    triplet: float
    vsl: float
    tsl: float
    recall: dict | None = None


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    snapshot: str | None = None
    encoder: TwoBranchEncoder | None = None

    @property
    def steps(self) -> int:
        return sum(r.steps for r in self.epochs)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "epochs": [asdict(r) for r in self.epochs],
            "snapshot": self.snapshot,
        }
        if include_timing:
            d["wall_clock"] = list(self.wall_clock)
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


class BatchSemantics:
    """Per-batch C (and TC) from captions, with IDF statistics from the whole training split."""

    def __init__(self, ds: RetrievalDataset):
        self.ds = ds
        self.stats = build_corpus_stats(ds.captions)
        flat = [c for pts in ds.captions for c in pts]
        self.index = CaptionIndex(flat, self.stats)

    def image_matrix(self, images: np.ndarray) -> np.ndarray:
        gt = self.ds.ground_truth
        rows = np.array([t for i in images for t in gt.img_to_txts[i]], dtype=np.int64)
        owners = np.repeat(np.arange(len(images)), [len(gt.img_to_txts[i]) for i in images])
        return image_kernel(self.index.cosine_matrix(rows, rows), owners, len(images))

    def text_matrix(self, texts: np.ndarray) -> np.ndarray:
        tc = self.index.cosine_matrix(texts, texts)
        return 0.5 * (tc + tc.T)


def batch_objective(enc: TwoBranchEncoder, img_feats, txt_feats, C, TC, cfg: LossConfig):
    e_img, e_txt = encode(enc, img_feats, txt_feats)
    S = cosine_similarity_matrix(e_img, e_txt)
    return total_loss(S, C, TC, cfg)


def _fd_check(enc, img, txt, C, TC, loss_cfg, g_img, rng) -> float:
    """Relative error of one random image-weight coordinate against central differences at tau = 0.1."""
    cfg = LossConfig(**{**loss_cfg.to_dict(), "tau": 0.1})
    out = batch_objective(enc, img, txt, C, TC, cfg)
    g_img, _ = backward(enc, img, txt, out.grad_S)
    r, c = rng.integers(enc.w_img.shape[0]), rng.integers(enc.w_img.shape[1])
    h = 1e-6
    vals = []
    for sign in (1, -1):
        w = enc.w_img.copy()
        w[r, c] += sign * h
        vals.append(batch_objective(TwoBranchEncoder(w, enc.w_txt), img, txt, C, TC, cfg).total)
    fd = (vals[0] - vals[1]) / (2 * h)
    return abs(g_img[r, c] - fd) / max(abs(fd), 1e-8)


def train(ds: RetrievalDataset, cfg: TrainConfig, val: RetrievalDataset | None = None) -> TrainReport:
    """Mini-batch Adam on alpha*triplet + beta*(vsl [+ tsl]).

    ``ds`` is the training data; ``val``, when given, is scored with
    Recall@K after each epoch.
    """
    batch_size = cfg.batch_size
    if batch_size > ds.n_images:
        log.warning("batch size %d exceeds %d training images; clamping", batch_size, ds.n_images)
        batch_size = ds.n_images

    rng = np.random.default_rng(cfg.seed)
    enc = TwoBranchEncoder.init(ds.image_features.shape[1], ds.text_features.shape[1], cfg.d_emb, rng)
    state = AdamState.zeros_like([enc.w_img, enc.w_txt])
    sem = BatchSemantics(ds)
    check_rng = np.random.default_rng([cfg.seed, 1])
    report = TrainReport(config=cfg.to_dict())
    step = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        sums = np.zeros(4)
        batches = batch_sampler(ds, batch_size, cfg.seed, epoch)
        for b, batch in enumerate(batches):
            img = ds.image_features[batch.images]
            txt = ds.text_features[batch.texts]
            C = sem.image_matrix(batch.images)
            TC = sem.text_matrix(batch.texts) if cfg.loss.include_tsl else None
            try:
                out = batch_objective(enc, img, txt, C, TC, cfg.loss)
            except ValueError as exc:
                # non-finite or degenerate scores surface here before the loss exists
                raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from exc
            if not np.isfinite(out.total):
                raise TrainingError(f"non-finite loss {out.total} at epoch {epoch}, batch {b}")
            g_img, g_txt = backward(enc, img, txt, out.grad_S)
            if cfg.grad_clip is not None:
                norm = np.sqrt(np.sum(g_img ** 2) + np.sum(g_txt ** 2))
                if norm > cfg.grad_clip:
                    g_img, g_txt = g_img * (cfg.grad_clip / norm), g_txt * (cfg.grad_clip / norm)
            if cfg.check_grad_every and step % cfg.check_grad_every == 0:
                err = _fd_check(enc, img, txt, C, TC, cfg.loss, g_img, check_rng)
                log.debug("step %d: finite-difference relative error %.2e", step, err)
                if err > 1e-4:
                    raise TrainingError(f"gradient check failed at step {step}: relative error {err:.3e}")
            w_img, w_txt = adam_step([enc.w_img, enc.w_txt], state, [g_img, g_txt], lr, cfg.adam)
            if not (np.all(np.isfinite(w_img)) and np.all(np.isfinite(w_txt))):
                raise TrainingError(f"non-finite weights after epoch {epoch}, batch {b}")
            enc = TwoBranchEncoder(w_img, w_txt)
            sums += (out.total, out.triplet, out.vsl, out.tsl)
            step += 1
        means = sums / max(len(batches), 1)
        record = EpochRecord(epoch, lr, len(batches), *map(float, means))
        if val is not None:
            record.recall = evaluate(enc, val)
        report.epochs.append(record)
        report.wall_clock.append(time.perf_counter() - t0)
        log.info("epoch %d lr %.2g loss %.4f (triplet %.4f vsl %.4f tsl %.4f)",
                 epoch, lr, *means)

    report.encoder = enc
    return report


def score_matrix(enc: TwoBranchEncoder, ds: RetrievalDataset) -> np.ndarray:
    e_img, e_txt = encode(enc, ds.image_features, ds.text_features)
    return cosine_similarity_matrix(e_img, e_txt)


def evaluate(enc: TwoBranchEncoder, ds: RetrievalDataset) -> dict:
    S = score_matrix(enc, ds)
    return {d: recall_table(S, ds.ground_truth, d).to_dict()["r_at"] for d in ("i2t", "t2i")}
