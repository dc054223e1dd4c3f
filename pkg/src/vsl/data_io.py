"""Dataset files, the synthetic main/secondary-content generator and batching.

File formats
------------
Captions: JSON array of ``{"image_id": str, "captions": [str, ...]}``. An
optional ``"split"`` field (train/val/test) is honoured; other extra fields
are ignored by :func:`load_captions`.

Features ("FVEC"): ``b"FVEC"``, one version byte, uint32 count, uint32 dim
(little-endian), then count*dim little-endian float32 values, row-major.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluator import GroundTruth

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_FVEC_HEADER = struct.Struct("<4sBII")

SPLITS = ("train", "val", "test")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- captions ---------------------------------------------------------------


@dataclass
class CaptionRecord:
    image_id: str
    captions: list[str]
    split: str | None = None
    extra: dict = field(default_factory=dict)


def load_captions(path) -> list[CaptionRecord]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed caption JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValueError("malformed caption JSON: top level must be an array")
    records, seen = [], set()
    for pos, obj in enumerate(data):
        if not isinstance(obj, dict) or "image_id" not in obj or "captions" not in obj:
            raise ValueError(f"malformed caption JSON: entry {pos} needs image_id and captions")
        image_id = str(obj["image_id"])
        caps = obj["captions"]
        if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
            raise ValueError(f"malformed caption JSON: captions of {image_id!r} must be strings")
        if image_id in seen:
            raise ValueError(f"duplicate image id: {image_id!r}")
        if len(caps) == 0:
            raise ValueError(f"image has no positive texts: {image_id!r}")
        split = obj.get("split")
        if split is not None and split not in SPLITS:
            raise ValueError(f"unknown split {split!r} for image {image_id!r}")
        seen.add(image_id)
        extra = {k: v for k, v in obj.items() if k not in ("image_id", "captions", "split")}
        records.append(CaptionRecord(image_id, list(caps), split, extra))
    return records


def write_captions(path, records: Sequence[CaptionRecord]) -> None:
    out = []
    for r in records:
        obj = {"image_id": r.image_id, "captions": list(r.captions)}
        if r.split is not None:
            obj["split"] = r.split
        obj.update(r.extra)
        out.append(obj)
    atomic_write_bytes(path, (json.dumps(out, indent=1) + "\n").encode("utf-8"))


# -- features ---------------------------------------------------------------


def features_to_bytes(mat) -> bytes:
    mat = np.asarray(mat)
    if mat.ndim != 2:
        raise ValueError("feature matrix must be 2-d")
    header = _FVEC_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, mat.shape[0], mat.shape[1])
    return header + np.ascontiguousarray(mat, dtype="<f4").tobytes()


def write_features(path, mat) -> None:
    atomic_write_bytes(path, features_to_bytes(mat))


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FVEC_HEADER.size or raw[:4] != FVEC_MAGIC:
        raise ValueError("bad magic: not an FVEC feature file")
    _, version, count, dim = _FVEC_HEADER.unpack_from(raw)
    if version != FVEC_VERSION:
        raise ValueError(f"unsupported FVEC version {version}")
    payload = raw[_FVEC_HEADER.size:]
    need = count * dim * 4
    if len(payload) < need:
        raise ValueError("truncated feature payload")
    if len(payload) > need:
        raise ValueError("trailing bytes after feature payload")
    mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    if np.isnan(mat).any():
        raise ValueError("NaN entries in feature payload")
    return mat.astype(np.float64)


# -- dataset ----------------------------------------------------------------


@dataclass
class RetrievalDataset:
    """Images paired with Q_i positive texts each.

    Texts are stored contiguously by image: the texts of image i are
    ``ground_truth.img_to_txts[i]``.
    """

    image_features: np.ndarray
    text_features: np.ndarray
    captions: list[list[str]]
    image_ids: list[str]
    splits: list[str]
    ground_truth: GroundTruth = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ground_truth is None:
            self.ground_truth = GroundTruth.from_counts([len(c) for c in self.captions])
        n_img = len(self.captions)
        if any(len(c) == 0 for c in self.captions):
            raise ValueError("image has no positive texts")
        if self.image_features.shape[0] != n_img:
            raise ValueError(f"{self.image_features.shape[0]} image feature rows for {n_img} images")
        n_txt = sum(len(c) for c in self.captions)
        if self.text_features.shape[0] != n_txt:
            raise ValueError(f"{self.text_features.shape[0]} text feature rows for {n_txt} captions")
        if len(self.splits) != n_img or len(self.image_ids) != n_img:
            raise ValueError("split labels and image ids must cover every image")

    @property
    def n_images(self) -> int:
        return len(self.captions)

    @property
    def n_texts(self) -> int:
        return self.text_features.shape[0]

    def split_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def subset(self, images: Sequence[int]) -> "RetrievalDataset":
        images = [int(i) for i in images]
        texts = [t for i in images for t in self.ground_truth.img_to_txts[i]]
        remap = {old: new for new, old in enumerate(images)}
        meta = {}
        for key, values in self.meta.items():
            if key == "confuser_target":
                # indices into the image list; dropped when the target leaves the subset
                meta[key] = [remap.get(values[i], -1) if values[i] >= 0 else -1 for i in images]
            else:
                meta[key] = [values[i] for i in images]
        return RetrievalDataset(
            image_features=self.image_features[images],
            text_features=self.text_features[texts],
            captions=[list(self.captions[i]) for i in images],
            image_ids=[self.image_ids[i] for i in images],
            splits=[self.splits[i] for i in images],
            meta=meta,
        )

    def split(self, name: str) -> "RetrievalDataset":
        return self.subset(self.split_indices(name))

    def caption_records(self) -> list[CaptionRecord]:
        out = []
        for i in range(self.n_images):
            extra = {k: v[i] for k, v in self.meta.items()}
            if "confuser_target" in extra:
                t = extra["confuser_target"]
                extra["confuser_target"] = self.image_ids[t] if t >= 0 else None
            out.append(CaptionRecord(self.image_ids[i], self.captions[i], self.splits[i], extra))
        return out


DATASET_FILES = {
    "captions": "dataset.captions.json",
    "img": "features.img.fvec",
    "txt": "features.txt.fvec",
}


def save_dataset(ds: RetrievalDataset, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / v for k, v in DATASET_FILES.items()}
    write_features(paths["img"], ds.image_features)
    write_features(paths["txt"], ds.text_features)
    write_captions(paths["captions"], ds.caption_records())
    return paths


_META_KEYS = ("main_concept", "secondary_concept", "confuser_target")


def load_dataset(data_dir) -> RetrievalDataset:
    data_dir = Path(data_dir)
    records = load_captions(data_dir / DATASET_FILES["captions"])
    img = load_features(data_dir / DATASET_FILES["img"])
    txt = load_features(data_dir / DATASET_FILES["txt"])
    ids = [r.image_id for r in records]
    meta = {}
    if records and all(all(k in r.extra for k in _META_KEYS) for r in records):
        pos = {image_id: i for i, image_id in enumerate(ids)}
        meta = {
            "main_concept": [int(r.extra["main_concept"]) for r in records],
            "secondary_concept": [int(r.extra["secondary_concept"]) for r in records],
            "confuser_target": [
                pos[r.extra["confuser_target"]] if r.extra["confuser_target"] is not None else -1
                for r in records
            ],
        }
    return RetrievalDataset(
        image_features=img,
        text_features=txt,
        captions=[r.captions for r in records],
        image_ids=ids,
        splits=[r.split or "train" for r in records],
        meta=meta,
    )


# -- synthetic data ---------------------------------------------------------

# Disjoint word pools per concept; shared function words only.
_CONCEPT_WORDS = [
    (("dog", "puppy", "hound"), ("runs", "jumps", "plays"), ("park", "field", "lawn"), ("brown", "small", "happy")),
    (("surfer", "swimmer", "diver"), ("rides", "paddles", "floats"), ("wave", "ocean", "sea"), ("wet", "tanned", "young")),
    (("train", "locomotive", "tram"), ("arrives", "departs", "waits"), ("station", "platform", "track"), ("red", "long", "old")),
    (("pizza", "sandwich", "burger"), ("sits", "rests", "lies"), ("plate", "table", "tray"), ("cheesy", "fresh", "hot")),
    (("skier", "snowboarder", "climber"), ("descends", "slides", "glides"), ("slope", "mountain", "snow"), ("fast", "bold", "cold")),
    (("giraffe", "zebra", "elephant"), ("grazes", "walks", "stands"), ("savanna", "zoo", "grassland"), ("tall", "striped", "wild")),
    (("cat", "kitten", "tabby"), ("sleeps", "naps", "curls"), ("sofa", "couch", "cushion"), ("fluffy", "lazy", "gray")),
    (("pilot", "airplane", "jet"), ("lands", "taxis", "soars"), ("runway", "airport", "hangar"), ("silver", "large", "loud")),
    (("chef", "cook", "baker"), ("prepares", "chops", "stirs"), ("kitchen", "counter", "stove"), ("busy", "skilled", "tired")),
    (("cyclist", "rider", "biker"), ("pedals", "races", "turns"), ("road", "street", "lane"), ("quick", "muddy", "steady")),
    (("boat", "sailboat", "canoe"), ("drifts", "sails", "anchors"), ("harbor", "lake", "river"), ("white", "wooden", "small")),
    (("player", "batter", "pitcher"), ("swings", "throws", "catches"), ("stadium", "diamond", "mound"), ("eager", "strong", "focused")),
]

_SCENES = (
    "pets", "beach", "railway", "food", "winter", "safari",
    "home", "aviation", "cooking", "cycling", "sailing", "baseball",
)

_TEMPLATES = [
    "a {adj} {subj} {verb} in the {place}, {scene} scene.",
    "{scene} scene: the {subj} {verb} near a {adj} {place}",
    "A {subj} that {verb} on the {place} in a {scene} scene",
    "{adj} {subj} {verb} by the {place} ({scene} scene).",
    "there is a {subj} which {verb} at the {place}, a {scene} scene",
    "in a {scene} scene a {subj} {verb} across the {adj} {place}",
]


@dataclass
class SynthConfig:
    """Images with a main concept (described by captions) and a secondary one (not described).

    With probability ``confound_rate`` the secondary concept is another
    image's main concept; that other image is recorded as the confuser
    target.
    """

    num_images: int = 300
    concepts: int = 6
    confound_rate: float = 0.5
    feature_noise: float = 0.1
    q_per_image: int = 5
    seed: int = 0
    background_concepts: int = 6
    dim: int = 48
    instance_scale: float = 2.0
    secondary_weight: float = 0.6
    split_fractions: tuple[float, float, float] = (0.6, 0.0, 0.4)

    def __post_init__(self):
        if not 0.0 <= self.confound_rate <= 1.0:
            raise ValueError("confound_rate must lie in [0, 1]")
        if self.concepts < 2:
            raise ValueError("need at least two concepts")
        if self.concepts > len(_CONCEPT_WORDS):
            raise ValueError(
                f"{self.concepts} concepts requested but the caption templates cover {len(_CONCEPT_WORDS)}"
            )
        if not 1 <= self.q_per_image <= len(_TEMPLATES):
            raise ValueError(f"q_per_image must lie in [1, {len(_TEMPLATES)}]")
        if self.num_images < 2:
            raise ValueError("need at least two images")
        if self.concepts + self.background_concepts >= self.dim:
            raise ValueError("dim too small for the concept basis")


def _caption(template: str, concept: int, attrs) -> str:
    pools = _CONCEPT_WORDS[concept]
    subj, verb, place, adj = (pools[slot][v] for slot, v in enumerate(attrs))
    return template.format(subj=subj, verb=verb, place=place, adj=adj, scene=_SCENES[concept])


def _split_labels(n: int, fractions, rng: np.random.Generator) -> list[str]:
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    counts = np.floor(fr * n).astype(int)
    counts[0] += n - counts.sum()
    labels = np.repeat(np.arange(3), counts)
    rng.shuffle(labels)
    return [SPLITS[k] for k in labels]


def synth_generate(cfg: SynthConfig) -> RetrievalDataset:
    """Generate images whose captions describe only their main concept.

    Each image draws one word per slot (subject, verb, place, adjective)
    from its main concept's pools; these attributes appear in every one of
    its captions and, as fixed random directions, in both its image and text
    features. Captions of every image use the same templates, so shared
    function words carry zero IDF.
    """
    rng = np.random.default_rng(cfg.seed)
    n, q = cfg.num_images, cfg.q_per_image
    n_basis = cfg.concepts + cfg.background_concepts
    n_slots = len(_CONCEPT_WORDS[0])
    n_values = len(_CONCEPT_WORDS[0][0])

    basis, _ = np.linalg.qr(rng.standard_normal((cfg.dim, cfg.dim)))
    concept_vec = basis[:, :n_basis].T
    # detail directions live outside the concept span and are shared by both modalities
    complement = basis[:, n_basis:]
    attr_vec = rng.standard_normal((cfg.concepts, n_slots, n_values, complement.shape[1])) @ complement.T
    attr_vec /= np.sqrt(complement.shape[1] * n_slots)

    splits = _split_labels(n, cfg.split_fractions, rng)
    main = np.arange(n) % cfg.concepts
    rng.shuffle(main)
    attrs = rng.integers(n_values, size=(n, n_slots))

    secondary = np.empty(n, dtype=np.int64)
    confuser = np.full(n, -1, dtype=np.int64)
    confounded = rng.random(n) < cfg.confound_rate
    for i in range(n):
        if confounded[i]:
            # plant another image's main concept, same split so it can be evaluated
            pool = [j for j in range(n) if splits[j] == splits[i] and main[j] != main[i]]
            if pool:
                j = pool[rng.integers(len(pool))]
                secondary[i] = main[j]
                confuser[i] = j
                continue
        secondary[i] = cfg.concepts + rng.integers(cfg.background_concepts)

    slots = np.arange(n_slots)
    details = np.stack([attr_vec[main[i], slots, attrs[i]].sum(axis=0) for i in range(n)])
    content = concept_vec[main] + cfg.instance_scale * details
    # a planted confuser carries the target's whole main content (concept and details)
    background = np.where(
        (confuser >= 0)[:, None], content[np.maximum(confuser, 0)], concept_vec[secondary]
    )
    img_feats = (
        content
        + cfg.secondary_weight * background
        + cfg.feature_noise * rng.standard_normal((n, cfg.dim))
    )
    txt_feats = (
        np.repeat(content, q, axis=0)
        + cfg.feature_noise * rng.standard_normal((n * q, cfg.dim))
    )
    captions = [
        [_caption(_TEMPLATES[p], int(main[i]), attrs[i]) for p in range(q)] for i in range(n)
    ]

    # float32 storage precision, so an exported dataset loads back identical
    return RetrievalDataset(
        image_features=img_feats.astype(np.float32).astype(np.float64),
        text_features=txt_feats.astype(np.float32).astype(np.float64),
        captions=captions,
        image_ids=[f"synth{i:05d}" for i in range(n)],
        splits=splits,
        meta={
            "main_concept": main.tolist(),
            "secondary_concept": secondary.tolist(),
            "confuser_target": confuser.tolist(),
        },
    )


# -- batching ---------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    texts: np.ndarray
    pt_sets: list[list[str]]


def batch_sampler(ds: RetrievalDataset, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffled image batches, each image paired with one of its captions.

    The paired caption rotates with the epoch. The trailing partial batch is
    dropped.
    """
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    n = ds.n_images
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}; clamp the batch size to {n}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    gt = ds.ground_truth
    batches = []
    for start in range(0, n - batch_size + 1, batch_size):
        imgs = order[start:start + batch_size]
        txts = np.array([gt.img_to_txts[i][(epoch + i) % len(gt.img_to_txts[i])] for i in imgs])
        batches.append(Batch(imgs, txts, [ds.captions[i] for i in imgs]))
    return batches
