"""Scenes, captions, vocabulary and word embeddings, plus the synthetic benchmark.

The synthetic scenes put axis-aligned boxes on a jittered floor grid, with
some boxes stacked on others. Captions come from :func:`template_caption`,
which derives every relation word from the box geometry, so the ground truth
for relational accuracy is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    VERTICAL_BOTTOM,
    VERTICAL_TOP,
    Box3,
    relative_offset,
    vertical_case,
)

FEATURE_DIM = 128
EMBED_DIM = 300
MAX_OBJECTS = 256
MAX_CAPTION_WORDS = 30

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)


class SceneFormatError(ValueError):
    """A scene/caption/embedding file violates its format."""


class GenerationError(RuntimeError):
    """Synthetic placement failed within the retry budget."""


@dataclass
class ObjectProposal:
    id: int
    feature: np.ndarray
    box: Box3
    class_label: str

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.feature.shape != (FEATURE_DIM,):
            raise ValueError(f"object {self.id}: feature must have length {FEATURE_DIM}, "
                             f"got {self.feature.shape}")
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"object {self.id}: feature has non-finite values")


@dataclass
class Scene:
    scene_id: str
    objects: list[ObjectProposal]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene {self.scene_id}: needs 1..{MAX_OBJECTS} objects, "
                             f"got {len(self.objects)}")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.scene_id}: duplicate object ids")

    def index_of(self, object_id: int) -> int:
        for k, o in enumerate(self.objects):
            if o.id == object_id:
                return k
        valid = [o.id for o in self.objects]
        raise KeyError(f"object id {object_id} not in scene {self.scene_id}; valid ids: {valid}")

    @property
    def boxes(self) -> list[Box3]:
        return [o.box for o in self.objects]

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "objects": [
                {"id": o.id, "class": o.class_label, "box": o.box.to_list(),
                 "feature": o.feature.tolist()}
                for o in self.objects
            ],
        }


@dataclass
class Caption:
    """A caption in word form, as stored in caption JSONL."""

    scene_id: str
    object_id: int
    words: list[str]


@dataclass
class CaptionSample:
    scene_id: str
    target_object_id: int
    tokens: list[int]

    def __post_init__(self):
        if len(self.tokens) > MAX_CAPTION_WORDS + 2:
            raise ValueError(f"caption has {len(self.tokens)} tokens, max is {MAX_CAPTION_WORDS + 2}")


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, captions: Iterable[Caption]) -> "Vocabulary":
        words = sorted({w for c in captions for w in c.words})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def start(self) -> int:
        return self.stoi[START]

    @property
    def end(self) -> int:
        return self.stoi[END]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    def encode(self, words: Sequence[str]) -> list[int]:
        words = list(words)[:MAX_CAPTION_WORDS]
        return [self.start] + [self.stoi.get(w, self.unk) for w in words] + [self.end]

    def decode(self, tokens: Sequence[int]) -> list[str]:
        out = []
        for t in tokens:
            if t == self.end:
                break
            if t in (self.start, self.pad):
                continue
            out.append(self.itos[t])
        return out

    def sample(self, caption: Caption) -> CaptionSample:
        return CaptionSample(caption.scene_id, caption.object_id, self.encode(caption.words))

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(itos[len(RESERVED):])


# ----------------------------------------------------------------- featurizer


DEFAULT_CLASSES: dict[str, tuple[float, float, float]] = {
    # class: (h, w, l) base extents
    "chair": (0.9, 0.5, 0.5),
    "table": (0.75, 0.9, 1.4),
    "desk": (0.75, 0.7, 1.2),
    "cabinet": (1.0, 0.5, 0.8),
    "lamp": (0.5, 0.3, 0.3),
    "box": (0.35, 0.4, 0.4),
    "monitor": (0.45, 0.2, 0.55),
    "sofa": (0.8, 0.9, 1.6),
}


@dataclass(frozen=True)
class Palette:
    """Fixed random projection that stands in for detector features."""

    classes: tuple[str, ...] = tuple(DEFAULT_CLASSES)
    seed: int = 20220717
    center_scale: float = 0.25

    def projection(self) -> np.ndarray:
        return _projection(self.classes, self.seed)


_PROJECTIONS: dict[tuple, np.ndarray] = {}


def _projection(classes: tuple[str, ...], seed: int) -> np.ndarray:
    key = (classes, seed)
    if key not in _PROJECTIONS:
        n_in = len(classes) + 6
        rng = np.random.default_rng(seed)
        _PROJECTIONS[key] = rng.standard_normal((n_in, FEATURE_DIM)) / math.sqrt(n_in)
    return _PROJECTIONS[key]


def featurize_object(class_label: str, box: Box3, palette: Palette = Palette()) -> np.ndarray:
    """Project ``[class one-hot; h, w, l; scaled center]`` to 128 dims."""
    if class_label not in palette.classes:
        raise ValueError(f"unknown class {class_label!r}; palette has {list(palette.classes)}")
    onehot = np.zeros(len(palette.classes))
    onehot[palette.classes.index(class_label)] = 1.0
    geo = [box.h, box.w, box.l] + [c * palette.center_scale for c in (box.cx, box.cy, box.cz)]
    return np.concatenate([onehot, geo]) @ palette.projection()


# -------------------------------------------------------------- scene JSONL


def _parse_object(rec, lineno: int, palette: Palette) -> ObjectProposal:
    def fail(field_name: str, msg: str):
        raise SceneFormatError(f"line {lineno}: field {field_name!r}: {msg}")

    if not isinstance(rec, dict):
        fail("objects", "entries must be JSON objects")
    for key in ("id", "class", "box"):
        if key not in rec:
            fail(key, "missing")
    if not isinstance(rec["id"], int):
        fail("id", "must be an integer")
    box_vals = rec["box"]
    if not isinstance(box_vals, list) or len(box_vals) != 6:
        fail("box", "must be a list of 6 numbers [cx, cy, cz, h, w, l]")
    try:
        box = Box3.from_list(box_vals)
    except (TypeError, ValueError) as exc:
        fail("box", str(exc))
    feat = rec.get("feature")
    if feat is None:
        try:
            feat = featurize_object(rec["class"], box, palette)
        except ValueError as exc:
            fail("class", str(exc))
    else:
        if not isinstance(feat, list) or len(feat) != FEATURE_DIM:
            n = len(feat) if isinstance(feat, list) else "non-list"
            fail("feature", f"must have {FEATURE_DIM} values, got {n}")
    try:
        return ObjectProposal(rec["id"], np.asarray(feat, dtype=np.float64), box, str(rec["class"]))
    except (TypeError, ValueError) as exc:
        fail("feature", str(exc))


def load_scenes(path: str | Path, palette: Palette = Palette()) -> list[Scene]:
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {lineno}: malformed JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise SceneFormatError(f"line {lineno}: expected a JSON object")
            if "scene_id" not in rec:
                raise SceneFormatError(f"line {lineno}: field 'scene_id': missing")
            if not isinstance(rec.get("objects"), list):
                raise SceneFormatError(f"line {lineno}: field 'objects': missing or not a list")
            objects = [_parse_object(o, lineno, palette) for o in rec["objects"]]
            try:
                scenes.append(Scene(str(rec["scene_id"]), objects))
            except ValueError as exc:
                raise SceneFormatError(f"line {lineno}: field 'objects': {exc}") from None
    return scenes


def write_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_captions(path: str | Path) -> list[Caption]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Caption(str(rec["scene_id"]), int(rec["object_id"]),
                                   [str(w) for w in rec["tokens"]]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SceneFormatError(f"line {lineno}: bad caption record: {exc}") from None
    return out


def write_captions(path: str | Path, captions: Iterable[Caption]) -> None:
    with open(path, "w") as fh:
        for c in captions:
            rec = {"scene_id": c.scene_id, "object_id": c.object_id, "tokens": c.words}
            fh.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------- embeddings


def pseudo_embedding(word: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Unit-norm vector seeded by a SHA-256 of the word (stable across runs)."""
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, word: str) -> np.ndarray:
        v = self.vectors.get(word)
        if v is None:
            v = self.vectors[word] = pseudo_embedding(word)
        return v

    def matrix(self, vocab: Vocabulary) -> np.ndarray:
        return np.stack([self[w] for w in vocab.itos])


def load_embeddings(path: str | Path | None, vocab: Vocabulary | Iterable[str]) -> EmbeddingTable:
    """GloVe-style text vectors for the vocabulary; missing words get pseudo-embeddings."""
    words = vocab.itos if isinstance(vocab, Vocabulary) else list(vocab)
    wanted = set(words)
    table = EmbeddingTable()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip().split()
                if not parts:
                    continue
                if len(parts) != EMBED_DIM + 1:
                    raise SceneFormatError(f"line {lineno}: expected word + {EMBED_DIM} floats, "
                                           f"got {len(parts) - 1} values")
                if parts[0] in wanted:
                    vec = np.asarray([float(x) for x in parts[1:]])
                    if not np.all(np.isfinite(vec)):
                        raise SceneFormatError(f"line {lineno}: non-finite value")
                    table.vectors[parts[0]] = vec
    for w in words:
        table[w]
    return table


# ---------------------------------------------------------- template captions


def _nearest_others(scene: Scene, idx: int) -> list[int]:
    c = scene.objects[idx].box.center
    others = [k for k in range(len(scene.objects)) if k != idx]
    others.sort(key=lambda k: (float(np.sum((scene.objects[k].box.center - c) ** 2)), k))
    return others


def relation_phrase(target: Box3, reference: Box3) -> list[str]:
    """First-order relation of ``target`` with respect to ``reference``."""
    vc = vertical_case(target, reference)
    if vc == VERTICAL_TOP:
        return ["on", "top", "of"]
    if vc == VERTICAL_BOTTOM:
        return ["at", "the", "bottom", "of"]
    dx, dy = relative_offset(target, reference)
    if abs(dx) >= abs(dy):
        return ["to", "the", "left" if dx < 0 else "right", "of"]
    return ["in", "front", "of"] if dy > 0 else ["behind"]


def multi_order_clause(scene: Scene, idx: int) -> list[str]:
    target = scene.objects[idx]
    cls = target.class_label
    same = sorted((k for k, o in enumerate(scene.objects) if o.class_label == cls),
                  key=lambda k: (scene.objects[k].box.cx, k))
    if len(same) >= 2:
        pos = same.index(idx)
        if pos == 0:
            return ["it", "is", "the", "leftmost", cls, "."]
        if pos == len(same) - 1:
            return ["it", "is", "the", "rightmost", cls, "."]
        if len(same) >= 3 and pos in (1, len(same) - 2):
            side = "left" if pos == 1 else "right"
            return ["it", "is", "the", "second", cls, "from", "the", side, "."]
    near = _nearest_others(scene, idx)[:2]
    if len(near) == 2:
        a, b = (scene.objects[k] for k in near)
        da, db = a.box.cx - target.box.cx, b.box.cx - target.box.cx
        if da * db < 0:
            left, right = (a, b) if da < 0 else (b, a)
            return ["it", "is", "between", "the", left.class_label, "and", "the",
                    right.class_label, "."]
    return []


def template_caption(scene: Scene, target_id: int) -> list[str]:
    idx = scene.index_of(target_id)
    target = scene.objects[idx]
    cls = target.class_label
    if len(scene.objects) == 1:
        return ["this", "is", "a", cls, "."]
    ref = scene.objects[_nearest_others(scene, idx)[0]]
    words = ["the", cls, "is"] + relation_phrase(target.box, ref.box) + ["the", ref.class_label, "."]
    return (words + multi_order_clause(scene, idx))[:MAX_CAPTION_WORDS]


# ---------------------------------------------------------- synthetic scenes


@dataclass
class GeneratorConfig:
    n_scenes: int = 200
    min_objects: int = 6
    max_objects: int = 6
    classes: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_CLASSES))
    stack_prob: float = 0.25
    grid_size: int = 4
    spacing: float = 2.6
    xy_jitter: float = 0.3
    size_jitter: float = 0.15
    stack_gap: float = 0.02
    max_retries: int = 50
    palette_seed: int = 20220717

    def validate(self) -> None:
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if not 1 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValueError("need 1 <= min_objects <= max_objects <= 256")
        if not 0.0 <= self.stack_prob <= 1.0:
            raise ValueError("stack_prob must be in [0, 1]")
        if not self.classes:
            raise ValueError("classes must not be empty")
        for name, ext in self.classes.items():
            if len(ext) != 3 or min(ext) <= 0:
                raise ValueError(f"class {name!r}: extents must be 3 positive numbers")
        if self.spacing <= 0 or self.xy_jitter < 0 or not 0 <= self.size_jitter < 1:
            raise ValueError("spacing must be positive, jitters non-negative, size_jitter < 1")

    @property
    def palette(self) -> Palette:
        return Palette(classes=tuple(self.classes), seed=self.palette_seed)


def _overlaps_xy(a: Box3, b: Box3, margin: float = 0.05) -> bool:
    return (abs(a.cx - b.cx) < (a.l + b.l) / 2 + margin
            and abs(a.cy - b.cy) < (a.w + b.w) / 2 + margin)


def _sample_extents(rng, cfg: GeneratorConfig, cls: str) -> tuple[float, float, float]:
    h, w, l = cfg.classes[cls]
    f = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3)
    return h * f[0], w * f[1], l * f[2]


def _generate_scene(rng, cfg: GeneratorConfig, scene_id: str) -> Scene:
    classes = list(cfg.classes)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    # group objects into floor slots; a slot holds one box or a stacked pair
    slots: list[int] = []
    remaining = n
    while remaining > 0:
        if remaining >= 2 and rng.random() < cfg.stack_prob:
            slots.append(2)
            remaining -= 2
        else:
            slots.append(1)
            remaining -= 1
    n_cells = cfg.grid_size * cfg.grid_size
    if len(slots) > n_cells:
        raise GenerationError(f"{scene_id}: {len(slots)} floor slots exceed {n_cells} grid cells")
    cells = rng.permutation(n_cells)[: len(slots)]
    floor: list[Box3] = []
    placed: list[tuple[str, Box3]] = []
    for cell, size in zip(cells, slots):
        gx, gy = divmod(int(cell), cfg.grid_size)
        cls = classes[int(rng.integers(len(classes)))]
        h, w, l = _sample_extents(rng, cfg, cls)
        for _ in range(cfg.max_retries):
            jx, jy = rng.uniform(-cfg.xy_jitter, cfg.xy_jitter, size=2)
            box = Box3(gx * cfg.spacing + jx, gy * cfg.spacing + jy, h / 2, h, w, l)
            if not any(_overlaps_xy(box, other) for other in floor):
                break
        else:
            raise GenerationError(f"{scene_id}: no free placement after {cfg.max_retries} retries")
        floor.append(box)
        placed.append((cls, box))
        if size == 2:
            top_cls = classes[int(rng.integers(len(classes)))]
            th, tw, tl = _sample_extents(rng, cfg, top_cls)
            jx, jy = rng.uniform(-0.05, 0.05, size=2)
            top = Box3(box.cx + jx, box.cy + jy, box.h + cfg.stack_gap + th / 2, th, tw, tl)
            placed.append((top_cls, top))
    palette = cfg.palette
    objects = [ObjectProposal(k, featurize_object(c, b, palette), b, c) for k, (c, b) in enumerate(placed)]
    return Scene(scene_id, objects)


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> tuple[list[Scene], list[Caption]]:
    """Deterministic scenes plus one template caption per object."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    scenes, captions = [], []
    for k in range(cfg.n_scenes):
        scene = _generate_scene(rng, cfg, f"scene{k:04d}")
        scenes.append(scene)
        for o in scene.objects:
            captions.append(Caption(scene.scene_id, o.id, template_caption(scene, o.id)))
    return scenes, captions


def split_of(scene_id: str, val_percent: int = 20) -> str:
    """'val' or 'train', by a stable hash of the scene id."""
    h = int.from_bytes(hashlib.md5(scene_id.encode("utf-8")).digest()[:4], "little")
    return "val" if h % 100 < val_percent else "train"
