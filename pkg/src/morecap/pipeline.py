"""The full captioner (SLGC -> OTAG -> decoder), training, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .config import RunConfig
from .data import (
    Caption,
    CaptionSample,
    EmbeddingTable,
    Scene,
    Vocabulary,
    load_embeddings,
    split_of,
)
from .decoder import DecoderParams, generate, sequence_loss
from .geometry import VERTICAL_BOTTOM, VERTICAL_TOP, vertical_case
from .metrics import (
    CorpusStats,
    EvalRecord,
    RelationalDictionary,
    bleu4,
    cider,
    m_at_k_iou,
    relational_word_stats,
    rouge_l,
)
from .otag import OtagParams, otag_batch
from .slgc import (
    GraphStructure,
    SlgcParams,
    SpatialWordBank,
    build_layout_graph,
    layout_structure,
    merge_structures,
    slgc_stack,
)

log = logging.getLogger(__name__)


class MoreModel:
    def __init__(self, config: RunConfig, vocab: Vocabulary, embeddings: EmbeddingTable,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.vocab = vocab
        self.embeddings = embeddings
        self.bank = SpatialWordBank.from_embeddings(embeddings)
        rng = np.random.default_rng(config.seed)
        word_emb = embeddings.matrix(vocab)
        self.slgc = [SlgcParams.init(rng, f"slgc.{k}") for k in range(config.slgc_layers)]
        self.otag = OtagParams.init(rng)
        self.decoder = DecoderParams.init(rng, word_emb, config.hidden)
        if params is not None:
            self.load_params(params)
        self._structures: dict[str, GraphStructure] = {}

    def all_params(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.slgc):
            out.update(layer.named(f"slgc.{k}"))
        out.update(self.otag.named())
        out.update(self.decoder.named())
        return out

    def trainable(self) -> dict[str, Tensor]:
        """Parameters that the active configuration actually uses."""
        out = {}
        for k, layer in enumerate(self.slgc):
            named = layer.named(f"slgc.{k}")
            if not self.config.use_edges:
                named = {n: p for n, p in named.items()
                         if n.rsplit(".", 1)[1] not in ("W_v", "W_c", "W_alpha", "W_e", "W_3", "W_6")}
            out.update(named)
        if self.config.use_otag:
            named = self.otag.named()
            if not self.config.quintuplets:
                named.pop("otag.W_q")
            out.update(named)
        out.update(self.decoder.named())
        return out

    def load_params(self, params: dict[str, Tensor]) -> None:
        mine = self.all_params()
        missing = set(mine) - set(params)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in mine.items():
            if params[name].shape != p.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {params[name].shape}, "
                                 f"model expects {p.shape}")
            p.data = params[name].data.copy()

    # ------------------------------------------------------------- encoding

    def structure(self, scene: Scene) -> GraphStructure:
        s = self._structures.get(scene.scene_id)
        if s is None:
            s = self._structures[scene.scene_id] = layout_structure(scene, self.config.knn, self.bank)
        return s

    def encode(self, scenes: Sequence[Scene], targets: Sequence[tuple[int, int]]):
        """Context for ``targets`` given as (scene position, object index) pairs.

        Returns the target features x (B, 128), the padded context (B, P, 128)
        and its mask.
        """
        parts = [self.structure(s) for s in scenes]
        merged = merge_structures(parts)
        offsets = np.cumsum([0] + [p.n_nodes for p in parts])
        nodes = np.array([offsets[si] + oi for si, oi in targets], dtype=np.int64)
        graph = build_layout_graph(merged, self.slgc[0], self.bank, use_edges=self.config.use_edges)
        graph = slgc_stack(graph, self.slgc)
        x = Tensor(merged.features[nodes])
        if self.config.use_otag:
            ob = otag_batch(graph, nodes, self.otag, self.config.quintuplets)
            return x, ob.updated, ob.mask
        rows = [[int(t)] + list(merged.neighbors[t]) for t in nodes]
        width = max(len(r) for r in rows)
        table = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for b, r in enumerate(rows):
            table[b, : len(r)] = r
            mask[b, : len(r)] = True
        return x, ad.embedding(graph.node_features, table), mask

    # ------------------------------------------------------------ objectives

    def batch_loss(self, samples: Sequence[CaptionSample], scenes: dict[str, Scene]) -> Tensor:
        order: dict[str, int] = {}
        for s in samples:
            order.setdefault(s.scene_id, len(order))
        batch_scenes = [scenes[sid] for sid in order]
        targets = [(order[s.scene_id], scenes[s.scene_id].index_of(s.target_object_id)) for s in samples]
        x, ctx, mask = self.encode(batch_scenes, targets)
        width = max(len(s.tokens) for s in samples)
        toks = np.full((len(samples), width), self.vocab.pad, dtype=np.int64)
        for b, s in enumerate(samples):
            toks[b, : len(s.tokens)] = s.tokens
        return sequence_loss(toks, x, ctx, mask, self.decoder, self.vocab.pad)

    def caption_scene(self, scene: Scene, object_ids: Sequence[int] | None = None) -> list[list[str]]:
        return self.caption_scenes([scene], [object_ids])[0]

    def caption_scenes(self, scenes: Sequence[Scene],
                       object_ids: Sequence[Sequence[int] | None] | None = None) -> list[list[list[str]]]:
        """Greedy captions per scene for the given object ids (default: all objects)."""
        object_ids = object_ids or [None] * len(scenes)
        targets, shape = [], []
        for si, (scene, ids) in enumerate(zip(scenes, object_ids)):
            idx = range(len(scene.objects)) if ids is None else [scene.index_of(i) for i in ids]
            idx = list(idx)
            targets.extend((si, k) for k in idx)
            shape.append(len(idx))
        x, ctx, mask = self.encode(scenes, targets)
        v = self.vocab
        toks = generate(x, ctx, mask, self.decoder, v.start, v.end, banned=(v.pad, v.start),
                        max_len=self.config.max_len)
        words = [v.decode(t) for t in toks]
        out, pos = [], 0
        for n in shape:
            out.append(words[pos:pos + n])
            pos += n
        return out


# --------------------------------------------------------------------- training


@dataclass
class Dataset:
    scenes: dict[str, Scene]
    train: list[CaptionSample]
    val: list[CaptionSample]
    vocab: Vocabulary


def make_dataset(scenes: Sequence[Scene], captions: Sequence[Caption], val_percent: int = 20,
                 vocab: Vocabulary | None = None) -> Dataset:
    vocab = vocab or Vocabulary.build(captions)
    by_id = {s.scene_id: s for s in scenes}
    train, val = [], []
    for c in captions:
        if c.scene_id not in by_id:
            raise ValueError(f"caption refers to unknown scene {c.scene_id!r}")
        (val if split_of(c.scene_id, val_percent) == "val" else train).append(vocab.sample(c))
    return Dataset(by_id, train, val, vocab)


def new_adam(config: RunConfig) -> AdamState:
    return AdamState(lr=config.lr, weight_decay=config.weight_decay)


def train(model: MoreModel, data: Dataset, adam: AdamState | None = None, start_epoch: int = 0,
          on_epoch: Callable[[dict], None] | None = None,
          stop_epoch: int | None = None) -> AdamState:
    """Teacher-forced training; epoch shuffles depend only on (seed, epoch)."""
    cfg = model.config
    adam = adam or new_adam(cfg)
    params = model.trainable()
    samples = data.train
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    for epoch in range(start_epoch, stop):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        losses = []
        for b in range(0, len(samples), cfg.batch_size):
            batch = [samples[i] for i in order[b:b + cfg.batch_size]]
            with Tape() as tape:
                loss = model.batch_loss(batch, data.scenes)
            ad.zero_grad(params)
            ad.backward(loss, tape)
            ad.adam_step(params, adam)
            losses.append(loss.item())
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
               "steps": adam.step}
        log.info("epoch %d loss %.4f", rec["epoch"], rec["loss"])
        if on_epoch is not None:
            on_epoch(rec)
    return adam


# ------------------------------------------------------------------- evaluation


@dataclass
class Prediction:
    scene: Scene
    object_index: int
    caption: list[str]
    references: list[list[str]]

    @property
    def object_id(self) -> int:
        return self.scene.objects[self.object_index].id

    def to_json(self) -> dict:
        box = self.scene.objects[self.object_index].box
        return {"scene_id": self.scene.scene_id, "object_id": self.object_id,
                "box": box.to_list(), "caption": self.caption}


def predict(model: MoreModel, scenes: Sequence[Scene], refs: dict[tuple[str, int], list[list[str]]],
            chunk: int = 16) -> list[Prediction]:
    out = []
    for k in range(0, len(scenes), chunk):
        part = scenes[k:k + chunk]
        for scene, caps in zip(part, model.caption_scenes(part)):
            for oi, cap in enumerate(caps):
                oid = scene.objects[oi].id
                out.append(Prediction(scene, oi, cap, refs.get((scene.scene_id, oid), [])))
    return out


def references_by_object(captions: Iterable[Caption]) -> dict[tuple[str, int], list[list[str]]]:
    refs: dict[tuple[str, int], list[list[str]]] = {}
    for c in captions:
        refs.setdefault((c.scene_id, c.object_id), []).append(list(c.words))
    return refs


def score_report(preds: Sequence[Prediction], k_list: Sequence[float],
                 dictionary: RelationalDictionary = RelationalDictionary()) -> list[dict]:
    """One report block per IoU threshold; boxes are ground truth (GT-box mode)."""
    preds = [p for p in preds if p.references]
    records = [EvalRecord(p.scene.objects[p.object_index].box, p.scene.objects[p.object_index].box,
                          p.caption, p.references) for p in preds]
    stats = CorpusStats.build(r.references for r in records)
    per = {
        "cider": [cider(r.candidate, r.references, stats) for r in records],
        "bleu4": [bleu4(r.candidate, r.references) for r in records],
        "rougeL": [rouge_l(r.candidate, r.references) for r in records],
    }
    simple, complex_, total = relational_word_stats((p.caption for p in preds), dictionary)
    blocks = []
    for k in k_list:
        block = {"k": float(k)}
        for name, scores in per.items():
            block[name] = m_at_k_iou(records, scores, k) if records else 0.0
        block["meteor"] = None
        block["n"] = len(records)
        block["relational"] = {"simple": simple, "complex": complex_, "total": total}
        blocks.append(block)
    return blocks


def vertical_accuracy(preds: Sequence[Prediction]) -> tuple[float, int]:
    """Share of stacked-pair targets whose caption names the right vertical word only."""
    hits = n = 0
    for p in preds:
        scene = p.scene
        target = scene.objects[p.object_index]
        others = [o for o in scene.objects if o is not target]
        if not others:
            continue
        ref = min(others, key=lambda o: (float(np.sum((o.box.center - target.box.center) ** 2)),
                                         scene.objects.index(o)))
        case = vertical_case(target.box, ref.box)
        if case not in (VERTICAL_TOP, VERTICAL_BOTTOM):
            continue
        want, other = ("top", "bottom") if case == VERTICAL_TOP else ("bottom", "top")
        n += 1
        hits += want in p.caption and other not in p.caption
    return (hits / n if n else float("nan")), n


def build_model(config: RunConfig, vocab: Vocabulary, params: dict[str, Tensor] | None = None) -> MoreModel:
    emb = load_embeddings(config.embeddings, list(vocab.itos) + ["left", "right", "front", "behind",
                                                                  "besides", "top", "bottom"])
    return MoreModel(config, vocab, emb, params)
