"""Object-centric triplet attention graphs.

For each target object, every path ``j -> i`` (triplet) and ``k -> j -> i``
(quintuplet) in the layout graph ending at the target becomes a hyper-node.
Hyper-nodes of one target are projected to 128 dims and exchange messages
through full pairwise attention; different targets never interact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FEATURE_DIM
from .slgc import GraphStructure, LayoutGraph

_OTAG_SHAPES = {
    "W_t": (3 * FEATURE_DIM, 128),
    "W_q": (5 * FEATURE_DIM, 128),
    "W_7": (128, 128),
    "W_8": (128, 128),
    "W_9": (128, 128),
}


@dataclass
class OtagParams:
    W_t: Tensor
    W_q: Tensor
    W_7: Tensor
    W_8: Tensor
    W_9: Tensor

    def __post_init__(self):
        for name, shape in _OTAG_SHAPES.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"OTAG {name} must map {shape[0]}->{shape[1]}, got {got}")

    @classmethod
    def init(cls, rng: np.random.Generator, prefix: str = "otag") -> "OtagParams":
        return cls(**{n: ad.init_linear(rng, *s, name=f"{prefix}.{n}") for n, s in _OTAG_SHAPES.items()})

    def named(self, prefix: str = "otag") -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in _OTAG_SHAPES}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "otag") -> "OtagParams":
        return cls(**{n: params[f"{prefix}.{n}"] for n in _OTAG_SHAPES})


@dataclass(frozen=True)
class Triplet:
    context_id: int
    target_id: int


@dataclass(frozen=True)
class Quintuplet:
    ids: tuple[int, int, int]  # (k, j, i)


def extract_hypernodes(structure: GraphStructure, target: int,
                       use_quintuplets: bool = True) -> list[Triplet | Quintuplet]:
    """Triplets for every ``j in N(i)``, then quintuplets for every ``k in N(j)``."""
    if target in set(structure.global_nodes.tolist()):
        raise ValueError("hyper-nodes are never extracted for a global node")
    nb = structure.neighbors[target]
    out: list[Triplet | Quintuplet] = [Triplet(j, target) for j in nb]
    if use_quintuplets:
        seen = set()
        for j in nb:
            for k in structure.neighbors[j]:
                if (k, j) not in seen:
                    seen.add((k, j))
                    out.append(Quintuplet((k, j, target)))
    return out


@dataclass
class HyperIndex:
    """Index arrays locating every hyper-node's pieces for a set of targets."""

    targets: np.ndarray       # (n_targets,) node index of each target
    trip_nodes: np.ndarray    # (T, 2) node ids (j, i)
    trip_edges: np.ndarray    # (T,) edge id of j -> i
    quint_nodes: np.ndarray   # (Q, 3) node ids (k, j, i)
    quint_edges: np.ndarray   # (Q, 2) edge ids of k -> j and j -> i
    slots: np.ndarray         # (n_targets, P) rows into [triplets; quintuplets]
    mask: np.ndarray          # (n_targets, P)
    kinds: list[list[Triplet | Quintuplet]]


def hyper_index(structure: GraphStructure, targets, use_quintuplets: bool = True) -> HyperIndex:
    targets = np.asarray(targets, dtype=np.int64)
    kinds = [extract_hypernodes(structure, int(t), use_quintuplets) for t in targets]
    trips = [(h.context_id, h.target_id) for hs in kinds for h in hs if isinstance(h, Triplet)]
    quints = [h.ids for hs in kinds for h in hs if isinstance(h, Quintuplet)]
    eid = structure.edge_id
    n_t = len(trips)
    width = max((len(hs) for hs in kinds), default=1)
    slots = np.zeros((len(targets), width), dtype=np.int64)
    mask = np.zeros((len(targets), width), dtype=bool)
    t_pos = q_pos = 0
    for r, hs in enumerate(kinds):
        row = []
        for h in hs:
            if isinstance(h, Triplet):
                row.append(t_pos)
                t_pos += 1
            else:
                row.append(n_t + q_pos)
                q_pos += 1
        slots[r, : len(row)] = row
        mask[r, : len(row)] = True
    return HyperIndex(
        targets=targets,
        trip_nodes=np.array(trips, dtype=np.int64).reshape(-1, 2),
        trip_edges=np.array([eid[(j, i)] for j, i in trips], dtype=np.int64),
        quint_nodes=np.array(quints, dtype=np.int64).reshape(-1, 3),
        quint_edges=np.array([[eid[(k, j)], eid[(j, i)]] for k, j, i in quints],
                             dtype=np.int64).reshape(-1, 2),
        slots=slots,
        mask=mask,
        kinds=kinds,
    )


def raw_hypernodes(graph: LayoutGraph, idx: HyperIndex) -> tuple[Tensor, Tensor | None]:
    """Concatenated raw triplets (T, 384) and quintuplets (Q, 640).

    When semantic edges are ablated the edge slots are zero.
    """
    v = graph.node_features
    e = graph.edge_features
    if e is None:
        e = Tensor(np.zeros((max(graph.structure.n_edges, 1), FEATURE_DIM)))

    def ed(ids):
        return ad.embedding(e, ids)

    def nd(ids):
        return ad.embedding(v, ids)

    tn, te = idx.trip_nodes, idx.trip_edges
    trip = ad.concat([nd(tn[:, 0]), ed(te), nd(tn[:, 1])])
    quint = None
    if len(idx.quint_nodes):
        qn, qe = idx.quint_nodes, idx.quint_edges
        quint = ad.concat([nd(qn[:, 0]), ed(qe[:, 0]), nd(qn[:, 1]), ed(qe[:, 1]), nd(qn[:, 2])])
    return trip, quint


def project_hypernodes(raw, params: OtagParams) -> Tensor:
    """Linear projection of raw triplets (384) or quintuplets (640) to 128 dims."""
    raw = ad.as_tensor(raw)
    width = raw.shape[-1]
    if width == 3 * FEATURE_DIM:
        return ad.matmul(raw, params.W_t)
    if width == 5 * FEATURE_DIM:
        return ad.matmul(raw, params.W_q)
    raise ad.ShapeError(f"project_hypernodes: raw length must be 384 or 640, got {width}")


def otag_attention(hyper: Tensor, params: OtagParams, mask: np.ndarray | None = None,
                   return_attention: bool = False):
    """Attention message passing inside each target's hyper-node set.

    ``hyper`` is (P, 128) for one target or (n_targets, P, 128) padded with
    ``mask`` (n_targets, P). Each hyper-node attends over all valid hyper-nodes
    of its target, itself included.
    """
    single = hyper.data.ndim == 2
    if single:
        hyper = ad.reshape(hyper, (1,) + hyper.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(hyper.shape[:2], dtype=bool)
    a = ad.relu(ad.matmul(hyper, params.W_7))
    b = ad.relu(ad.matmul(hyper, params.W_8))
    scores = ad.matmul(a, ad.transpose(b))                  # (n, P, P)
    pair_mask = mask[:, :, None] & mask[:, None, :]
    weights = ad.softmax(scores, mask=pair_mask)
    out = ad.matmul(weights, ad.matmul(hyper, params.W_9))
    if single:
        out = ad.reshape(out, out.shape[1:])
        weights = ad.reshape(weights, weights.shape[1:])
    return (out, weights) if return_attention else out


@dataclass
class ObjectCentricGraph:
    target_id: int
    hyper_nodes: Tensor       # (P, 128) projected, before message passing
    attention: np.ndarray     # (P, P)
    updated: Tensor           # (P, 128)
    kinds: list


@dataclass
class OtagBatch:
    """Padded OTAG output for many targets at once (what the decoder consumes)."""

    index: HyperIndex
    projected: Tensor         # (n_targets, P, 128)
    updated: Tensor           # (n_targets, P, 128)
    attention: Tensor         # (n_targets, P, P)

    @property
    def mask(self) -> np.ndarray:
        return self.index.mask


def otag_batch(graph: LayoutGraph, targets, params: OtagParams, use_quintuplets: bool = True) -> OtagBatch:
    idx = hyper_index(graph.structure, targets, use_quintuplets)
    trip, quint = raw_hypernodes(graph, idx)
    proj = project_hypernodes(trip, params)
    if quint is not None:
        proj = ad.concat([proj, project_hypernodes(quint, params)], axis=0)
    padded = ad.embedding(proj, idx.slots)
    updated, attn = otag_attention(padded, params, idx.mask, return_attention=True)
    return OtagBatch(idx, padded, updated, attn)


def otag_all(graph: LayoutGraph, params: OtagParams, use_quintuplets: bool = True) -> dict[int, ObjectCentricGraph]:
    """One object-centric graph per object node of the (possibly packed) layout graph."""
    targets = graph.structure.object_nodes
    batch = otag_batch(graph, targets, params, use_quintuplets)
    n, width = batch.index.mask.shape
    flat_proj = ad.reshape(batch.projected, (n * width, -1))
    flat_upd = ad.reshape(batch.updated, (n * width, -1))
    out = {}
    for r, t in enumerate(targets):
        rows = r * width + np.arange(int(batch.index.mask[r].sum()))
        p = len(rows)
        out[int(t)] = ObjectCentricGraph(
            target_id=int(t),
            hyper_nodes=ad.embedding(flat_proj, rows),
            attention=batch.attention.data[r, :p, :p].copy(),
            updated=ad.embedding(flat_upd, rows),
            kinds=batch.index.kinds[r],
        )
    return out
