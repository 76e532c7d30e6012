"""Spatial layout graph convolution.

Objects become graph nodes, plus one global node (mean feature, placed at the
scene center). Each directed edge ``j -> i`` carries a 128-d semantic feature
built from relation-word embeddings: a learned soft choice among the
horizontal words and a rule-based vertical word. Message passing then mixes
node and edge features with dot-product attention over each node's neighbors.

Several scenes can be packed into one :class:`GraphStructure` (a disjoint
union), which is how training batches run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EMBED_DIM, FEATURE_DIM, EmbeddingTable, Scene
from .geometry import VERTICAL_BOTTOM, VERTICAL_NAMES, VERTICAL_TOP, Box3, knn_graph, vertical_case

HORIZONTAL_WORDS = ("left", "right", "front", "behind", "besides")
VERTICAL_WORDS = ("top", "bottom")
N_HORIZONTAL = len(HORIZONTAL_WORDS)


@dataclass
class SpatialWordBank:
    horizontal: np.ndarray  # (5, 300), rows in HORIZONTAL_WORDS order
    top: np.ndarray
    bottom: np.ndarray

    def __post_init__(self):
        if self.horizontal.shape != (N_HORIZONTAL, EMBED_DIM):
            raise ValueError(f"horizontal bank must be ({N_HORIZONTAL}, {EMBED_DIM}), "
                             f"got {self.horizontal.shape}")
        if self.top.shape != (EMBED_DIM,) or self.bottom.shape != (EMBED_DIM,):
            raise ValueError("vertical bank vectors must have length 300")

    @classmethod
    def from_embeddings(cls, table: EmbeddingTable) -> "SpatialWordBank":
        return cls(np.stack([table[w] for w in HORIZONTAL_WORDS]), table["top"], table["bottom"])


_SLGC_SHAPES = {
    "W_v": (2 * FEATURE_DIM, 128),
    "W_c": (2, 128),
    "W_alpha": (128, N_HORIZONTAL),
    "W_e": (2 * EMBED_DIM, 128),
    **{f"W_{k}": (128, 128) for k in range(1, 7)},
}


@dataclass
class SlgcParams:
    W_v: Tensor
    W_c: Tensor
    W_alpha: Tensor
    W_e: Tensor
    W_1: Tensor
    W_2: Tensor
    W_3: Tensor
    W_4: Tensor
    W_5: Tensor
    W_6: Tensor

    def __post_init__(self):
        for name, shape in _SLGC_SHAPES.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"SLGC {name} must map {shape[0]}->{shape[1]}, got {got}")

    @classmethod
    def init(cls, rng: np.random.Generator, prefix: str = "slgc") -> "SlgcParams":
        return cls(**{n: ad.init_linear(rng, *s, name=f"{prefix}.{n}") for n, s in _SLGC_SHAPES.items()})

    def named(self, prefix: str = "slgc") -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in _SLGC_SHAPES}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "slgc") -> "SlgcParams":
        return cls(**{n: params[f"{prefix}.{n}"] for n in _SLGC_SHAPES})


@dataclass
class GraphStructure:
    """Static (geometry-only) part of one or more packed layout graphs."""

    n_nodes: int
    neighbors: list[list[int]]
    src: np.ndarray          # (E,) context node j of edge j -> i
    dst: np.ndarray          # (E,) receiving node i
    nbr_edges: np.ndarray    # (n_nodes, D) edge ids per receiving node, padded
    nbr_mask: np.ndarray     # (n_nodes, D)
    offsets: np.ndarray      # (E, 2) planar offsets x_j - x_i, y_j - y_i
    r_v: np.ndarray          # (E, 300) vertical relation features
    vcase: np.ndarray        # (E,) geometry.VERTICAL_* codes
    features: np.ndarray     # (n_nodes, 128) input node features
    object_nodes: np.ndarray  # node index of every object, scene by scene
    global_nodes: np.ndarray  # node index of each scene's global node
    node_scene: np.ndarray   # scene position of every node
    edge_id: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def vertical_relation(box_j: Box3, box_i: Box3, bank: SpatialWordBank) -> np.ndarray:
    case = vertical_case(box_j, box_i)
    if case == VERTICAL_TOP:
        return bank.top.copy()
    if case == VERTICAL_BOTTOM:
        return bank.bottom.copy()
    return np.zeros(EMBED_DIM)


def layout_structure(scene: Scene, k: int, bank: SpatialWordBank) -> GraphStructure:
    """KNN object graph plus a global node linked to every object in both directions."""
    n = len(scene.objects)
    g = n
    boxes = scene.boxes
    knn = knn_graph(boxes, k)
    neighbors = [list(nb) + [g] for nb in knn] + [list(range(n))]
    xy = np.array([[b.cx, b.cy] for b in boxes] + [[0.0, 0.0]])
    xy[g] = xy[:n].mean(axis=0)
    src, dst, vcase = [], [], []
    for i, nb in enumerate(neighbors):
        for j in nb:
            src.append(j)
            dst.append(i)
            vcase.append(vertical_case(boxes[j], boxes[i]) if i < n and j < n else 0)
    src = np.array(src, dtype=np.int64)
    dst = np.array(dst, dtype=np.int64)
    vcase = np.array(vcase, dtype=np.int64)
    r_v = np.zeros((len(src), EMBED_DIM))
    r_v[vcase == VERTICAL_TOP] = bank.top
    r_v[vcase == VERTICAL_BOTTOM] = bank.bottom
    feats = np.stack([o.feature for o in scene.objects])
    feats = np.vstack([feats, feats.mean(axis=0, keepdims=True)])
    width = max(len(nb) for nb in neighbors)
    nbr_edges = np.zeros((n + 1, width), dtype=np.int64)
    nbr_mask = np.zeros((n + 1, width), dtype=bool)
    e = 0
    for i, nb in enumerate(neighbors):
        nbr_edges[i, : len(nb)] = np.arange(e, e + len(nb))
        nbr_mask[i, : len(nb)] = True
        e += len(nb)
    return GraphStructure(
        n_nodes=n + 1,
        neighbors=neighbors,
        src=src,
        dst=dst,
        nbr_edges=nbr_edges,
        nbr_mask=nbr_mask,
        offsets=xy[src] - xy[dst],
        r_v=r_v,
        vcase=vcase,
        features=feats,
        object_nodes=np.arange(n),
        global_nodes=np.array([g]),
        node_scene=np.zeros(n + 1, dtype=np.int64),
        edge_id={(int(j), int(i)): q for q, (j, i) in enumerate(zip(src, dst))},
    )


def merge_structures(parts: list[GraphStructure]) -> GraphStructure:
    """Disjoint union; node and edge ids of later parts are shifted."""
    if len(parts) == 1:
        return parts[0]
    node_off = np.cumsum([0] + [p.n_nodes for p in parts])
    edge_off = np.cumsum([0] + [p.n_edges for p in parts])
    width = max(p.nbr_edges.shape[1] for p in parts)
    nbr_edges, nbr_mask = [], []
    for p, eo in zip(parts, edge_off):
        pad = width - p.nbr_edges.shape[1]
        nbr_edges.append(np.pad(p.nbr_edges + eo, ((0, 0), (0, pad))))
        nbr_mask.append(np.pad(p.nbr_mask, ((0, 0), (0, pad))))
    edge_id = {}
    for p, no, eo in zip(parts, node_off, edge_off):
        edge_id.update({(j + int(no), i + int(no)): q + int(eo) for (j, i), q in p.edge_id.items()})
    return GraphStructure(
        n_nodes=int(node_off[-1]),
        neighbors=[[j + int(no) for j in nb] for p, no in zip(parts, node_off) for nb in p.neighbors],
        src=np.concatenate([p.src + no for p, no in zip(parts, node_off)]),
        dst=np.concatenate([p.dst + no for p, no in zip(parts, node_off)]),
        nbr_edges=np.vstack(nbr_edges),
        nbr_mask=np.vstack(nbr_mask),
        offsets=np.vstack([p.offsets for p in parts]),
        r_v=np.vstack([p.r_v for p in parts]),
        vcase=np.concatenate([p.vcase for p in parts]),
        features=np.vstack([p.features for p in parts]),
        object_nodes=np.concatenate([p.object_nodes + no for p, no in zip(parts, node_off)]),
        global_nodes=np.concatenate([p.global_nodes + no for p, no in zip(parts, node_off)]),
        node_scene=np.concatenate([np.full(p.n_nodes, s) for s, p in enumerate(parts)]),
        edge_id=edge_id,
    )


@dataclass
class LayoutGraph:
    structure: GraphStructure
    bank: SpatialWordBank
    node_features: Tensor
    edge_features: Tensor | None = None  # (E, 128); None when semantic edges are ablated
    alpha: Tensor | None = None          # (E, 5)

    @property
    def global_index(self) -> int:
        return int(self.structure.global_nodes[0])

    @property
    def neighbors(self) -> list[list[int]]:
        return self.structure.neighbors

    def debug_records(self) -> list[dict]:
        s = self.structure
        alpha = self.alpha.data if self.alpha is not None else np.full((s.n_edges, N_HORIZONTAL), np.nan)
        return [
            {"i": int(i), "j": int(j), "alpha": [float(a) for a in alpha[q]],
             "vertical_case": VERTICAL_NAMES[int(s.vcase[q])]}
            for q, (j, i) in enumerate(zip(s.src, s.dst))
        ]


def _horizontal(vi: Tensor, vj: Tensor, offsets: np.ndarray, params: SlgcParams,
                bank: SpatialWordBank) -> tuple[Tensor, Tensor]:
    v_ji = ad.matmul(ad.concat([vi, ad.sub(vj, vi)]), params.W_v)
    c_ji = ad.matmul(offsets, params.W_c)
    alpha = ad.softmax(ad.matmul(ad.tanh(ad.add(v_ji, c_ji)), params.W_alpha))
    return alpha, ad.matmul(alpha, bank.horizontal)


def horizontal_relation(v_i, v_j, box_i: Box3, box_j: Box3, params: SlgcParams,
                        bank: SpatialWordBank) -> tuple[Tensor, Tensor]:
    """Soft horizontal-word distribution and the matching mixed embedding for j -> i."""
    offset = np.array([box_j.cx - box_i.cx, box_j.cy - box_i.cy])
    return _horizontal(ad.as_tensor(v_i), ad.as_tensor(v_j), offset, params, bank)


def edge_feature(r_v, r_h, params: SlgcParams) -> Tensor:
    r_v, r_h = ad.as_tensor(r_v), ad.as_tensor(r_h)
    if r_v.shape[-1] != EMBED_DIM or r_h.shape[-1] != EMBED_DIM:
        raise ad.ShapeError(f"edge_feature: relation features must have length {EMBED_DIM}, "
                            f"got {r_v.shape} and {r_h.shape}")
    return ad.matmul(ad.concat([r_v, r_h]), params.W_e)


def compute_edges(structure: GraphStructure, nodes: Tensor, params: SlgcParams,
                  bank: SpatialWordBank) -> tuple[Tensor, Tensor]:
    vi = ad.embedding(nodes, structure.dst)
    vj = ad.embedding(nodes, structure.src)
    alpha, r_h = _horizontal(vi, vj, structure.offsets, params, bank)
    return edge_feature(structure.r_v, r_h, params), alpha


def build_layout_graph(scene: Scene | GraphStructure, params: SlgcParams, bank: SpatialWordBank,
                       k: int = 10, use_edges: bool = True) -> LayoutGraph:
    structure = scene if isinstance(scene, GraphStructure) else layout_structure(scene, k, bank)
    nodes = Tensor(structure.features)
    graph = LayoutGraph(structure, bank, nodes)
    if use_edges:
        graph.edge_features, graph.alpha = compute_edges(structure, nodes, params, bank)
    return graph


def slgc_forward(graph: LayoutGraph, params: SlgcParams, return_attention: bool = False):
    """One round of edge-aware attention message passing.

    Returns the updated (n_nodes, 128) node features, and the padded
    (n_nodes, D) neighbor weights when ``return_attention`` is set.
    """
    s = graph.structure
    v = graph.node_features
    e = graph.edge_features
    q = ad.embedding(ad.matmul(v, params.W_1), s.dst)
    k = ad.embedding(ad.matmul(v, params.W_2), s.src)
    msg = ad.embedding(ad.matmul(v, params.W_5), s.src)
    if e is not None:
        k = ad.add(k, ad.matmul(e, params.W_3))
        msg = ad.add(msg, ad.matmul(e, params.W_6))
    beta = ad.dot(q, k)                                    # (E,)
    beta_hat = ad.softmax(ad.embedding(beta, s.nbr_edges), mask=s.nbr_mask)
    n, d = s.nbr_edges.shape
    gathered = ad.embedding(msg, s.nbr_edges)              # (n, D, 128)
    agg = ad.sum_(ad.mul(gathered, ad.reshape(beta_hat, (n, d, 1))), axis=1)
    out = ad.add(ad.matmul(v, params.W_4), agg)
    return (out, beta_hat) if return_attention else out


def slgc_stack(graph: LayoutGraph, layers: list[SlgcParams], n_layers: int | None = None) -> LayoutGraph:
    """Apply ``n_layers`` rounds; edges are recomputed from each layer's input nodes.

    The returned graph holds the final node features and the edge features
    used by the last layer.
    """
    n_layers = len(layers) if n_layers is None else n_layers
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if n_layers > len(layers):
        raise ValueError(f"{n_layers} layers requested but only {len(layers)} parameter sets given")
    use_edges = graph.edge_features is not None
    cur = graph
    for layer in range(n_layers):
        if layer > 0 and use_edges:
            e, alpha = compute_edges(cur.structure, cur.node_features, layers[layer], cur.bank)
        else:
            e, alpha = cur.edge_features, cur.alpha
        cur = LayoutGraph(cur.structure, cur.bank, cur.node_features, e, alpha)
        nodes = slgc_forward(cur, layers[layer])
        cur = LayoutGraph(cur.structure, cur.bank, nodes, e, alpha)
    return cur
