"""Layer-stacking over-smoothing study: MADGap of untrained encoders by depth."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .data import Scene, generate_synthetic, load_embeddings
from .metrics import group_masks, knn_masks, madgap
from .otag import OtagParams, otag_batch
from .slgc import SlgcParams, SpatialWordBank, build_layout_graph, layout_structure, slgc_stack

OTAG_ROW = "SLGCx1+OTAG"


def row_names(max_layers: int) -> list[str]:
    return [f"SLGCx{d}" for d in range(1, max_layers + 1)] + [OTAG_ROW]


@dataclass
class SweepResult:
    rows: list[str]
    values: np.ndarray   # (n_seeds, n_rows)
    seeds: list[int]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


def scene_madgaps(scene: Scene, seed: int, k: int, max_layers: int = 4,
                  quintuplets: bool = True) -> list[float]:
    """MADGap after 1..max_layers SLGC layers, then after one layer plus OTAG.

    SLGC rows measure object nodes with 1-hop KNN pairs as neighbors. The OTAG
    row measures hyper-nodes, where hyper-nodes of the same target are
    neighbors and those of different targets are remote.
    """
    emb = load_embeddings(None, ["left", "right", "front", "behind", "besides", "top", "bottom"])
    bank = SpatialWordBank.from_embeddings(emb)
    rng = np.random.default_rng(seed)
    layers = [SlgcParams.init(rng, f"slgc.{d}") for d in range(max_layers)]
    otag = OtagParams.init(rng)
    structure = layout_structure(scene, k, bank)
    objs = structure.object_nodes
    pos = {int(n): r for r, n in enumerate(objs)}
    nbrs = [[pos[j] for j in structure.neighbors[int(n)] if j in pos] for n in objs]
    near, remote = knn_masks(nbrs)
    base = build_layout_graph(structure, layers[0], bank)
    out = []
    for depth in range(1, max_layers + 1):
        g = slgc_stack(base, layers, depth)
        out.append(madgap(g.node_features.data[objs], near, remote))
    g1 = slgc_stack(base, layers, 1)
    ob = otag_batch(g1, objs, otag, quintuplets)
    mask = ob.mask
    hyper = ob.updated.data[mask]
    groups = np.repeat(np.arange(len(objs)), mask.sum(axis=1))
    out.append(madgap(hyper, *group_masks(groups)))
    return out


def madgap_sweep(config: RunConfig, n_seeds: int = 20, max_layers: int = 4) -> SweepResult:
    """One synthetic scene and one weight draw per seed, starting at ``config.seed``."""
    seeds = [config.seed + s for s in range(n_seeds)]
    vals = []
    data_cfg = config.data
    for s in seeds:
        scenes, _ = generate_synthetic(replace(data_cfg, n_scenes=1), s)
        vals.append(scene_madgaps(scenes[0], s, config.knn, max_layers, config.quintuplets))
    return SweepResult(row_names(max_layers), np.array(vals), seeds)
