"""Caption metrics (BLEU-4, CIDEr-D, ROUGE-L), the IoU-gated combined score,
MADGap over-smoothing, and relational-word counts.

Sentences are token lists. CIDEr-D follows the usual captioning toolkit:
tf-idf n-gram vectors for n = 1..4, clipped cosine, Gaussian length penalty
with sigma 6, scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .geometry import Box3, iou3d

Sentence = Sequence[str]


def ngrams(words: Sentence, n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


# --------------------------------------------------------------------- BLEU-4


def bleu4(candidate: Sentence, references: Sequence[Sentence]) -> float:
    """Sentence BLEU-4 with clipped counts and the closest-length brevity penalty.

    Candidates shorter than 4 words get +1 smoothing on the 2..4-gram orders
    that have no match, so an exact match still scores 1.0.
    """
    if not candidate:
        return 0.0
    c_len = len(candidate)
    log_p = 0.0
    for n in range(1, 5):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], c)
        match = sum(min(c, max_ref[g]) for g, c in cand.items())
        total = sum(cand.values())
        if match == 0:
            if n == 1 or c_len >= 4:
                return 0.0
            match, total = match + 1, total + 1
        log_p += math.log(match / total) / 4
    r_len = min((len(r) for r in references), key=lambda r: (abs(r - c_len), r))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# -------------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sentence, b: Sentence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sentence, references: Sequence[Sentence], beta: float = 1.2) -> float:
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0 or not candidate or not ref:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


# ---------------------------------------------------------------------- CIDEr


@dataclass
class CorpusStats:
    """Document frequencies of n-grams; one document per evaluated item."""

    doc_freq: Counter = field(default_factory=Counter)
    n_docs: int = 0

    @classmethod
    def build(cls, reference_sets: Iterable[Sequence[Sentence]], n: int = 4) -> "CorpusStats":
        stats = cls()
        for refs in reference_sets:
            grams = set()
            for ref in refs:
                for k in range(1, n + 1):
                    grams.update(ngrams(ref, k))
            stats.doc_freq.update(grams)
            stats.n_docs += 1
        return stats


def _tfidf(words: Sentence, stats: CorpusStats, n: int = 4):
    log_n = math.log(float(stats.n_docs))
    vecs, norms = [], []
    for k in range(1, n + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, stats.doc_freq[g]))) for g, tf in ngrams(words, k).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider(candidate: Sentence, references: Sequence[Sentence], stats: CorpusStats,
          sigma: float = 6.0) -> float:
    if stats.n_docs == 0:
        raise ContractError("CIDEr needs corpus statistics built from at least one reference set")
    cv, cn = _tfidf(candidate, stats)
    total = np.zeros(4)
    for ref in references:
        rv, rn = _tfidf(ref, stats)
        delta = len(candidate) - len(ref)
        for k in range(4):
            val = sum(min(w, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, w in cv[k].items())
            if cn[k] != 0 and rn[k] != 0:
                val /= cn[k] * rn[k]
            total[k] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
    return float(total.mean() / len(references) * 10.0)


# ------------------------------------------------------------------ m@kIoU


@dataclass
class EvalRecord:
    pred_box: Box3
    gt_box: Box3
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("an evaluation record needs at least one reference")


def caption_scores(records: Sequence[EvalRecord], metric: str,
                   stats: CorpusStats | None = None) -> list[float]:
    if metric == "cider":
        stats = stats or CorpusStats.build(r.references for r in records)
        return [cider(r.candidate, r.references, stats) for r in records]
    fn: Callable = {"bleu4": bleu4, "rougeL": rouge_l}[metric]
    return [fn(r.candidate, r.references) for r in records]


def m_at_k_iou(records: Sequence[EvalRecord], metric: str | Sequence[float], k: float,
               stats: CorpusStats | None = None) -> float:
    """Mean of per-record caption score times the gate ``IoU(pred, gt) >= k``.

    ``metric`` is "cider", "bleu4" or "rougeL", or precomputed per-record scores.
    """
    if not records:
        raise ValueError("m@kIoU needs at least one record")
    scores = caption_scores(records, metric, stats) if isinstance(metric, str) else list(metric)
    gates = [1.0 if iou3d(r.pred_box, r.gt_box) >= k else 0.0 for r in records]
    return float(sum(m * u for m, u in zip(scores, gates)) / len(records))


# --------------------------------------------------------------------- MADGap


def cosine_distance_matrix(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0):
        raise ContractError("MADGap: zero-norm feature vector")
    u = h / norms[:, None]
    return 1.0 - u @ u.T


def mad(dist: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    rows = mask.any(axis=1)
    if not rows.any():
        return 0.0
    row_means = (dist * mask).sum(axis=1)[rows] / mask.sum(axis=1)[rows]
    return float(row_means.mean())


def madgap(features: np.ndarray, neighbor_mask: np.ndarray, remote_mask: np.ndarray) -> float:
    """MAD over remote pairs minus MAD over neighbor pairs (cosine distance)."""
    h = np.asarray(features)
    if h.shape[0] < 2:
        raise ValueError("MADGap needs at least two nodes")
    nm, rm = np.asarray(neighbor_mask, bool), np.asarray(remote_mask, bool)
    if np.any(np.diag(nm)) or np.any(np.diag(rm)) or np.any(nm & rm):
        raise ValueError("MADGap masks must exclude self pairs and be disjoint")
    d = cosine_distance_matrix(h)
    return mad(d, rm) - mad(d, nm)


def knn_masks(neighbors: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """1-hop neighbor pairs and all remaining ordered non-self pairs."""
    n = len(neighbors)
    nm = np.zeros((n, n), dtype=bool)
    for i, nb in enumerate(neighbors):
        nm[i, list(nb)] = True
    np.fill_diagonal(nm, False)
    rm = ~nm
    np.fill_diagonal(rm, False)
    return nm, rm


def group_masks(groups: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Same-group pairs as neighbors, cross-group pairs as remote."""
    g = np.asarray(groups)
    nm = g[:, None] == g[None, :]
    np.fill_diagonal(nm, False)
    rm = g[:, None] != g[None, :]
    return nm, rm


# ------------------------------------------------------------ relational words


DEFAULT_SIMPLE = frozenset({"left", "right", "front", "behind", "besides", "next", "near", "above",
                            "below", "top", "bottom", "under", "over"})
DEFAULT_COMPLEX = frozenset({"between", "middle", "corner", "leftmost", "rightmost", "farthest",
                             "closest", "second", "third", "surrounded", "across", "end"})


@dataclass(frozen=True)
class RelationalDictionary:
    simple: frozenset = DEFAULT_SIMPLE
    complex: frozenset = DEFAULT_COMPLEX

    def __post_init__(self):
        if self.simple & self.complex:
            raise ValueError(f"simple and complex words overlap: {sorted(self.simple & self.complex)}")

    @classmethod
    def from_file(cls, path) -> "RelationalDictionary":
        """JSON file ``{"simple": [...], "complex": [...]}``."""
        import json
        with open(path) as fh:
            doc = json.load(fh)
        return cls(frozenset(doc["simple"]), frozenset(doc["complex"]))


def relational_word_stats(captions: Iterable[Sentence],
                          dictionary: RelationalDictionary = RelationalDictionary()) -> tuple[int, int, int]:
    simple = complex_ = 0
    for cap in captions:
        for w in cap:
            if w in dictionary.simple:
                simple += 1
            elif w in dictionary.complex:
                complex_ += 1
    return simple, complex_, simple + complex_
