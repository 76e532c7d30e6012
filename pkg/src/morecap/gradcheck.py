"""Finite-difference checks for every op and for the composed model.

Each component reports the worst relative error over a random subset of
coordinates. Components are small (tiny hidden size, one six-object scene)
so the whole suite runs in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import GeneratorConfig, Vocabulary, generate_synthetic

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    n_checks: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= TOLERANCE


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(out, weights))


def _coords(rng, size: int, n: int) -> list[int]:
    return sorted(rng.choice(size, size=min(n, size), replace=False).tolist())


def _op_cases(rng) -> dict[str, Callable[[], list[tuple[Callable, Tensor]]]]:
    """Per op kind: (scalar function, variable) pairs exercising its backward rule."""

    def r(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def probe(shape):
        return rng.normal(size=shape)

    def unary(kind, shape=(3, 4)):
        x, w = r(*shape), probe(shape)
        return [(lambda v: _weighted_sum(ad.forward_op(kind, [v]), w), x)]

    def binary(kind, sa, sb, out):
        a, b, w = r(*sa), r(*sb), probe(out)
        return [(lambda v: _weighted_sum(ad.forward_op(kind, [v, b]), w), a),
                (lambda v: _weighted_sum(ad.forward_op(kind, [a, v]), w), b)]

    def matmul_cases():
        cases = binary("matmul", (3, 4), (4, 5), (3, 5))
        cases += binary("matmul", (2, 3, 4), (4, 5), (2, 3, 5))
        cases += binary("matmul", (2, 3, 4), (2, 4, 5), (2, 3, 5))
        cases += binary("matmul", (4,), (4, 5), (5,))
        return cases

    def concat_cases():
        a, b, w = r(3, 2), r(3, 4), probe((3, 6))
        return [(lambda v: _weighted_sum(ad.concat([v, b]), w), a),
                (lambda v: _weighted_sum(ad.concat([a, v]), w), b)]

    def softmax_cases():
        x, w = r(3, 5), probe((3, 5))
        mask = np.ones((3, 5), dtype=bool)
        mask[0, 3:] = False
        return [(lambda v: _weighted_sum(ad.softmax(v), w), x),
                (lambda v: _weighted_sum(ad.softmax(v, mask=mask), w), x)]

    def embedding_cases():
        t, w = r(5, 3), probe((4, 3))
        idx = np.array([0, 2, 2, 4])
        t3, w3 = r(5, 2, 3), probe((2, 2, 3))
        idx3 = np.array([1, 1])
        return [(lambda v: _weighted_sum(ad.embedding(v, idx), w), t),
                (lambda v: _weighted_sum(ad.embedding(v, idx3), w3), t3)]

    def dot_cases():
        return binary("dot", (3, 4), (3, 4), (3,))

    def ce_cases():
        x = r(4, 6)
        targets = np.array([1, 0, 5, 2])
        return [(lambda v: ad.cross_entropy(v, targets), x),
                (lambda v: ad.cross_entropy(v, targets, ignore_index=0), x)]

    def sum_cases():
        x, w = r(3, 4), probe((3,))
        return [(lambda v: ad.sum_(v), x),
                (lambda v: _weighted_sum(ad.sum_(v, axis=1), w), x)]

    def reshape_cases():
        x, w = r(3, 4), probe((2, 6))
        return [(lambda v: _weighted_sum(ad.reshape(v, (2, 6)), w), x)]

    def transpose_cases():
        x, w = r(2, 3, 4), probe((2, 4, 3))
        return [(lambda v: _weighted_sum(ad.transpose(v), w), x)]

    def take_cases():
        x, w = r(3, 6), probe((3, 2))
        return [(lambda v: _weighted_sum(ad.take(v, 2, 4), w), x)]

    return {
        "matmul": matmul_cases,
        "concat": concat_cases,
        "add": lambda: binary("add", (3, 4), (4,), (3, 4)),
        "sub": lambda: binary("sub", (3, 4), (3, 1), (3, 4)),
        "mul": lambda: binary("mul", (3, 4), (3, 4), (3, 4)),
        "tanh": lambda: unary("tanh"),
        "sigmoid": lambda: unary("sigmoid"),
        "relu": lambda: unary("relu"),
        "softmax": softmax_cases,
        "embedding": embedding_cases,
        "dot": dot_cases,
        "cross_entropy": ce_cases,
        "sum": sum_cases,
        "reshape": reshape_cases,
        "transpose": transpose_cases,
        "take": take_cases,
    }


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for kind, build in _op_cases(rng).items():
        worst, n = 0.0, 0
        for f, x in build():
            worst = max(worst, ad.grad_check(f, x))
            n += x.size
        out.append(CheckResult(f"op:{kind}", worst, n))
    return out


def _tiny_model(seed: int):
    # lazy import: the pipeline pulls in every module
    from .pipeline import build_model, make_dataset

    data = GeneratorConfig(n_scenes=2, min_objects=6, max_objects=6, stack_prob=0.5)
    scenes, captions = generate_synthetic(data, seed)
    cfg = RunConfig(seed=seed, knn=3, slgc_layers=2, hidden=8, data=data)
    vocab = Vocabulary.build(captions)
    model = build_model(cfg, vocab)
    ds = make_dataset(scenes, captions, val_percent=0, vocab=vocab)
    return model, ds


def _param_checks(name: str, loss: Callable[[], Tensor], params: dict[str, Tensor], rng,
                  per_param: int) -> CheckResult:
    worst, n = 0.0, 0
    for p in params.values():
        coords = _coords(rng, p.size, per_param)
        worst = max(worst, ad.grad_check(lambda _: loss(), p, coords=coords))
        n += len(coords)
    return CheckResult(name, worst, n)


def check_composites(seed: int = 0, per_param: int = 6) -> list[CheckResult]:
    """SLGC, OTAG and decoder in isolation, then the whole captioning loss."""
    from .otag import otag_batch
    from .slgc import build_layout_graph, slgc_stack

    rng = np.random.default_rng(seed + 1)
    model, ds = _tiny_model(seed)
    scene = next(iter(ds.scenes.values()))
    structure = model.structure(scene)

    def slgc_out():
        g = build_layout_graph(structure, model.slgc[0], model.bank)
        return slgc_stack(g, model.slgc)

    w_nodes = rng.normal(size=(structure.n_nodes, 128))
    slgc_params = {k: v for k, v in model.all_params().items() if k.startswith("slgc.")}
    results = [_param_checks("slgc", lambda: _weighted_sum(slgc_out().node_features, w_nodes),
                             slgc_params, rng, per_param)]

    targets = structure.object_nodes[:3]
    probe_otag = None

    def otag_loss():
        nonlocal probe_otag
        ob = otag_batch(slgc_out(), targets, model.otag, True)
        if probe_otag is None:
            probe_otag = rng.normal(size=ob.updated.shape) * ob.mask[..., None]
        return _weighted_sum(ob.updated, probe_otag)

    otag_loss()
    results.append(_param_checks("otag", otag_loss, model.otag.named(), rng, per_param))

    from .decoder import sequence_loss

    samples = ds.train[:3]
    x = Tensor(rng.normal(size=(3, 128)))
    ctx = Tensor(rng.normal(size=(3, 4, 128)))
    mask = np.ones((3, 4), dtype=bool)
    mask[1, 2:] = False
    width = max(len(s.tokens) for s in samples)
    toks = np.full((3, width), ds.vocab.pad, dtype=np.int64)
    for b, s in enumerate(samples):
        toks[b, : len(s.tokens)] = s.tokens

    def dec_loss():
        return sequence_loss(toks, x, ctx, mask, model.decoder, ds.vocab.pad)

    dec_inputs = dict(model.decoder.named(), x=x, ctx=ctx)
    results.append(_param_checks("decoder", dec_loss, dec_inputs, rng, per_param))

    def full_loss():
        return model.batch_loss(ds.train[:4], ds.scenes)

    results.append(_param_checks("full", full_loss, model.trainable(), rng, max(2, per_param // 2)))
    return results


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + check_composites(seed)
