import math

import numpy as np
import pytest

from morecap import autodiff as ad
from morecap.autodiff import AdamState, ContractError, Tape, Tensor
from morecap.decoder import DecoderParams, DecoderState, decode_step, generate, sequence_loss, teacher_forced_loss


def make_params(vocab=50, hidden=16, seed=0):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(vocab, 300)) / 10
    return DecoderParams.init(rng, emb, hidden)


def inputs(batch=2, p=3, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, 128)), rng.normal(size=(batch, p, 128)), np.ones((batch, p), bool)


def test_attention_sums_to_one_per_step():
    params = make_params()
    x, ctx, mask = inputs(p=4)
    mask[1, 3] = False
    state = DecoderState.initial(2, params.hidden)
    for t in range(5):
        state, logits, g = decode_step(state, [1, 2], x, ctx, mask, params)
        np.testing.assert_allclose(g.data.sum(axis=1), 1.0, atol=1e-12)
        assert g.data[1, 3] == 0.0
        assert logits.shape == (2, 50)


def test_single_context_node_gets_weight_one():
    params = make_params()
    x, ctx, mask = inputs(p=1)
    _, _, g = decode_step(DecoderState.initial(2, params.hidden), [1, 1], x, ctx, mask, params)
    np.testing.assert_array_equal(g.data, 1.0)


def test_uniform_logits_give_log_vocab():
    params = make_params(vocab=50)
    params["out.W"].data[:] = 0
    params["out.b"].data[:] = 0
    x, ctx, _ = inputs(batch=1)
    loss = teacher_forced_loss([1, 7, 9, 2], x[0], ctx[0], params)
    assert loss.item() == pytest.approx(math.log(50), abs=1e-12)


def test_padding_is_ignored():
    params = make_params()
    x, ctx, mask = inputs()
    toks = np.array([[1, 5, 6, 2, 0, 0], [1, 8, 9, 10, 11, 2]])
    both = sequence_loss(toks, x, ctx, mask, params, pad=0).item()
    a = sequence_loss(toks[:1, :4], x[:1], ctx[:1], mask[:1], params, pad=0).item()
    b = sequence_loss(toks[1:], x[1:], ctx[1:], mask[1:], params, pad=0).item()
    assert both == pytest.approx((3 * a + 5 * b) / 8, rel=1e-12)


def test_step_loss_gradients_match_fd():
    params = make_params(vocab=12, hidden=6)
    x, ctx, mask = inputs(batch=1, p=2)
    rng = np.random.default_rng(0)

    def step_loss(_):
        _, logits, _ = decode_step(DecoderState.initial(1, params.hidden), [1], x, ctx, mask, params)
        return ad.cross_entropy(logits, [4])

    for name, p in params.weights.items():
        coords = rng.choice(p.size, size=min(5, p.size), replace=False)
        assert ad.grad_check(step_loss, p, coords=coords) < 1e-4, name


def test_loss_drops_with_adam_on_fixed_sample():
    params = make_params(vocab=20, hidden=16)
    x, ctx, _ = inputs(batch=1)
    toks = [1, 5, 9, 4, 2]
    state = AdamState(lr=1e-2, weight_decay=0.0)
    first = None
    for _ in range(100):
        with Tape() as tape:
            loss = teacher_forced_loss(toks, x[0], ctx[0], params)
        first = first if first is not None else loss.item()
        ad.zero_grad(params.weights)
        ad.backward(loss, tape)
        ad.adam_step(params.weights, state)
    assert loss.item() < 0.5 * first


def test_loss_invariant_to_context_order():
    params = make_params()
    x, ctx, _ = inputs(batch=1, p=5)
    toks = [1, 3, 4, 5, 2]
    perm = np.random.default_rng(3).permutation(5)
    a = teacher_forced_loss(toks, x[0], ctx[0], params).item()
    b = teacher_forced_loss(toks, x[0], ctx[0][perm], params).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_contract_errors():
    params = make_params(vocab=10)
    x, ctx, mask = inputs(batch=1)
    with pytest.raises(ContractError, match="vocabulary"):
        sequence_loss(np.array([[1, 12, 2]]), x, ctx, mask, params, pad=0)
    with pytest.raises(ContractError, match="context"):
        sequence_loss(np.array([[1, 3, 2]]), x, np.zeros((1, 0, 128)), np.zeros((1, 0), bool), params, pad=0)


def test_generate_bounded_and_deterministic():
    params = make_params()
    x, ctx, mask = inputs(batch=3)
    a = generate(x, ctx, mask, params, start=1, end=2, banned=(0, 1), max_len=30)
    b = generate(x, ctx, mask, params, start=1, end=2, banned=(0, 1), max_len=30)
    assert a == b
    assert len(a) == 3 and all(len(s) <= 30 for s in a)
    assert all(t not in (0, 1, 2) for s in a for t in s)


def test_generate_stops_at_end_token():
    params = make_params(vocab=10)
    params["out.W"].data[:] = 0
    params["out.b"].data[:] = 0
    params["out.b"].data[2] = 5.0
    x, ctx, mask = inputs(batch=2)
    assert generate(x, ctx, mask, params, start=1, end=2) == [[], []]


def test_parameter_shapes_checked():
    p = make_params(vocab=10, hidden=8)
    w = dict(p.weights)
    w["W_11"] = Tensor(np.zeros((64, 128)))
    with pytest.raises(ValueError, match="W_11"):
        DecoderParams(8, p.word_emb, w)
