"""Two-layer GRU caption decoder with attention over a target's context nodes.

All routines are batched: ``x`` is (B, 128), the context ``ctx`` is
(B, P, 128) padded, with a boolean ``mask`` (B, P) marking real nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import EMBED_DIM, FEATURE_DIM, MAX_CAPTION_WORDS


def _shapes(hidden: int, vocab_size: int) -> dict[str, tuple[int, ...]]:
    # GRU1 reads [word; h2; x]; its input map is stored as three row blocks
    # so the word and feature parts can be applied to a whole sequence at once
    in2 = FEATURE_DIM + hidden
    return {
        "gru1.W_w": (EMBED_DIM, 3 * hidden), "gru1.W_s": (hidden, 3 * hidden),
        "gru1.W_f": (FEATURE_DIM, 3 * hidden), "gru1.W_h": (hidden, 3 * hidden),
        "gru1.b_x": (3 * hidden,), "gru1.b_h": (3 * hidden,),
        "gru2.W_x": (in2, 3 * hidden), "gru2.W_h": (hidden, 3 * hidden),
        "gru2.b_x": (3 * hidden,), "gru2.b_h": (3 * hidden,),
        "W_10": (hidden, 128), "W_11": (128, 128), "W_gamma": (128, 1),
        "out.W": (hidden, vocab_size), "out.b": (vocab_size,),
    }


@dataclass
class DecoderParams:
    """Trainable decoder weights plus the frozen input word-embedding matrix."""

    hidden: int
    word_emb: np.ndarray  # (vocab, 300), frozen
    weights: dict[str, Tensor]

    def __post_init__(self):
        expected = _shapes(self.hidden, self.vocab_size)
        if self.word_emb.shape[1] != EMBED_DIM:
            raise ValueError(f"word embeddings must be {EMBED_DIM}-d, got {self.word_emb.shape}")
        for name, shape in expected.items():
            got = self.weights[name].shape
            if got != shape:
                raise ValueError(f"decoder {name} must have shape {shape}, got {got}")

    @property
    def vocab_size(self) -> int:
        return self.word_emb.shape[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    @classmethod
    def init(cls, rng: np.random.Generator, word_emb: np.ndarray, hidden: int = 256,
             prefix: str = "dec") -> "DecoderParams":
        weights = {}
        for name, shape in _shapes(hidden, word_emb.shape[0]).items():
            if len(shape) == 2:
                weights[name] = ad.init_linear(rng, *shape, name=f"{prefix}.{name}")
            else:
                # a bias shares the bound of the map it belongs to
                fan_in = hidden
                bound = 1.0 / np.sqrt(fan_in)
                weights[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                                       name=f"{prefix}.{name}")
        return cls(hidden, np.asarray(word_emb, dtype=np.float64), weights)

    def named(self, prefix: str = "dec") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.weights.items()}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], word_emb: np.ndarray, hidden: int,
                   prefix: str = "dec") -> "DecoderParams":
        names = _shapes(hidden, word_emb.shape[0])
        return cls(hidden, np.asarray(word_emb, dtype=np.float64),
                   {k: params[f"{prefix}.{k}"] for k in names})


@dataclass
class DecoderState:
    h1: Tensor
    h2: Tensor
    tokens: list[list[int]] = field(default_factory=list)

    @classmethod
    def initial(cls, batch: int, hidden: int) -> "DecoderState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))),
                   [[] for _ in range(batch)])


def _gru_gates(gi: Tensor, h: Tensor, W_h: Tensor, b_h: Tensor) -> Tensor:
    H = h.shape[-1]
    gh = ad.add(ad.matmul(h, W_h), b_h)
    r = ad.sigmoid(ad.add(ad.take(gi, 0, H), ad.take(gh, 0, H)))
    z = ad.sigmoid(ad.add(ad.take(gi, H, 2 * H), ad.take(gh, H, 2 * H)))
    n = ad.tanh(ad.add(ad.take(gi, 2 * H, 3 * H), ad.mul(r, ad.take(gh, 2 * H, 3 * H))))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def gru_cell(x: Tensor, h: Tensor, W_x: Tensor, W_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """Standard GRU: reset/update gates, tanh candidate, ``h' = n + z * (h - n)``."""
    return _gru_gates(ad.add(ad.matmul(x, W_x), b_x), h, W_h, b_h)


def _check_context(ctx: Tensor, mask: np.ndarray) -> None:
    if ctx.shape[1] == 0 or not np.all(mask.any(axis=1)):
        raise ContractError("decoder needs at least one context node per target")


def context_projection(ctx: Tensor, params: DecoderParams) -> Tensor:
    return ad.matmul(ctx, params["W_11"])


def _word_input(words: np.ndarray, x: Tensor, params: DecoderParams) -> Tensor:
    """Word and feature part of GRU1's input map, for any leading shape of ``words``."""
    w = params.word_emb[np.asarray(words, dtype=np.int64)]
    return ad.add(ad.add(ad.matmul(w, params["gru1.W_w"]), ad.matmul(x, params["gru1.W_f"])),
                  params["gru1.b_x"])


def _step(state: DecoderState, gi_word: Tensor, ctx: Tensor, mask: np.ndarray, params: DecoderParams,
          ctx_proj: Tensor) -> tuple[DecoderState, Tensor]:
    B, P = mask.shape
    gi = ad.add(gi_word, ad.matmul(state.h2, params["gru1.W_s"]))
    h1 = _gru_gates(gi, state.h1, params["gru1.W_h"], params["gru1.b_h"])
    q = ad.reshape(ad.matmul(h1, params["W_10"]), (B, 1, 128))
    gamma = ad.reshape(ad.matmul(ad.tanh(ad.add(q, ctx_proj)), params["W_gamma"]), (B, P))
    gamma_hat = ad.softmax(gamma, mask=mask)
    v_hat = ad.reshape(ad.matmul(ad.reshape(gamma_hat, (B, 1, P)), ctx), (B, 128))
    h2 = gru_cell(ad.concat([v_hat, h1]), state.h2, params["gru2.W_x"], params["gru2.W_h"],
                  params["gru2.b_x"], params["gru2.b_h"])
    return DecoderState(h1, h2, state.tokens), gamma_hat


def decode_step(state: DecoderState, prev_words, x, ctx, mask, params: DecoderParams,
                ctx_proj: Tensor | None = None) -> tuple[DecoderState, Tensor, Tensor]:
    """Advance both GRUs by one word; returns (new state, logits (B, V), attention (B, P))."""
    x, ctx = ad.as_tensor(x), ad.as_tensor(ctx)
    mask = np.asarray(mask, dtype=bool)
    _check_context(ctx, mask)
    if ctx_proj is None:
        ctx_proj = context_projection(ctx, params)
    state, gamma_hat = _step(state, _word_input(prev_words, x, params), ctx, mask, params, ctx_proj)
    logits = ad.add(ad.matmul(state.h2, params["out.W"]), params["out.b"])
    return state, logits, gamma_hat


def sequence_loss(tokens: np.ndarray, x, ctx, mask, params: DecoderParams, pad: int) -> Tensor:
    """Teacher-forced mean per-token cross-entropy over a padded (B, T) token batch."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= params.vocab_size:
        raise ContractError(f"token index outside vocabulary of size {params.vocab_size}")
    x, ctx = ad.as_tensor(x), ad.as_tensor(ctx)
    mask = np.asarray(mask, dtype=bool)
    _check_context(ctx, mask)
    B, T = tokens.shape
    state = DecoderState.initial(B, params.hidden)
    proj = context_projection(ctx, params)
    H3 = 3 * params.hidden
    # (T-1, B, 3H) step-major, flattened so each step is a contiguous row block
    gi_all = ad.reshape(_word_input(tokens[:, :-1].T, x, params), ((T - 1) * B, H3))
    states = []
    for t in range(T - 1):
        gi_t = ad.embedding(gi_all, np.arange(t * B, (t + 1) * B))
        state, _ = _step(state, gi_t, ctx, mask, params, proj)
        states.append(state.h2)
    logits = ad.add(ad.matmul(ad.concat(states, axis=0), params["out.W"]), params["out.b"])
    targets = tokens[:, 1:].T.reshape(-1)
    return ad.cross_entropy(logits, targets, ignore_index=pad)


def teacher_forced_loss(tokens, target_feature, hyper_nodes, params: DecoderParams, pad: int = 0) -> Tensor:
    """Single-caption convenience wrapper around :func:`sequence_loss`."""
    ctx = np.asarray(hyper_nodes.data if isinstance(hyper_nodes, Tensor) else hyper_nodes)
    ctx_t = hyper_nodes if isinstance(hyper_nodes, Tensor) else Tensor(ctx)
    ctx_t = ad.reshape(ctx_t, (1,) + ctx.shape)
    x = ad.reshape(ad.as_tensor(target_feature), (1, FEATURE_DIM))
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    return sequence_loss(toks, x, ctx_t, np.ones((1, ctx.shape[0]), dtype=bool), params, pad)


def generate(x, ctx, mask, params: DecoderParams, start: int, end: int,
             banned=(), max_len: int = MAX_CAPTION_WORDS) -> list[list[int]]:
    """Greedy decoding; stops at the end token or after ``max_len`` content tokens.

    ``banned`` token ids (pad/start) are never emitted. Ties go to the lower id.
    """
    x, ctx = ad.as_tensor(x), ad.as_tensor(ctx)
    mask = np.asarray(mask, dtype=bool)
    B = mask.shape[0]
    state = DecoderState.initial(B, params.hidden)
    proj = context_projection(ctx, params)
    prev = np.full(B, start, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    banned = list(banned)
    for _ in range(max_len + 1):
        state, logits, _ = decode_step(state, prev, x, ctx, mask, params, proj)
        scores = logits.data.copy()
        if banned:
            scores[:, banned] = -np.inf
        nxt = scores.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == end or len(out[b]) >= max_len:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        prev = nxt
    return out
