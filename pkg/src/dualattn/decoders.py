"""Answer decoding: turn a context vector into a candidate ranking.

Discriminative path: encode each candidate with its own BiLSTM + pool,
project the context down to n_h, score by dot product, train with cross
entropy. Generative path: an LSTM consumes the projected context, then the
candidate tokens teacher-forced, and the summed token log-likelihood
(including the end marker) is the candidate's score.
"""

from __future__ import annotations

import numpy as np

from .encoders import lstm_step


def encode_candidates(graph, candidate_ids, embed, encoder, pool, unk_id=1):
    """Encode N candidate token sequences into an (n_h, N) matrix."""
    if len(candidate_ids) == 0:
        raise ValueError("empty candidate set")
    seqs = [list(s) if len(s) > 0 else [unk_id] for s in candidate_ids]
    N = len(seqs)
    lengths = np.array([len(s) for s in seqs])
    L = int(lengths.max())
    ids = np.zeros(L * N, dtype=np.intp)
    for j, s in enumerate(seqs):
        for t, tok in enumerate(s):
            ids[t * N + j] = tok
    embedded = embed.embed(graph, ids)
    encoded = encoder.encode_batch(graph, embedded, lengths)
    pooled, _ = pool.attend_batch(graph, encoded, lengths)
    return pooled


def score_encoded(graph, context, encoded, proj, bias):
    """scores[j] = (proj @ context + bias) . encoded[:, j], as a (1, N) tensor."""
    projected = graph.add(graph.matmul(proj, context), bias)   # (n_h, 1)
    return graph.matmul(graph.transpose(projected), encoded)   # (1, N)


def score_discriminative(graph, context, candidate_ids, embed, encoder, pool, proj, bias):
    """Encode the candidates and dot them against the projected context."""
    encoded = encode_candidates(graph, candidate_ids, embed, encoder, pool)
    return score_encoded(graph, context, encoded, proj, bias)


def loss_discriminative(graph, scores, gt_index):
    """-log softmax(scores)[gt], as a scalar tensor."""
    n = scores.shape[1]
    if not (0 <= gt_index < n):
        raise ValueError(f"ground-truth index {gt_index} out of range for {n} candidates")
    return graph.cross_entropy(scores, [gt_index])


class GenerativeDecoder:
    """LSTM answer decoder over the shared word embeddings.

    The first step consumes the context vector projected to n_h; subsequent
    steps consume token embeddings passed through their own projection so
    both inputs share the LSTM's input width.
    """

    __slots__ = ("w_ctx", "b_ctx", "w_in", "b_in", "cell", "w_out", "b_out",
                 "bos_id", "eos_id")

    def __init__(self, w_ctx, b_ctx, w_in, b_in, cell, w_out, b_out, bos_id, eos_id):
        self.w_ctx = w_ctx
        self.b_ctx = b_ctx
        self.w_in = w_in
        self.b_in = b_in
        self.cell = cell
        self.w_out = w_out
        self.b_out = b_out
        self.bos_id = bos_id
        self.eos_id = eos_id


def score_generative(graph, context, candidate_ids, embed, decoder):
    """Summed token log-likelihood of each candidate, as a (1, N) tensor.

    Each candidate contributes log P(token | prefix, context) for every one
    of its tokens plus the end marker; scores are sums, not averages, so
    longer answers pay for every extra token.
    """
    if len(candidate_ids) == 0:
        raise ValueError("empty candidate set")
    seqs = [list(s) for s in candidate_ids]
    N = len(seqs)
    n_h = decoder.cell.hidden

    # teacher-forced inputs [BOS, w_1..w_n]; targets [w_1..w_n, EOS]
    inputs = [[decoder.bos_id] + s for s in seqs]
    targets = [s + [decoder.eos_id] for s in seqs]
    lengths = np.array([len(t) for t in targets])
    L = int(lengths.max())

    ids = np.zeros(L * N, dtype=np.intp)
    tgt = np.zeros((N, L), dtype=np.intp)
    for j in range(N):
        for t in range(lengths[j]):
            ids[t * N + j] = inputs[j][t]
            tgt[j, t] = targets[j][t]

    token_vecs = graph.add(graph.matmul(decoder.w_in, embed.embed(graph, ids)), decoder.b_in)

    zero = graph.const(np.zeros((n_h, N)))
    h, c = zero, zero
    ctx_in = graph.add(graph.add(graph.matmul(decoder.w_ctx, context), decoder.b_ctx),
                       graph.const(np.zeros((n_h, N))))  # broadcast across candidates
    h, c = lstm_step(graph, decoder.cell, ctx_in, h, c)

    total = None
    for t in range(L):
        x_t = graph.slice(token_vecs, 1, t * N, (t + 1) * N)
        h, c = lstm_step(graph, decoder.cell, x_t, h, c)
        logits = graph.add(graph.matmul(decoder.w_out, h), decoder.b_out)   # (V, N)
        ce = graph.cross_entropy(graph.transpose(logits), tgt[:, t])        # (N, 1)
        live = (lengths > t).astype(np.float64).reshape(N, 1)
        if not live.all():
            ce = graph.mul(ce, graph.const(live))
        total = ce if total is None else graph.add(total, ce)

    return graph.transpose(graph.scale(total, -1.0))


def generative_nll(graph, context, answer_ids, embed, decoder):
    """Training loss: negative summed log-likelihood of the true answer."""
    score = score_generative(graph, context, [answer_ids], embed, decoder)
    return graph.scale(score, -1.0)


def rank_candidates(scores):
    """1-based ranks, rank 1 = highest score; ties broken by candidate index."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if np.isnan(scores).any():
        raise ValueError("NaN score cannot be ranked")
    order = np.lexsort((np.arange(scores.size), -scores))
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(1, scores.size + 1)
    return ranks
