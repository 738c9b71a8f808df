"""Shared text machinery: embeddings, BiLSTM sequence encoding, self-attention pooling.

Sequences are handled in a column convention: an encoded sequence is an
(n_h, L) matrix whose column t is the representation of token t. Batched
variants pack B sequences time-major into (d, L*B), column t*B + b holding
token t of sequence b; this keeps per-timestep work a single matrix op.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

PAD_ID = 0  # row 0 of every embedding table is frozen to zero


class EmbeddingTable:
    """Learned word embeddings, optionally concatenated with frozen pretrained rows.

    Combined column layout is [pretrained; learned] when a pretrained table
    is present. The padding id maps to an all-zero row in both tables.
    """

    def __init__(self, learned, pretrained=None):
        self.learned = learned
        self.pretrained = pretrained

    @property
    def vocab_size(self):
        return self.learned.shape[0]

    @property
    def width(self):
        d = self.learned.shape[1]
        if self.pretrained is not None:
            d += self.pretrained.shape[1]
        return d

    def embed(self, graph, token_ids):
        """Embed a sequence of token ids into a (width, L) matrix."""
        learned = graph.embedding(self.learned, token_ids)
        if self.pretrained is None:
            return learned
        return graph.concat([graph.embedding(self.pretrained, token_ids), learned], axis=0)


class LstmCellParams:
    """Single LSTM cell: one stacked weight matrix over [x; h] plus bias.

    Gate row order is [input, forget, candidate, output].
    """

    __slots__ = ("weights", "bias", "hidden")

    def __init__(self, weights, bias, hidden):
        self.weights = weights
        self.bias = bias
        self.hidden = hidden


def lstm_step(graph, cell, x, h, c):
    """One LSTM step on column-batched inputs x: (d, B), h/c: (hidden, B)."""
    hh = cell.hidden
    gates = graph.add(graph.matmul(cell.weights, graph.concat([x, h], axis=0)), cell.bias)
    i = graph.sigmoid(graph.slice(gates, 0, 0, hh))
    f = graph.sigmoid(graph.slice(gates, 0, hh, 2 * hh))
    g_ = graph.tanh(graph.slice(gates, 0, 2 * hh, 3 * hh))
    o = graph.sigmoid(graph.slice(gates, 0, 3 * hh, 4 * hh))
    c_new = graph.add(graph.mul(f, c), graph.mul(i, g_))
    h_new = graph.mul(o, graph.tanh(c_new))
    return h_new, c_new


class BiLstmEncoder:
    """Bidirectional LSTM producing (n_h, L) per sequence, n_h/2 per direction."""

    def __init__(self, forward_cell, backward_cell):
        if forward_cell.hidden != backward_cell.hidden:
            raise ValueError("forward/backward hidden widths differ")
        self.forward_cell = forward_cell
        self.backward_cell = backward_cell

    @property
    def width(self):
        return 2 * self.forward_cell.hidden

    def encode(self, graph, embedded, length):
        """Encode one (d, L) sequence with `length` valid leading tokens."""
        L = embedded.shape[1]
        if not (1 <= length <= L):
            raise ValueError(f"valid length {length} out of range for {L} columns")
        return self.encode_batch(graph, embedded, np.array([length]))

    def encode_batch(self, graph, embedded, lengths):
        """Encode B packed sequences; returns (n_h, L*B) time-major.

        Output columns at t >= lengths[b] are zero. The backward direction
        uses masked state updates so its recurrence effectively starts at
        position lengths[b] - 1 for every sequence.
        """
        lengths = np.asarray(lengths)
        B = len(lengths)
        total = embedded.shape[1]
        if B < 1 or total % B != 0:
            raise ValueError(f"cannot split {total} columns into {B} sequences")
        L = total // B
        if lengths.min() < 1 or lengths.max() > L:
            raise ValueError(f"valid length 0 or > {L} in batch")
        hh = self.forward_cell.hidden
        uniform = bool((lengths == L).all())

        xs = [graph.slice(embedded, 1, t * B, (t + 1) * B) for t in range(L)]
        if not uniform:
            live = [(lengths > t).astype(np.float64).reshape(1, B) for t in range(L)]
            masks = [graph.const(m) for m in live]
            inv_masks = [graph.const(1.0 - m) for m in live]

        zero = graph.const(np.zeros((hh, B)))

        h, c = zero, zero
        fwd_outs = []
        for t in range(L):
            h, c = lstm_step(graph, self.forward_cell, xs[t], h, c)
            fwd_outs.append(h if uniform else graph.mul(h, masks[t]))

        h, c = zero, zero
        bwd_outs = [None] * L
        for t in range(L - 1, -1, -1):
            h_new, c_new = lstm_step(graph, self.backward_cell, xs[t], h, c)
            if uniform:
                h, c = h_new, c_new
            else:
                h = graph.add(graph.mul(h_new, masks[t]), graph.mul(h, inv_masks[t]))
                c = graph.add(graph.mul(c_new, masks[t]), graph.mul(c, inv_masks[t]))
            bwd_outs[t] = h

        return graph.concat([graph.concat(fwd_outs, axis=1),
                             graph.concat(bwd_outs, axis=1)], axis=0)


class SelfAttentionPool:
    """Probe-scored softmax pooling of an encoded sequence into one vector."""

    __slots__ = ("proj", "bias", "probe")

    def __init__(self, proj, bias, probe):
        self.proj = proj
        self.bias = bias
        self.probe = probe

    def attend(self, graph, matrix, length):
        """Pool one (n_h, L) sequence -> ((n_h, 1) vector, (1, L) weights)."""
        pooled, weights = self.attend_batch(graph, matrix, np.array([length]))
        return pooled, weights

    def attend_batch(self, graph, seq, lengths):
        """Pool B packed sequences -> ((n_h, B) vectors, (B, L) weights).

        Padded positions are masked with an additive -1e9 before the
        softmax, which drives their weights to exactly zero.
        """
        lengths = np.asarray(lengths)
        B = len(lengths)
        total = seq.shape[1]
        L = total // B
        if lengths.min() < 1:
            raise ValueError("valid length 0 in batch")
        n_h = seq.shape[0]

        keyed = graph.tanh(graph.add(graph.matmul(self.proj, seq), self.bias))
        scores = graph.matmul(graph.transpose(self.probe), keyed)        # (1, L*B)
        per_seq = graph.transpose(graph.reshape(scores, (L, B)))         # (B, L)
        if (lengths < L).any():
            neg = np.where(np.arange(L)[None, :] < lengths[:, None], 0.0, -1e9)
            per_seq = graph.add(per_seq, graph.const(neg))
        weights = graph.softmax_rows(per_seq)                            # (B, L)

        flat = graph.reshape(graph.transpose(weights), (1, total))
        weighted = graph.reshape(graph.mul(seq, flat), (n_h, L, B))
        pooled = graph.reduce_sum(weighted, axis=1)                      # (n_h, B)
        return pooled, weights


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

INIT_RANGE = 0.08      # recurrent cells at full-scale widths
EMBED_RANGE = 1.0      # word vectors, comparable to pretrained-vector scale


def xavier_uniform(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_embedding(rng, vocab_size, d_learned, pretrained=None):
    learned = rng.uniform(-EMBED_RANGE, EMBED_RANGE, size=(vocab_size, d_learned))
    learned[PAD_ID] = 0.0
    pre = None
    if pretrained is not None:
        pretrained = np.array(pretrained, dtype=np.float64)
        pretrained[PAD_ID] = 0.0
        pre = Tensor(pretrained, requires_grad=False)
    return EmbeddingTable(Tensor(learned, requires_grad=True), pre)


def init_lstm_cell(rng, input_dim, hidden):
    # the fixed +-0.08 range is calibrated for full-scale widths and
    # underdrives narrow desk-scale cells; floor the variance at Xavier
    shape = (4 * hidden, input_dim + hidden)
    limit = max(INIT_RANGE, np.sqrt(6.0 / (shape[0] + shape[1])))
    w = rng.uniform(-limit, limit, size=shape)
    b = np.zeros((4 * hidden, 1))
    b[hidden:2 * hidden] = 1.0  # forget-gate bias
    return LstmCellParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), hidden)


def init_bilstm(rng, input_dim, n_h):
    if n_h % 2 != 0:
        raise ValueError(f"BiLSTM output width must be even, got {n_h}")
    return BiLstmEncoder(init_lstm_cell(rng, input_dim, n_h // 2),
                         init_lstm_cell(rng, input_dim, n_h // 2))


def init_pool(rng, n_h):
    return SelfAttentionPool(Tensor(xavier_uniform(rng, (n_h, n_h)), requires_grad=True),
                             Tensor(np.zeros((n_h, 1)), requires_grad=True),
                             Tensor(xavier_uniform(rng, (n_h, 1)), requires_grad=True))


def load_glove(path, word_to_id, dim=300):
    """Read whitespace-separated vectors; returns a (vocab, dim) float array.

    Lines whose word is not in the vocabulary are skipped. Vocabulary words
    missing from the file keep a zero row, as does the padding id.
    """
    table = np.zeros((len(word_to_id), dim))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            word = parts[0]
            idx = word_to_id.get(word)
            if idx is None:
                continue
            if len(parts) - 1 != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values for '{word}', got {len(parts) - 1}")
            table[idx] = [float(v) for v in parts[1:]]
    table[PAD_ID] = 0.0
    return table
