import numpy as np
import pytest

from dualattn.autodiff import Graph, Tensor
from dualattn.encoders import (
    BiLstmEncoder, EmbeddingTable, LstmCellParams, SelfAttentionPool,
    init_bilstm, init_embedding, init_lstm_cell, init_pool, load_glove,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_embedded(rng, d, L):
    return rng.uniform(-1, 1, size=(d, L))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def test_padding_id_embeds_to_zero_column(rng):
    table = init_embedding(rng, vocab_size=7, d_learned=4)
    g = Graph()
    out = table.embed(g, [0, 3, 0])
    np.testing.assert_array_equal(out.data[:, 0], np.zeros(4))
    np.testing.assert_array_equal(out.data[:, 2], np.zeros(4))
    assert np.any(out.data[:, 1] != 0)


def test_embedding_width_without_pretrained(rng):
    table = init_embedding(rng, vocab_size=7, d_learned=4)
    assert table.width == 4
    g = Graph()
    assert table.embed(g, [1, 2]).shape == (4, 2)


def test_embedding_concatenates_pretrained_first(rng):
    pre = rng.normal(size=(7, 6))
    table = init_embedding(rng, vocab_size=7, d_learned=4, pretrained=pre)
    assert table.width == 10
    g = Graph()
    out = table.embed(g, [2])
    np.testing.assert_allclose(out.data[:6, 0], pre[2])
    assert not table.pretrained.requires_grad
    np.testing.assert_array_equal(table.pretrained.data[0], np.zeros(6))


# ---------------------------------------------------------------------------
# BiLSTM
# ---------------------------------------------------------------------------

def zero_cell(d, hh):
    return LstmCellParams(Tensor(np.zeros((4 * hh, d + hh)), requires_grad=True),
                          Tensor(np.zeros((4 * hh, 1)), requires_grad=True), hh)


def test_zero_parameters_give_zero_output(rng):
    enc = BiLstmEncoder(zero_cell(3, 2), zero_cell(3, 2))
    g = Graph()
    out = enc.encode(g, g.const(make_embedded(rng, 3, 5)), length=5)
    np.testing.assert_array_equal(out.data, np.zeros((4, 5)))


def test_single_token_sequence(rng):
    enc = init_bilstm(rng, input_dim=3, n_h=4)
    g = Graph()
    out = enc.encode(g, g.const(make_embedded(rng, 3, 1)), length=1)
    assert out.shape == (4, 1)
    assert np.any(out.data != 0)


def test_length_zero_rejected(rng):
    enc = init_bilstm(rng, input_dim=3, n_h=4)
    g = Graph()
    with pytest.raises(ValueError, match="valid length"):
        enc.encode(g, g.const(make_embedded(rng, 3, 4)), length=0)


def test_reversed_sequence_with_mirrored_cells(rng):
    """Running the mirrored encoder on the reversed sequence swaps the
    directional halves column-wise: out'[t] = swap(out[L-1-t])."""
    d, L, n_h = 3, 6, 8
    enc = init_bilstm(rng, input_dim=d, n_h=n_h)
    mirrored = BiLstmEncoder(enc.backward_cell, enc.forward_cell)
    E = make_embedded(rng, d, L)

    g = Graph()
    out = enc.encode(g, g.const(E), length=L).data
    g2 = Graph()
    out_rev = mirrored.encode(g2, g2.const(E[:, ::-1].copy()), length=L).data

    hh = n_h // 2
    swapped = np.vstack([out[hh:], out[:hh]])
    np.testing.assert_allclose(out_rev, swapped[:, ::-1], atol=1e-12)


def test_padded_columns_are_zero_and_inert(rng):
    d, L, n_h, length = 3, 6, 8, 4
    enc = init_bilstm(rng, input_dim=d, n_h=n_h)
    E = make_embedded(rng, d, L)
    E2 = E.copy()
    E2[:, length:] = rng.uniform(5, 9, size=(d, L - length))  # garbage padding

    g = Graph()
    out = enc.encode(g, g.const(E), length=length).data
    g2 = Graph()
    out2 = enc.encode(g2, g2.const(E2), length=length).data

    np.testing.assert_array_equal(out[:, length:], np.zeros((n_h, L - length)))
    np.testing.assert_allclose(out[:, :length], out2[:, :length], atol=1e-12)


def test_batch_encoding_matches_independent_runs(rng):
    d, n_h = 3, 6
    enc = init_bilstm(rng, input_dim=d, n_h=n_h)
    seqs = [make_embedded(rng, d, 5), make_embedded(rng, d, 5), make_embedded(rng, d, 5)]
    lengths = np.array([5, 3, 1])
    for i, ln in enumerate(lengths):
        seqs[i][:, ln:] = 0.0

    packed = np.zeros((d, 5 * 3))
    for t in range(5):
        for b in range(3):
            packed[:, t * 3 + b] = seqs[b][:, t]

    g = Graph()
    out = enc.encode_batch(g, g.const(packed), lengths).data
    for b, ln in enumerate(lengths):
        g1 = Graph()
        single = enc.encode(g1, g1.const(seqs[b]), length=int(ln)).data
        got = out[:, [t * 3 + b for t in range(5)]]
        np.testing.assert_allclose(got, single, atol=1e-12)


# ---------------------------------------------------------------------------
# self-attention pooling
# ---------------------------------------------------------------------------

def pool_reference(H, proj, bias, probe, length):
    """Hand-rolled weighted sum used as the oracle for attend()."""
    s = (probe.T @ np.tanh(proj @ H + bias))[0, :length]
    e = np.exp(s - s.max())
    w = e / e.sum()
    return H[:, :length] @ w, w


def test_attend_singleton(rng):
    pool = init_pool(rng, n_h=4)
    H = make_embedded(rng, 4, 1)
    g = Graph()
    vec, w = pool.attend(g, g.const(H), length=1)
    np.testing.assert_allclose(w.data, [[1.0]])
    np.testing.assert_allclose(vec.data[:, 0], H[:, 0])


def test_attend_identical_columns(rng):
    pool = init_pool(rng, n_h=4)
    col = rng.uniform(-1, 1, size=(4, 1))
    g = Graph()
    _, w = pool.attend(g, g.const(np.hstack([col, col])), length=2)
    np.testing.assert_allclose(w.data, [[0.5, 0.5]], atol=1e-12)


def test_attend_matches_reference_weighted_sum(rng):
    pool = init_pool(rng, n_h=5)
    H = make_embedded(rng, 5, 4)
    g = Graph()
    vec, w = pool.attend(g, g.const(H), length=4)
    ref_vec, ref_w = pool_reference(H, pool.proj.data, pool.bias.data, pool.probe.data, 4)
    np.testing.assert_allclose(w.data[0], ref_w, atol=1e-12)
    np.testing.assert_allclose(vec.data[:, 0], ref_vec, atol=1e-12)


def test_attend_weights_are_masked_distributions(rng):
    pool = init_pool(rng, n_h=4)
    H = make_embedded(rng, 4, 6)
    g = Graph()
    _, w = pool.attend(g, g.const(H), length=3)
    assert np.all(w.data >= 0)
    np.testing.assert_array_equal(w.data[0, 3:], np.zeros(3))
    assert abs(w.data.sum() - 1.0) < 1e-9


def test_attend_batch_matches_single_runs(rng):
    pool = init_pool(rng, n_h=4)
    seqs = [make_embedded(rng, 4, 4) for _ in range(2)]
    lengths = np.array([4, 2])
    packed = np.zeros((4, 8))
    for t in range(4):
        for b in range(2):
            packed[:, t * 2 + b] = seqs[b][:, t]
    g = Graph()
    pooled, w = pool.attend_batch(g, g.const(packed), lengths)
    for b, ln in enumerate(lengths):
        g1 = Graph()
        vec, w1 = pool.attend(g1, g1.const(seqs[b]), length=int(ln))
        np.testing.assert_allclose(pooled.data[:, b], vec.data[:, 0], atol=1e-12)
        np.testing.assert_allclose(w.data[b], w1.data[0], atol=1e-12)


def test_pools_use_disjoint_parameters(rng):
    pool_a = init_pool(rng, n_h=4)
    pool_b = init_pool(rng, n_h=4)
    H = make_embedded(rng, 4, 3)

    g = Graph()
    before = pool_b.attend(g, g.const(H), length=3)[0].data.copy()
    pool_a.proj.data[:] = 99.0
    g2 = Graph()
    after = pool_b.attend(g2, g2.const(H), length=3)[0].data
    np.testing.assert_array_equal(before, after)


# ---------------------------------------------------------------------------
# GloVe loading
# ---------------------------------------------------------------------------

def test_load_glove_rules(tmp_path):
    path = tmp_path / "glove.txt"
    path.write_text(
        "hello 1.0 2.0 3.0\n"
        "unseen 9.0 9.0 9.0\n"
        "world -1.0 0.5 0.25\n"
    )
    word_to_id = {"<pad>": 0, "hello": 1, "world": 2, "absent": 3}
    table = load_glove(path, word_to_id, dim=3)
    np.testing.assert_array_equal(table[0], np.zeros(3))
    np.testing.assert_allclose(table[1], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(table[2], [-1.0, 0.5, 0.25])
    np.testing.assert_array_equal(table[3], np.zeros(3))


def test_load_glove_rejects_malformed_line(tmp_path):
    path = tmp_path / "glove.txt"
    path.write_text("hello 1.0 2.0\n")
    with pytest.raises(ValueError, match="expected 3 values"):
        load_glove(path, {"hello": 1, "<pad>": 0}, dim=3)
