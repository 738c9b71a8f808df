import numpy as np
import pytest

from dualattn.autodiff import Graph, Tensor, backward
from dualattn.reasoning import (
    GruParams, ReasoningParams, attend_history, attend_image, gru_update,
    init_gru, init_mfb_pair, init_reasoning, mfb_fuse, run_reasoning,
)

N_H = 6


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def params(rng):
    return init_reasoning(rng, n_h=N_H, steps=2, factors=2)


def col(rng, n=N_H):
    return Tensor(rng.uniform(-1, 1, size=(n, 1)))


# ---------------------------------------------------------------------------
# attention over memories
# ---------------------------------------------------------------------------

def test_attend_image_single_region_is_identity(rng, params):
    g = Graph()
    mem = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    vec, beta = attend_image(g, col(rng), col(rng), mem, params)
    np.testing.assert_allclose(beta.data, [[1.0]])
    np.testing.assert_allclose(vec.data, mem.data)


def test_attend_image_identical_columns_uniform(rng, params):
    g = Graph()
    one = rng.uniform(-1, 1, size=(N_H, 1))
    mem = g.const(np.hstack([one, one]))
    _, beta = attend_image(g, col(rng), col(rng), mem, params)
    np.testing.assert_allclose(beta.data, [[0.5, 0.5]], atol=1e-12)


def test_attend_image_matches_weighted_sum_oracle(rng, params):
    g = Graph()
    mem_data = rng.uniform(-1, 1, size=(N_H, 4))
    mem = g.const(mem_data)
    s, d = col(rng), col(rng)
    vec, beta = attend_image(g, s, d, mem, params)

    keyed = np.tanh(params.w_img_mem.data @ mem_data
                    + params.w_img_state.data @ s.data
                    + params.w_img_hist.data @ d.data
                    + params.b_img.data)
    scores = params.probe_img.data.T @ keyed
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    np.testing.assert_allclose(beta.data, w, atol=1e-12)
    np.testing.assert_allclose(vec.data[:, 0], (mem_data * w).sum(axis=1), atol=1e-12)


def test_attend_history_mirrors_image_path(rng, params):
    g = Graph()
    mem_data = rng.uniform(-1, 1, size=(N_H, 3))
    s, v = col(rng), col(rng)
    vec, gamma = attend_history(g, s, v, g.const(mem_data), params)

    keyed = np.tanh(params.w_hist_mem.data @ mem_data
                    + params.w_hist_state.data @ s.data
                    + params.w_hist_img.data @ v.data
                    + params.b_hist.data)
    scores = params.probe_hist.data.T @ keyed
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    np.testing.assert_allclose(gamma.data, w, atol=1e-12)
    np.testing.assert_allclose(vec.data[:, 0], (mem_data * w).sum(axis=1), atol=1e-12)
    assert gamma.shape == (1, 3)


def test_attend_history_single_snippet(rng, params):
    g = Graph()
    mem = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    vec, gamma = attend_history(g, col(rng), col(rng), mem, params)
    np.testing.assert_allclose(gamma.data, [[1.0]])
    np.testing.assert_allclose(vec.data, mem.data)


# ---------------------------------------------------------------------------
# MFB fusion
# ---------------------------------------------------------------------------

def test_mfb_zero_input_gives_zero(rng):
    pair = init_mfb_pair(rng, N_H, factors=2)
    g = Graph()
    out = mfb_fuse(g, g.const(np.zeros((N_H, 1))), col(rng), pair)
    np.testing.assert_array_equal(out.data, np.zeros((N_H, 1)))


def test_mfb_identity_case(rng):
    from dualattn.reasoning import MfbPair
    eye = Tensor(np.eye(N_H))
    zero = Tensor(np.zeros((N_H, 1)))
    pair = MfbPair(eye, zero, eye, zero, factors=1)
    e0 = np.zeros((N_H, 1))
    e0[0, 0] = 1.0
    g = Graph()
    out = mfb_fuse(g, g.const(e0), g.const(e0), pair)
    np.testing.assert_allclose(out.data, e0, atol=1e-12)


def test_mfb_matches_composed_oracle(rng):
    pair = init_mfb_pair(rng, 4, factors=2)
    a = rng.uniform(-1, 1, size=(4, 1))
    b = rng.uniform(-1, 1, size=(4, 1))
    g = Graph()
    out = mfb_fuse(g, g.const(a), g.const(b), pair)

    pa = pair.proj_a.data @ a + pair.bias_a.data
    pb = pair.proj_b.data @ b + pair.bias_b.data
    prod = (pa * pb)[:, 0]
    pooled = prod.reshape(4, 2).sum(axis=1)
    ss = np.sign(pooled) * np.sqrt(np.abs(pooled))
    expected = ss / np.linalg.norm(ss)
    np.testing.assert_allclose(out.data[:, 0], expected, atol=1e-12)


def test_mfb_output_norm_is_unit_or_zero(rng):
    pair = init_mfb_pair(rng, N_H, factors=3)
    for _ in range(20):
        g = Graph()
        out = mfb_fuse(g, col(rng), col(rng), pair)
        n = np.linalg.norm(out.data)
        assert abs(n - 1.0) < 1e-9 or n == 0.0


# ---------------------------------------------------------------------------
# GRU update
# ---------------------------------------------------------------------------

def saturated_gru(n, update_bias):
    big = np.zeros((n, 2 * n))
    return GruParams(
        Tensor(np.zeros((n, 2 * n))), Tensor(np.full((n, 1), update_bias)),
        Tensor(np.zeros((n, 2 * n))), Tensor(np.full((n, 1), 50.0)),
        Tensor(big * 0), Tensor(np.zeros((n, 1))),
    )


def test_gru_update_gate_saturated_high_copies_state(rng):
    gp = saturated_gru(N_H, update_bias=50.0)
    g = Graph()
    s = col(rng)
    out = gru_update(g, s, col(rng), gp)
    np.testing.assert_allclose(out.data, s.data, atol=1e-12)


def test_gru_update_gate_saturated_low_overwrites_with_zero(rng):
    gp = saturated_gru(N_H, update_bias=-50.0)
    g = Graph()
    out = gru_update(g, col(rng), col(rng), gp)
    np.testing.assert_allclose(out.data, np.zeros((N_H, 1)), atol=1e-12)


def test_gru_matches_independent_implementation(rng):
    gp = init_gru(rng, N_H)
    s0 = rng.uniform(-1, 1, size=(N_H, 1))
    z0 = rng.uniform(-1, 1, size=(N_H, 1))
    g = Graph()
    out = gru_update(g, g.const(s0), g.const(z0), gp)

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    xs = np.vstack([z0, s0])
    u = sig(gp.w_update.data @ xs + gp.b_update.data)
    r = sig(gp.w_reset.data @ xs + gp.b_reset.data)
    cand = np.tanh(gp.w_cand.data @ np.vstack([z0, r * s0]) + gp.b_cand.data)
    expected = u * s0 + (1 - u) * cand
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# full reasoning loop
# ---------------------------------------------------------------------------

def run_once(rng, params, M=4, snippets=3, steps=None):
    g = Graph()
    q = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    mv = g.const(rng.uniform(-1, 1, size=(N_H, M)))
    md = g.const(rng.uniform(-1, 1, size=(N_H, snippets)))
    ctx, trace = run_reasoning(g, q, mv, md, params, steps=steps)
    return g, q, mv, md, ctx, trace


def test_single_step_equals_manual_composition(rng, params):
    g = Graph()
    q = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    mv = g.const(rng.uniform(-1, 1, size=(N_H, 4)))
    md = g.const(rng.uniform(-1, 1, size=(N_H, 3)))
    ctx, trace = run_reasoning(g, q, mv, md, params, steps=1)

    g2 = Graph()
    q2 = g2.const(q.data)
    mv2 = g2.const(mv.data)
    md2 = g2.const(md.data)
    d0 = g2.const(np.zeros((N_H, 1)))
    v, _ = attend_image(g2, q2, d0, mv2, params)
    d, _ = attend_history(g2, q2, v, md2, params)
    z = mfb_fuse(g2, v, d, params.mfb_loop)
    s1 = gru_update(g2, q2, z, params.gru)
    expected = np.vstack([
        mfb_fuse(g2, s1, v, params.mfb_state_img).data,
        mfb_fuse(g2, s1, d, params.mfb_state_hist).data,
        mfb_fuse(g2, v, d, params.mfb_img_hist).data,
    ])
    np.testing.assert_allclose(ctx.data, expected, atol=1e-12)


def test_trace_lengths_match_step_count(rng, params):
    for T in (1, 2, 3):
        _, _, _, _, _, trace = run_once(rng, params, steps=T)
        assert len(trace.steps) == T
        assert all(st.image_weights.shape == (4,) for st in trace.steps)
        assert all(st.history_weights.shape == (3,) for st in trace.steps)


def test_trace_weights_are_distributions(rng, params):
    _, _, _, _, _, trace = run_once(rng, params, M=5, snippets=4, steps=3)
    for st in trace.steps:
        assert np.all(st.image_weights >= 0)
        assert np.all(st.history_weights >= 0)
        assert abs(st.image_weights.sum() - 1) < 1e-9
        assert abs(st.history_weights.sum() - 1) < 1e-9


def test_context_width_and_block_norms(rng, params):
    _, _, _, _, ctx, _ = run_once(rng, params)
    assert ctx.shape == (3 * N_H, 1)
    for blk in range(3):
        n = np.linalg.norm(ctx.data[blk * N_H:(blk + 1) * N_H])
        assert abs(n - 1.0) < 1e-9 or n == 0.0


def test_singleton_memories_make_context_probe_free(rng, params):
    g, q, mv, md, ctx, _ = run_once(rng, params, M=1, snippets=1)

    params.probe_img.data[:] = rng.uniform(-2, 2, size=params.probe_img.shape)
    params.probe_hist.data[:] = rng.uniform(-2, 2, size=params.probe_hist.shape)
    g2 = Graph()
    ctx2, _ = run_reasoning(g2, g2.const(q.data), g2.const(mv.data),
                            g2.const(md.data), params)
    np.testing.assert_allclose(ctx.data, ctx2.data, atol=1e-12)


def test_permuting_regions_permutes_beta_and_preserves_context(rng, params):
    g, q, mv, md, ctx, trace = run_once(rng, params, M=5)
    perm = np.array([3, 0, 4, 1, 2])
    g2 = Graph()
    ctx2, trace2 = run_reasoning(g2, g2.const(q.data), g2.const(mv.data[:, perm]),
                                 g2.const(md.data), params)
    for st, st2 in zip(trace.steps, trace2.steps):
        np.testing.assert_allclose(st2.image_weights, st.image_weights[perm], atol=1e-12)
    np.testing.assert_allclose(ctx2.data, ctx.data, atol=1e-12)


def test_identical_runs_are_bit_identical(rng, params):
    data = {
        "q": rng.uniform(-1, 1, size=(N_H, 1)),
        "mv": rng.uniform(-1, 1, size=(N_H, 4)),
        "md": rng.uniform(-1, 1, size=(N_H, 2)),
    }

    def once():
        g = Graph()
        ctx, trace = run_reasoning(g, g.const(data["q"]), g.const(data["mv"]),
                                   g.const(data["md"]), params)
        return ctx.data.copy(), [st.image_weights.copy() for st in trace.steps]

    c1, b1 = once()
    c2, b2 = once()
    assert np.array_equal(c1, c2)
    assert all(np.array_equal(a, b) for a, b in zip(b1, b2))


def test_step_count_below_one_rejected(rng, params):
    g = Graph()
    with pytest.raises(ValueError, match="step count"):
        run_reasoning(g, g.const(np.zeros((N_H, 1))), g.const(np.zeros((N_H, 2))),
                      g.const(np.zeros((N_H, 2))), params, steps=0)
    with pytest.raises(ValueError, match="step count"):
        init_reasoning(np.random.default_rng(0), n_h=N_H, steps=0, factors=2)


def test_reasoning_gradients_pass_finite_difference_check(rng, params):
    """End-to-end gradient through the reasoning pathway: loss built from a
    cross-entropy over scores of the context against fixed directions."""
    from dualattn.autodiff import finite_difference_check

    g = Graph(check_finite=False)
    q = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    mv = g.const(rng.uniform(-1, 1, size=(N_H, 3)))
    md = g.const(rng.uniform(-1, 1, size=(N_H, 2)))
    ctx, _ = run_reasoning(g, q, mv, md, params)
    probes = g.const(rng.uniform(-1, 1, size=(3, 3 * N_H)))
    loss = g.cross_entropy(g.transpose(g.matmul(probes, ctx)), [1])

    # check a representative subset for speed: attention maps, probes, GRU
    subset = [params.w_img_mem, params.w_img_hist, params.probe_img,
              params.w_hist_state, params.probe_hist, params.gru.w_update,
              params.gru.w_cand, params.mfb_loop.proj_a,
              params.mfb_state_hist.bias_b]
    err = finite_difference_check(g, loss, eps=1e-6, params=subset)
    assert err < 1e-4


def test_dropout_masks_apply_and_mark_stochastic(rng, params):
    g = Graph()
    q = g.const(rng.uniform(-1, 1, size=(N_H, 1)))
    mv = g.const(rng.uniform(-1, 1, size=(N_H, 3)))
    md = g.const(rng.uniform(-1, 1, size=(N_H, 2)))
    masks = [tuple(np.ones((N_H, 1)) for _ in range(3)) for _ in range(params.steps)]
    ctx, _ = run_reasoning(g, q, mv, md, params, dropout_masks=masks)
    assert g.stochastic

    g2 = Graph()
    ctx2, _ = run_reasoning(g2, g2.const(q.data), g2.const(mv.data), g2.const(md.data),
                            params, dropout_masks=masks, dropout_frozen=True)
    assert not g2.stochastic
    np.testing.assert_allclose(ctx.data, ctx2.data, atol=1e-12)
