"""Multi-step dual attention: the query state alternately attends to visual
and textual memory, the two glimpses are fused bilinearly, and a GRU carries
the refined query into the next step. After T steps the state and the two
final glimpses are fused pairwise into the context vector.

All state vectors are (n_h, 1) columns.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .encoders import xavier_uniform


class MfbPair:
    """Projection pair for factorized bilinear fusion."""

    __slots__ = ("proj_a", "bias_a", "proj_b", "bias_b", "factors")

    def __init__(self, proj_a, bias_a, proj_b, bias_b, factors):
        self.proj_a = proj_a
        self.bias_a = bias_a
        self.proj_b = proj_b
        self.bias_b = bias_b
        self.factors = factors


class GruParams:
    """Update/reset/candidate maps over the concatenated [input; state]."""

    __slots__ = ("w_update", "b_update", "w_reset", "b_reset", "w_cand", "b_cand")

    def __init__(self, w_update, b_update, w_reset, b_reset, w_cand, b_cand):
        self.w_update = w_update
        self.b_update = b_update
        self.w_reset = w_reset
        self.b_reset = b_reset
        self.w_cand = w_cand
        self.b_cand = b_cand


class ReasoningParams:
    """One shared parameter set for all reasoning steps."""

    def __init__(self, w_img_mem, w_img_state, w_img_hist, b_img, probe_img,
                 w_hist_mem, w_hist_state, w_hist_img, b_hist, probe_hist,
                 mfb_loop, mfb_state_img, mfb_state_hist, mfb_img_hist,
                 gru, steps, factors):
        self.w_img_mem = w_img_mem
        self.w_img_state = w_img_state
        self.w_img_hist = w_img_hist
        self.b_img = b_img
        self.probe_img = probe_img
        self.w_hist_mem = w_hist_mem
        self.w_hist_state = w_hist_state
        self.w_hist_img = w_hist_img
        self.b_hist = b_hist
        self.probe_hist = probe_hist
        self.mfb_loop = mfb_loop
        self.mfb_state_img = mfb_state_img
        self.mfb_state_hist = mfb_state_hist
        self.mfb_img_hist = mfb_img_hist
        self.gru = gru
        if steps < 1:
            raise ValueError(f"step count must be >= 1, got {steps}")
        self.steps = steps
        self.factors = factors


class StepTrace:
    __slots__ = ("image_weights", "history_weights", "state", "image_vec", "history_vec")

    def __init__(self, image_weights, history_weights, state, image_vec, history_vec):
        self.image_weights = image_weights
        self.history_weights = history_weights
        self.state = state
        self.image_vec = image_vec
        self.history_vec = history_vec


class ReasoningTrace:
    """Per-step attention distributions and state snapshots plus the final context."""

    __slots__ = ("steps", "context")

    def __init__(self):
        self.steps = []
        self.context = None


def attend_image(graph, state, hist_prev, visual_memory, params):
    """Query + previous history glimpse attending over image regions.

    Returns ((n_h, 1) glimpse, (1, M) weights). Broadcast adds spread the
    state/history columns across all M region columns.
    """
    mem = visual_memory if isinstance(visual_memory, Tensor) else visual_memory.values
    keyed = graph.matmul(params.w_img_mem, mem)
    keyed = graph.add(keyed, graph.matmul(params.w_img_state, state))
    keyed = graph.add(keyed, graph.matmul(params.w_img_hist, hist_prev))
    keyed = graph.tanh(graph.add(keyed, params.b_img))
    weights = graph.softmax_rows(graph.matmul(graph.transpose(params.probe_img), keyed))
    vec = graph.matmul(mem, graph.transpose(weights))
    return vec, weights


def attend_history(graph, state, image_vec, textual_memory, params):
    """Query + current image glimpse attending over history snippets."""
    mem = textual_memory if isinstance(textual_memory, Tensor) else textual_memory.values
    keyed = graph.matmul(params.w_hist_mem, mem)
    keyed = graph.add(keyed, graph.matmul(params.w_hist_state, state))
    keyed = graph.add(keyed, graph.matmul(params.w_hist_img, image_vec))
    keyed = graph.tanh(graph.add(keyed, params.b_hist))
    weights = graph.softmax_rows(graph.matmul(graph.transpose(params.probe_hist), keyed))
    vec = graph.matmul(mem, graph.transpose(weights))
    return vec, weights


def mfb_fuse(graph, a, b, pair):
    """Factorized bilinear fusion of two (n_h, 1) vectors into one.

    Project both to (n_h*k, 1), multiply elementwise, sum-pool windows of k
    back to n_h, then signed sqrt and l2 normalization. Output has unit norm
    unless the pooled vector is zero, in which case it is exactly zero.
    """
    pa = graph.add(graph.matmul(pair.proj_a, a), pair.bias_a)
    pb = graph.add(graph.matmul(pair.proj_b, b), pair.bias_b)
    prod = graph.mul(pa, pb)
    assert prod.shape[0] % pair.factors == 0
    pooled = graph.sum_pool(prod, k=pair.factors, axis=0)
    return graph.l2_normalize(graph.signed_sqrt(pooled))


def gru_update(graph, state, fused, gp):
    """Standard GRU cell: s' = u*s + (1-u)*cand, candidate over reset-gated state."""
    xs = graph.concat([fused, state], axis=0)
    update = graph.sigmoid(graph.add(graph.matmul(gp.w_update, xs), gp.b_update))
    reset = graph.sigmoid(graph.add(graph.matmul(gp.w_reset, xs), gp.b_reset))
    gated = graph.concat([fused, graph.mul(reset, state)], axis=0)
    cand = graph.tanh(graph.add(graph.matmul(gp.w_cand, gated), gp.b_cand))
    one_minus_u = graph.add(graph.const(np.ones(update.shape)), graph.scale(update, -1.0))
    return graph.add(graph.mul(update, state), graph.mul(one_minus_u, cand))


def run_reasoning(graph, question_vec, visual_memory, textual_memory, params,
                  steps=None, dropout_masks=None, dropout_frozen=False):
    """Execute T reasoning steps and build the (3*n_h, 1) context vector.

    dropout_masks, when given, is a list of (mask_v, mask_d, mask_z) float
    arrays per step, applied to the image glimpse, history glimpse, and
    fused vector respectively (training only).
    """
    T = params.steps if steps is None else steps
    if T < 1:
        raise ValueError(f"step count must be >= 1, got {T}")
    n_h = question_vec.shape[0]
    trace = ReasoningTrace()

    state = question_vec
    hist_vec = graph.const(np.zeros((n_h, 1)))  # d_0
    for t in range(T):
        image_vec, beta = attend_image(graph, state, hist_vec, visual_memory, params)
        if dropout_masks is not None:
            image_vec = graph.dropout(image_vec, dropout_masks[t][0], frozen=dropout_frozen)
        hist_vec, gamma = attend_history(graph, state, image_vec, textual_memory, params)
        if dropout_masks is not None:
            hist_vec = graph.dropout(hist_vec, dropout_masks[t][1], frozen=dropout_frozen)
        fused = mfb_fuse(graph, image_vec, hist_vec, params.mfb_loop)
        if dropout_masks is not None:
            fused = graph.dropout(fused, dropout_masks[t][2], frozen=dropout_frozen)
        new_state = gru_update(graph, state, fused, params.gru)
        trace.steps.append(StepTrace(
            image_weights=beta.data[0].copy(),
            history_weights=gamma.data[0].copy(),
            state=state.data[:, 0].copy(),
            image_vec=image_vec.data[:, 0].copy(),
            history_vec=hist_vec.data[:, 0].copy(),
        ))
        state = new_state

    context = graph.concat([
        mfb_fuse(graph, state, image_vec, params.mfb_state_img),
        mfb_fuse(graph, state, hist_vec, params.mfb_state_hist),
        mfb_fuse(graph, image_vec, hist_vec, params.mfb_img_hist),
    ], axis=0)
    trace.context = context.data[:, 0].copy()
    return context, trace


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _mat(rng, shape):
    return Tensor(xavier_uniform(rng, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_mfb_pair(rng, n_h, factors):
    return MfbPair(_mat(rng, (n_h * factors, n_h)), _zeros((n_h * factors, 1)),
                   _mat(rng, (n_h * factors, n_h)), _zeros((n_h * factors, 1)),
                   factors)


def init_gru(rng, n_h):
    return GruParams(_mat(rng, (n_h, 2 * n_h)), _zeros((n_h, 1)),
                     _mat(rng, (n_h, 2 * n_h)), _zeros((n_h, 1)),
                     _mat(rng, (n_h, 2 * n_h)), _zeros((n_h, 1)))


def init_reasoning(rng, n_h, steps, factors):
    return ReasoningParams(
        w_img_mem=_mat(rng, (n_h, n_h)), w_img_state=_mat(rng, (n_h, n_h)),
        w_img_hist=_mat(rng, (n_h, n_h)), b_img=_zeros((n_h, 1)),
        probe_img=_mat(rng, (n_h, 1)),
        w_hist_mem=_mat(rng, (n_h, n_h)), w_hist_state=_mat(rng, (n_h, n_h)),
        w_hist_img=_mat(rng, (n_h, n_h)), b_hist=_zeros((n_h, 1)),
        probe_hist=_mat(rng, (n_h, 1)),
        mfb_loop=init_mfb_pair(rng, n_h, factors),
        mfb_state_img=init_mfb_pair(rng, n_h, factors),
        mfb_state_hist=init_mfb_pair(rng, n_h, factors),
        mfb_img_hist=init_mfb_pair(rng, n_h, factors),
        gru=init_gru(rng, n_h),
        steps=steps, factors=factors,
    )
