"""Full model assembly: parameters, per-turn forward passes, evaluation.

One DialogModel owns every trainable tensor (registered under stable dotted
names for the optimizer and checkpoints) and knows how to run a single
dialog turn: build both memories, encode the question, reason for T steps,
and decode with either decoder.
"""

from __future__ import annotations

import numpy as np

from . import decoders, ranking
from .autodiff import Graph, Tensor
from .data import BOS_ID, EOS_ID, UNK_ID
from .encoders import (init_bilstm, init_embedding, init_pool, init_lstm_cell,
                       xavier_uniform)
from .memory import build_textual_memory, build_visual_memory
from .reasoning import init_reasoning, run_reasoning


class ModelConfig:
    """Hyperparameters; `desk` is the fast fully-testable preset, `paper`
    the full-scale one."""

    FIELDS = ("n_h", "d_learned", "n_f", "num_regions", "factors", "steps",
              "max_caption_tokens", "max_qa_tokens", "vocab_size",
              "pretrained_dim", "dropout")

    def __init__(self, n_h, d_learned, n_f, num_regions, factors, steps,
                 max_caption_tokens, max_qa_tokens, vocab_size,
                 pretrained_dim=0, dropout=0.2):
        self.n_h = n_h
        self.d_learned = d_learned
        self.n_f = n_f
        self.num_regions = num_regions
        self.factors = factors
        self.steps = steps
        self.max_caption_tokens = max_caption_tokens
        self.max_qa_tokens = max_qa_tokens
        self.vocab_size = vocab_size
        self.pretrained_dim = pretrained_dim
        self.dropout = dropout
        if n_h % 2 != 0:
            raise ValueError("n_h must be even (two BiLSTM directions)")

    @classmethod
    def desk(cls, vocab_size, steps=2):
        return cls(n_h=16, d_learned=8, n_f=12, num_regions=4, factors=2,
                   steps=steps, max_caption_tokens=10, max_qa_tokens=10,
                   vocab_size=vocab_size)

    @classmethod
    def paper(cls, vocab_size, steps=3):
        return cls(n_h=512, d_learned=300, n_f=2048, num_regions=36, factors=5,
                   steps=steps, max_caption_tokens=40, max_qa_tokens=20,
                   vocab_size=vocab_size, pretrained_dim=300)

    @property
    def d_emb(self):
        return self.d_learned + self.pretrained_dim

    def to_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f: d[f] for f in cls.FIELDS})


class TurnResult:
    __slots__ = ("loss", "scores", "trace")

    def __init__(self, loss=None, scores=None, trace=None):
        self.loss = loss
        self.scores = scores
        self.trace = trace


class DialogModel:
    """Parameters plus the per-turn forward pass for both decoders."""

    def __init__(self, config, vocab, seed=0, pretrained=None):
        self.config = config
        self.vocab = vocab
        if len(vocab) != config.vocab_size:
            raise ValueError(f"vocab size {len(vocab)} != config {config.vocab_size}")
        rng = np.random.default_rng(seed)
        c = config

        self.embed = init_embedding(rng, c.vocab_size, c.d_learned, pretrained=pretrained)
        if self.embed.width != c.d_emb:
            raise ValueError("pretrained table width does not match config")
        self.enc_question = init_bilstm(rng, c.d_emb, c.n_h)
        self.enc_history = init_bilstm(rng, c.d_emb, c.n_h)
        self.enc_candidate = init_bilstm(rng, c.d_emb, c.n_h)
        self.pool_question = init_pool(rng, c.n_h)
        self.pool_history = init_pool(rng, c.n_h)
        self.pool_candidate = init_pool(rng, c.n_h)
        self.visual_proj = Tensor(xavier_uniform(rng, (c.n_h, c.n_f)), requires_grad=True)
        self.visual_bias = Tensor(np.zeros((c.n_h, 1)), requires_grad=True)
        self.reasoning = init_reasoning(rng, c.n_h, c.steps, c.factors)
        self.disc_proj = Tensor(xavier_uniform(rng, (c.n_h, 3 * c.n_h)), requires_grad=True)
        self.disc_bias = Tensor(np.zeros((c.n_h, 1)), requires_grad=True)
        self.generator = decoders.GenerativeDecoder(
            w_ctx=Tensor(xavier_uniform(rng, (c.n_h, 3 * c.n_h)), requires_grad=True),
            b_ctx=Tensor(np.zeros((c.n_h, 1)), requires_grad=True),
            w_in=Tensor(xavier_uniform(rng, (c.n_h, c.d_emb)), requires_grad=True),
            b_in=Tensor(np.zeros((c.n_h, 1)), requires_grad=True),
            cell=init_lstm_cell(rng, c.n_h, c.n_h),
            w_out=Tensor(xavier_uniform(rng, (c.vocab_size, c.n_h)), requires_grad=True),
            b_out=Tensor(np.zeros((c.vocab_size, 1)), requires_grad=True),
            bos_id=BOS_ID, eos_id=EOS_ID)

        self._params = self._register()

    def _register(self):
        p = {}
        p["embedding.learned"] = self.embed.learned
        if self.embed.pretrained is not None:
            p["embedding.pretrained"] = self.embed.pretrained
        for name, enc in (("question", self.enc_question), ("history", self.enc_history),
                          ("candidate", self.enc_candidate)):
            p[f"encoder_{name}.forward.weights"] = enc.forward_cell.weights
            p[f"encoder_{name}.forward.bias"] = enc.forward_cell.bias
            p[f"encoder_{name}.backward.weights"] = enc.backward_cell.weights
            p[f"encoder_{name}.backward.bias"] = enc.backward_cell.bias
        for name, pool in (("question", self.pool_question), ("history", self.pool_history),
                           ("candidate", self.pool_candidate)):
            p[f"pool_{name}.proj"] = pool.proj
            p[f"pool_{name}.bias"] = pool.bias
            p[f"pool_{name}.probe"] = pool.probe
        p["visual.proj"] = self.visual_proj
        p["visual.bias"] = self.visual_bias
        r = self.reasoning
        for f in ("w_img_mem", "w_img_state", "w_img_hist", "b_img", "probe_img",
                  "w_hist_mem", "w_hist_state", "w_hist_img", "b_hist", "probe_hist"):
            p[f"reasoning.{f}"] = getattr(r, f)
        for mf in ("mfb_loop", "mfb_state_img", "mfb_state_hist", "mfb_img_hist"):
            pair = getattr(r, mf)
            for f in ("proj_a", "bias_a", "proj_b", "bias_b"):
                p[f"reasoning.{mf}.{f}"] = getattr(pair, f)
        for f in ("w_update", "b_update", "w_reset", "b_reset", "w_cand", "b_cand"):
            p[f"reasoning.gru.{f}"] = getattr(r.gru, f)
        p["disc.proj"] = self.disc_proj
        p["disc.bias"] = self.disc_bias
        g = self.generator
        for f in ("w_ctx", "b_ctx", "w_in", "b_in", "w_out", "b_out"):
            p[f"gen.{f}"] = getattr(g, f)
        p["gen.cell.weights"] = g.cell.weights
        p["gen.cell.bias"] = g.cell.bias
        return p

    def params(self):
        """Ordered name -> Tensor mapping (includes the frozen pretrained rows)."""
        return self._params

    def trainable_params(self):
        return {k: t for k, t in self._params.items() if t.requires_grad}

    # -- forward passes --------------------------------------------------

    def _encode_question(self, graph, ids):
        embedded = self.embed.embed(graph, ids)
        encoded = self.enc_question.encode(graph, embedded, len(ids))
        vec, _ = self.pool_question.attend(graph, encoded, len(ids))
        return vec

    def _context(self, graph, example, turn_idx, dropout_rng=None):
        c = self.config
        snippets, texts = example.history_snippets(turn_idx)
        visual = build_visual_memory(graph, example.features, self.visual_proj,
                                     self.visual_bias)
        textual = build_textual_memory(graph, snippets, self.embed, self.enc_history,
                                       self.pool_history, snippet_texts=texts,
                                       unk_id=UNK_ID)
        question = self._encode_question(graph, example.turns[turn_idx].question_ids)

        masks = None
        if dropout_rng is not None and c.dropout > 0:
            keep = 1.0 - c.dropout
            masks = [tuple((dropout_rng.random((c.n_h, 1)) < keep) / keep
                           for _ in range(3))
                     for _ in range(c.steps)]
        return run_reasoning(graph, question, visual, textual, self.reasoning,
                             dropout_masks=masks)

    def turn_loss(self, graph, example, turn_idx, kind, dropout_rng=None):
        """Scalar training loss for one turn ('dis', 'gen', or 'both')."""
        turn = example.turns[turn_idx]
        context, _ = self._context(graph, example, turn_idx, dropout_rng=dropout_rng)
        losses = []
        if kind in ("dis", "both"):
            scores = decoders.score_discriminative(
                graph, context, turn.candidate_ids, self.embed, self.enc_candidate,
                self.pool_candidate, self.disc_proj, self.disc_bias)
            losses.append(decoders.loss_discriminative(graph, scores, turn.gt))
        if kind in ("gen", "both"):
            nll = decoders.generative_nll(graph, context, turn.answer_ids,
                                          self.embed, self.generator)
            losses.append(graph.reshape(nll, (1, 1)))
        if not losses:
            raise ValueError(f"unknown decoder kind '{kind}'")
        return losses[0] if len(losses) == 1 else graph.add(losses[0], losses[1])

    def turn_scores(self, graph, example, turn_idx, kind):
        """Candidate scores (1-D array) plus the reasoning trace, no dropout."""
        turn = example.turns[turn_idx]
        context, trace = self._context(graph, example, turn_idx)
        if kind == "dis":
            scores = decoders.score_discriminative(
                graph, context, turn.candidate_ids, self.embed, self.enc_candidate,
                self.pool_candidate, self.disc_proj, self.disc_bias)
        elif kind == "gen":
            scores = decoders.score_generative(graph, context, turn.candidate_ids,
                                               self.embed, self.generator)
        else:
            raise ValueError(f"unknown decoder kind '{kind}'")
        return scores.data[0].copy(), trace

    def evaluate(self, examples, kind):
        """Rank every turn of every dialog; returns a ranking table.

        Parameters are fixed during evaluation, so the visual memory and the
        snippet encodings are built once per dialog; each turn's textual
        memory is a prefix slice of the full snippet set.
        """
        table = []
        for ex in examples:
            graph = Graph(check_finite=False)
            visual = build_visual_memory(graph, ex.features, self.visual_proj,
                                         self.visual_bias)
            full_snippets, _ = ex.history_snippets(len(ex.turns) - 1)
            textual_full = build_textual_memory(graph, full_snippets, self.embed,
                                                self.enc_history, self.pool_history,
                                                unk_id=UNK_ID)
            for turn_idx, turn in enumerate(ex.turns):
                memory = graph.slice(textual_full.values, 1, 0, turn_idx + 1)
                question = self._encode_question(graph, turn.question_ids)
                context, _ = run_reasoning(graph, question, visual, memory,
                                           self.reasoning)
                if kind == "dis":
                    score_t = decoders.score_discriminative(
                        graph, context, turn.candidate_ids, self.embed,
                        self.enc_candidate, self.pool_candidate,
                        self.disc_proj, self.disc_bias)
                elif kind == "gen":
                    score_t = decoders.score_generative(
                        graph, context, turn.candidate_ids, self.embed, self.generator)
                else:
                    raise ValueError(f"unknown decoder kind '{kind}'")
                scores = score_t.data[0].copy()
                table.append(ranking.TurnRanking(
                    ex.image_id, turn_idx + 1, decoders.rank_candidates(scores),
                    turn.gt, scores=scores, relevance=turn.relevance))
        return table
