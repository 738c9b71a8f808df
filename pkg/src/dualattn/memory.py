"""Visual and textual memory construction.

The visual memory is a tanh-transformed projection of precomputed region
features, one column per region. The textual memory pools each history
snippet (caption first, then question+answer turns) into one column.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class VisualMemory:
    """(n_h, M) matrix of transformed region features; entries in (-1, 1)."""

    __slots__ = ("values", "region_boxes")

    def __init__(self, values, region_boxes=None):
        self.values = values
        self.region_boxes = region_boxes

    @property
    def num_regions(self):
        return self.values.shape[1]


class TextualMemory:
    """(n_h, l) matrix, one pooled column per history snippet."""

    __slots__ = ("values", "snippet_texts")

    def __init__(self, values, snippet_texts=None):
        self.values = values
        self.snippet_texts = snippet_texts

    @property
    def num_snippets(self):
        return self.values.shape[1]


def build_visual_memory(graph, features, proj, bias, region_boxes=None):
    """tanh(W @ features + b) per region column.

    features: (n_f, M) array or tensor of detector outputs, M >= 1.
    """
    feats = features if isinstance(features, Tensor) else graph.const(np.asarray(features, dtype=np.float64))
    if feats.shape[1] < 1:
        raise ValueError("need at least one region")
    values = graph.tanh(graph.add(graph.matmul(proj, feats), bias))
    return VisualMemory(values, region_boxes)


def build_textual_memory(graph, snippets, embed_table, encoder, pool,
                         snippet_texts=None, unk_id=1):
    """Encode and pool each history snippet independently into (n_h, l).

    snippets: list of token-id sequences, caption first. Empty snippets are
    replaced by a single unknown-word token so every column is defined.
    """
    if len(snippets) < 1:
        raise ValueError("history must contain at least the caption")
    snippets = [list(s) if len(s) > 0 else [unk_id] for s in snippets]
    count = len(snippets)
    lengths = np.array([len(s) for s in snippets])
    L = int(lengths.max())

    ids = np.zeros(L * count, dtype=np.intp)  # time-major: column t*count + j
    for j, s in enumerate(snippets):
        for t, tok in enumerate(s):
            ids[t * count + j] = tok

    embedded = embed_table.embed(graph, ids)
    encoded = encoder.encode_batch(graph, embedded, lengths)
    pooled, _ = pool.attend_batch(graph, encoded, lengths)
    return TextualMemory(pooled, snippet_texts)
