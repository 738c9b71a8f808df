"""Validate trace documents and render them as attention figures.

Each (turn, step) becomes one image: a grayscale strip of region weights
(indexed regions, since the engine never touches pixels) above a bar chart
of history-snippet weights. Each turn additionally gets a summary grid of
all its steps. Weights are annotated to three decimals.
"""

from __future__ import annotations

import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from jsonschema import Draft202012Validator

TRACE_SCHEMA = {
    "type": "object",
    "required": ["dialog_id", "turns"],
    "properties": {
        "dialog_id": {"type": "integer"},
        "turns": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["turn", "question", "steps", "top_candidates"],
                "properties": {
                    "turn": {"type": "integer", "minimum": 1},
                    "question": {"type": "string"},
                    "steps": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["beta", "gamma"],
                            "properties": {
                                "beta": {"type": "array", "minItems": 1,
                                         "items": {"type": "number"}},
                                "gamma": {"type": "array", "minItems": 1,
                                          "items": {"type": "number"}},
                            },
                        },
                    },
                    "top_candidates": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["text", "score", "rank"],
                            "properties": {"text": {"type": "string"},
                                           "score": {"type": "number"},
                                           "rank": {"type": "integer", "minimum": 1}},
                        },
                    },
                },
            },
        },
    },
}

DISTRIBUTION_TOLERANCE = 1e-4


class TraceValidationError(ValueError):
    """Invalid trace document; `path` points at the offending element."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


def _json_path(parts):
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate_trace(doc):
    """Schema check plus the distribution constraint on every weight array."""
    validator = Draft202012Validator(TRACE_SCHEMA)
    err = next(validator.iter_errors(doc), None)
    if err is not None:
        raise TraceValidationError(_json_path(list(err.absolute_path)), err.message)
    for i, turn in enumerate(doc["turns"]):
        for j, step in enumerate(turn["steps"]):
            for key in ("beta", "gamma"):
                arr = np.asarray(step[key], dtype=float)
                path = _json_path(["turns", i, "steps", j, key])
                if np.any(arr < -DISTRIBUTION_TOLERANCE):
                    raise TraceValidationError(path, "negative attention weight")
                if abs(arr.sum() - 1.0) > DISTRIBUTION_TOLERANCE:
                    raise TraceValidationError(
                        path, f"weights sum to {arr.sum():.6f}, expected 1")


def format_weight(value):
    """Annotation format; parsing it back yields the value at 3 decimals."""
    return f"{value:.3f}"


def _draw_step(ax_strip, ax_bars, step, title):
    beta = np.asarray(step["beta"], dtype=float)
    gamma = np.asarray(step["gamma"], dtype=float)

    ax_strip.imshow(beta[None, :], cmap="gray_r", vmin=0.0, vmax=1.0, aspect="auto")
    ax_strip.set_yticks([])
    ax_strip.set_xticks(range(len(beta)))
    ax_strip.set_xticklabels([f"r{m}" for m in range(len(beta))], fontsize=7)
    for m, v in enumerate(beta):
        ax_strip.text(m, 0, format_weight(v), ha="center", va="center",
                      fontsize=7, color="black" if v < 0.5 else "white")
    ax_strip.set_title(title, fontsize=9)

    ax_bars.bar(range(len(gamma)), gamma, color="#4878a8")
    ax_bars.set_ylim(0.0, 1.05)
    ax_bars.set_xticks(range(len(gamma)))
    ax_bars.set_xticklabels([f"h{j}" for j in range(len(gamma))], fontsize=7)
    for j, v in enumerate(gamma):
        ax_bars.text(j, v + 0.02, format_weight(v), ha="center", va="bottom", fontsize=7)


def render(trace_path, out_dir, dpi=150):
    """Render every (turn, step) image plus one grid per turn.

    Returns the list of written file paths. The trace file itself is only
    ever read.
    """
    with open(trace_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    validate_trace(doc)
    os.makedirs(out_dir, exist_ok=True)

    dialog = doc["dialog_id"]
    written = []
    for turn in doc["turns"]:
        t = turn["turn"]
        steps = turn["steps"]
        for s, step in enumerate(steps, start=1):
            fig, (ax_strip, ax_bars) = plt.subplots(
                2, 1, figsize=(6, 3.4), height_ratios=[1, 2])
            _draw_step(ax_strip, ax_bars, step,
                       f"turn {t} step {s}: {turn['question']}")
            fig.tight_layout()
            path = os.path.join(out_dir, f"{dialog}_{t}_{s}.png")
            fig.savefig(path, dpi=dpi, metadata={"Software": None})
            plt.close(fig)
            written.append(path)

        fig, axes = plt.subplots(2, len(steps), figsize=(5 * len(steps), 3.6),
                                 height_ratios=[1, 2], squeeze=False)
        for s, step in enumerate(steps):
            _draw_step(axes[0][s], axes[1][s], step, f"step {s + 1}")
        fig.suptitle(f"turn {t}: {turn['question']}", fontsize=10)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{dialog}_{t}_grid.png")
        fig.savefig(path, dpi=dpi, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
