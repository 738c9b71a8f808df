"""Dataset ingestion, vocabulary, and the synthetic desk-scale task generator.

Dialog files are JSON ({"dialogs": [...]}) and image features live in a
small binary container (magic "RDNF"): u32 version, u32 image count, then
per image u64 image_id, u32 M, u32 n_f and M*n_f little-endian f32 values,
region-major.
"""

from __future__ import annotations

import json
import re
import struct

import numpy as np

PAD_ID, UNK_ID, BOS_ID, EOS_ID, QA_ID = 0, 1, 2, 3, 4
SPECIALS = ["<pad>", "<unk>", "<bos>", "<eos>", "<qa>"]

FEATURE_MAGIC = b"RDNF"
FEATURE_VERSION = 1

_PUNCT = re.compile(r"[^\w\s]")


class DataError(Exception):
    """Dataset-level failure: missing records, invalid values, bad references."""


class FormatError(DataError):
    """File-level failure: wrong magic, malformed JSON, truncated payloads."""


def tokenize(text):
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    """Word-id mapping with fixed special tokens in the first five slots."""

    def __init__(self, words):
        if words[:len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.words = list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_corpus(cls, token_streams, min_count=1):
        """Words with count >= min_count, ids in first-occurrence order."""
        if min_count < 1:
            raise ValueError("min_count must be >= 1")
        counts = {}
        for stream in token_streams:
            for tok in stream:
                counts[tok] = counts.get(tok, 0) + 1
        if not counts:
            raise DataError("empty corpus")
        words = list(SPECIALS)
        words.extend(w for w, c in counts.items() if c >= min_count)
        return cls(words)

    def __len__(self):
        return len(self.words)

    def encode(self, tokens):
        get = self.word_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.words[i] for i in ids]


class Turn:
    __slots__ = ("question_ids", "answer_ids", "candidate_ids", "gt", "relevance",
                 "question_text", "answer_text", "option_texts")

    def __init__(self, question_ids, answer_ids, candidate_ids, gt, relevance,
                 question_text, answer_text, option_texts):
        self.question_ids = question_ids
        self.answer_ids = answer_ids
        self.candidate_ids = candidate_ids
        self.gt = gt
        self.relevance = relevance
        self.question_text = question_text
        self.answer_text = answer_text
        self.option_texts = option_texts


class DialogExample:
    """One image's features plus its caption and QA turns, fully tokenized."""

    __slots__ = ("image_id", "features", "caption_ids", "caption_text", "turns")

    def __init__(self, image_id, features, caption_ids, caption_text, turns):
        self.image_id = image_id
        self.features = features
        self.caption_ids = caption_ids
        self.caption_text = caption_text
        self.turns = turns

    def history_snippets(self, turn_idx):
        """Token sequences the model may read at `turn_idx`: caption, then
        question<qa>answer for every earlier turn."""
        snippets = [list(self.caption_ids)]
        texts = [self.caption_text]
        for j in range(turn_idx):
            t = self.turns[j]
            snippets.append(list(t.question_ids) + [QA_ID] + list(t.answer_ids))
            texts.append(f"{t.question_text} <qa> {t.answer_text}")
        return snippets, texts


def _truncate_encode(vocab, text, limit):
    ids = vocab.encode(tokenize(text)[:limit])
    return ids if ids else [UNK_ID]


def load_dialogs_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at byte {exc.pos}: {exc.msg}") from None
    if not isinstance(doc, dict) or "dialogs" not in doc:
        raise FormatError(f"{path}: expected a top-level 'dialogs' array")
    return doc["dialogs"]


def corpus_streams(dialog_path):
    """Token streams over every text field, for vocabulary building."""
    for d in load_dialogs_json(dialog_path):
        yield tokenize(d["caption"])
        for t in d["dialog"]:
            yield tokenize(t["question"])
            yield tokenize(t["answer"])
            for opt in t["answer_options"]:
                yield tokenize(opt)


def write_features(path, features):
    """features: mapping image_id -> (n_f, M) array; stored region-major f32."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", FEATURE_MAGIC, FEATURE_VERSION, len(features)))
        for image_id, arr in features.items():
            arr = np.asarray(arr)
            n_f, m = arr.shape
            fh.write(struct.pack("<QII", int(image_id), m, n_f))
            fh.write(arr.T.astype("<f4").tobytes())


def read_features(path):
    """Returns mapping image_id -> (n_f, M) float64 array; validates finiteness."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: feature file magic mismatch")
        _, version, count = struct.unpack("<4sII", head)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported feature file version {version}")
        out = {}
        for _ in range(count):
            rec = fh.read(16)
            if len(rec) < 16:
                raise FormatError(f"{path}: truncated image record")
            image_id, m, n_f = struct.unpack("<QII", rec)
            payload = fh.read(4 * m * n_f)
            if len(payload) < 4 * m * n_f:
                raise FormatError(f"{path}: truncated feature payload for image {image_id}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(m, n_f).T.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{path}: non-finite features for image {image_id}")
            out[image_id] = arr
    return out


def load_dataset(dialog_path, feature_path, vocab, max_caption=40, max_qa=20):
    """Stream of DialogExample in file order; every image must have features."""
    feats = read_features(feature_path)
    dialogs = load_dialogs_json(dialog_path)
    examples = []
    n_candidates = None
    for d in dialogs:
        image_id = int(d["image_id"])
        if image_id not in feats:
            raise DataError(f"no features for image id {image_id}")
        turns = []
        for t in d["dialog"]:
            options = t["answer_options"]
            if n_candidates is None:
                n_candidates = len(options)
            elif len(options) != n_candidates:
                raise DataError(f"image {image_id}: candidate count {len(options)} != {n_candidates}")
            gt = int(t["gt_index"])
            if not (0 <= gt < len(options)):
                raise DataError(f"image {image_id}: gt_index {gt} out of range")
            relevance = t.get("relevance")
            if relevance is not None:
                if len(relevance) != len(options):
                    raise DataError(f"image {image_id}: relevance length mismatch")
                if any(not (0.0 <= float(r) <= 1.0) for r in relevance):
                    raise DataError(f"image {image_id}: relevance outside [0, 1]")
                relevance = [float(r) for r in relevance]
            turns.append(Turn(
                question_ids=_truncate_encode(vocab, t["question"], max_qa),
                answer_ids=_truncate_encode(vocab, t["answer"], max_qa),
                candidate_ids=[_truncate_encode(vocab, o, max_qa) for o in options],
                gt=gt, relevance=relevance,
                question_text=t["question"], answer_text=t["answer"],
                option_texts=list(options)))
        examples.append(DialogExample(
            image_id=image_id, features=feats[image_id],
            caption_ids=_truncate_encode(vocab, d["caption"], max_caption),
            caption_text=d["caption"], turns=turns))
    return examples


# ---------------------------------------------------------------------------
# synthetic task generator
# ---------------------------------------------------------------------------

ENTITIES = ["cat", "dog", "bird", "fish", "boat", "car", "tree", "lamp"]
COLORS = ["red", "blue", "green", "gold", "pink", "gray", "brown", "white"]
SIZES = ["tiny", "small", "medium", "large", "huge", "giant", "mini", "grand"]
NAMES = ["bob", "sam", "max", "ida", "rex", "lulu"]


def synthetic_prototypes(seed, feature_dim):
    """Entity/color/size prototype vectors; shared by generator and oracle."""
    rng = np.random.default_rng([int(seed), 0])
    make = lambda n: rng.normal(size=(n, feature_dim)) / np.sqrt(feature_dim)
    return {"entity": make(len(ENTITIES)), "color": make(len(COLORS)),
            "size": make(len(SIZES))}


def generate_synthetic(out_dir, num_dialogs, seed, num_regions=4, feature_dim=12,
                       num_candidates=5, num_turns=10, noise=0.05,
                       num_entities=None, num_colors=None, num_sizes=None):
    """Write dialogs.json + features.rdnf for a fully recoverable toy task.

    Each region's feature vector is the sum of an entity, a color, and a
    size prototype plus noise. Odd turns ask directly about a named entity;
    even turns ask about an alias that only the caption resolves, so those
    answers are a joint function of one feature column and the history.
    Smaller attribute pools make the task generalize from fewer dialogs.
    """
    import os

    num_entities = len(ENTITIES) if num_entities is None else num_entities
    num_colors = len(COLORS) if num_colors is None else num_colors
    num_sizes = len(SIZES) if num_sizes is None else num_sizes
    if num_dialogs < 1 or num_regions < 1 or num_turns < 1:
        raise ValueError("sizes must be >= 1")
    if not (num_regions <= num_entities <= len(ENTITIES)):
        raise ValueError(f"entity pool must cover the {num_regions} regions, "
                         f"at most {len(ENTITIES)}")
    if not (2 <= num_candidates <= min(num_colors, num_sizes)):
        raise ValueError("candidate count must fit inside both attribute pools")
    if num_colors > len(COLORS) or num_sizes > len(SIZES):
        raise ValueError(f"attribute pools are at most {len(COLORS)} words")

    protos = synthetic_prototypes(seed, feature_dim)
    rng = np.random.default_rng([int(seed), 1])
    os.makedirs(out_dir, exist_ok=True)

    dialogs = []
    features = {}
    for i in range(num_dialogs):
        image_id = 1000 + i
        ents = rng.choice(num_entities, size=num_regions, replace=False)
        cols = rng.integers(0, num_colors, size=num_regions)
        szs = rng.integers(0, num_sizes, size=num_regions)

        feat = np.empty((feature_dim, num_regions))
        for m in range(num_regions):
            feat[:, m] = (protos["entity"][ents[m]] + protos["color"][cols[m]]
                          + protos["size"][szs[m]]
                          + noise * rng.normal(size=feature_dim))
        features[image_id] = feat

        alias_regions = rng.choice(num_regions, size=2, replace=False)
        alias_names = rng.choice(len(NAMES), size=2, replace=False)
        caption = (f"the {ENTITIES[ents[alias_regions[0]]]} is {NAMES[alias_names[0]]} "
                   f"and the {ENTITIES[ents[alias_regions[1]]]} is {NAMES[alias_names[1]]}")

        turns = []
        for j in range(1, num_turns + 1):
            if j % 2 == 1:
                region = int(rng.integers(num_regions))
                attr = "color" if (j // 2) % 2 == 0 else "size"
                question = f"what {attr} is the {ENTITIES[ents[region]]}"
            else:
                pick = int(rng.integers(2))
                region = int(alias_regions[pick])
                attr = "size" if (j // 2) % 2 == 1 else "color"
                question = f"what {attr} is {NAMES[alias_names[pick]]}"

            universe = COLORS[:num_colors] if attr == "color" else SIZES[:num_sizes]
            answer_idx = int(cols[region] if attr == "color" else szs[region])
            answer = universe[answer_idx]

            others = [w for w in universe if w != answer]
            picks = rng.choice(len(others), size=num_candidates - 1, replace=False)
            options = [answer] + [others[p] for p in picks]
            perm = rng.permutation(num_candidates)
            options = [options[p] for p in perm]
            gt_index = int(np.where(perm == 0)[0][0])

            neighbor = universe[(answer_idx + 1) % len(universe)]
            relevance = [1.0 if o == answer else (0.5 if o == neighbor else 0.0)
                         for o in options]
            turns.append({"question": question, "answer": answer,
                          "answer_options": options, "gt_index": gt_index,
                          "relevance": relevance})
        dialogs.append({"image_id": image_id, "caption": caption, "dialog": turns})

    dialog_path = os.path.join(out_dir, "dialogs.json")
    feature_path = os.path.join(out_dir, "features.rdnf")
    with open(dialog_path, "w", encoding="utf-8") as fh:
        json.dump({"dialogs": dialogs}, fh, indent=1)
        fh.write("\n")
    write_features(feature_path, features)
    return dialog_path, feature_path
